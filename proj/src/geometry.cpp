#include "w2r2/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace w2r2::geo {

bool Box3::valid() const {
  for (int k = 0; k < 3; ++k)
    if (!std::isfinite(center[k]) || !std::isfinite(size[k]) || !(size[k] > 0.0)) return false;
  return true;
}

Box3 Box3::make(const Vec3& center, const Vec3& size) {
  Box3 b{center, size};
  if (!b.valid())
    throw ConfigError("box: sizes must be finite and positive, got (" + std::to_string(size[0]) + ", " +
                      std::to_string(size[1]) + ", " + std::to_string(size[2]) + ")");
  return b;
}

Box3 Box3::from_tensor(const ad::Tensor& t) {
  if (t.size() != 6) throw ShapeError("box: expected 6 values, got shape " + ad::shape_string(t.shape()));
  return make({t[0], t[1], t[2]}, {t[3], t[4], t[5]});
}

ad::Tensor Box3::to_tensor() const {
  return ad::Tensor({1, 6}, {center[0], center[1], center[2], size[0], size[1], size[2]});
}

namespace {

struct Overlap {
  double inter = 1.0;
  double vol_a = 1.0;
  double vol_b = 1.0;
  std::array<double, 3> ov{};
  std::array<double, 3> ext_a{};
  std::array<bool, 3> a_hi{};  // predicted hi face is the min
  std::array<bool, 3> a_lo{};  // predicted lo face is the max
  std::array<bool, 3> active{};
};

// Extents come from hi - lo on both boxes so that iou(a, a) is exactly 1.
Overlap overlap(const Box3& a, const Box3& b) {
  Overlap o;
  for (int k = 0; k < 3; ++k) {
    const double lo_a = a.lo(k), hi_a = a.hi(k), lo_b = b.lo(k), hi_b = b.hi(k);
    o.a_hi[k] = hi_a <= hi_b;
    o.a_lo[k] = lo_a >= lo_b;
    const double top = o.a_hi[k] ? hi_a : hi_b;
    const double bottom = o.a_lo[k] ? lo_a : lo_b;
    const double d = top - bottom;
    o.active[k] = d > 0.0;
    o.ov[k] = o.active[k] ? d : 0.0;
    o.ext_a[k] = hi_a - lo_a;
    o.inter *= o.ov[k];
    o.vol_a *= o.ext_a[k];
    o.vol_b *= hi_b - lo_b;
  }
  return o;
}

double ratio(const Overlap& o) {
  if (o.inter == 0.0) return 0.0;
  return o.inter / (o.vol_a + o.vol_b - o.inter);
}

}  // namespace

double iou3d(const Box3& a, const Box3& b) {
  if (!a.valid() || !b.valid()) throw ConfigError("iou3d: degenerate box");
  const Overlap o = overlap(a, b);
  return std::clamp(ratio(o), 0.0, 1.0);
}

ad::Var iou3d_grad(ad::Graph& graph, ad::Var box, const Box3& target) {
  const ad::Tensor& bt = graph.value(box);
  const Box3 pred = Box3::from_tensor(bt);
  if (!target.valid()) throw ConfigError("iou3d_grad: degenerate target box");

  const double value = iou3d(pred, target);
  const Overlap o = overlap(pred, target);

  std::uint64_t bits = 0;
  for (int k = 0; k < 3; ++k) bits = (bits << 3) | (o.a_hi[k] << 2) | (o.a_lo[k] << 1) | o.active[k];

  // d iou / d center_k and d iou / d size_k, evaluated now; the backward rule
  // only scales them by the upstream gradient.
  std::vector<double> local(6, 0.0);
  if (o.inter > 0.0) {
    const double u = o.vol_a + o.vol_b - o.inter;
    const double d_inter = (u + o.inter) / (u * u);
    const double d_vol_a = -o.inter / (u * u);
    for (int k = 0; k < 3; ++k) {
      double ov_others = 1.0, ext_others = 1.0;
      for (int j = 0; j < 3; ++j) {
        if (j == k) continue;
        ov_others *= o.ov[j];
        ext_others *= o.ext_a[j];
      }
      double dov_dc = 0.0, dov_ds = 0.0;
      if (o.active[k]) {
        dov_dc = (o.a_hi[k] ? 1.0 : 0.0) - (o.a_lo[k] ? 1.0 : 0.0);
        dov_ds = 0.5 * (o.a_hi[k] ? 1.0 : 0.0) + 0.5 * (o.a_lo[k] ? 1.0 : 0.0);
      }
      local[k] = d_inter * ov_others * dov_dc;
      local[3 + k] = d_inter * ov_others * dov_ds + d_vol_a * ext_others;
    }
  }

  ad::Shape shape = bt.shape();
  auto backward = [local = std::move(local), shape](const ad::Tensor& g) {
    std::vector<double> out(6);
    for (int i = 0; i < 6; ++i) out[i] = g[0] * local[i];
    return std::vector<ad::Tensor>{ad::Tensor(shape, std::move(out))};
  };
  return graph.custom({box}, ad::Tensor::scalar(value), std::move(backward), bits);
}

double acc_at(std::span<const double> ious, double tau) {
  if (ious.empty()) throw ConfigError("acc_at: empty IoU sequence");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("acc_at: tau must lie in (0,1)");
  std::size_t hits = 0;
  for (double v : ious) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("acc_at: IoU outside [0,1]: " + std::to_string(v));
    if (v > tau) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ious.size());
}

}  // namespace w2r2::geo
