#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "w2r2/autodiff.hpp"
#include "w2r2/model.hpp"
#include "w2r2/scenes.hpp"

namespace testing {

using w2r2::ad::Shape;
using w2r2::ad::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return Tensor(shape, std::move(v));
}

// Entries with magnitude in [0.1, 1], random sign: keeps relu inputs off the kink.
inline Tensor off_zero_tensor(std::mt19937_64& rng, const Shape& shape) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor(shape, std::move(v));
}

inline bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(double)) != 0) return false;
  return true;
}

inline w2r2::scenes::WorldConfig small_world(std::size_t n_min = 2, std::size_t n_max = 4) {
  w2r2::scenes::WorldConfig w;
  w.n_min = n_min;
  w.n_max = n_max;
  w.train_count = 64;
  w.val_count = 32;
  return w;
}

struct Scene {
  w2r2::scenes::GroundingSample sample;
  w2r2::scenes::FeatureView features;
};

inline Scene make_scene(const w2r2::scenes::WorldConfig& w, std::uint64_t seed) {
  w2r2::scenes::Rng rng(seed);
  Scene s;
  s.sample = w2r2::scenes::generate_sample(rng, w);
  w2r2::scenes::Rng frng(w2r2::scenes::Rng::derive(seed, {0xfea7}));
  s.features = w2r2::scenes::featurize(s.sample, w, frng);
  return s;
}

inline w2r2::model::ModelConfig small_model(std::uint64_t seed = 7) {
  w2r2::model::ModelConfig m;
  m.d2d = 6;
  m.d3d = 6;
  m.dq = 5;
  m.dh = 8;
  m.seed = seed;
  return m;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("w2r2_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing

#include "w2r2/geometry.hpp"

namespace testing {

inline w2r2::geo::Box3 random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> c(0.0, 1.0), s(0.05, 0.6);
  return w2r2::geo::Box3::make({c(rng), c(rng), c(rng)}, {s(rng), s(rng), s(rng)});
}

// Independent oracle: uniform points in the bounding box of the union,
// IoU = |A and B| / |A or B| by counting.
inline double monte_carlo_iou(const w2r2::geo::Box3& a, const w2r2::geo::Box3& b, std::size_t points,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::array<std::uniform_real_distribution<double>, 3> axis;
  for (int k = 0; k < 3; ++k)
    axis[k] = std::uniform_real_distribution<double>(std::min(a.center[k] - a.size[k] / 2, b.center[k] - b.size[k] / 2),
                                                      std::max(a.center[k] + a.size[k] / 2, b.center[k] + b.size[k] / 2));
  auto inside = [](const w2r2::geo::Box3& box, const std::array<double, 3>& p) {
    for (int k = 0; k < 3; ++k)
      if (std::abs(p[k] - box.center[k]) > box.size[k] / 2) return false;
    return true;
  };
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < points; ++i) {
    const std::array<double, 3> p{axis[0](rng), axis[1](rng), axis[2](rng)};
    const bool ia = inside(a, p), ib = inside(b, p);
    both += ia && ib;
    either += ia || ib;
  }
  return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

}  // namespace testing

#include "w2r2/losses.hpp"

namespace testing {

// Hinge similarity s of the shortcut pass for one scene.
inline double shortcut_similarity(const w2r2::model::ModelParams& p, const Scene& sc) {
  w2r2::ad::Graph g;
  const auto bp = w2r2::model::bind(g, p);
  const auto out = w2r2::model::forward_shortcut(g, bp, p.config, sc.features, sc.sample.query);
  return w2r2::geo::iou3d(w2r2::geo::Box3::from_tensor(g.value(out.soft_box)),
                          sc.sample.objects[sc.sample.target_index].box);
}

enum class Term { align, deterrence, total };

struct TermGrads {
  double value = 0;
  double similarity = 0;
  std::vector<Tensor> grads;  // visit order
};

// Both passes and the full loss bundle for one scene, then backward from one term.
inline TermGrads term_grads(const w2r2::model::ModelParams& p, const Scene& sc, const w2r2::losses::ObjectiveWeights& w,
                            Term term, w2r2::model::StopGrad stop = w2r2::model::StopGrad::encoder_blocked,
                            const w2r2::scenes::FeatureView* feats = nullptr) {
  using namespace w2r2;
  const auto& f = feats ? *feats : sc.features;
  ad::Graph g;
  const auto bp = model::bind(g, p);
  const auto fused = model::forward_fused(g, bp, p.config, f, sc.sample.query);
  const auto shortcut = model::forward_shortcut(g, bp, p.config, f, sc.sample.query, stop);
  const auto& gt = sc.sample.objects[sc.sample.target_index].box;
  const losses::LossBundle b = losses::w2r2_losses(g, fused, shortcut, sc.sample.target_index, gt, w);
  const ad::Var loss = term == Term::align ? b.align : term == Term::deterrence ? b.deterrence : b.total;
  g.backward(loss);
  TermGrads out;
  out.value = g.value(loss).item();
  out.similarity = b.similarity;
  for (ad::Var v : bp.all()) out.grads.push_back(g.grad_or_zeros(v));
  return out;
}

// Number of leading tensors in visit order that belong to the 2D encoder.
inline constexpr std::size_t kEncoder2dTensors = 4;

// Finite-difference check of the total objective with respect to every model
// parameter, both passes built from the same nodes.
//
// Central differences see through stop_gradient, so with the encoder blocked
// the numeric side uses the frozen form: the shortcut pass reads the 2D
// encoder weights as constants fixed at their current values. The real
// stop-gradient pipeline's analytic gradient must then equal the frozen
// form's, and any gap is folded into max_rel_error.
inline w2r2::ad::GradCheckReport pipeline_grad_check(const w2r2::model::ModelParams& p, const Scene& sc,
                                                     const w2r2::losses::ObjectiveWeights& w,
                                                     w2r2::model::StopGrad stop, double eps = 1e-5) {
  using namespace w2r2;
  const auto& gt = sc.sample.objects[sc.sample.target_index].box;
  const std::vector<Tensor> frozen = model::flatten(p);
  const bool blocked = stop == model::StopGrad::encoder_blocked;
  auto build = [&](ad::Graph& g, std::span<const ad::Var> vars) {
    const auto bp = model::bound_from(vars);
    const auto fused = model::forward_fused(g, bp, p.config, sc.features, sc.sample.query);
    auto sbp = bp;
    if (blocked) {
      sbp.enc2d_1 = {g.constant(frozen[0]), g.constant(frozen[1])};
      sbp.enc2d_2 = {g.constant(frozen[2]), g.constant(frozen[3])};
    }
    const auto shortcut = model::forward_shortcut(g, sbp, p.config, sc.features, sc.sample.query);
    return losses::w2r2_losses(g, fused, shortcut, sc.sample.target_index, gt, w).total;
  };
  std::vector<Tensor> tensors = frozen;
  ad::GradCheckReport report = ad::check_gradients(build, tensors, eps);
  if (!blocked) return report;

  auto analytic = [&](bool real) {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const Tensor& t : frozen) vars.push_back(g.parameter(t));
    ad::Var loss;
    if (real) {
      const auto bp = model::bound_from(vars);
      const auto fused = model::forward_fused(g, bp, p.config, sc.features, sc.sample.query);
      const auto shortcut = model::forward_shortcut(g, bp, p.config, sc.features, sc.sample.query, stop);
      loss = losses::w2r2_losses(g, fused, shortcut, sc.sample.target_index, gt, w).total;
    } else {
      loss = build(g, vars);
    }
    g.backward(loss);
    std::vector<Tensor> out;
    for (ad::Var v : vars) out.push_back(g.grad_or_zeros(v));
    return out;
  };
  const auto real = analytic(true), reference = analytic(false);
  for (std::size_t i = 0; i < real.size(); ++i)
    for (std::size_t k = 0; k < real[i].size(); ++k) {
      const double a = real[i][k], b = reference[i][k];
      const double scale = std::max(std::abs(a), std::abs(b));
      const double diff = std::abs(a - b);
      report.max_rel_error = std::max(report.max_rel_error, scale < 1e-6 ? diff : diff / scale);
    }
  return report;
}

}  // namespace testing
