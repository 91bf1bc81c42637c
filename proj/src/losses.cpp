#include "w2r2/losses.hpp"

#include <cmath>
#include <string>

namespace w2r2::losses {

using ad::Graph;
using ad::Tensor;
using ad::Var;

namespace {

Var one_hot_row(Graph& g, std::size_t n, std::size_t index) {
  std::vector<double> v(n, 0.0);
  v[index] = 1.0;
  return g.constant(Tensor({1, n}, std::move(v)));
}

std::size_t object_count(const Graph& g, const model::ModelOutput& out) { return g.value(out.logits).size(); }

}  // namespace

Var alignment_loss(Graph& g, const model::ModelOutput& fused, std::size_t target_index) {
  const std::size_t n = object_count(g, fused);
  if (target_index >= n)
    throw ConfigError("alignment_loss: target index " + std::to_string(target_index) + " out of range for " +
                      std::to_string(n) + " objects");
  const Var logp = g.log_softmax(fused.logits);
  return g.scale(g.sum(g.mul(logp, one_hot_row(g, n, target_index))), -1.0);
}

Var box_regression_loss(Graph& g, const model::ModelOutput& fused, std::size_t target_index, const geo::Box3& gt) {
  const std::size_t n = object_count(g, fused);
  if (target_index >= n) throw ConfigError("box_regression_loss: target index out of range");
  if (!gt.valid()) throw ConfigError("box_regression_loss: degenerate ground-truth box");
  const Var pred = g.matmul(one_hot_row(g, n, target_index), fused.box_raw);
  std::vector<double> want(6), inv_scale(6, 1.0);
  for (int k = 0; k < 3; ++k) {
    want[k] = gt.center[k] - 0.5;
    want[3 + k] = std::log(gt.size[k]);
    inv_scale[k] = 1.0 / gt.size[k];
  }
  const Var diff = g.mul(g.sub(pred, g.constant(Tensor({1, 6}, std::move(want)))),
                         g.constant(Tensor({1, 6}, std::move(inv_scale))));
  return g.mean(g.mul(diff, diff));
}

Deterrence deterrence_loss(Graph& g, const model::ModelOutput& shortcut, const geo::Box3& gt, double mu) {
  if (!(mu > 0.0 && mu < 1.0)) throw ConfigError("deterrence_loss: mu must lie in (0,1)");
  const Var s = geo::iou3d_grad(g, shortcut.soft_box, gt);
  const double sv = g.value(s).item();
  Deterrence d;
  d.loss = g.relu(g.sub(s, g.constant(Tensor::scalar(mu))));
  d.similarity = sv;
  d.active = sv > mu;
  return d;
}

Var total_loss(Graph& g, Var align, Var deterrence, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("total_loss: lambda must be >= 0");
  return g.add(align, g.scale(deterrence, lambda));
}

Var pull_loss(Graph& g, const model::ModelOutput& fused, std::size_t target_index, const geo::Box3& gt,
              double box_weight, Var* ce_out, Var* box_out) {
  if (!(box_weight >= 0.0) || !std::isfinite(box_weight)) throw ConfigError("pull_loss: box_weight must be >= 0");
  const Var ce = alignment_loss(g, fused, target_index);
  const Var box = box_regression_loss(g, fused, target_index, gt);
  if (ce_out) *ce_out = ce;
  if (box_out) *box_out = box;
  return g.add(ce, g.scale(box, box_weight));
}

LossBundle w2r2_losses(Graph& g, const model::ModelOutput& fused, const model::ModelOutput& shortcut,
                       std::size_t target_index, const geo::Box3& gt, const ObjectiveWeights& w) {
  LossBundle b;
  b.align = pull_loss(g, fused, target_index, gt, w.box_weight, &b.ce, &b.box);
  const Deterrence d = deterrence_loss(g, shortcut, gt, w.mu);
  b.deterrence = d.loss;
  b.similarity = d.similarity;
  b.deterrence_active = d.active;
  b.total = total_loss(g, b.align, b.deterrence, w.lambda);
  return b;
}

}  // namespace w2r2::losses
