#pragma once

// Pull-push objective.
//
//   pull:  align = CE(fused logits, target) + box_weight * box_regression
//   push:  deterrence = max(0, IoU3D(shortcut soft box, gt) - mu)
//   total = align + lambda * deterrence

#include <cstddef>

#include "w2r2/autodiff.hpp"
#include "w2r2/geometry.hpp"
#include "w2r2/model.hpp"

namespace w2r2::losses {

// Cross-entropy of softmax(logits) against the target object.
ad::Var alignment_loss(ad::Graph& graph, const model::ModelOutput& fused, std::size_t target_index);

// Mean squared error between the target object's raw box head output and the
// ground truth in the same parameterization (offset from scene center, log
// size). Center residuals are divided by the gt size.
ad::Var box_regression_loss(ad::Graph& graph, const model::ModelOutput& fused, std::size_t target_index,
                            const geo::Box3& gt);

struct Deterrence {
  ad::Var loss;            // scalar, >= 0
  double similarity = 0;   // IoU3D of the shortcut soft box with gt
  bool active = false;     // similarity > mu
};

// The hinge is relu(s - mu): exactly 0 with subgradient 0 for s <= mu.
Deterrence deterrence_loss(ad::Graph& graph, const model::ModelOutput& shortcut, const geo::Box3& gt, double mu);

ad::Var total_loss(ad::Graph& graph, ad::Var align, ad::Var deterrence, double lambda);

struct LossBundle {
  ad::Var ce;
  ad::Var box;
  ad::Var align;
  ad::Var deterrence;
  ad::Var total;
  double similarity = 0;
  bool deterrence_active = false;
};

struct ObjectiveWeights {
  double lambda = 1.5;
  double mu = 0.7;
  double box_weight = 0.1;
};

// Assembles the full bundle from the two passes of one sample.
LossBundle w2r2_losses(ad::Graph& graph, const model::ModelOutput& fused, const model::ModelOutput& shortcut,
                       std::size_t target_index, const geo::Box3& gt, const ObjectiveWeights& w);

// Pull term only (the shortcut pass is not evaluated).
ad::Var pull_loss(ad::Graph& graph, const model::ModelOutput& fused, std::size_t target_index, const geo::Box3& gt,
                  double box_weight, ad::Var* ce_out = nullptr, ad::Var* box_out = nullptr);

}  // namespace w2r2::losses
