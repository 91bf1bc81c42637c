#pragma once

// Axis-aligned 3D boxes: exact IoU, a differentiable IoU node for the
// autodiff tape, and threshold accuracy.

#include <array>
#include <span>

#include "w2r2/autodiff.hpp"

namespace w2r2::geo {

using Vec3 = std::array<double, 3>;

struct Box3 {
  Vec3 center{};
  Vec3 size{};

  // Throws ConfigError unless every size component is finite and > 0.
  static Box3 make(const Vec3& center, const Vec3& size);
  // From a [1,6] (or 6-element) tensor laid out as center then size.
  static Box3 from_tensor(const ad::Tensor& t);

  double volume() const { return size[0] * size[1] * size[2]; }
  double lo(int axis) const { return center[axis] - 0.5 * size[axis]; }
  double hi(int axis) const { return center[axis] + 0.5 * size[axis]; }
  bool valid() const;

  ad::Tensor to_tensor() const;

  friend bool operator==(const Box3&, const Box3&) = default;
};

// Intersection over union. Symmetric, exactly 1 for identical boxes and
// exactly 0 for boxes with no volume in common.
double iou3d(const Box3& a, const Box3& b);

// IoU of a predicted box held on the tape as a [1,6] tensor against a constant
// ground-truth box. The forward value is iou3d() bit for bit; gradients reach
// the predicted center and size through the clamped per-axis overlap. On a tie
// between the predicted and target face the predicted face is taken as the
// active one; an overlap of exactly 0 contributes subgradient 0.
ad::Var iou3d_grad(ad::Graph& graph, ad::Var box, const Box3& target);

// Fraction of entries strictly greater than tau. Throws ConfigError on an
// empty sequence, tau outside (0,1) or an IoU outside [0,1].
double acc_at(std::span<const double> ious, double tau);

}  // namespace w2r2::geo
