#pragma once

// Two-encoder fusion network.
//
//   e2d   = E2D(f2d)                      2-layer MLP, [N, d2d]
//   e3d   = E3D(f3d)                      2-layer MLP, [N, d3d]
//   fused = Fuse(concat(e2d, e3d))        2-layer MLP, [N, d2d]
//   qe    = relu(Q(query))                [1, dq]
//   h     = relu(D(concat(fused, qe)))    per object, [N, dh]
//   logits = h * w_logit                  [1, N]
//   boxes  = (0.5 + offset, exp(log_size)) from h * w_box, [N, 6]
//   soft_box = softmax(logits) * boxes    [1, 6]
//
// The shortcut pass runs the same graph with e3d replaced by zeros.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>

#include "json.hpp"
#include "w2r2/autodiff.hpp"
#include "w2r2/geometry.hpp"
#include "w2r2/scenes.hpp"

namespace w2r2::model {

struct ModelConfig {
  std::size_t categories = 12;
  std::size_t d2d = 16;
  std::size_t d3d = 16;
  std::size_t dq = 16;
  std::size_t dh = 32;
  std::size_t n_max = 16;
  // Half-width of the uniform init; 0 selects 1/sqrt(fan_in) per layer.
  double init_scale = 0.0;
  std::uint64_t seed = 7;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

std::size_t query_width(std::size_t categories);
// one-hot(category) ++ one-hot(relation) ++ anchor (zeros when absent)
ad::Tensor query_vector(const scenes::Query& q, std::size_t categories);

struct Linear {
  ad::Tensor w;  // [in, out]
  ad::Tensor b;  // [1, out]
};

struct ModelParams {
  ModelConfig config;
  Linear enc2d_1, enc2d_2;
  Linear enc3d_1, enc3d_2;
  Linear query;
  Linear fuse_1, fuse_2;
  Linear dec_1;
  Linear logit;
  Linear box;

  static ModelParams init(const ModelConfig& cfg);

  // Visits every tensor in a fixed order with its checkpoint name.
  void visit(const std::function<void(const std::string&, ad::Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const ad::Tensor&)>& fn) const;
  std::size_t tensor_count() const;
  std::size_t scalar_count() const;
  // FNV-1a over the raw bytes of every tensor, for mutation checks.
  std::uint64_t checksum() const;
};

// Parameter nodes of one graph. Both passes of a step use the same nodes.
struct BoundLinear {
  ad::Var w, b;
};

struct BoundParams {
  BoundLinear enc2d_1, enc2d_2, enc3d_1, enc3d_2, query, fuse_1, fuse_2, dec_1, logit, box;

  std::vector<ad::Var> all() const;
  std::vector<ad::Var> encoder_2d() const { return {enc2d_1.w, enc2d_1.b, enc2d_2.w, enc2d_2.b}; }
};

BoundParams bind(ad::Graph& graph, const ModelParams& params);
// Reassembles nodes listed in visit order (as BoundParams::all() returns them).
// Throws ShapeError on a count mismatch.
BoundParams bound_from(std::span<const ad::Var> vars);
// Copies of every tensor in visit order.
std::vector<ad::Tensor> flatten(const ModelParams& params);

struct ModelOutput {
  ad::Var logits;    // [1, N]
  ad::Var box_raw;   // [N, 6]: center offset from scene center, log size
  ad::Var boxes;     // [N, 6]: center, size
  ad::Var soft_box;  // [1, 6]
  ad::Var enc2d;     // [N, d2d]
  ad::Var enc3d;     // [N, d3d]
  ad::Var fused;     // [N, d2d]
};

enum class StopGrad { none, encoder_blocked };

// Fused pass: both encoder streams.
ModelOutput forward_fused(ad::Graph& graph, const BoundParams& bp, const ModelConfig& cfg,
                          const scenes::FeatureView& features, const scenes::Query& query);

// Shortcut pass: the 3D stream is replaced by zeros after the encoder. With
// StopGrad::encoder_blocked the 2D encoder output is wrapped in stop_gradient.
ModelOutput forward_shortcut(ad::Graph& graph, const BoundParams& bp, const ModelConfig& cfg,
                             const scenes::FeatureView& features, const scenes::Query& query,
                             StopGrad stop = StopGrad::none);

enum class BoxMode { soft, argmax };

// Index of the highest logit; the lowest index wins ties.
std::size_t argmax_index(const ad::Graph& graph, const ModelOutput& out);
geo::Box3 predict_box(const ad::Graph& graph, const ModelOutput& out, BoxMode mode);

// Checkpoint: {"model": <config>, "tensors": {name: {"shape": [...], "data": [...]}}}
nlohmann::json to_json(const ModelParams& params);
// Throws ConfigError when a tensor is missing, unknown or mis-shaped.
ModelParams params_from_json(const nlohmann::json& j);
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace w2r2::model
