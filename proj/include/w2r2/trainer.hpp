#pragma once

// Pull-push training loop and evaluation.
//
// A step builds one tape per sample (fused pass, shortcut pass, losses,
// backward), then reduces the per-sample gradients in sample order and applies
// one optimizer update. The per-sample work is the data-parallel kernel; its
// serial form is kept as the reference and both produce identical bits.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "w2r2/losses.hpp"
#include "w2r2/model.hpp"
#include "w2r2/parallel.hpp"
#include "w2r2/scenes.hpp"

namespace w2r2::train {

enum class Optimizer { sgd, adam };
// alignment_only is the baseline: the shortcut pass is never built.
enum class Objective { w2r2, alignment_only };

struct TrainConfig {
  double lambda = 1.5;
  double mu = 0.7;
  double lr = 1e-3;
  double box_weight = 0.1;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::uint64_t seed = 11;
  model::StopGrad stopgrad_mode = model::StopGrad::encoder_blocked;
  Optimizer optimizer = Optimizer::adam;
  Objective objective = Objective::w2r2;
  // Evaluate every this many steps; 0 evaluates at the end of every epoch.
  std::size_t eval_every = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  losses::ObjectiveWeights weights() const { return {lambda, mu, box_weight}; }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Example {
  const scenes::GroundingSample* sample = nullptr;
  const scenes::FeatureView* features = nullptr;
};

std::vector<Example> make_examples(const std::vector<scenes::GroundingSample>& samples,
                                   const std::vector<scenes::FeatureView>& features);

struct TrainState {
  model::ModelParams params;
  std::vector<ad::Tensor> m;  // Adam first moments, shaped like params
  std::vector<ad::Tensor> v;  // Adam second moments
  std::size_t step = 0;

  static TrainState init(model::ModelParams params);
};

struct StepStats {
  double ce = 0;
  double box = 0;
  double align = 0;
  double deterrence = 0;
  double total = 0;
  double hinge_rate = 0;
  std::size_t batch = 0;
};

struct BatchGradients {
  std::vector<ad::Tensor> grads;  // batch mean, in ModelParams::visit order
  StepStats stats;
};

// Mean gradient of the configured objective over the batch. Throws
// NumericError naming the offending batch position on any non-finite value.
BatchGradients batch_gradients(const model::ModelParams& params, std::span<const Example> batch,
                               const TrainConfig& cfg, Exec exec = Exec::parallel, int threads = 0);

void apply_update(TrainState& state, const std::vector<ad::Tensor>& grads, const TrainConfig& cfg);

StepStats train_step(TrainState& state, std::span<const Example> batch, const TrainConfig& cfg,
                     Exec exec = Exec::parallel, int threads = 0);

// ---------------------------------------------------------------------------
// Evaluation

struct SampleEval {
  std::size_t objects = 0;
  bool fused_correct = false;
  bool shortcut_correct = false;
  double fused_iou = 0;           // argmax box
  double shortcut_iou = 0;        // argmax box
  double fused_soft_iou = 0;
  double shortcut_soft_iou = 0;   // the hinge similarity s
  double align = 0;
  double deterrence = 0;
  double total = 0;
  bool hinge_active = false;
  // Per-object features pooled (mean over objects) at the fusion interface.
  std::vector<double> pooled_2d, pooled_3d, pooled_fused;
};

SampleEval evaluate_sample(const model::ModelParams& params, const Example& ex, const losses::ObjectiveWeights& w);

std::vector<SampleEval> evaluate_samples(const model::ModelParams& params, std::span<const Example> split,
                                         const losses::ObjectiveWeights& w, Exec exec = Exec::parallel,
                                         int threads = 0);

struct MetricsRecord {
  std::size_t step = 0;
  double loss_align = 0;
  double loss_deterrence = 0;
  double loss_total = 0;
  double acc25_fused = 0;
  double acc50_fused = 0;
  double acc25_shortcut = 0;
  double acc50_shortcut = 0;
  double sel_acc_fused = 0;
  double sel_acc_shortcut = 0;
  std::optional<double> separation_index;
  double hinge_activation_rate = 0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

MetricsRecord summarize(std::size_t step, const std::vector<SampleEval>& evals);

// Argmax-box metrics for both passes. Never mutates params. Throws ConfigError
// on an empty split.
MetricsRecord evaluate(const model::ModelParams& params, std::span<const Example> split, const TrainConfig& cfg,
                       std::size_t step = 0, Exec exec = Exec::parallel, int threads = 0);

// CSV with the MetricsRecord columns in declaration order.
const std::vector<std::string>& metrics_columns();
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r);
std::string format_number(double v);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& history);

// ---------------------------------------------------------------------------
// Runs

struct RunOptions {
  Exec exec = Exec::parallel;
  int threads = 0;
  std::function<void(const MetricsRecord&)> on_eval;
};

struct RunResult {
  model::ModelParams params;
  std::vector<MetricsRecord> history;
};

struct PreparedData {
  std::vector<scenes::GroundingSample> train, val;
  std::vector<scenes::FeatureView> train_features, val_features;

  static PreparedData from(const scenes::WorldConfig& world, scenes::Dataset data, Exec exec = Exec::parallel);
  std::vector<Example> train_examples() const { return make_examples(train, train_features); }
  std::vector<Example> val_examples() const { return make_examples(val, val_features); }
};

// Full loop: step-0 evaluation, periodic evaluation on the val split, final
// evaluation. Deterministic given the three configs.
RunResult train_run(const PreparedData& data, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                    const RunOptions& opts = {});
RunResult train_run(const scenes::WorldConfig& world, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                    const RunOptions& opts = {});

// metrics.csv and checkpoint.json under dir.
void write_run_outputs(const std::filesystem::path& dir, const RunResult& result);

}  // namespace w2r2::train
