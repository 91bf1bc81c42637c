#include "w2r2/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "w2r2/diagnostics.hpp"
#include "w2r2/json_util.hpp"

namespace w2r2::train {

using ad::Graph;
using ad::Tensor;
using ad::Var;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("train: lambda must be >= 0");
  if (!(mu > 0.0 && mu < 1.0)) throw ConfigError("train: mu must lie in (0,1)");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be > 0");
  if (!(box_weight >= 0.0) || !std::isfinite(box_weight)) throw ConfigError("train: box_weight must be >= 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train: betas must lie in [0,1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be > 0");
}

namespace {

const char* name_of(model::StopGrad s) { return s == model::StopGrad::none ? "none" : "encoder_blocked"; }
const char* name_of(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }
const char* name_of(Objective o) { return o == Objective::w2r2 ? "w2r2" : "alignment_only"; }

}  // namespace

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},
          {"mu", c.mu},
          {"lr", c.lr},
          {"box_weight", c.box_weight},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"stopgrad_mode", name_of(c.stopgrad_mode)},
          {"optimizer", name_of(c.optimizer)},
          {"objective", name_of(c.objective)},
          {"eval_every", c.eval_every},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  std::string stopgrad = name_of(c.stopgrad_mode), optimizer = name_of(c.optimizer), objective = name_of(c.objective);
  StrictObject o(j, "train config");
  o.get("lambda", c.lambda)
      .get("mu", c.mu)
      .get("lr", c.lr)
      .get("box_weight", c.box_weight)
      .get("epochs", c.epochs)
      .get("batch_size", c.batch_size)
      .get("seed", c.seed)
      .get("stopgrad_mode", stopgrad)
      .get("optimizer", optimizer)
      .get("objective", objective)
      .get("eval_every", c.eval_every)
      .get("beta1", c.beta1)
      .get("beta2", c.beta2)
      .get("adam_eps", c.adam_eps);
  o.finish();
  if (stopgrad == "none") c.stopgrad_mode = model::StopGrad::none;
  else if (stopgrad == "encoder_blocked") c.stopgrad_mode = model::StopGrad::encoder_blocked;
  else throw ConfigError("train config: stopgrad_mode must be 'encoder_blocked' or 'none'");
  if (optimizer == "adam") c.optimizer = Optimizer::adam;
  else if (optimizer == "sgd") c.optimizer = Optimizer::sgd;
  else throw ConfigError("train config: optimizer must be 'adam' or 'sgd'");
  if (objective == "w2r2") c.objective = Objective::w2r2;
  else if (objective == "alignment_only") c.objective = Objective::alignment_only;
  else throw ConfigError("train config: objective must be 'w2r2' or 'alignment_only'");
  c.validate();
  return c;
}

std::vector<Example> make_examples(const std::vector<scenes::GroundingSample>& samples,
                                   const std::vector<scenes::FeatureView>& features) {
  if (samples.size() != features.size()) throw ConfigError("make_examples: sample/feature count mismatch");
  std::vector<Example> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out[i] = {&samples[i], &features[i]};
  return out;
}

TrainState TrainState::init(model::ModelParams params) {
  TrainState s;
  s.params = std::move(params);
  s.params.visit([&](const std::string&, const Tensor& t) {
    s.m.push_back(Tensor::zeros(t.shape()));
    s.v.push_back(Tensor::zeros(t.shape()));
  });
  return s;
}

// ---------------------------------------------------------------------------
// Gradients

namespace {

struct SampleGrad {
  std::vector<Tensor> grads;
  double ce = 0, box = 0, align = 0, deterrence = 0, total = 0;
  bool active = false;
};

geo::Box3 target_box(const scenes::GroundingSample& s) { return s.objects.at(s.target_index).box; }

SampleGrad sample_gradient(const model::ModelParams& params, const Example& ex, const TrainConfig& cfg) {
  Graph g;
  const model::BoundParams bp = model::bind(g, params);
  const model::ModelOutput fused = model::forward_fused(g, bp, params.config, *ex.features, ex.sample->query);
  const geo::Box3 gt = target_box(*ex.sample);

  SampleGrad out;
  Var loss;
  if (cfg.objective == Objective::w2r2) {
    const model::ModelOutput shortcut =
        model::forward_shortcut(g, bp, params.config, *ex.features, ex.sample->query, cfg.stopgrad_mode);
    const losses::LossBundle b = losses::w2r2_losses(g, fused, shortcut, ex.sample->target_index, gt, cfg.weights());
    out.ce = g.value(b.ce).item();
    out.box = g.value(b.box).item();
    out.align = g.value(b.align).item();
    out.deterrence = g.value(b.deterrence).item();
    out.active = b.deterrence_active;
    loss = b.total;
  } else {
    Var ce, box;
    loss = losses::pull_loss(g, fused, ex.sample->target_index, gt, cfg.box_weight, &ce, &box);
    out.ce = g.value(ce).item();
    out.box = g.value(box).item();
    out.align = g.value(loss).item();
  }
  out.total = g.value(loss).item();
  if (!std::isfinite(out.total)) throw NumericError("non-finite loss");

  g.backward(loss);
  for (Var v : bp.all()) out.grads.push_back(g.grad_or_zeros(v));
  for (const Tensor& t : out.grads)
    if (!t.all_finite()) throw NumericError("non-finite gradient");
  return out;
}

}  // namespace

BatchGradients batch_gradients(const model::ModelParams& params, std::span<const Example> batch,
                               const TrainConfig& cfg, Exec exec, int threads) {
  if (batch.empty()) throw ConfigError("batch_gradients: empty batch");
  std::vector<SampleGrad> per(batch.size());
  for_each_index(
      batch.size(), exec,
      [&](std::size_t i) {
        try {
          per[i] = sample_gradient(params, batch[i], cfg);
        } catch (const NumericError& e) {
          throw NumericError("batch position " + std::to_string(i) + ": " + e.what());
        }
      },
      threads);

  BatchGradients out;
  out.grads = std::move(per[0].grads);
  StepStats& st = out.stats;
  auto add_stats = [&](const SampleGrad& s) {
    st.ce += s.ce;
    st.box += s.box;
    st.align += s.align;
    st.deterrence += s.deterrence;
    st.total += s.total;
    st.hinge_rate += s.active ? 1.0 : 0.0;
  };
  add_stats(per[0]);
  for (std::size_t i = 1; i < per.size(); ++i) {
    for (std::size_t p = 0; p < out.grads.size(); ++p) {
      auto dst = out.grads[p].mutable_data();
      const auto src = per[i].grads[p].data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    add_stats(per[i]);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (Tensor& t : out.grads)
    for (double& x : t.mutable_data()) x *= inv;
  st.ce *= inv;
  st.box *= inv;
  st.align *= inv;
  st.deterrence *= inv;
  st.total *= inv;
  st.hinge_rate *= inv;
  st.batch = batch.size();
  return out;
}

void apply_update(TrainState& state, const std::vector<Tensor>& grads, const TrainConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  std::size_t p = 0;
  state.params.visit([&](const std::string& name, Tensor& w) {
    if (p >= grads.size() || grads[p].shape() != w.shape())
      throw ShapeError("apply_update: gradient does not match parameter '" + name + "'");
    auto data = w.mutable_data();
    const auto g = grads[p].data();
    if (cfg.optimizer == Optimizer::sgd) {
      for (std::size_t k = 0; k < data.size(); ++k) data[k] -= cfg.lr * g[k];
    } else {
      auto m = state.m[p].mutable_data();
      auto v = state.v[p].mutable_data();
      for (std::size_t k = 0; k < data.size(); ++k) {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        data[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
      }
    }
    if (!w.all_finite()) throw NumericError("apply_update: parameter '" + name + "' became non-finite");
    ++p;
  });
}

StepStats train_step(TrainState& state, std::span<const Example> batch, const TrainConfig& cfg, Exec exec,
                     int threads) {
  BatchGradients bg = batch_gradients(state.params, batch, cfg, exec, threads);
  apply_update(state, bg.grads, cfg);
  return bg.stats;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::vector<double> pooled(const Tensor& t) {
  const std::size_t rows = t.rows(), cols = t.cols();
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += t.at(r, c);
  for (double& x : out) x /= static_cast<double>(rows);
  return out;
}

}  // namespace

SampleEval evaluate_sample(const model::ModelParams& params, const Example& ex, const losses::ObjectiveWeights& w) {
  Graph g;
  const model::BoundParams bp = model::bind(g, params);
  const model::ModelOutput fused = model::forward_fused(g, bp, params.config, *ex.features, ex.sample->query);
  const model::ModelOutput shortcut = model::forward_shortcut(g, bp, params.config, *ex.features, ex.sample->query);
  const geo::Box3 gt = target_box(*ex.sample);
  const losses::LossBundle b = losses::w2r2_losses(g, fused, shortcut, ex.sample->target_index, gt, w);

  SampleEval e;
  e.objects = ex.sample->objects.size();
  e.fused_correct = model::argmax_index(g, fused) == ex.sample->target_index;
  e.shortcut_correct = model::argmax_index(g, shortcut) == ex.sample->target_index;
  e.fused_iou = geo::iou3d(model::predict_box(g, fused, model::BoxMode::argmax), gt);
  e.shortcut_iou = geo::iou3d(model::predict_box(g, shortcut, model::BoxMode::argmax), gt);
  e.fused_soft_iou = geo::iou3d(model::predict_box(g, fused, model::BoxMode::soft), gt);
  e.shortcut_soft_iou = b.similarity;
  e.align = g.value(b.align).item();
  e.deterrence = g.value(b.deterrence).item();
  e.total = g.value(b.total).item();
  e.hinge_active = b.deterrence_active;
  e.pooled_2d = pooled(g.value(fused.enc2d));
  e.pooled_3d = pooled(g.value(fused.enc3d));
  e.pooled_fused = pooled(g.value(fused.fused));
  return e;
}

std::vector<SampleEval> evaluate_samples(const model::ModelParams& params, std::span<const Example> split,
                                         const losses::ObjectiveWeights& w, Exec exec, int threads) {
  if (split.empty()) throw ConfigError("evaluate: empty split");
  std::vector<SampleEval> out(split.size());
  for_each_index(split.size(), exec, [&](std::size_t i) { out[i] = evaluate_sample(params, split[i], w); }, threads);
  return out;
}

MetricsRecord summarize(std::size_t step, const std::vector<SampleEval>& evals) {
  if (evals.empty()) throw ConfigError("evaluate: empty split");
  MetricsRecord r;
  r.step = step;
  std::vector<double> fused_iou, shortcut_iou;
  double sel_f = 0, sel_s = 0, active = 0;
  for (const SampleEval& e : evals) {
    r.loss_align += e.align;
    r.loss_deterrence += e.deterrence;
    r.loss_total += e.total;
    sel_f += e.fused_correct ? 1.0 : 0.0;
    sel_s += e.shortcut_correct ? 1.0 : 0.0;
    active += e.hinge_active ? 1.0 : 0.0;
    fused_iou.push_back(e.fused_iou);
    shortcut_iou.push_back(e.shortcut_iou);
  }
  const double n = static_cast<double>(evals.size());
  r.loss_align /= n;
  r.loss_deterrence /= n;
  r.loss_total /= n;
  r.sel_acc_fused = sel_f / n;
  r.sel_acc_shortcut = sel_s / n;
  r.hinge_activation_rate = active / n;
  r.acc25_fused = geo::acc_at(fused_iou, 0.25);
  r.acc50_fused = geo::acc_at(fused_iou, 0.5);
  r.acc25_shortcut = geo::acc_at(shortcut_iou, 0.25);
  r.acc50_shortcut = geo::acc_at(shortcut_iou, 0.5);
  r.separation_index = diag::separation_from_evals(evals).index;
  return r;
}

MetricsRecord evaluate(const model::ModelParams& params, std::span<const Example> split, const TrainConfig& cfg,
                       std::size_t step, Exec exec, int threads) {
  return summarize(step, evaluate_samples(params, split, cfg.weights(), exec, threads));
}

// ---------------------------------------------------------------------------
// CSV

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "step",           "loss_align",      "loss_deterrence", "loss_total",       "acc25_fused",
      "acc50_fused",    "acc25_shortcut",  "acc50_shortcut",  "sel_acc_fused",    "sel_acc_shortcut",
      "separation_index", "hinge_activation_rate"};
  return cols;
}

std::string format_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string metrics_csv_header() {
  std::string s;
  for (const auto& c : metrics_columns()) s += (s.empty() ? "" : ",") + c;
  return s;
}

std::string metrics_csv_row(const MetricsRecord& r) {
  std::string s = std::to_string(r.step);
  for (double v : {r.loss_align, r.loss_deterrence, r.loss_total, r.acc25_fused, r.acc50_fused, r.acc25_shortcut,
                   r.acc50_shortcut, r.sel_acc_fused, r.sel_acc_shortcut})
    s += "," + format_number(v);
  s += "," + (r.separation_index ? format_number(*r.separation_index) : std::string("undefined"));
  s += "," + format_number(r.hinge_activation_rate);
  return s;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& history) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << metrics_csv_header() << '\n';
  for (const auto& r : history) out << metrics_csv_row(r) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Runs

PreparedData PreparedData::from(const scenes::WorldConfig& world, scenes::Dataset data, Exec exec) {
  PreparedData p;
  p.train = std::move(data.train);
  p.val = std::move(data.val);
  p.train_features = scenes::featurize_split(p.train, world, scenes::Split::train, exec);
  p.val_features = scenes::featurize_split(p.val, world, scenes::Split::val, exec);
  return p;
}

RunResult train_run(const PreparedData& data, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                    const RunOptions& opts) {
  tcfg.validate();
  mcfg.validate();
  if (data.val.empty()) throw ConfigError("train_run: empty val split");
  if (!data.val_features.empty() && data.val_features.front().f2d.cols() != scenes::feature_width_2d(mcfg.categories))
    throw ConfigError("train_run: model categories do not match the world's");

  const std::vector<Example> train = data.train_examples();
  const std::vector<Example> val = data.val_examples();

  TrainState state = TrainState::init(model::ModelParams::init(mcfg));
  RunResult result;
  auto eval = [&] {
    result.history.push_back(evaluate(state.params, val, tcfg, state.step, opts.exec, opts.threads));
    if (opts.on_eval) opts.on_eval(result.history.back());
  };
  eval();

  std::vector<std::size_t> order(train.size());
  std::vector<Example> batch;
  for (std::size_t epoch = 0; epoch < tcfg.epochs && !train.empty(); ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    scenes::Rng rng(scenes::Rng::derive(tcfg.seed, {0x5eedu, epoch}));
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + tcfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
      train_step(state, batch, tcfg, opts.exec, opts.threads);
      if (tcfg.eval_every > 0 && state.step % tcfg.eval_every == 0) eval();
    }
    if (tcfg.eval_every == 0) eval();
  }
  if (result.history.back().step != state.step) eval();
  result.params = std::move(state.params);
  return result;
}

RunResult train_run(const scenes::WorldConfig& world, const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                    const RunOptions& opts) {
  if (world.categories != mcfg.categories) throw ConfigError("train_run: model categories do not match the world's");
  return train_run(PreparedData::from(world, scenes::build_dataset(world, opts.exec), opts.exec), mcfg, tcfg, opts);
}

void write_run_outputs(const std::filesystem::path& dir, const RunResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  write_metrics_csv(dir / "metrics.csv", result.history);
  model::save_checkpoint(dir / "checkpoint.json", result.params);
}

}  // namespace w2r2::train
