#include "w2r2/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "w2r2/json_util.hpp"

namespace w2r2::model {

using ad::Graph;
using ad::Tensor;
using ad::Var;

void ModelConfig::validate() const {
  if (categories < 2) throw ConfigError("model: categories must be >= 2");
  if (d2d < 1 || d3d < 1 || dq < 1 || dh < 1) throw ConfigError("model: all widths must be >= 1");
  if (n_max < 2) throw ConfigError("model: n_max must be >= 2");
  if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) throw ConfigError("model: init_scale must be >= 0");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"categories", c.categories}, {"d2d", c.d2d},   {"d3d", c.d3d},
          {"dq", c.dq},                 {"dh", c.dh},     {"n_max", c.n_max},
          {"init_scale", c.init_scale}, {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  StrictObject o(j, "model config");
  o.get("categories", c.categories)
      .get("d2d", c.d2d)
      .get("d3d", c.d3d)
      .get("dq", c.dq)
      .get("dh", c.dh)
      .get("n_max", c.n_max)
      .get("init_scale", c.init_scale)
      .get("seed", c.seed);
  o.finish();
  c.validate();
  return c;
}

std::size_t query_width(std::size_t categories) { return categories + scenes::kRelationCount + 3; }

Tensor query_vector(const scenes::Query& q, std::size_t categories) {
  if (q.category >= categories) throw ConfigError("query: category out of range");
  std::vector<double> v(query_width(categories), 0.0);
  v[q.category] = 1.0;
  v[categories + static_cast<std::size_t>(q.relation)] = 1.0;
  if (q.anchor)
    for (int k = 0; k < 3; ++k) v[categories + scenes::kRelationCount + k] = (*q.anchor)[k];
  const std::size_t width = v.size();
  return Tensor({1, width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Linear make_linear(std::size_t in, std::size_t out, double init_scale, std::mt19937_64& rng) {
  const double a = init_scale > 0.0 ? init_scale : 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> w(in * out), b(out);
  for (double& x : w) x = u(rng);
  for (double& x : b) x = u(rng);
  return {Tensor({in, out}, std::move(w)), Tensor({1, out}, std::move(b))};
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  ModelParams p;
  p.config = c;
  const std::size_t in2 = scenes::feature_width_2d(c.categories);
  p.enc2d_1 = make_linear(in2, c.dh, c.init_scale, rng);
  p.enc2d_2 = make_linear(c.dh, c.d2d, c.init_scale, rng);
  p.enc3d_1 = make_linear(scenes::kFeatureWidth3d, c.dh, c.init_scale, rng);
  p.enc3d_2 = make_linear(c.dh, c.d3d, c.init_scale, rng);
  p.query = make_linear(query_width(c.categories), c.dq, c.init_scale, rng);
  p.fuse_1 = make_linear(c.d2d + c.d3d, c.dh, c.init_scale, rng);
  p.fuse_2 = make_linear(c.dh, c.d2d, c.init_scale, rng);
  p.dec_1 = make_linear(c.d2d + c.dq, c.dh, c.init_scale, rng);
  p.logit = make_linear(c.dh, 1, c.init_scale, rng);
  p.box = make_linear(c.dh, 6, c.init_scale, rng);
  return p;
}

namespace {

template <class Params, class Fn>
void visit_impl(Params& p, Fn&& fn) {
  auto lin = [&](const char* name, auto& l) {
    fn(std::string(name) + ".w", l.w);
    fn(std::string(name) + ".b", l.b);
  };
  lin("enc2d.l1", p.enc2d_1);
  lin("enc2d.l2", p.enc2d_2);
  lin("enc3d.l1", p.enc3d_1);
  lin("enc3d.l2", p.enc3d_2);
  lin("query", p.query);
  lin("fuse.l1", p.fuse_1);
  lin("fuse.l2", p.fuse_2);
  lin("dec.l1", p.dec_1);
  lin("dec.logit", p.logit);
  lin("dec.box", p.box);
}

}  // namespace

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) { visit_impl(*this, fn); }

void ModelParams::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_impl(*this, fn);
}

std::size_t ModelParams::tensor_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor&) { ++n; });
  return n;
}

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::uint64_t ModelParams::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  visit([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof v);
      for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ULL;
    }
  });
  return h;
}

std::vector<Var> BoundParams::all() const {
  std::vector<Var> out;
  for (const BoundLinear* l : {&enc2d_1, &enc2d_2, &enc3d_1, &enc3d_2, &query, &fuse_1, &fuse_2, &dec_1, &logit, &box}) {
    out.push_back(l->w);
    out.push_back(l->b);
  }
  return out;
}

BoundParams bind(Graph& g, const ModelParams& p) {
  auto b = [&](const Linear& l) { return BoundLinear{g.parameter(l.w), g.parameter(l.b)}; };
  return {b(p.enc2d_1), b(p.enc2d_2), b(p.enc3d_1), b(p.enc3d_2), b(p.query),
          b(p.fuse_1),  b(p.fuse_2),  b(p.dec_1),   b(p.logit),   b(p.box)};
}

BoundParams bound_from(std::span<const Var> v) {
  if (v.size() != 20) throw ShapeError("bound_from: expected 20 parameter nodes, got " + std::to_string(v.size()));
  auto l = [&](std::size_t i) { return BoundLinear{v[2 * i], v[2 * i + 1]}; };
  return {l(0), l(1), l(2), l(3), l(4), l(5), l(6), l(7), l(8), l(9)};
}

std::vector<Tensor> flatten(const ModelParams& p) {
  std::vector<Tensor> out;
  p.visit([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Var ones_column(Graph& g, std::size_t rows) { return g.constant(Tensor::filled({rows, 1}, 1.0)); }

Var linear(Graph& g, Var x, const BoundLinear& l, Var ones) {
  return g.add(g.matmul(x, l.w), g.matmul(ones, l.b));
}

Var mlp2(Graph& g, Var x, const BoundLinear& l1, const BoundLinear& l2, Var ones) {
  return linear(g, g.relu(linear(g, x, l1, ones)), l2, ones);
}

enum class Pass { fused, shortcut };

ModelOutput forward(Graph& g, const BoundParams& bp, const ModelConfig& cfg, const scenes::FeatureView& fv,
                    const scenes::Query& q, Pass pass, StopGrad stop) {
  const std::size_t n = fv.f2d.rank() == 2 ? fv.f2d.dim(0) : 0;
  if (fv.f2d.rank() != 2 || fv.f2d.dim(1) != scenes::feature_width_2d(cfg.categories))
    throw ShapeError("forward: f2d shape " + ad::shape_string(fv.f2d.shape()) + " does not match " +
                     std::to_string(cfg.categories) + " categories");
  if (fv.f3d.rank() != 2 || fv.f3d.dim(0) != n || fv.f3d.dim(1) != scenes::kFeatureWidth3d)
    throw ShapeError("forward: f3d shape " + ad::shape_string(fv.f3d.shape()) + " does not match f2d");
  if (n < 1 || n > cfg.n_max) throw ShapeError("forward: object count " + std::to_string(n) + " exceeds n_max");

  ModelOutput out;
  const Var ones_n = ones_column(g, n);
  const Var ones_1 = ones_column(g, 1);

  out.enc2d = mlp2(g, g.constant(fv.f2d), bp.enc2d_1, bp.enc2d_2, ones_n);
  Var e2d = out.enc2d;
  if (pass == Pass::shortcut && stop == StopGrad::encoder_blocked) e2d = g.stop_gradient(e2d);

  if (pass == Pass::fused)
    out.enc3d = mlp2(g, g.constant(fv.f3d), bp.enc3d_1, bp.enc3d_2, ones_n);
  else
    out.enc3d = g.constant(Tensor::zeros({n, cfg.d3d}));

  out.fused = mlp2(g, g.concat(e2d, out.enc3d), bp.fuse_1, bp.fuse_2, ones_n);

  const Var qe = g.relu(linear(g, g.constant(query_vector(q, cfg.categories)), bp.query, ones_1));
  const Var q_rows = g.matmul(ones_n, qe);
  const Var h = g.relu(linear(g, g.concat(out.fused, q_rows), bp.dec_1, ones_n));

  out.logits = g.reshape(linear(g, h, bp.logit, ones_n), {1, n});
  out.box_raw = linear(g, h, bp.box, ones_n);
  const Var center = g.add(g.slice(out.box_raw, 0, 3), g.constant(Tensor::filled({n, 3}, 0.5)));
  const Var size = g.exp(g.slice(out.box_raw, 3, 6));
  out.boxes = g.concat(center, size);
  out.soft_box = g.matmul(g.softmax(out.logits), out.boxes);
  return out;
}

}  // namespace

ModelOutput forward_fused(Graph& g, const BoundParams& bp, const ModelConfig& cfg, const scenes::FeatureView& fv,
                          const scenes::Query& q) {
  return forward(g, bp, cfg, fv, q, Pass::fused, StopGrad::none);
}

ModelOutput forward_shortcut(Graph& g, const BoundParams& bp, const ModelConfig& cfg, const scenes::FeatureView& fv,
                             const scenes::Query& q, StopGrad stop) {
  return forward(g, bp, cfg, fv, q, Pass::shortcut, stop);
}

std::size_t argmax_index(const Graph& g, const ModelOutput& out) {
  const Tensor& logits = g.value(out.logits);
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

geo::Box3 predict_box(const Graph& g, const ModelOutput& out, BoxMode mode) {
  if (mode == BoxMode::soft) return geo::Box3::from_tensor(g.value(out.soft_box));
  const Tensor& boxes = g.value(out.boxes);
  const std::size_t i = argmax_index(g, out);
  return geo::Box3::make({boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2)},
                         {boxes.at(i, 3), boxes.at(i, 4), boxes.at(i, 5)});
}

// ---------------------------------------------------------------------------
// Checkpoints

nlohmann::json to_json(const ModelParams& p) {
  nlohmann::json tensors = nlohmann::json::object();
  p.visit([&](const std::string& name, const Tensor& t) {
    tensors[name] = {{"shape", t.shape()}, {"data", std::vector<double>(t.data().begin(), t.data().end())}};
  });
  return {{"model", to_json(p.config)}, {"tensors", std::move(tensors)}};
}

ModelParams params_from_json(const nlohmann::json& j) {
  StrictObject top(j, "checkpoint");
  nlohmann::json model, tensors;
  top.get("model", model).get("tensors", tensors);
  top.finish();
  if (model.is_null() || !tensors.is_object()) throw ConfigError("checkpoint: needs 'model' and 'tensors' objects");
  ModelParams p = ModelParams::init(model_config_from_json(model));
  std::size_t used = 0;
  p.visit([&](const std::string& name, Tensor& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ConfigError("checkpoint: missing tensor '" + name + "'");
    try {
      ad::Shape shape = it->at("shape").get<ad::Shape>();
      std::vector<double> data = it->at("data").get<std::vector<double>>();
      if (shape != t.shape())
        throw ConfigError("checkpoint: tensor '" + name + "' has shape " + ad::shape_string(shape) + ", expected " +
                          ad::shape_string(t.shape()));
      t = Tensor(std::move(shape), std::move(data));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("checkpoint: tensor '" + name + "': " + e.what());
    } catch (const ShapeError& e) {
      throw ConfigError("checkpoint: tensor '" + name + "': " + e.what());
    } catch (const NumericError& e) {
      throw ConfigError("checkpoint: tensor '" + name + "': " + e.what());
    }
    ++used;
  });
  if (used != tensors.size()) throw ConfigError("checkpoint: unknown tensors present");
  return p;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << to_json(params).dump() << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return params_from_json(j);
}

}  // namespace w2r2::model
