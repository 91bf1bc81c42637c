#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support.hpp"
#include "w2r2/model.hpp"

using namespace w2r2;
using namespace w2r2::model;

namespace {

struct Pass {
  ad::Graph g;
  ModelOutput out;
};

// Single-sample fused or shortcut pass in a fresh graph.
std::unique_ptr<Pass> run(const ModelParams& p, const scenes::FeatureView& f, const scenes::Query& q,
                          bool shortcut = false) {
  auto r = std::make_unique<Pass>();
  const BoundParams bp = bind(r->g, p);
  r->out = shortcut ? forward_shortcut(r->g, bp, p.config, f, q) : forward_fused(r->g, bp, p.config, f, q);
  return r;
}

testing::Scene scene(std::size_t n, std::uint64_t seed) {
  return testing::make_scene(testing::small_world(n, n), seed);
}

}  // namespace

TEST_CASE("config validation and JSON") {
  CHECK_NOTHROW(ModelConfig{}.validate());
  ModelConfig bad;
  bad.d2d = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const ModelConfig m = testing::small_model();
  CHECK(model_config_from_json(to_json(m)) == m);
  CHECK_THROWS_AS(model_config_from_json({{"d2", 4}}), ConfigError);
}

TEST_CASE("init is seeded and bounded") {
  const ModelParams a = ModelParams::init(testing::small_model(1));
  const ModelParams b = ModelParams::init(testing::small_model(1));
  const ModelParams c = ModelParams::init(testing::small_model(2));
  CHECK(a.checksum() == b.checksum());
  CHECK(a.checksum() != c.checksum());
  a.visit([](const std::string& name, const ad::Tensor& t) {
    if (name.back() != 'w') return;
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));  // [fan_in, fan_out]
    for (double v : t.data()) CHECK(std::abs(v) <= bound);
  });
}

TEST_CASE("fused pass shapes and positivity") {
  const ModelParams p = ModelParams::init(testing::small_model());
  const auto sc = scene(3, 11);
  auto r = run(p, sc.features, sc.sample.query);
  CHECK(r->g.value(r->out.logits).shape() == ad::Shape{1, 3});
  CHECK(r->g.value(r->out.boxes).shape() == ad::Shape{3, 6});
  const ad::Tensor& sb = r->g.value(r->out.soft_box);
  CHECK(sb.shape() == ad::Shape{1, 6});
  for (int k = 3; k < 6; ++k) CHECK(sb[k] > 0.0);
  CHECK(r->g.value(r->out.fused).shape() == ad::Shape{3, p.config.d2d});
}

TEST_CASE("outputs are finite for random scenes") {
  const ModelParams p = ModelParams::init(ModelConfig{});
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto sc = testing::make_scene(scenes::WorldConfig{}, s);
    auto r = run(p, sc.features, sc.sample.query);
    CHECK(r->g.value(r->out.logits).all_finite());
    CHECK(r->g.value(r->out.soft_box).all_finite());
  }
}

TEST_CASE("duplicate objects get identical logits") {
  const ModelParams p = ModelParams::init(testing::small_model());
  auto sc = scene(3, 3);
  ad::Tensor f2d = sc.features.f2d, f3d = sc.features.f3d;
  for (std::size_t c = 0; c < f2d.cols(); ++c) f2d[1 * f2d.cols() + c] = f2d[0 * f2d.cols() + c];
  for (std::size_t c = 0; c < 6; ++c) f3d[6 + c] = f3d[c];
  const scenes::FeatureView fv{f2d, f3d};
  auto r = run(p, fv, sc.sample.query);
  const ad::Tensor& l = r->g.value(r->out.logits);
  CHECK(l[0] == l[1]);
}

TEST_CASE("permutation equivariance") {
  const ModelParams p = ModelParams::init(testing::small_model());
  const auto sc = scene(4, 21);
  const std::vector<std::size_t> order = {2, 0, 3, 1};
  const auto& f = sc.features;
  std::vector<double> f2d, f3d;
  for (std::size_t i : order) {
    for (std::size_t c = 0; c < f.f2d.cols(); ++c) f2d.push_back(f.f2d.at(i, c));
    for (std::size_t c = 0; c < 6; ++c) f3d.push_back(f.f3d.at(i, c));
  }
  const scenes::FeatureView pf{ad::Tensor(f.f2d.shape(), f2d), ad::Tensor(f.f3d.shape(), f3d)};
  auto a = run(p, f, sc.sample.query);
  auto b = run(p, pf, sc.sample.query);
  const ad::Tensor &la = a->g.value(a->out.logits), &lb = b->g.value(b->out.logits);
  for (std::size_t i = 0; i < order.size(); ++i) CHECK(lb[i] == doctest::Approx(la[order[i]]).epsilon(1e-12));
  const ad::Tensor &sa = a->g.value(a->out.soft_box), &sb = b->g.value(b->out.soft_box);
  for (int k = 0; k < 6; ++k) CHECK(std::abs(sa[k] - sb[k]) <= 1e-12);
}

TEST_CASE("shortcut pass ignores the 3D features") {
  const ModelParams p = ModelParams::init(testing::small_model());
  const auto sc = scene(4, 8);
  std::mt19937_64 rng(1);
  const scenes::FeatureView other{sc.features.f2d, testing::random_tensor(rng, sc.features.f3d.shape())};
  auto a = run(p, sc.features, sc.sample.query, true);
  auto b = run(p, other, sc.sample.query, true);
  CHECK(testing::same_bits(a->g.value(a->out.logits), b->g.value(b->out.logits)));
  CHECK(testing::same_bits(a->g.value(a->out.soft_box), b->g.value(b->out.soft_box)));
  // while the fused pass does see them
  auto c = run(p, sc.features, sc.sample.query);
  auto d = run(p, other, sc.sample.query);
  CHECK_FALSE(testing::same_bits(c->g.value(c->out.logits), d->g.value(d->out.logits)));
}

TEST_CASE("both passes read the same parameter storage") {
  const ModelParams p = ModelParams::init(testing::small_model());
  const auto sc = scene(3, 2);
  ad::Graph g;
  const BoundParams bp = bind(g, p);
  forward_fused(g, bp, p.config, sc.features, sc.sample.query);
  forward_shortcut(g, bp, p.config, sc.features, sc.sample.query, StopGrad::encoder_blocked);
  std::vector<const ad::Tensor*> storage;
  p.visit([&](const std::string&, const ad::Tensor& t) { storage.push_back(&t); });
  std::size_t params_in_graph = 0;
  for (std::uint32_t id = 0; id < g.size(); ++id) {
    const ad::Tensor* s = g.parameter_storage(ad::Var{id});
    if (!s) continue;
    ++params_in_graph;
    CHECK(std::find(storage.begin(), storage.end(), s) != storage.end());
  }
  CHECK(params_in_graph == p.tensor_count());  // bound once, no copies
}

TEST_CASE("stop-gradient placement in the shortcut pass") {
  const ModelParams p = ModelParams::init(testing::small_model());
  const auto sc = scene(3, 4);
  for (StopGrad mode : {StopGrad::none, StopGrad::encoder_blocked}) {
    ad::Graph g;
    const BoundParams bp = bind(g, p);
    const ModelOutput o = forward_shortcut(g, bp, p.config, sc.features, sc.sample.query, mode);
    g.backward(g.sum(o.soft_box));
    double enc = 0.0, rest = 0.0;
    for (ad::Var v : bp.encoder_2d()) {
      const ad::Tensor gv = g.grad_or_zeros(v);
      for (double x : gv.data()) enc += std::abs(x);
    }
    const ad::Tensor gf = g.grad_or_zeros(bp.fuse_1.w);
    for (double x : gf.data()) rest += std::abs(x);
    CHECK(rest > 0.0);
    if (mode == StopGrad::encoder_blocked)
      CHECK(enc == 0.0);
    else
      CHECK(enc > 0.0);
  }
}

TEST_CASE("predict_box") {
  ModelParams p = ModelParams::init(testing::small_model());
  // Zero logit head: every object gets the same logit.
  for (double& v : p.logit.w.mutable_data()) v = 0.0;
  for (double& v : p.logit.b.mutable_data()) v = 0.0;
  const auto sc = scene(2, 6);
  auto r = run(p, sc.features, sc.sample.query);
  const ad::Tensor& boxes = r->g.value(r->out.boxes);
  const geo::Box3 soft = predict_box(r->g, r->out, BoxMode::soft);
  const geo::Box3 arg = predict_box(r->g, r->out, BoxMode::argmax);
  CHECK(argmax_index(r->g, r->out) == 0);
  for (int k = 0; k < 3; ++k) {
    CHECK(soft.center[k] == doctest::Approx(0.5 * (boxes.at(0, k) + boxes.at(1, k))).epsilon(1e-14));
    CHECK(soft.size[k] == doctest::Approx(0.5 * (boxes.at(0, 3 + k) + boxes.at(1, 3 + k))).epsilon(1e-14));
    CHECK(arg.center[k] == boxes.at(0, k));
    CHECK(arg.size[k] == boxes.at(0, 3 + k));
  }

  SUBCASE("identical per-object boxes: the soft box is that box") {
    ModelParams q = p;
    for (double& v : q.box.w.mutable_data()) v = 0.0;
    auto s = run(q, sc.features, sc.sample.query);
    const geo::Box3 sb = predict_box(s->g, s->out, BoxMode::soft);
    const geo::Box3 ab = predict_box(s->g, s->out, BoxMode::argmax);
    for (int k = 0; k < 3; ++k) {
      CHECK(sb.center[k] == doctest::Approx(ab.center[k]).epsilon(1e-14));
      CHECK(sb.size[k] == doctest::Approx(ab.size[k]).epsilon(1e-14));
    }
  }
}

TEST_CASE("checkpoint round trip and errors") {
  const ModelParams p = ModelParams::init(testing::small_model(3));
  const auto dir = testing::scratch_dir("model_ckpt");
  save_checkpoint(dir / "c.json", p);
  const ModelParams back = load_checkpoint(dir / "c.json");
  CHECK(back.config == p.config);
  CHECK(back.checksum() == p.checksum());

  nlohmann::json j = to_json(p);
  j["tensors"]["dec.box.w"]["shape"] = {1, 1};
  j["tensors"]["dec.box.w"]["data"] = {0.0};
  CHECK_THROWS_AS(params_from_json(j), ConfigError);

  nlohmann::json missing = to_json(p);
  missing["tensors"].erase("enc2d.l1.w");
  CHECK_THROWS_AS(params_from_json(missing), ConfigError);

  {
    std::ofstream out(dir / "corrupt.json");
    out << "{\"model\": {\"d2d\": 4,}";
  }
  try {
    load_checkpoint(dir / "corrupt.json");
    FAIL("expected a parse error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }
}

TEST_CASE("query vector layout") {
  scenes::Query q;
  q.category = 3;
  q.relation = scenes::Relation::nearest_to_anchor;
  q.anchor = geo::Vec3{0.1, 0.2, 0.3};
  const ad::Tensor v = query_vector(q, 12);
  CHECK(v.shape() == ad::Shape{1, 12 + 5 + 3});
  CHECK(v[3] == 1.0);
  CHECK(v[12 + 3] == 1.0);
  CHECK(v[17] == 0.1);
  CHECK(v[19] == 0.3);
  CHECK(std::accumulate(v.data().begin(), v.data().end(), 0.0) == doctest::Approx(2.6));
}
