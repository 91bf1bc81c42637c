#include "w2r2/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "w2r2/json_util.hpp"

namespace w2r2::scenes {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kFeatureTag = 0xfea7u;
constexpr int kPlacementTries = 200;
constexpr int kSceneTries = 100;

}  // namespace

std::uint64_t Rng::derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

std::string_view relation_name(Relation r) {
  switch (r) {
    case Relation::none: return "none";
    case Relation::leftmost: return "leftmost";
    case Relation::rightmost: return "rightmost";
    case Relation::nearest_to_anchor: return "nearest_to_anchor";
    case Relation::farthest_from_anchor: return "farthest_from_anchor";
  }
  return "none";
}

Relation relation_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRelationCount; ++i) {
    const auto r = static_cast<Relation>(i);
    if (relation_name(r) == name) return r;
  }
  throw ConfigError("unknown relation '" + std::string(name) + "'");
}

std::string_view split_name(Split s) { return s == Split::train ? "train" : "val"; }

// ---------------------------------------------------------------------------
// Configuration

void WorldConfig::validate() const {
  if (n_min < 2) throw ConfigError("world: n_min must be >= 2");
  if (n_max < n_min) throw ConfigError("world: n_max must be >= n_min");
  if (n_max > 16) throw ConfigError("world: n_max must be <= 16");
  if (categories < 2) throw ConfigError("world: categories must be >= 2");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("world: rho must lie in [0,1]");
  if (!(sigma2d >= 0.0) || !(sigma3d >= 0.0)) throw ConfigError("world: noise scales must be >= 0");
  if (!(q_grid > 0.0 && q_grid <= 1.0)) throw ConfigError("world: q_grid must lie in (0,1]");
  if (max_same < 2) throw ConfigError("world: max_same must be >= 2");
  if (!(relation_margin >= 0.0 && relation_margin < 0.5)) throw ConfigError("world: relation_margin must lie in [0,0.5)");
  if (rho < 1.0 && categories < 2) throw ConfigError("world: ambiguous scenes need at least 2 categories");
}

nlohmann::json to_json(const WorldConfig& c) {
  return {{"n_min", c.n_min},           {"n_max", c.n_max},         {"categories", c.categories},
          {"rho", c.rho},               {"sigma2d", c.sigma2d},     {"sigma3d", c.sigma3d},
          {"q_grid", c.q_grid},         {"seed", c.seed},           {"train_count", c.train_count},
          {"val_count", c.val_count},   {"max_same", c.max_same},   {"relation_margin", c.relation_margin}};
}

WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  StrictObject o(j, "world config");
  o.get("n_min", c.n_min)
      .get("n_max", c.n_max)
      .get("categories", c.categories)
      .get("rho", c.rho)
      .get("sigma2d", c.sigma2d)
      .get("sigma3d", c.sigma3d)
      .get("q_grid", c.q_grid)
      .get("seed", c.seed)
      .get("train_count", c.train_count)
      .get("val_count", c.val_count)
      .get("max_same", c.max_same)
      .get("relation_margin", c.relation_margin);
  o.finish();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Generation

Vec3 category_size(std::size_t category) {
  auto frac = [](double v) { return v - std::floor(v); };
  const double c = static_cast<double>(category + 1);
  return {0.08 + 0.12 * frac(0.6180339887 * c), 0.08 + 0.12 * frac(0.4142135624 * c + 0.3),
          0.06 + 0.24 * frac(0.7320508076 * c + 0.1)};
}

namespace {

double relation_score(const SceneObject& o, const Query& q) {
  // Lower is better for every relation.
  switch (q.relation) {
    case Relation::leftmost: return o.box.center[0];
    case Relation::rightmost: return -o.box.center[0];
    case Relation::nearest_to_anchor:
    case Relation::farthest_from_anchor: {
      const Vec3& a = *q.anchor;
      double d2 = 0.0;
      for (int k = 0; k < 3; ++k) d2 += (o.box.center[k] - a[k]) * (o.box.center[k] - a[k]);
      const double d = std::sqrt(d2);
      return q.relation == Relation::nearest_to_anchor ? d : -d;
    }
    case Relation::none: return 0.0;
  }
  return 0.0;
}

bool footprints_overlap(const Box3& a, const Box3& b) {
  for (int k = 0; k < 2; ++k)
    if (std::abs(a.center[k] - b.center[k]) >= 0.5 * (a.size[k] + b.size[k])) return false;
  return true;
}

bool place_objects(Rng& rng, std::vector<SceneObject>& objects) {
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const Vec3 base = category_size(objects[i].category);
    Vec3 size{};
    for (int k = 0; k < 3; ++k) size[k] = base[k] * rng.uniform(0.9, 1.1);
    bool placed = false;
    for (int t = 0; t < kPlacementTries && !placed; ++t) {
      const Box3 box = Box3::make(
          {rng.uniform(0.5 * size[0], 1.0 - 0.5 * size[0]), rng.uniform(0.5 * size[1], 1.0 - 0.5 * size[1]),
           0.5 * size[2]},
          size);
      placed = std::none_of(objects.begin(), objects.begin() + static_cast<std::ptrdiff_t>(i),
                            [&](const SceneObject& o) { return footprints_overlap(o.box, box); });
      if (placed) objects[i].box = box;
    }
    if (!placed) return false;
  }
  return true;
}

}  // namespace

std::size_t resolve_query(const GroundingSample& s) {
  const Query& q = s.query;
  if ((q.relation == Relation::nearest_to_anchor || q.relation == Relation::farthest_from_anchor) != q.anchor.has_value())
    throw ConfigError("sample: anchor must be present exactly for anchor relations");
  std::vector<std::size_t> matches;
  for (std::size_t i = 0; i < s.objects.size(); ++i)
    if (s.objects[i].category == q.category) matches.push_back(i);
  if (matches.empty()) throw ConfigError("sample: no object of the queried category");
  if (q.relation == Relation::none) {
    if (matches.size() != 1) throw ConfigError("sample: relation 'none' needs a unique category");
    return matches.front();
  }
  std::size_t best = matches.front();
  std::size_t ties = 0;
  for (std::size_t i : matches) {
    const double si = relation_score(s.objects[i], q), sb = relation_score(s.objects[best], q);
    if (si < sb) {
      best = i;
      ties = 0;
    } else if (si == sb && i != best) {
      ++ties;
    }
  }
  if (ties) throw ConfigError("sample: query is ambiguous");
  return best;
}

void validate_sample(const GroundingSample& s, const WorldConfig& cfg) {
  if (s.objects.size() < 2) throw ConfigError("sample: fewer than 2 objects");
  if (s.objects.size() < cfg.n_min || s.objects.size() > cfg.n_max)
    throw ConfigError("sample: object count outside [n_min, n_max]");
  for (const auto& o : s.objects) {
    if (o.category >= cfg.categories) throw ConfigError("sample: category out of range");
    if (!o.box.valid()) throw ConfigError("sample: degenerate box");
  }
  if (s.query.category >= cfg.categories) throw ConfigError("sample: query category out of range");
  if (s.target_index >= s.objects.size()) throw ConfigError("sample: target_index out of range");
  if (resolve_query(s) != s.target_index) throw ConfigError("sample: target_index does not satisfy the query");
}

GroundingSample generate_sample(Rng& rng, const WorldConfig& cfg) {
  // Scene-level choices are drawn once so retries cannot bias rho.
  const std::size_t n = rng.integer(cfg.n_min, cfg.n_max);
  const std::size_t target_cat = rng.integer(0, cfg.categories - 1);
  const bool unique = rng.bernoulli(cfg.rho);
  const std::size_t k = unique ? 1 : rng.integer(2, std::min(cfg.max_same, n));
  const Relation relation = unique ? Relation::none : static_cast<Relation>(rng.integer(1, kRelationCount - 1));

  std::vector<SceneObject> objects(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (i < k) {
      objects[i].category = target_cat;
    } else {
      const std::size_t other = rng.integer(0, cfg.categories - 2);
      objects[i].category = other >= target_cat ? other + 1 : other;
    }
  }
  std::shuffle(objects.begin(), objects.end(), rng.engine());

  for (int attempt = 0; attempt < kSceneTries; ++attempt) {
    GroundingSample s;
    s.objects = objects;
    if (!place_objects(rng, s.objects)) continue;
    s.query.category = target_cat;
    s.query.relation = relation;
    if (relation == Relation::nearest_to_anchor || relation == Relation::farthest_from_anchor)
      s.query.anchor = Vec3{rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)};

    if (relation != Relation::none) {
      std::vector<double> scores;
      for (const auto& o : s.objects)
        if (o.category == target_cat) scores.push_back(relation_score(o, s.query));
      std::sort(scores.begin(), scores.end());
      if (scores[1] - scores[0] < cfg.relation_margin) continue;
    }
    s.target_index = resolve_query(s);
    validate_sample(s, cfg);
    return s;
  }
  throw Error("generate_sample: could not place " + std::to_string(n) + " objects after " +
              std::to_string(kSceneTries) + " attempts (overcrowded world config)");
}

// ---------------------------------------------------------------------------
// Features

std::size_t feature_width_2d(std::size_t categories) { return categories + 2; }

double quantize(double v, double cell) {
  const double cells = std::ceil(1.0 / cell - 1e-12);
  const double idx = std::clamp(std::floor(v / cell), 0.0, cells - 1.0);
  return (idx + 0.5) * cell;
}

FeatureView featurize(const GroundingSample& s, const WorldConfig& cfg, Rng& rng) {
  const std::size_t n = s.objects.size();
  const std::size_t w2 = feature_width_2d(cfg.categories);
  std::vector<double> f2d(n * w2, 0.0), f3d(n * kFeatureWidth3d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const SceneObject& o = s.objects[i];
    if (o.category >= cfg.categories) throw ConfigError("featurize: category out of range");
    double* row2 = f2d.data() + i * w2;
    row2[o.category] = 1.0;
    row2[cfg.categories] = quantize(o.box.center[0], cfg.q_grid);
    row2[cfg.categories + 1] = quantize(o.box.center[1], cfg.q_grid);
    for (std::size_t c = 0; c < w2; ++c) row2[c] += rng.normal(cfg.sigma2d);

    double* row3 = f3d.data() + i * kFeatureWidth3d;
    for (int k = 0; k < 3; ++k) {
      row3[k] = o.box.center[k] + rng.normal(cfg.sigma3d);
      row3[3 + k] = o.box.size[k] + rng.normal(cfg.sigma3d);
    }
  }
  return {ad::Tensor({n, w2}, std::move(f2d)), ad::Tensor({n, kFeatureWidth3d}, std::move(f3d))};
}

std::uint64_t sample_seed(const WorldConfig& cfg, Split split, std::size_t index) {
  return Rng::derive(cfg.seed, {static_cast<std::uint64_t>(split), index});
}

std::uint64_t feature_seed(const WorldConfig& cfg, Split split, std::size_t index) {
  return Rng::derive(cfg.seed, {static_cast<std::uint64_t>(split), index, kFeatureTag});
}

std::vector<GroundingSample> generate_split(const WorldConfig& cfg, Split split, Exec exec) {
  cfg.validate();
  const std::size_t count = split == Split::train ? cfg.train_count : cfg.val_count;
  std::vector<GroundingSample> out(count);
  for_each_index(count, exec, [&](std::size_t i) {
    Rng rng(sample_seed(cfg, split, i));
    out[i] = generate_sample(rng, cfg);
  });
  return out;
}

std::vector<FeatureView> featurize_split(const std::vector<GroundingSample>& samples, const WorldConfig& cfg,
                                         Split split, Exec exec) {
  std::vector<FeatureView> out(samples.size());
  for_each_index(samples.size(), exec, [&](std::size_t i) {
    Rng rng(feature_seed(cfg, split, i));
    out[i] = featurize(samples[i], cfg, rng);
  });
  return out;
}

Dataset build_dataset(const WorldConfig& cfg, Exec exec) {
  return {generate_split(cfg, Split::train, exec), generate_split(cfg, Split::val, exec)};
}

double chance_rate(const std::vector<GroundingSample>& samples) {
  if (samples.empty()) throw ConfigError("chance_rate: empty split");
  double total = 0.0;
  for (const auto& s : samples) total += 1.0 / static_cast<double>(s.objects.size());
  return total / static_cast<double>(samples.size());
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const GroundingSample& s) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : s.objects)
    objects.push_back({{"category", o.category}, {"center", o.box.center}, {"size", o.box.size}});
  nlohmann::json query = {{"category", s.query.category}, {"relation", relation_name(s.query.relation)}};
  if (s.query.anchor) query["anchor"] = *s.query.anchor;
  return {{"objects", std::move(objects)}, {"query", std::move(query)}, {"target_index", s.target_index}};
}

namespace {

Vec3 vec3_from(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw ConfigError(std::string(what) + " must be an array of 3 numbers");
  Vec3 v{};
  for (int k = 0; k < 3; ++k) {
    if (!j[k].is_number()) throw ConfigError(std::string(what) + " must be an array of 3 numbers");
    v[k] = j[k].get<double>();
  }
  return v;
}

}  // namespace

GroundingSample sample_from_json(const nlohmann::json& j) {
  GroundingSample s;
  StrictObject top(j, "sample");
  nlohmann::json objects, query;
  top.get("objects", objects).get("query", query).get("target_index", s.target_index);
  top.finish();
  if (!objects.is_array()) throw ConfigError("sample: 'objects' must be an array");
  for (const auto& oj : objects) {
    StrictObject o(oj, "object");
    SceneObject obj;
    nlohmann::json center, size;
    o.get("category", obj.category).get("center", center).get("size", size);
    o.finish();
    obj.box = Box3::make(vec3_from(center, "center"), vec3_from(size, "size"));
    s.objects.push_back(obj);
  }
  StrictObject q(query, "query");
  std::string relation = "none";
  nlohmann::json anchor;
  q.get("category", s.query.category).get("relation", relation).get("anchor", anchor);
  q.finish();
  s.query.relation = relation_from_name(relation);
  if (!anchor.is_null()) s.query.anchor = vec3_from(anchor, "anchor");
  if (s.objects.size() < 2) throw ConfigError("sample: fewer than 2 objects");
  if (s.target_index >= s.objects.size()) throw ConfigError("sample: target_index out of range");
  if (resolve_query(s) != s.target_index) throw ConfigError("sample: target_index does not satisfy the query");
  return s;
}

std::string to_json_line(const GroundingSample& s) { return to_json(s).dump(); }

void write_jsonl(const std::filesystem::path& path, const std::vector<GroundingSample>& samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& s : samples) out << to_json_line(s) << '\n';
  out.flush();
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<GroundingSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<GroundingSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return out;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  write_jsonl(dir / "train.jsonl", data.train);
  write_jsonl(dir / "val.jsonl", data.val);
}

Dataset read_dataset(const std::filesystem::path& dir) {
  return {read_jsonl(dir / "train.jsonl"), read_jsonl(dir / "val.jsonl")};
}

}  // namespace w2r2::scenes
