#pragma once

// Synthetic "what-where" grounding world.
//
// A scene is a unit cube holding N non-overlapping boxes resting on the floor
// (z = 0). Each box has a category; each category has a characteristic size.
// A query names a category and, when the category repeats in the scene, a
// spatial relation that singles out one of the repeats. With probability rho
// the target's category is unique, so the category alone (the 2D semantic
// cue) answers the query; otherwise only geometry does.
//
// Per-object features come in two populations:
//   f2d = one-hot(category) ++ grid-quantized (x, y) of the center, plus noise
//   f3d = exact (center, size), plus noise

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "w2r2/autodiff.hpp"
#include "w2r2/geometry.hpp"
#include "w2r2/parallel.hpp"

namespace w2r2::scenes {

using geo::Box3;
using geo::Vec3;

// Deterministic random stream. Streams for different (seed, tags...) tuples
// are derived through splitmix64 and are independent for practical purposes.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags);

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double stddev) { return stddev == 0.0 ? 0.0 : std::normal_distribution<double>(0.0, stddev)(engine_); }
  // Uniform integer in [lo, hi].
  std::size_t integer(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return std::bernoulli_distribution(p)(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

enum class Relation { none, leftmost, rightmost, nearest_to_anchor, farthest_from_anchor };

std::string_view relation_name(Relation r);
Relation relation_from_name(std::string_view name);
inline constexpr std::size_t kRelationCount = 5;

struct SceneObject {
  std::size_t category = 0;
  Box3 box;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Query {
  std::size_t category = 0;
  Relation relation = Relation::none;
  std::optional<Vec3> anchor;
  friend bool operator==(const Query&, const Query&) = default;
};

struct GroundingSample {
  std::vector<SceneObject> objects;
  Query query;
  std::size_t target_index = 0;
  friend bool operator==(const GroundingSample&, const GroundingSample&) = default;
};

struct WorldConfig {
  std::size_t n_min = 4;
  std::size_t n_max = 8;
  std::size_t categories = 12;
  double rho = 0.5;
  double sigma2d = 0.05;
  double sigma3d = 0.02;
  double q_grid = 0.5;
  std::uint64_t seed = 20250917;
  std::size_t train_count = 10000;
  std::size_t val_count = 2000;
  // Largest number of same-category objects in an ambiguous scene.
  std::size_t max_same = 3;
  // Minimum gap between the best and second-best candidate on the relation's
  // metric, so that small feature noise cannot flip the answer.
  double relation_margin = 0.05;

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

nlohmann::json to_json(const WorldConfig& cfg);
// Missing keys keep their defaults; unknown keys and wrong types throw ConfigError.
WorldConfig world_config_from_json(const nlohmann::json& j);

// Characteristic (x, y, z) edge lengths of a category.
Vec3 category_size(std::size_t category);

// Index of the unique object satisfying the query. Throws ConfigError when
// zero or several objects satisfy it.
std::size_t resolve_query(const GroundingSample& sample);
// Checks every GroundingSample invariant against cfg; throws ConfigError.
void validate_sample(const GroundingSample& sample, const WorldConfig& cfg);

// Throws Error when rejection sampling cannot place the objects.
GroundingSample generate_sample(Rng& rng, const WorldConfig& cfg);

struct FeatureView {
  ad::Tensor f2d;  // [N, C + 2]
  ad::Tensor f3d;  // [N, 6]
};

std::size_t feature_width_2d(std::size_t categories);
inline constexpr std::size_t kFeatureWidth3d = 6;

double quantize(double v, double cell);
FeatureView featurize(const GroundingSample& sample, const WorldConfig& cfg, Rng& rng);

enum class Split : std::uint64_t { train = 1, val = 2 };
std::string_view split_name(Split s);

// Per-sample streams: generation and feature noise are independent and keyed
// by (seed, split, index).
std::uint64_t sample_seed(const WorldConfig& cfg, Split split, std::size_t index);
std::uint64_t feature_seed(const WorldConfig& cfg, Split split, std::size_t index);

std::vector<GroundingSample> generate_split(const WorldConfig& cfg, Split split, Exec exec = Exec::parallel);
std::vector<FeatureView> featurize_split(const std::vector<GroundingSample>& samples, const WorldConfig& cfg,
                                         Split split, Exec exec = Exec::parallel);

struct Dataset {
  std::vector<GroundingSample> train;
  std::vector<GroundingSample> val;
};

Dataset build_dataset(const WorldConfig& cfg, Exec exec = Exec::parallel);

nlohmann::json to_json(const GroundingSample& s);
GroundingSample sample_from_json(const nlohmann::json& j);
std::string to_json_line(const GroundingSample& s);

// JSON-lines I/O. Reading validates every sample; errors carry path and line.
void write_jsonl(const std::filesystem::path& path, const std::vector<GroundingSample>& samples);
std::vector<GroundingSample> read_jsonl(const std::filesystem::path& path);

// Writes train.jsonl and val.jsonl into dir (created if needed).
void write_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& dir);

// Mean over samples of 1 / (object count): the uniform-guess selection rate.
double chance_rate(const std::vector<GroundingSample>& samples);

}  // namespace w2r2::scenes
