#pragma once

// Diagnostics: 2D-only shortcut probe, representation separation index,
// lambda/mu sweeps and their SVG/text report.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "w2r2/model.hpp"
#include "w2r2/parallel.hpp"
#include "w2r2/trainer.hpp"

namespace w2r2::diag {

// ---------------------------------------------------------------------------
// Separation

// index = d(fused, c2d) / (d(fused, c2d) + d(fused, c3d)), Euclidean.
// 0: the fused centroid sits on the 2D centroid; 1: on the 3D centroid.
struct SeparationReport {
  std::vector<double> centroid_2d, centroid_3d, centroid_fused;
  std::optional<double> index;  // empty when undefined (zero denominator or unequal widths)
};

SeparationReport separation_from_centroids(std::vector<double> c2d, std::vector<double> c3d,
                                           std::vector<double> cfused);
SeparationReport separation_from_evals(const std::vector<train::SampleEval>& evals);
SeparationReport separation_index(const model::ModelParams& params, std::span<const train::Example> split,
                                  Exec exec = Exec::parallel);

// ---------------------------------------------------------------------------
// Shortcut probe

struct ProbeReport {
  std::size_t samples = 0;
  double chance = 0;  // mean of 1 / object count
  double sel_acc_shortcut = 0;
  double acc25_shortcut = 0;
  double acc50_shortcut = 0;
  double mean_iou_shortcut = 0;       // argmax box
  double mean_soft_iou_shortcut = 0;  // soft box, the hinge similarity
  double sel_acc_fused = 0;
  double acc25_fused = 0;
  double acc50_fused = 0;
  double mean_iou_fused = 0;
  double mean_soft_iou_fused = 0;
  std::optional<double> separation_index;
};

ProbeReport probe_from_evals(const std::vector<train::SampleEval>& evals);
ProbeReport shortcut_probe(const model::ModelParams& params, std::span<const train::Example> split,
                           Exec exec = Exec::parallel);
std::string probe_table(const ProbeReport& r);
std::string probe_csv(const ProbeReport& r);

// 2-component PCA scatter of the pooled 2D, 3D and fused features.
std::string pca_scatter_svg(const std::vector<train::SampleEval>& evals);

// ---------------------------------------------------------------------------
// Sweeps

struct SweepCell {
  double lambda = 0;
  double mu = 0;
  std::uint64_t train_seed = 0;
  std::uint64_t model_seed = 0;
  std::optional<train::MetricsRecord> final;
  std::string error;  // non-empty when the cell failed
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::size_t succeeded() const;
};

struct SweepOptions {
  // Cells run concurrently on at most this many workers; 0 = all hardware threads.
  int workers = 0;
  // Use the base seeds in every cell instead of per-cell derived seeds.
  bool common_seed = false;
  // When set, each cell writes metrics.csv and checkpoint.json under
  // out_dir / cell_name(lambda, mu).
  std::optional<std::filesystem::path> out_dir;
};

// Sorted unique values; removed duplicates are appended to `duplicates`.
std::vector<double> dedup_grid(std::vector<double> grid, std::vector<double>* duplicates = nullptr);
std::string cell_name(double lambda, double mu);
std::uint64_t cell_seed(std::uint64_t base, double lambda, double mu);

// The exact configs one cell trains with, so a cell can be re-run standalone.
train::TrainConfig cell_train_config(const train::TrainConfig& base, double lambda, double mu, bool common_seed);
model::ModelConfig cell_model_config(const model::ModelConfig& base, double lambda, double mu, bool common_seed);

// One independent train_run per (lambda, mu); a failing cell is recorded and
// the sweep continues. Throws ConfigError on an empty grid.
SweepResult run_sweep(const train::PreparedData& data, const model::ModelConfig& mcfg,
                      const train::TrainConfig& base, const std::vector<double>& lambda_grid,
                      const std::vector<double>& mu_grid, const SweepOptions& opts = {});

// Columns: lambda, mu, then the metrics columns. Failed cells are omitted.
std::string sweep_csv(const SweepResult& r);

// ---------------------------------------------------------------------------
// Reports

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;  // throws ConfigError when absent
};

// Throws ConfigError "<source>:<line>: ..." on ragged or empty input.
CsvTable parse_csv(const std::string& text, const std::string& source);
CsvTable read_csv(const std::filesystem::path& path);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

// File name -> content. Throws ConfigError for an empty sweep.
std::map<std::string, std::string> build_report(const std::vector<std::pair<std::string, CsvTable>>& histories,
                                                const CsvTable& sweep);

// Reads the CSVs, writes every report file into out_dir and returns their paths.
std::vector<std::filesystem::path> emit_report(const std::vector<std::filesystem::path>& history_csvs,
                                               const std::filesystem::path& sweep_csv,
                                               const std::filesystem::path& out_dir);

}  // namespace w2r2::diag
