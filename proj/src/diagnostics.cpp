#include "w2r2/diagnostics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "w2r2/scenes.hpp"

namespace w2r2::diag {

// ---------------------------------------------------------------------------
// Separation

namespace {

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

std::vector<double> centroid(const std::vector<train::SampleEval>& evals, std::vector<double> train::SampleEval::*field) {
  std::vector<double> c((evals.front().*field).size(), 0.0);
  for (const auto& e : evals)
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += (e.*field)[i];
  for (double& x : c) x /= static_cast<double>(evals.size());
  return c;
}

}  // namespace

SeparationReport separation_from_centroids(std::vector<double> c2d, std::vector<double> c3d,
                                           std::vector<double> cfused) {
  SeparationReport r{std::move(c2d), std::move(c3d), std::move(cfused), std::nullopt};
  if (r.centroid_2d.size() != r.centroid_3d.size() || r.centroid_2d.size() != r.centroid_fused.size()) return r;
  const double to_2d = distance(r.centroid_fused, r.centroid_2d);
  const double to_3d = distance(r.centroid_fused, r.centroid_3d);
  if (to_2d + to_3d > 0.0) r.index = to_2d / (to_2d + to_3d);
  return r;
}

SeparationReport separation_from_evals(const std::vector<train::SampleEval>& evals) {
  if (evals.empty()) throw ConfigError("separation_index: empty split");
  return separation_from_centroids(centroid(evals, &train::SampleEval::pooled_2d),
                                   centroid(evals, &train::SampleEval::pooled_3d),
                                   centroid(evals, &train::SampleEval::pooled_fused));
}

SeparationReport separation_index(const model::ModelParams& params, std::span<const train::Example> split, Exec exec) {
  return separation_from_evals(train::evaluate_samples(params, split, train::TrainConfig{}.weights(), exec));
}

// ---------------------------------------------------------------------------
// Probe

ProbeReport probe_from_evals(const std::vector<train::SampleEval>& evals) {
  if (evals.empty()) throw ConfigError("shortcut_probe: empty split");
  ProbeReport r;
  r.samples = evals.size();
  std::vector<double> fused, shortcut;
  for (const auto& e : evals) {
    r.chance += 1.0 / static_cast<double>(e.objects);
    r.sel_acc_shortcut += e.shortcut_correct;
    r.sel_acc_fused += e.fused_correct;
    r.mean_iou_shortcut += e.shortcut_iou;
    r.mean_soft_iou_shortcut += e.shortcut_soft_iou;
    r.mean_iou_fused += e.fused_iou;
    r.mean_soft_iou_fused += e.fused_soft_iou;
    fused.push_back(e.fused_iou);
    shortcut.push_back(e.shortcut_iou);
  }
  const double n = static_cast<double>(evals.size());
  for (double* v : {&r.chance, &r.sel_acc_shortcut, &r.sel_acc_fused, &r.mean_iou_shortcut, &r.mean_soft_iou_shortcut,
                    &r.mean_iou_fused, &r.mean_soft_iou_fused})
    *v /= n;
  r.acc25_shortcut = geo::acc_at(shortcut, 0.25);
  r.acc50_shortcut = geo::acc_at(shortcut, 0.5);
  r.acc25_fused = geo::acc_at(fused, 0.25);
  r.acc50_fused = geo::acc_at(fused, 0.5);
  r.separation_index = separation_from_evals(evals).index;
  return r;
}

ProbeReport shortcut_probe(const model::ModelParams& params, std::span<const train::Example> split, Exec exec) {
  return probe_from_evals(train::evaluate_samples(params, split, train::TrainConfig{}.weights(), exec));
}

std::string probe_table(const ProbeReport& r) {
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "samples            %zu\n"
                "chance (E[1/N])    %.4f\n"
                "\n"
                "pass       sel_acc  acc@0.25  acc@0.5  mean_iou  soft_iou\n"
                "2D-only    %7.4f  %8.4f  %7.4f  %8.4f  %8.4f\n"
                "fused      %7.4f  %8.4f  %7.4f  %8.4f  %8.4f\n"
                "\n"
                "separation index   %s\n",
                r.samples, r.chance, r.sel_acc_shortcut, r.acc25_shortcut, r.acc50_shortcut, r.mean_iou_shortcut,
                r.mean_soft_iou_shortcut, r.sel_acc_fused, r.acc25_fused, r.acc50_fused, r.mean_iou_fused,
                r.mean_soft_iou_fused,
                r.separation_index ? train::format_number(*r.separation_index).c_str() : "undefined");
  return buf;
}

std::string probe_csv(const ProbeReport& r) {
  std::string s =
      "samples,chance,sel_acc_shortcut,acc25_shortcut,acc50_shortcut,mean_iou_shortcut,mean_soft_iou_shortcut,"
      "sel_acc_fused,acc25_fused,acc50_fused,mean_iou_fused,mean_soft_iou_fused,separation_index\n";
  s += std::to_string(r.samples);
  for (double v : {r.chance, r.sel_acc_shortcut, r.acc25_shortcut, r.acc50_shortcut, r.mean_iou_shortcut,
                   r.mean_soft_iou_shortcut, r.sel_acc_fused, r.acc25_fused, r.acc50_fused, r.mean_iou_fused,
                   r.mean_soft_iou_fused})
    s += "," + train::format_number(v);
  s += "," + (r.separation_index ? train::format_number(*r.separation_index) : std::string("undefined")) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double left = 70, right = 170, top = 40, bottom = 50, width = 640, height = 400;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

Frame frame_for(const std::vector<std::vector<std::pair<double, double>>>& sets) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& pts : sets)
    for (const auto& [x, y] : pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double pad = 0.05 * (y1 - y0);
  return {x0, x1, y0 - pad, y1 + pad};
}

std::string axes(const Frame& f, const std::string& title, const std::string& xl, const std::string& yl) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::width << "\" height=\"" << Frame::height
    << "\" viewBox=\"0 0 " << Frame::width << ' ' << Frame::height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << Frame::width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
    << "</text>\n";
  const double xa = Frame::left, xb = Frame::width - Frame::right, ya = Frame::top, yb = Frame::height - Frame::bottom;
  s << "<rect x=\"" << num(xa) << "\" y=\"" << num(ya) << "\" width=\"" << num(xb - xa) << "\" height=\"" << num(yb - ya)
    << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    s << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(yb + 16) << "\" text-anchor=\"middle\">" << num(xv) << "</text>\n";
    s << "<text x=\"" << num(xa - 6) << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">" << num(yv) << "</text>\n";
    s << "<line x1=\"" << num(xa) << "\" y1=\"" << num(f.py(yv)) << "\" x2=\"" << num(xb) << "\" y2=\"" << num(f.py(yv))
      << "\" stroke=\"#ddd\"/>\n";
  }
  s << "<text x=\"" << num((xa + xb) / 2) << "\" y=\"" << num(Frame::height - 12) << "\" text-anchor=\"middle\">"
    << escape(xl) << "</text>\n";
  s << "<text x=\"16\" y=\"" << num((ya + yb) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << num((ya + yb) / 2) << ")\">" << escape(yl) << "</text>\n";
  return s.str();
}

void legend(std::ostringstream& s, std::size_t i, const std::string& name) {
  const double x = Frame::width - Frame::right + 12, y = Frame::top + 14 + 18 * static_cast<double>(i);
  const char* color = kPalette[i % std::size(kPalette)];
  s << "<rect x=\"" << num(x) << "\" y=\"" << num(y - 9) << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
  s << "<text x=\"" << num(x + 16) << "\" y=\"" << num(y) << "\">" << escape(name) << "</text>\n";
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  std::vector<std::vector<std::pair<double, double>>> sets;
  for (const auto& s : series) sets.push_back(s.points);
  const Frame f = frame_for(sets);
  std::ostringstream s;
  s << axes(f, title, x_label, y_label);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    auto pts = series[i].points;
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    if (pts.size() > 1) {
      s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (std::size_t k = 0; k < pts.size(); ++k)
        s << (k ? " " : "") << num(f.px(pts[k].first)) << ',' << num(f.py(pts[k].second));
      s << "\"/>\n";
    }
    for (const auto& [x, y] : pts)
      s << "<circle cx=\"" << num(f.px(x)) << "\" cy=\"" << num(f.py(y)) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    legend(s, i, series[i].name);
  }
  s << "</svg>\n";
  return s.str();
}

std::string pca_scatter_svg(const std::vector<train::SampleEval>& evals) {
  if (evals.empty()) throw ConfigError("pca_scatter: empty split");
  const std::size_t d = evals.front().pooled_2d.size();
  if (evals.front().pooled_3d.size() != d || evals.front().pooled_fused.size() != d)
    throw ConfigError("pca_scatter: feature populations have different widths");

  const auto fields = {&train::SampleEval::pooled_2d, &train::SampleEval::pooled_3d, &train::SampleEval::pooled_fused};
  const Eigen::Index n = static_cast<Eigen::Index>(3 * evals.size());
  Eigen::MatrixXd x(n, static_cast<Eigen::Index>(d));
  Eigen::Index row = 0;
  for (auto field : fields)
    for (const auto& e : evals) {
      for (std::size_t c = 0; c < d; ++c) x(row, static_cast<Eigen::Index>(c)) = (e.*field)[c];
      ++row;
    }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / std::max<double>(1.0, static_cast<double>(n - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index k = eig.eigenvectors().cols();
  Eigen::MatrixXd basis(static_cast<Eigen::Index>(d), 2);
  basis.col(0) = eig.eigenvectors().col(k - 1);
  basis.col(1) = k > 1 ? Eigen::VectorXd(eig.eigenvectors().col(k - 2)) : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
  // Fix the sign of each component so the plot is reproducible.
  for (int c = 0; c < 2; ++c) {
    Eigen::Index arg = 0;
    basis.col(c).cwiseAbs().maxCoeff(&arg);
    if (basis(arg, c) < 0) basis.col(c) *= -1.0;
  }
  const Eigen::MatrixXd proj = x * basis;

  std::vector<Series> series = {{"2D features", {}}, {"3D features", {}}, {"fused features", {}}};
  for (Eigen::Index i = 0; i < n; ++i)
    series[static_cast<std::size_t>(i) / evals.size()].points.emplace_back(proj(i, 0), proj(i, 1));

  std::vector<std::vector<std::pair<double, double>>> sets;
  for (const auto& s : series) sets.push_back(s.points);
  const Frame f = frame_for(sets);
  std::ostringstream s;
  s << axes(f, "Pooled features, first two principal components", "PC1", "PC2");
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kPalette[i];
    for (const auto& [px, py] : series[i].points)
      s << "<circle cx=\"" << num(f.px(px)) << "\" cy=\"" << num(f.py(py)) << "\" r=\"2\" fill=\"" << color
        << "\" fill-opacity=\"0.5\"/>\n";
    legend(s, i, series[i].name);
  }
  s << "</svg>\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Sweeps

std::size_t SweepResult::succeeded() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const SweepCell& c) { return c.final.has_value(); }));
}

std::vector<double> dedup_grid(std::vector<double> grid, std::vector<double>* duplicates) {
  std::vector<double> out;
  for (double v : grid) {
    if (std::find(out.begin(), out.end(), v) != out.end()) {
      if (duplicates) duplicates->push_back(v);
    } else {
      out.push_back(v);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string cell_name(double lambda, double mu) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "lambda_%g_mu_%g", lambda, mu);
  return buf;
}

std::uint64_t cell_seed(std::uint64_t base, double lambda, double mu) {
  std::uint64_t lb = 0, mb = 0;
  std::memcpy(&lb, &lambda, sizeof lb);
  std::memcpy(&mb, &mu, sizeof mb);
  return scenes::Rng::derive(base, {lb, mb});
}

train::TrainConfig cell_train_config(const train::TrainConfig& base, double lambda, double mu, bool common_seed) {
  train::TrainConfig c = base;
  c.lambda = lambda;
  c.mu = mu;
  if (!common_seed) c.seed = cell_seed(base.seed, lambda, mu);
  return c;
}

model::ModelConfig cell_model_config(const model::ModelConfig& base, double lambda, double mu, bool common_seed) {
  model::ModelConfig c = base;
  if (!common_seed) c.seed = cell_seed(base.seed, lambda, mu);
  return c;
}

SweepResult run_sweep(const train::PreparedData& data, const model::ModelConfig& mcfg, const train::TrainConfig& base,
                      const std::vector<double>& lambda_grid, const std::vector<double>& mu_grid,
                      const SweepOptions& opts) {
  if (lambda_grid.empty() || mu_grid.empty()) throw ConfigError("run_sweep: empty grid");
  SweepResult result;
  for (double l : lambda_grid)
    for (double m : mu_grid) {
      SweepCell c;
      c.lambda = l;
      c.mu = m;
      c.train_seed = cell_train_config(base, l, m, opts.common_seed).seed;
      c.model_seed = cell_model_config(mcfg, l, m, opts.common_seed).seed;
      result.cells.push_back(c);
    }

  // Cells are the parallel unit; each cell's own steps run serially.
  const int workers = opts.workers > 0 ? opts.workers : max_threads();
  for_each_index(
      result.cells.size(), Exec::parallel,
      [&](std::size_t i) {
        SweepCell& c = result.cells[i];
        try {
          const train::TrainConfig tc = cell_train_config(base, c.lambda, c.mu, opts.common_seed);
          const model::ModelConfig mc = cell_model_config(mcfg, c.lambda, c.mu, opts.common_seed);
          train::RunOptions ro;
          ro.exec = Exec::serial;
          const train::RunResult run = train::train_run(data, mc, tc, ro);
          if (opts.out_dir) train::write_run_outputs(*opts.out_dir / cell_name(c.lambda, c.mu), run);
          c.final = run.history.back();
        } catch (const std::exception& e) {
          c.error = e.what();
        }
      },
      workers);
  return result;
}

std::string sweep_csv(const SweepResult& r) {
  std::string s = "lambda,mu," + train::metrics_csv_header() + "\n";
  for (const auto& c : r.cells) {
    if (!c.final) continue;
    s += train::format_number(c.lambda) + "," + train::format_number(c.mu) + "," + train::metrics_csv_row(*c.final) + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// CSV + report

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ConfigError("csv: missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<double> parse_value(const std::string& s) {
  if (s == "undefined") return std::nullopt;
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError("not a number: '" + s + "'");
  return v;
}

}  // namespace

CsvTable parse_csv(const std::string& text, const std::string& source) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    auto fields = split_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size())
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                        " fields, got " + std::to_string(fields.size()));
    for (const auto& f : fields) {
      try {
        parse_value(f);
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw ConfigError(source + ":1: empty CSV");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), path.string());
}

namespace {

const std::vector<std::string>& plotted_metrics() {
  static const std::vector<std::string> m = {"acc25_fused",      "acc50_fused",         "sel_acc_fused",
                                             "sel_acc_shortcut", "acc25_shortcut",      "acc50_shortcut",
                                             "separation_index", "hinge_activation_rate", "loss_total"};
  return m;
}

bool lower_is_better(const std::string& metric) { return metric.rfind("loss_", 0) == 0; }

std::string label(const char* name, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s=%g", name, v);
  return buf;
}

}  // namespace

std::map<std::string, std::string> build_report(const std::vector<std::pair<std::string, CsvTable>>& histories,
                                                const CsvTable& sweep) {
  if (sweep.rows.empty()) throw ConfigError("report: empty sweep");
  std::map<std::string, std::string> files;
  const std::size_t lc = sweep.column("lambda"), mc = sweep.column("mu");

  std::vector<double> lambdas, mus;
  for (const auto& row : sweep.rows) {
    lambdas.push_back(*parse_value(row[lc]));
    mus.push_back(*parse_value(row[mc]));
  }
  const std::vector<double> lambda_set = dedup_grid(lambdas), mu_set = dedup_grid(mus);

  std::ostringstream summary;
  summary << "sweep cells: " << sweep.rows.size() << "\n\nbest cell per metric\n";
  for (const std::string& metric : plotted_metrics()) {
    const std::size_t col = sweep.column(metric);
    std::vector<Series> by_mu, by_lambda;
    for (double m : mu_set) by_mu.push_back({label("mu", m), {}});
    for (double l : lambda_set) by_lambda.push_back({label("lambda", l), {}});

    std::optional<std::size_t> best;
    double best_v = 0;
    for (std::size_t r = 0; r < sweep.rows.size(); ++r) {
      const std::optional<double> v = parse_value(sweep.rows[r][col]);
      if (!v) continue;
      const auto mi = std::find(mu_set.begin(), mu_set.end(), mus[r]) - mu_set.begin();
      const auto li = std::find(lambda_set.begin(), lambda_set.end(), lambdas[r]) - lambda_set.begin();
      by_mu[static_cast<std::size_t>(mi)].points.emplace_back(lambdas[r], *v);
      by_lambda[static_cast<std::size_t>(li)].points.emplace_back(mus[r], *v);
      const bool better = lower_is_better(metric) ? *v < best_v : *v > best_v;
      if (!best || better) {
        best = r;
        best_v = *v;
      }
    }
    files["sweep_" + metric + "_vs_lambda.svg"] = line_chart_svg(metric + " vs lambda", "lambda", metric, by_mu);
    files["sweep_" + metric + "_vs_mu.svg"] = line_chart_svg(metric + " vs mu", "mu", metric, by_lambda);
    summary << "  " << metric << ": ";
    if (best)
      summary << train::format_number(best_v) << " at lambda=" << sweep.rows[*best][lc] << " mu=" << sweep.rows[*best][mc]
              << "\n";
    else
      summary << "undefined in every cell\n";
  }

  if (!histories.empty()) {
    for (const std::string& metric : plotted_metrics()) {
      std::vector<Series> series;
      for (const auto& [name, table] : histories) {
        const std::size_t sc = table.column("step"), col = table.column(metric);
        Series s{name, {}};
        for (const auto& row : table.rows)
          if (auto v = parse_value(row[col])) s.points.emplace_back(*parse_value(row[sc]), *v);
        series.push_back(std::move(s));
      }
      files["history_" + metric + ".svg"] = line_chart_svg(metric + " during training", "step", metric, series);
    }
    summary << "\nhistories: " << histories.size() << "\n";
  }
  files["summary.txt"] = summary.str();
  return files;
}

std::vector<std::filesystem::path> emit_report(const std::vector<std::filesystem::path>& history_csvs,
                                               const std::filesystem::path& sweep_csv_path,
                                               const std::filesystem::path& out_dir) {
  std::vector<std::pair<std::string, CsvTable>> histories;
  for (const auto& p : history_csvs) {
    const std::string name = p.parent_path().filename().empty() ? p.stem().string() : p.parent_path().filename().string();
    histories.emplace_back(name, read_csv(p));
  }
  const auto files = build_report(histories, read_csv(sweep_csv_path));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory '" + out_dir.string() + "': " + ec.message());
  std::vector<std::filesystem::path> written;
  for (const auto& [name, content] : files) {
    const auto path = out_dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << content;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
    written.push_back(path);
  }
  return written;
}

}  // namespace w2r2::diag
