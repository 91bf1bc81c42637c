#include "cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "w2r2/diagnostics.hpp"
#include "w2r2/error.hpp"
#include "w2r2/model.hpp"
#include "w2r2/scenes.hpp"
#include "w2r2/trainer.hpp"

#ifndef W2R2_VERSION
#define W2R2_VERSION "unknown"
#endif

namespace w2r2::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + ": no path given");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(what + ": cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + " '" + path.string() + "': " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

std::string timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* sde = std::getenv("SOURCE_DATE_EPOCH")) {
    try {
      t = static_cast<std::time_t>(std::stoll(sde));
    } catch (const std::exception&) {
      throw ConfigError("SOURCE_DATE_EPOCH is not an integer");
    }
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::optional<std::uint64_t> seed_override() {
  const char* s = std::getenv("W2R2_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != std::string(s).size()) throw ConfigError("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("W2R2_SEED is not an unsigned integer: '") + s + "'");
  }
}

// Everything needed to repeat the command: resolved configs and seeds are
// embedded, not only referenced by path.
struct Manifest {
  json j;

  explicit Manifest(const std::string& command, const std::vector<std::string>& args) {
    j["tool"] = "w2r2";
    j["version"] = W2R2_VERSION;
    j["command"] = command;
    j["argv"] = args;
    j["timestamp"] = timestamp();
    if (auto s = seed_override()) j["seed_override"] = *s;
  }
  void write(const fs::path& dir) const { write_text(dir / "manifest.json", j.dump(2) + "\n"); }
};

scenes::WorldConfig load_world(const fs::path& p) {
  auto w = scenes::world_config_from_json(read_json_file(p, "world config"));
  if (auto s = seed_override()) w.seed = *s;
  w.validate();
  return w;
}

model::ModelConfig load_model(const fs::path& p) {
  auto m = model::model_config_from_json(read_json_file(p, "model config"));
  if (auto s = seed_override()) m.seed = *s;
  m.validate();
  return m;
}

train::TrainConfig load_train(const fs::path& p) {
  auto t = train::train_config_from_json(read_json_file(p, "train config"));
  if (auto s = seed_override()) t.seed = *s;
  t.validate();
  return t;
}

std::vector<double> parse_grid(const std::string& text, const std::string& flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      throw ConfigError(flag + ": not a number: '" + item + "'");
    }
    while (pos < item.size() && item[pos] == ' ') ++pos;
    if (pos != item.size()) throw ConfigError(flag + ": not a number: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(flag + ": empty grid");
  return out;
}

void check_compatible(const model::ModelConfig& m, const scenes::WorldConfig& w) {
  if (m.categories != w.categories)
    throw ConfigError("model has " + std::to_string(m.categories) + " categories, world has " +
                      std::to_string(w.categories));
  if (m.n_max < w.n_max)
    throw ConfigError("model n_max " + std::to_string(m.n_max) + " is below the world's " + std::to_string(w.n_max));
}

Exec exec_for(int threads) { return threads == 1 ? Exec::serial : Exec::parallel; }

// ---------------------------------------------------------------------------

int cmd_gen_data(const fs::path& config, const fs::path& out_dir, int threads, const std::vector<std::string>& args,
                 std::ostream& out) {
  const auto world = load_world(config);
  make_dir(out_dir);
  Manifest m("gen-data", args);
  m.j["configs"] = {{"world", {{"path", config.string()}, {"resolved", scenes::to_json(world)}}}};
  m.j["seeds"] = {{"world", world.seed}};
  m.j["outputs"] = {(out_dir / "train.jsonl").string(), (out_dir / "val.jsonl").string(),
                    (out_dir / "world.json").string()};
  m.write(out_dir);

  const auto data = scenes::build_dataset(world, exec_for(threads));
  scenes::write_dataset(out_dir, data);
  write_text(out_dir / "world.json", scenes::to_json(world).dump(2) + "\n");
  out << "train samples  " << data.train.size() << "\n"
      << "val samples    " << data.val.size() << "\n"
      << "chance (val)   " << train::format_number(scenes::chance_rate(data.val)) << "\n"
      << "wrote          " << out_dir.string() << "\n";
  return ok;
}

int cmd_train(const fs::path& world_p, const fs::path& model_p, const fs::path& train_p, const fs::path& out_dir,
              const std::optional<fs::path>& data_dir, int threads, const std::vector<std::string>& args,
              std::ostream& out) {
  const auto world = load_world(world_p);
  const auto mcfg = load_model(model_p);
  const auto tcfg = load_train(train_p);
  check_compatible(mcfg, world);
  make_dir(out_dir);

  Manifest m("train", args);
  m.j["configs"] = {{"world", {{"path", world_p.string()}, {"resolved", scenes::to_json(world)}}},
                    {"model", {{"path", model_p.string()}, {"resolved", model::to_json(mcfg)}}},
                    {"train", {{"path", train_p.string()}, {"resolved", train::to_json(tcfg)}}}};
  m.j["seeds"] = {{"world", world.seed}, {"model", mcfg.seed}, {"train", tcfg.seed}};
  m.j["data"] = data_dir ? json(data_dir->string()) : json("regenerated from world config");
  m.j["outputs"] = {(out_dir / "metrics.csv").string(), (out_dir / "checkpoint.json").string()};
  m.write(out_dir);

  const Exec exec = exec_for(threads);
  scenes::Dataset data = data_dir ? scenes::read_dataset(*data_dir) : scenes::build_dataset(world, exec);
  for (const auto& s : data.train) scenes::validate_sample(s, world);
  for (const auto& s : data.val) scenes::validate_sample(s, world);
  const auto prepared = train::PreparedData::from(world, std::move(data), exec);

  train::RunOptions ro;
  ro.exec = exec;
  ro.threads = threads;
  out << "step      loss_total  sel_fused  acc25_fused  sel_2d_only  hinge_rate\n";
  ro.on_eval = [&out](const train::MetricsRecord& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-8zu  %10.4f  %9.4f  %11.4f  %11.4f  %10.4f\n", r.step, r.loss_total,
                  r.sel_acc_fused, r.acc25_fused, r.sel_acc_shortcut, r.hinge_activation_rate);
    out << buf << std::flush;
  };
  const auto result = train::train_run(prepared, mcfg, tcfg, ro);
  train::write_run_outputs(out_dir, result);
  out << "wrote " << out_dir.string() << "\n";
  return ok;
}

int cmd_probe(const fs::path& ckpt, const fs::path& data_p, std::optional<fs::path> world_p, const std::string& split,
              std::optional<fs::path> out_dir, int threads, const std::vector<std::string>& args, std::ostream& out) {
  if (split != "train" && split != "val") throw ConfigError("--split must be 'train' or 'val'");
  fs::path jsonl = data_p;
  if (fs::is_directory(data_p)) {
    jsonl = data_p / (split + ".jsonl");
    if (!world_p && fs::exists(data_p / "world.json")) world_p = data_p / "world.json";
  }
  if (!world_p) throw ConfigError("probe: no world config; pass --world or use a gen-data directory");
  const auto world = load_world(*world_p);
  const auto params = model::load_checkpoint(ckpt);
  check_compatible(params.config, world);

  if (out_dir) {
    make_dir(*out_dir);
    Manifest m("probe", args);
    m.j["configs"] = {{"world", {{"path", world_p->string()}, {"resolved", scenes::to_json(world)}}}};
    m.j["checkpoint"] = ckpt.string();
    m.j["data"] = jsonl.string();
    m.j["outputs"] = {(*out_dir / "probe.csv").string(), (*out_dir / "pca.svg").string()};
    m.write(*out_dir);
  }

  auto samples = scenes::read_jsonl(jsonl);
  if (samples.empty()) throw ConfigError("probe: '" + jsonl.string() + "' holds no samples");
  for (const auto& s : samples) scenes::validate_sample(s, world);
  const scenes::Split sp = split == "train" ? scenes::Split::train : scenes::Split::val;
  const auto features = scenes::featurize_split(samples, world, sp, exec_for(threads));
  const auto examples = train::make_examples(samples, features);
  const auto evals = train::evaluate_samples(params, examples, train::TrainConfig{}.weights(), exec_for(threads), threads);
  const auto report = diag::probe_from_evals(evals);
  out << diag::probe_table(report);
  if (out_dir) {
    write_text(*out_dir / "probe.csv", diag::probe_csv(report));
    if (params.config.d2d == params.config.d3d) write_text(*out_dir / "pca.svg", diag::pca_scatter_svg(evals));
  }
  return ok;
}

int cmd_sweep(const fs::path& base, const std::string& lgrid, const std::string& mgrid, const fs::path& out_dir,
              int workers, bool common_seed, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
  std::vector<double> dup_l, dup_m;
  const auto lambdas = diag::dedup_grid(parse_grid(lgrid, "--lambda-grid"), &dup_l);
  const auto mus = diag::dedup_grid(parse_grid(mgrid, "--mu-grid"), &dup_m);
  for (double v : dup_l) err << "warning: duplicate lambda " << v << " ignored\n";
  for (double v : dup_m) err << "warning: duplicate mu " << v << " ignored\n";

  const auto world = load_world(base / "world.json");
  const auto mcfg = load_model(base / "model.json");
  const auto tcfg = load_train(base / "train.json");
  check_compatible(mcfg, world);
  for (double l : lambdas)
    if (!(l >= 0.0)) throw ConfigError("--lambda-grid: lambda must be >= 0");
  for (double u : mus)
    if (!(u > 0.0 && u < 1.0)) throw ConfigError("--mu-grid: mu must lie in (0,1)");
  const bool have_data = fs::exists(base / "train.jsonl") && fs::exists(base / "val.jsonl");
  make_dir(out_dir);

  Manifest m("sweep", args);
  m.j["configs"] = {{"world", {{"path", (base / "world.json").string()}, {"resolved", scenes::to_json(world)}}},
                    {"model", {{"path", (base / "model.json").string()}, {"resolved", model::to_json(mcfg)}}},
                    {"train", {{"path", (base / "train.json").string()}, {"resolved", train::to_json(tcfg)}}}};
  m.j["lambda_grid"] = lambdas;
  m.j["mu_grid"] = mus;
  m.j["common_seed"] = common_seed;
  m.j["data"] = have_data ? json(base.string()) : json("regenerated from world config");
  json cells = json::array();
  for (double l : lambdas)
    for (double u : mus)
      cells.push_back({{"lambda", l},
                       {"mu", u},
                       {"dir", (out_dir / "cells" / diag::cell_name(l, u)).string()},
                       {"train_seed", diag::cell_train_config(tcfg, l, u, common_seed).seed},
                       {"model_seed", diag::cell_model_config(mcfg, l, u, common_seed).seed}});
  m.j["cells"] = cells;
  m.j["outputs"] = {(out_dir / "sweep.csv").string(), (out_dir / "report").string()};
  m.write(out_dir);

  scenes::Dataset data = have_data ? scenes::read_dataset(base) : scenes::build_dataset(world);
  const auto prepared = train::PreparedData::from(world, std::move(data));
  diag::SweepOptions so;
  so.workers = workers;
  so.common_seed = common_seed;
  so.out_dir = out_dir / "cells";
  const auto result = diag::run_sweep(prepared, mcfg, tcfg, lambdas, mus, so);

  std::string failures;
  for (const auto& c : result.cells)
    if (!c.final) failures += diag::cell_name(c.lambda, c.mu) + ": " + c.error + "\n";
  if (!failures.empty()) {
    write_text(out_dir / "failures.txt", failures);
    err << failures;
  }
  out << result.succeeded() << " of " << result.cells.size() << " cells succeeded\n";
  if (result.succeeded() == 0) return sweep_failed;

  write_text(out_dir / "sweep.csv", diag::sweep_csv(result));
  std::vector<fs::path> histories;
  for (const auto& c : result.cells)
    if (c.final) histories.push_back(out_dir / "cells" / diag::cell_name(c.lambda, c.mu) / "metrics.csv");
  diag::emit_report(histories, out_dir / "sweep.csv", out_dir / "report");
  std::ifstream summary(out_dir / "report" / "summary.txt");
  out << summary.rdbuf();
  return ok;
}

int cmd_report(const fs::path& sweep, const std::vector<fs::path>& histories, const fs::path& out_dir,
               std::ostream& out) {
  const auto written = diag::emit_report(histories, sweep, out_dir);
  out << "wrote " << written.size() << " files to " << out_dir.string() << "\n";
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"W2R2 pull-push training lab for synthetic 3D grounding", "w2r2"};
  app.require_subcommand(1);
  app.set_version_flag("--version", W2R2_VERSION);

  std::string config, out_dir, world, model_p, train_p, data, ckpt, split = "val", base, lgrid, mgrid, sweep_csv;
  std::optional<std::string> opt_data, opt_world, opt_out;
  std::vector<std::string> histories;
  int threads = 0, workers = 0;
  bool common_seed = false;

  auto* gen = app.add_subcommand("gen-data", "Generate train/val JSON-lines splits from a world config");
  gen->add_option("--config", config, "World config JSON")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--threads", threads, "Worker threads (1 = serial)");

  auto* tr = app.add_subcommand("train", "Train one model and write metrics.csv + checkpoint.json");
  tr->add_option("--world", world, "World config JSON")->required();
  tr->add_option("--model", model_p, "Model config JSON")->required();
  tr->add_option("--train", train_p, "Train config JSON")->required();
  tr->add_option("--out", out_dir, "Output directory")->required();
  tr->add_option("--data", opt_data, "Directory with train.jsonl/val.jsonl (default: regenerate)");
  tr->add_option("--threads", threads, "Worker threads (1 = serial)");

  auto* pr = app.add_subcommand("probe", "2D-only shortcut probe and separation index of a checkpoint");
  pr->add_option("--checkpoint", ckpt, "Checkpoint JSON")->required();
  pr->add_option("--data", data, "gen-data directory or a JSON-lines file")->required();
  pr->add_option("--world", opt_world, "World config JSON (default: <data>/world.json)");
  pr->add_option("--split", split, "train or val");
  pr->add_option("--out", opt_out, "Directory for probe.csv and pca.svg");
  pr->add_option("--threads", threads, "Worker threads (1 = serial)");

  auto* sw = app.add_subcommand("sweep", "Train one run per (lambda, mu) grid cell");
  sw->add_option("--base", base, "Directory with world.json, model.json, train.json")->required();
  sw->add_option("--lambda-grid", lgrid, "Comma-separated lambda values")->required();
  sw->add_option("--mu-grid", mgrid, "Comma-separated mu values")->required();
  sw->add_option("--out", out_dir, "Output directory")->required();
  sw->add_option("--workers", workers, "Concurrent cells (0 = available parallelism)");
  sw->add_flag("--common-seed", common_seed, "Use the base seeds in every cell");

  auto* rp = app.add_subcommand("report", "Render SVG charts and a summary from sweep/history CSVs");
  rp->add_option("--sweep", sweep_csv, "Sweep CSV")->required();
  rp->add_option("--history", histories, "Metrics CSVs to plot against step");
  rp->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(std::move(rev));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForVersion&) {
    out << W2R2_VERSION << "\n";
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return config_error;
  }

  try {
    if (*gen) return cmd_gen_data(config, out_dir, threads, args, out);
    if (*tr)
      return cmd_train(world, model_p, train_p, out_dir,
                       opt_data ? std::optional<fs::path>(*opt_data) : std::nullopt, threads, args, out);
    if (*pr)
      return cmd_probe(ckpt, data, opt_world ? std::optional<fs::path>(*opt_world) : std::nullopt, split,
                       opt_out ? std::optional<fs::path>(*opt_out) : std::nullopt, threads, args, out);
    if (*sw) return cmd_sweep(base, lgrid, mgrid, out_dir, workers, common_seed, args, out, err);
    if (*rp) {
      std::vector<fs::path> h(histories.begin(), histories.end());
      return cmd_report(sweep_csv, h, out_dir, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return io_error;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return numeric_error;
  } catch (const std::exception& e) {
    err << "I/O error: " << e.what() << "\n";
    return io_error;
  }
  return config_error;
}

}  // namespace w2r2::cli
