#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "support.hpp"
#include "w2r2/diagnostics.hpp"
#include "w2r2/trainer.hpp"

using namespace w2r2;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "w2r2");
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// world.json, model.json and train.json for a seconds-long run.
fs::path configs(const std::string& name, nlohmann::json train = nlohmann::json::object()) {
  const fs::path dir = testing::scratch_dir("cli_" + name);
  write(dir / "world.json", R"({"n_min": 2, "n_max": 4, "train_count": 64, "val_count": 32})");
  nlohmann::json model = model::to_json(testing::small_model());
  write(dir / "model.json", model.dump());
  if (!train.contains("epochs")) train["epochs"] = 1;
  if (!train.contains("batch_size")) train["batch_size"] = 16;
  write(dir / "train.json", train.dump());
  return dir;
}

std::vector<std::string> train_args(const fs::path& dir, const fs::path& out) {
  return {"train",   "--world", (dir / "world.json").string(), "--model", (dir / "model.json").string(),
          "--train", (dir / "train.json").string(), "--out", out.string()};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("gen-data writes the configured splits") {
  const fs::path dir = configs("gen");
  const Result r = invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "a").string()});
  REQUIRE(r.code == 0);
  CHECK(lines(testing::slurp(dir / "a" / "train.jsonl")) == 64);
  CHECK(lines(testing::slurp(dir / "a" / "val.jsonl")) == 32);
  CHECK(fs::exists(dir / "a" / "manifest.json"));
  CHECK(fs::exists(dir / "a" / "world.json"));
  CHECK(r.out.find("chance") != std::string::npos);

  REQUIRE(invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "b").string(), "--threads", "1"})
              .code == 0);
  for (const char* f : {"train.jsonl", "val.jsonl", "world.json"})
    CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));
}

TEST_CASE("config errors exit 2") {
  const fs::path dir = configs("errors");
  CHECK(invoke({"gen-data", "--config", (dir / "nope.json").string(), "--out", (dir / "x").string()}).code == 2);
  write(dir / "typo.json", R"({"rhoo": 0.5})");
  const Result typo = invoke({"gen-data", "--config", (dir / "typo.json").string(), "--out", (dir / "x").string()});
  CHECK(typo.code == 2);
  CHECK(typo.err.find("rhoo") != std::string::npos);
  CHECK(invoke({"gen-data", "--out", (dir / "x").string()}).code == 2);
  CHECK(invoke({"no-such-command"}).code == 2);
  CHECK(invoke({}).code == 2);
}

TEST_CASE("W2R2_SEED overrides config seeds") {
  const fs::path dir = configs("seed");
  ::setenv("W2R2_SEED", "12345", 1);
  const Result r = invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "s").string()});
  ::unsetenv("W2R2_SEED");
  REQUIRE(r.code == 0);
  const auto m = nlohmann::json::parse(testing::slurp(dir / "s" / "manifest.json"));
  CHECK(m["seeds"]["world"] == 12345);
  CHECK(m["seed_override"] == 12345);
  REQUIRE(invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "d").string()}).code == 0);
  CHECK(testing::slurp(dir / "s" / "train.jsonl") != testing::slurp(dir / "d" / "train.jsonl"));

  ::setenv("W2R2_SEED", "twelve", 1);
  const Result bad = invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "t").string()});
  ::unsetenv("W2R2_SEED");
  CHECK(bad.code == 2);
}

TEST_CASE("train") {
  SUBCASE("lambda = 0 baseline run writes evaluation rows") {
    const fs::path dir = configs("train0", {{"lambda", 0.0}});
    const Result r = invoke(train_args(dir, dir / "run"));
    REQUIRE(r.code == 0);
    CHECK(lines(testing::slurp(dir / "run" / "metrics.csv")) == 1 + 2);  // header, step 0, end of epoch
    CHECK(fs::exists(dir / "run" / "checkpoint.json"));
    const auto m = nlohmann::json::parse(testing::slurp(dir / "run" / "manifest.json"));
    CHECK(m["configs"]["train"]["resolved"]["lambda"] == 0.0);
  }
  SUBCASE("omitted lambda and mu resolve to 1.5 and 0.7") {
    const fs::path dir = configs("train_defaults");
    REQUIRE(invoke(train_args(dir, dir / "run")).code == 0);
    const auto m = nlohmann::json::parse(testing::slurp(dir / "run" / "manifest.json"));
    CHECK(m["configs"]["train"]["resolved"]["lambda"] == 1.5);
    CHECK(m["configs"]["train"]["resolved"]["mu"] == 0.7);
  }
  SUBCASE("epochs = 0 gives exactly one evaluation row") {
    const fs::path dir = configs("train_e0", {{"epochs", 0}});
    REQUIRE(invoke(train_args(dir, dir / "run")).code == 0);
    CHECK(lines(testing::slurp(dir / "run" / "metrics.csv")) == 2);
  }
  SUBCASE("identical configs give identical bytes") {
    const fs::path dir = configs("train_det");
    REQUIRE(invoke(train_args(dir, dir / "a")).code == 0);
    auto args = train_args(dir, dir / "b");
    args.insert(args.end(), {"--threads", "1"});
    REQUIRE(invoke(args).code == 0);
    for (const char* f : {"metrics.csv", "checkpoint.json"}) CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));
  }
  SUBCASE("pre-generated data gives the same run") {
    const fs::path dir = configs("train_data");
    REQUIRE(invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "data").string()}).code == 0);
    REQUIRE(invoke(train_args(dir, dir / "a")).code == 0);
    auto args = train_args(dir, dir / "b");
    args.insert(args.end(), {"--data", (dir / "data").string()});
    REQUIRE(invoke(args).code == 0);
    CHECK(testing::slurp(dir / "a" / "metrics.csv") == testing::slurp(dir / "b" / "metrics.csv"));
  }
  SUBCASE("model narrower than the world's scenes") {
    const fs::path dir = configs("train_shape");
    auto m = model::to_json(testing::small_model());
    m["n_max"] = 3;
    write(dir / "model.json", m.dump());
    CHECK(invoke(train_args(dir, dir / "run")).code == 2);
  }
  SUBCASE("invalid train config") {
    const fs::path dir = configs("train_bad", {{"mu", 1.5}});
    CHECK(invoke(train_args(dir, dir / "run")).code == 2);
  }
  SUBCASE("diverging run exits 4") {
    const fs::path dir = configs("train_nan", {{"lr", 1e300}, {"optimizer", "sgd"}, {"epochs", 3}});
    const Result r = invoke(train_args(dir, dir / "run"));
    CHECK(r.code == 4);
    CHECK(r.err.find("numeric") != std::string::npos);
  }
}

TEST_CASE("probe") {
  const fs::path dir = configs("probe");
  REQUIRE(invoke({"gen-data", "--config", (dir / "world.json").string(), "--out", (dir / "data").string()}).code == 0);
  model::save_checkpoint(dir / "init.json", model::ModelParams::init(testing::small_model()));

  const Result r = invoke({"probe", "--checkpoint", (dir / "init.json").string(), "--data", (dir / "data").string(),
                        "--out", (dir / "p").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("chance") != std::string::npos);
  const auto csv = diag::read_csv(dir / "p" / "probe.csv");
  CHECK(csv.rows.size() == 1);
  CHECK(fs::exists(dir / "p" / "pca.svg"));

  SUBCASE("a JSON-lines file with an explicit world") {
    const Result j = invoke({"probe", "--checkpoint", (dir / "init.json").string(), "--data",
                          (dir / "data" / "val.jsonl").string(), "--world", (dir / "world.json").string()});
    CHECK(j.code == 0);
    CHECK(j.out == r.out);
  }
  SUBCASE("corrupt checkpoint names the parse location") {
    write(dir / "corrupt.json", "{\"model\": {\"d2d\": 6,,}}");
    const Result c = invoke({"probe", "--checkpoint", (dir / "corrupt.json").string(), "--data", (dir / "data").string()});
    CHECK(c.code == 2);
    CHECK(c.err.find("line 1") != std::string::npos);
  }
  SUBCASE("shape-incompatible checkpoint") {
    model::ModelConfig m = testing::small_model();
    m.categories = 5;
    model::save_checkpoint(dir / "five.json", model::ModelParams::init(m));
    CHECK(invoke({"probe", "--checkpoint", (dir / "five.json").string(), "--data", (dir / "data").string()}).code == 2);
  }
  SUBCASE("missing data file") {
    CHECK(invoke({"probe", "--checkpoint", (dir / "init.json").string(), "--data", (dir / "data" / "nope.jsonl").string(),
               "--world", (dir / "world.json").string()})
              .code == 3);
  }
}

TEST_CASE("sweep") {
  const fs::path dir = configs("sweep");
  SUBCASE("1 x 1 grid: one row, one report") {
    const Result r = invoke({"sweep", "--base", dir.string(), "--lambda-grid", "1.5", "--mu-grid", "0.7", "--out",
                          (dir / "out").string()});
    REQUIRE(r.code == 0);
    CHECK(diag::read_csv(dir / "out" / "sweep.csv").rows.size() == 1);
    CHECK(fs::exists(dir / "out" / "report" / "summary.txt"));
    CHECK(fs::exists(dir / "out" / "cells" / "lambda_1.5_mu_0.7" / "metrics.csv"));
    CHECK(fs::exists(dir / "out" / "manifest.json"));
  }
  SUBCASE("duplicates are dropped with a warning") {
    const Result r = invoke({"sweep", "--base", dir.string(), "--lambda-grid", "0,0", "--mu-grid", "0.7,0.5,0.7",
                          "--out", (dir / "dup").string(), "--workers", "1"});
    REQUIRE(r.code == 0);
    CHECK(r.err.find("duplicate lambda 0") != std::string::npos);
    CHECK(r.err.find("duplicate mu 0.7") != std::string::npos);
    CHECK(diag::read_csv(dir / "dup" / "sweep.csv").rows.size() == 2);
  }
  SUBCASE("the full grid names 25 cells") {
    write(dir / "train.json", R"({"epochs": 0})");
    const Result r = invoke({"sweep", "--base", dir.string(), "--lambda-grid", "0.1,0.5,1.0,1.5,2.0", "--mu-grid",
                          "0.1,0.3,0.5,0.7,0.9", "--out", (dir / "full").string()});
    REQUIRE(r.code == 0);
    CHECK(diag::read_csv(dir / "full" / "sweep.csv").rows.size() == 25);
    CHECK(nlohmann::json::parse(testing::slurp(dir / "full" / "manifest.json"))["cells"].size() == 25);
  }
  SUBCASE("bad grids") {
    CHECK(invoke({"sweep", "--base", dir.string(), "--lambda-grid", "1.5,x", "--mu-grid", "0.7", "--out",
               (dir / "bad").string()})
              .code == 2);
    CHECK(invoke({"sweep", "--base", dir.string(), "--lambda-grid", "1.5", "--mu-grid", "1.7", "--out",
               (dir / "bad").string()})
              .code == 2);
  }
  SUBCASE("every cell failing exits 5") {
    write(dir / "train.json", R"({"epochs": 3, "lr": 1e300, "optimizer": "sgd", "batch_size": 16})");
    const Result r = invoke({"sweep", "--base", dir.string(), "--lambda-grid", "0,1.5", "--mu-grid", "0.7", "--out",
                          (dir / "fail").string()});
    CHECK(r.code == 5);
    CHECK(fs::exists(dir / "fail" / "failures.txt"));
  }
}

TEST_CASE("report") {
  const fs::path dir = configs("report");
  REQUIRE(invoke({"sweep", "--base", dir.string(), "--lambda-grid", "0,1.5", "--mu-grid", "0.7", "--out",
               (dir / "s").string()})
              .code == 0);
  const Result r = invoke({"report", "--sweep", (dir / "s" / "sweep.csv").string(), "--history",
                        (dir / "s" / "cells" / "lambda_0_mu_0.7" / "metrics.csv").string(), "--out",
                        (dir / "r").string()});
  REQUIRE(r.code == 0);
  CHECK(testing::slurp(dir / "r" / "summary.txt").size() > 0);
  CHECK(invoke({"report", "--sweep", (dir / "nope.csv").string(), "--out", (dir / "r2").string()}).code == 3);
}

TEST_CASE("the installed binary reports its version") {
  const char* bin = std::getenv("W2R2_CLI");
  REQUIRE(bin != nullptr);
  const fs::path out = testing::scratch_dir("cli_bin") / "v.txt";
  const std::string cmd = std::string("\"") + bin + "\" --version > \"" + out.string() + "\"";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(testing::slurp(out).find(W2R2_TEST_VERSION) == 0);
  const std::string bad = std::string("\"") + bin + "\" gen-data --config /nonexistent.json --out /tmp/x 2>/dev/null";
  const int status = std::system(bad.c_str());
  CHECK(WEXITSTATUS(status) == 2);
}
