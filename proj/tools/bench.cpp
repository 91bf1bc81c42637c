// Serial reference vs OpenMP kernels: per-sample gradients and evaluation.
// Prints wall time per kernel and checks that both paths agree bit for bit.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstring>

#include "CLI11.hpp"
#include "w2r2/trainer.hpp"

using namespace w2r2;

namespace {

template <class Fn>
double best_of(int reps, Fn&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

bool same_bits(const std::vector<ad::Tensor>& a, const std::vector<ad::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].shape() != b[i].shape() ||
        std::memcmp(a[i].data().data(), b[i].data().data(), a[i].size() * sizeof(double)) != 0)
      return false;
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"w2r2 kernel benchmark"};
  std::size_t samples = 512;
  int threads = 0, reps = 3;
  app.add_option("--samples", samples, "Scenes per kernel call");
  app.add_option("--threads", threads, "OpenMP threads (0 = runtime default)");
  app.add_option("--reps", reps, "Repetitions; the best time is reported");
  CLI11_PARSE(app, argc, argv);

  scenes::WorldConfig world;
  world.train_count = samples;
  world.val_count = 1;
  const auto data = train::PreparedData::from(world, scenes::build_dataset(world));
  const auto examples = data.train_examples();
  const auto params = model::ModelParams::init(model::ModelConfig{});
  train::TrainConfig cfg;

  std::printf("samples %zu, threads %d\n", samples, threads > 0 ? threads : omp_get_max_threads());
  std::printf("%-16s %12s %12s %9s %s\n", "kernel", "serial s", "parallel s", "speedup", "bitwise");

  bool all_same = true;
  for (auto objective : {train::Objective::w2r2, train::Objective::alignment_only}) {
    cfg.objective = objective;
    train::BatchGradients s, p;
    const double ts = best_of(reps, [&] { s = train::batch_gradients(params, examples, cfg, Exec::serial); });
    const double tp = best_of(reps, [&] { p = train::batch_gradients(params, examples, cfg, Exec::parallel, threads); });
    const bool same = same_bits(s.grads, p.grads);
    all_same &= same;
    std::printf("%-16s %12.4f %12.4f %9.2f %s\n",
                objective == train::Objective::w2r2 ? "grad w2r2" : "grad baseline", ts, tp, ts / tp,
                same ? "yes" : "NO");
  }

  train::MetricsRecord es, ep;
  const double ts = best_of(reps, [&] { es = train::evaluate(params, examples, cfg, 0, Exec::serial); });
  const double tp = best_of(reps, [&] { ep = train::evaluate(params, examples, cfg, 0, Exec::parallel, threads); });
  all_same &= es == ep;
  std::printf("%-16s %12.4f %12.4f %9.2f %s\n", "evaluate", ts, tp, ts / tp, es == ep ? "yes" : "NO");
  return all_same ? 0 : 1;
}
