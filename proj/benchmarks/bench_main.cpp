#include <vector>

#include <benchmark/benchmark.h>

#include "bakd/acquisition.hpp"
#include "bakd/codec.hpp"
#include "bakd/models.hpp"
#include "bakd/rng.hpp"

namespace {

using namespace bakd;

Matrix random_inputs(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  return x;
}

std::vector<Matrix> random_tables(std::size_t points, std::size_t samples, Rng& rng) {
  std::vector<Matrix> out;
  for (std::size_t p = 0; p < points; ++p) {
    Matrix t(samples, 10);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform() + 1e-3;
    for (Eigen::Index r = 0; r < t.rows(); ++r) t.row(r) /= t.row(r).sum();
    out.push_back(std::move(t));
  }
  return out;
}

void BM_BatchBaldExact(benchmark::State& state) {
  Rng rng(1);
  const auto tables = random_tables(static_cast<std::size_t>(state.range(0)), 100, rng);
  AcquisitionConfig cfg;
  cfg.batch_size = tables.size();
  for (auto _ : state) benchmark::DoNotOptimize(batchbald_score(std::span<const Matrix>(tables), cfg));
}
BENCHMARK(BM_BatchBaldExact)->Arg(2)->Arg(3)->Arg(4);

void BM_GreedySelectTables(benchmark::State& state) {
  Rng rng(2);
  const auto tables = random_tables(static_cast<std::size_t>(state.range(0)), 100, rng);
  AcquisitionConfig cfg;
  cfg.mc_samples = 100;
  for (auto _ : state) {
    Rng r(3);
    benchmark::DoNotOptimize(greedy_select_tables(tables, cfg, r));
  }
}
BENCHMARK(BM_GreedySelectTables)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_LearnerSampleProba(benchmark::State& state) {
  Rng rng(4);
  const MlpClassifier model(MlpSpec::learner(), true, 100, rng);
  const Matrix x = random_inputs(static_cast<std::size_t>(state.range(0)), 784, rng);
  const auto thetas = model.draw_thetas(100, rng);
  for (auto _ : state) benchmark::DoNotOptimize(model.sample_proba(x, thetas));
}
BENCHMARK(BM_LearnerSampleProba)->Arg(100)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_CodecProject(benchmark::State& state) {
  Rng rng(5);
  CodecConfig cfg;
  cfg.ratio = 0.99;
  const std::size_t m = cfg.compressed_dim();
  Matrix z = random_inputs(cfg.stacked_dim(), m, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Eigen::MatrixXd(z).eval());
  z = Eigen::MatrixXd(qr.householderQ()).leftCols(static_cast<Eigen::Index>(m));
  const MixupCodec codec(cfg, z, Vector::Ones(static_cast<Eigen::Index>(m)));
  const Matrix batch = random_inputs(cfg.batch, cfg.dim, rng);
  for (auto _ : state) benchmark::DoNotOptimize(codec.project(batch));
}
BENCHMARK(BM_CodecProject);

}  // namespace
BENCHMARK_MAIN();
