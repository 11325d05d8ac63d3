#include <benchmark/benchmark.h>

#include <Eigen/Dense>

#include "sae/accuracy.hpp"
#include "sae/frame.hpp"
#include "sae/gbt.hpp"
#include "sae/lmm.hpp"
#include "sae/predictor.hpp"
#include "sae/rng.hpp"
#include "sae/simulation.hpp"

namespace {

sae::LongFrame bench_frame(int n_domains, int units_per_domain, int n_periods) {
  sae::SyntheticSpec sp;
  sp.n_domains = n_domains;
  sp.units_per_domain = units_per_domain;
  sp.n_periods = n_periods;
  const sae::LongFrame base = sae::synthetic_frame(sp, 9);

  sae::ScenarioSpec spec;
  spec.kind = sae::ScenarioKind::LM;
  spec.beta_pop = Eigen::VectorXd(3);
  spec.beta_pop << 1.0, 0.5, 0.8;
  spec.sigma2_u_pop = 0.2;
  spec.sigma2_e_pop = 0.4;
  const sae::LongFrame with_y =
      base.with_response(sae::generate_scenario(spec, base, 13));
  return sae::draw_panel_sample(with_y, 0.2, 3);
}

void bm_reml_fit(benchmark::State& state) {
  const sae::LongFrame frame =
      bench_frame(static_cast<int>(state.range(0)), 20, 3);
  const std::vector<std::string> aux{"x1", "x4", "x7"};
  for (auto _ : state) {
    benchmark::DoNotOptimize(sae::fit_reml(frame, aux));
  }
}
BENCHMARK(bm_reml_fit)->Arg(10)->Arg(40);

void bm_gb_fit(benchmark::State& state) {
  const sae::LongFrame frame = bench_frame(10, 20, 3);
  const std::vector<std::size_t> rows = frame.sampled_indices();
  const Eigen::MatrixXd x = sae::gb_features(frame, rows, {});
  Eigen::VectorXd y(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    y[static_cast<Eigen::Index>(i)] = *frame.row(rows[i]).y;
  }
  sae::GbHyperparams hp;
  hp.eta = 0.1;
  hp.n_rounds = static_cast<int>(state.range(0));
  hp.max_depth = 2;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sae::fit_gb(x, y, hp, 5));
  }
}
BENCHMARK(bm_gb_fit)->Arg(25)->Arg(100);

void bm_parametric_bootstrap(benchmark::State& state) {
  const sae::LongFrame frame = bench_frame(10, 20, 3);
  const std::vector<std::string> aux{"x1", "x4", "x7"};
  const sae::LmmFit fit = sae::fit_reml(frame, aux);
  sae::ThetaSpec theta;
  theta.statistic = sae::Statistic::mean;
  theta.domain = "D1";
  theta.period = 3;
  const int B = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(sae::parametric_bootstrap(
        fit, frame, aux, {sae::PredictorSetup{}}, theta, B, 17));
  }
}
BENCHMARK(bm_parametric_bootstrap)->Arg(10)->Arg(50);

}  // namespace

BENCHMARK_MAIN();
