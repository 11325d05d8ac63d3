#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sae/accuracy.hpp"
#include "sae/frame.hpp"
#include "sae/lmm.hpp"
#include "sae/predictor.hpp"

namespace sae {

enum class ScenarioKind { LM, NLM1, NLM10, NLM20 };

ScenarioKind scenario_kind_from_string(const std::string& s);
std::string to_string(ScenarioKind k);

/// Scale divisor applied to the random-component standard deviations:
/// 1 for LM and NLM1, 10 for NLM10, 20 for NLM20.
double scenario_scale_divisor(ScenarioKind k);

/// Data-generating model for one simulation scenario. LM is linear in
/// three auxiliaries; the NLM kinds use their logs plus the three
/// pairwise log-log interactions (6 coefficients).
struct ScenarioSpec {
  ScenarioKind kind = ScenarioKind::LM;
  Eigen::VectorXd beta_pop;
  double sigma2_u_pop = 0.0;
  double sigma2_e_pop = 0.0;
  double a = 1.0;
  std::array<std::string, 3> aux_cols{"x1", "x4", "x7"};

  void validate() const;
};

/// Fixed-effect design of the scenario's mean structure over the given
/// rows. NLM kinds require strictly positive auxiliaries (logs taken).
Eigen::MatrixXd scenario_design(ScenarioKind kind, const LongFrame& frame,
                                const std::array<std::string, 3>& aux_cols,
                                const std::vector<std::size_t>& rows);

/// Generates a population response under the scenario. Standard-normal
/// draws are independent of the scale divisor, so NLM1/NLM10/NLM20 with
/// the same seed share the fixed part and their random deviations scale
/// exactly by 1/a.
std::vector<double> generate_scenario(const ScenarioSpec& spec,
                                      const LongFrame& frame,
                                      std::uint64_t seed);

/// REML fit of the scenario's mean structure on the full population
/// (requires y on every row); returns a spec carrying those estimates.
ScenarioSpec calibrate_params(const LongFrame& frame, ScenarioKind kind,
                              const std::array<std::string, 3>& aux_cols = {
                                  "x1", "x4", "x7"});

/// Built-in synthetic population: positive log-normal auxiliaries so the
/// NLM log transforms are always defined. Responses are left absent.
struct SyntheticSpec {
  int n_domains = 10;
  int units_per_domain = 20;
  int n_periods = 3;
  std::vector<std::string> aux_names{"x1", "x4", "x7"};
  std::vector<double> log_mean{0.0, 0.0, 0.0};  // per column
  std::vector<double> log_sd{0.5, 0.5, 0.5};
};

LongFrame synthetic_frame(const SyntheticSpec& spec, std::uint64_t seed);

struct McConfig {
  int K = 200;
  int B = 200;
  int C = 1;
  double fraction = 0.2;
  std::vector<ThetaSpec> thetas;
  std::vector<PredictorSetup> predictors;
  std::vector<std::string> lmm_aux{"x1", "x4", "x7"};
  std::vector<std::string> estimator_variants{"param", "rb", "rbCor"};
  std::vector<double> qape_orders{0.5, 0.75, 0.99};
  std::uint64_t seed = 1;
  int n_threads = 1;

  void validate() const;
};

/// One measure value of a Monte Carlo study. `estimator` is empty for
/// the predictor study.
struct MeasureRow {
  std::string scenario;
  std::string predictor;
  std::string estimator;
  std::string theta;
  std::string measure;  // rB, rRMSE, RMSE, QAPE
  double p = 0.0;
  double value = 0.0;
};

struct MeasureTable {
  std::vector<MeasureRow> rows;
  int K = 0, B = 0, C = 0;
  std::uint64_t seed = 0;
  int failed_redraws = 0;
};

/// Predictor study: per iteration, generate a population, evaluate the
/// truth, fit every predictor on the panel sample, and report rB, rRMSE,
/// RMSE, and QAPE per predictor x theta. Both predictor kinds see the
/// same generated population within an iteration.
MeasureTable mc_predictors(const McConfig& config, const ScenarioSpec& spec,
                           const LongFrame& frame);

/// Accuracy-estimator study: per iteration, additionally run the
/// requested bootstrap estimators; reports their rB and rRMSE against
/// the empirical RMSE / QAPE truth over all K iterations.
MeasureTable mc_accuracy_estimators(const McConfig& config,
                                    const ScenarioSpec& spec,
                                    const LongFrame& frame);

}  // namespace sae
