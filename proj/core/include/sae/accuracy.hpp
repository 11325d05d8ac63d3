#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sae/frame.hpp"
#include "sae/gbt.hpp"
#include "sae/lmm.hpp"
#include "sae/predictor.hpp"

namespace sae {

enum class PredictorKind { lmm, gb };

PredictorKind predictor_kind_from_string(const std::string& s);
std::string to_string(PredictorKind k);

/// One predictor to be refitted inside every bootstrap iteration. GB
/// hyperparameters are tuned once on the original sample and held fixed
/// across refits.
struct PredictorSetup {
  PredictorKind kind = PredictorKind::lmm;
  GbHyperparams gb_hp{};
  GbFeatureOptions gb_feat{};
};

/// Bootstrap prediction errors for one predictor. first_level holds
/// u*(b); its length is B, or B + 1 when produced for the telescoping
/// estimator. second_level, when present, is the B x C matrix of u**(b,c).
struct ErrorSample {
  std::vector<double> first_level;
  std::vector<std::vector<double>> second_level;
  int B = 0;
  int C = 0;
};

struct BootstrapResult {
  std::vector<ErrorSample> per_predictor;  // aligned with the setups
  int failed_redraws = 0;
  bool correction_skipped = false;
};

/// Parametric bootstrap (normal effects simulated from the fitted LMM).
/// All predictors share the generated population within an iteration, so
/// cross-predictor comparisons share Monte Carlo noise. Iterations whose
/// refit fails are re-drawn with a derived seed and counted.
BootstrapResult parametric_bootstrap(const LmmFit& fit, const LongFrame& frame,
                                     const std::vector<std::string>& aux_selection,
                                     const std::vector<PredictorSetup>& predictors,
                                     const ThetaSpec& spec, int B,
                                     std::uint64_t seed, int n_threads = 1);

/// Residual bootstrap: populations are X beta_hat plus domain effects and
/// unit-level residuals resampled with replacement from the fitted pools.
/// With corrected = true both pools are first centered and rescaled so
/// their empirical (divisor-n) variances match the REML estimates; a
/// zero-variance pool skips the correction and sets correction_skipped.
BootstrapResult residual_bootstrap(const LmmFit& fit, const LongFrame& frame,
                                   const std::vector<std::string>& aux_selection,
                                   const std::vector<PredictorSetup>& predictors,
                                   const ThetaSpec& spec, int B,
                                   std::uint64_t seed, bool corrected,
                                   int n_threads = 1);

/// Double bootstrap: parametric first level (B + 1 iterations when
/// telescoping), and within each first-level iteration the LMM is
/// refitted on the generated sample and C second-level populations are
/// simulated from those estimates.
BootstrapResult double_bootstrap(const LmmFit& fit, const LongFrame& frame,
                                 const std::vector<std::string>& aux_selection,
                                 const std::vector<PredictorSetup>& predictors,
                                 const ThetaSpec& spec, int B, int C,
                                 std::uint64_t seed, bool telescoping,
                                 int n_threads = 1);

// ---- RMSE / QAPE estimators on error samples ----

/// sqrt(B^-1 sum u*(b)^2).
double rmse_estimate(std::span<const double> errors);

/// Rank-ceil(p*B) order statistic of the absolute errors.
double qape_estimate(std::span<const double> errors, double p);

/// B^-1 sum over the first B entries of u*(b)^2 (the parametric MSE term
/// shared by every double-bootstrap estimator).
double mse_param(const ErrorSample& sample);

/// Mean of u**(b,c)^2 over all B x C second-level errors.
double mse_db_2lev(const ErrorSample& sample);

/// Classic double-bootstrap MSE, C >= 1: B^-1 sum_b [2 u*(b)^2 -
/// C^-1 sum_c u**(b,c)^2]. May be negative.
double mse_db_c(const ErrorSample& sample);

/// Davidson-MacKinnon special case, C = 1. May be negative.
double mse_db1(const ErrorSample& sample);

/// Telescoping MSE, C = 1; requires B + 1 first-level errors.
double mse_db_tel(const ErrorSample& sample);

/// Hall-Maiti modification of the classic estimator; always >= 0.
double mse_db_chm(const ErrorSample& sample);

/// Erciulescu-Fuller gated modifications, C = 1; q defaults to 0.77.
double mse_db1_ef(const ErrorSample& sample, double q = 0.77);
double mse_db_tel_ef(const ErrorSample& sample, double q = 0.77);

enum class DbVariant { dbC, db1, dbTel };

/// Modified double-bootstrap errors: sqrt of the corrected square when it
/// is >= 0, else fallback to u*(b).
std::vector<double> modified_db_errors(const ErrorSample& sample,
                                       DbVariant variant);

/// Rank-ceil(p*B) order statistic of |modified_db_errors|.
double qape_db(const ErrorSample& sample, double p, DbVariant variant);

// ---- report ----

struct AccuracyCell {
  std::string predictor;  // "lmm" / "gb"
  std::string estimator;  // param, rb, rbCor, db1, dbTel, db1HM, db1EF, dbTelEF
  std::string measure;    // "RMSE" / "QAPE"
  double p = 0.0;         // QAPE order, 0 for RMSE
  double value = 0.0;
};

struct AccuracyReport {
  std::vector<AccuracyCell> cells;
  int B = 0;
  int C = 0;
  std::uint64_t seed = 0;
  int failed_redraws = 0;
  bool correction_skipped = false;
};

/// Runs the bootstrap schemes needed by the requested estimator variants
/// and fills every (predictor, estimator, measure, p) cell. Double
/// bootstrap variants report RMSE as sqrt(max(MSE, 0)).
AccuracyReport estimate_accuracy(const LmmFit& fit, const LongFrame& frame,
                                 const std::vector<std::string>& aux_selection,
                                 const std::vector<PredictorSetup>& predictors,
                                 const ThetaSpec& spec,
                                 const std::vector<std::string>& variants,
                                 const std::vector<double>& qape_orders,
                                 int B, int C, std::uint64_t seed,
                                 int n_threads = 1);

}  // namespace sae
