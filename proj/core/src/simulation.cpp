#include "sae/simulation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_map>

#include "sae/errors.hpp"
#include "sae/gbt.hpp"
#include "sae/parallel.hpp"
#include "sae/rng.hpp"

namespace sae {

ScenarioKind scenario_kind_from_string(const std::string& s) {
  if (s == "LM") return ScenarioKind::LM;
  if (s == "NLM1") return ScenarioKind::NLM1;
  if (s == "NLM10") return ScenarioKind::NLM10;
  if (s == "NLM20") return ScenarioKind::NLM20;
  throw ConfigError("unknown scenario '" + s + "'");
}

std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::LM: return "LM";
    case ScenarioKind::NLM1: return "NLM1";
    case ScenarioKind::NLM10: return "NLM10";
    case ScenarioKind::NLM20: return "NLM20";
  }
  return "?";
}

double scenario_scale_divisor(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::NLM10: return 10.0;
    case ScenarioKind::NLM20: return 20.0;
    default: return 1.0;
  }
}

void ScenarioSpec::validate() const {
  const Eigen::Index expect = kind == ScenarioKind::LM ? 3 : 6;
  if (beta_pop.size() != expect) {
    throw ConfigError("scenario " + to_string(kind) + " needs " +
                      std::to_string(expect) + " coefficients");
  }
  if (sigma2_u_pop < 0.0 || sigma2_e_pop < 0.0) {
    throw ConfigError("scenario variances must be >= 0");
  }
  if (a != scenario_scale_divisor(kind)) {
    throw ConfigError("scale divisor inconsistent with scenario kind");
  }
}

Eigen::MatrixXd scenario_design(ScenarioKind kind, const LongFrame& frame,
                                const std::array<std::string, 3>& aux_cols,
                                const std::vector<std::size_t>& rows) {
  std::array<std::size_t, 3> col{};
  for (std::size_t j = 0; j < 3; ++j) col[j] = frame.aux_index(aux_cols[j]);

  if (kind == ScenarioKind::LM) {
    Eigen::MatrixXd x(rows.size(), 3);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < 3; ++j) x(i, j) = frame.row(rows[i]).x[col[j]];
    }
    return x;
  }
  Eigen::MatrixXd x(rows.size(), 6);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::array<double, 3> lg{};
    for (std::size_t j = 0; j < 3; ++j) {
      const double v = frame.row(rows[i]).x[col[j]];
      if (!(v > 0.0)) {
        throw DesignError("auxiliary '" + aux_cols[j] + "' non-positive at row " +
                          std::to_string(rows[i]) + "; log undefined");
      }
      lg[j] = std::log(v);
    }
    x(i, 0) = lg[0];
    x(i, 1) = lg[1];
    x(i, 2) = lg[2];
    x(i, 3) = lg[0] * lg[1];
    x(i, 4) = lg[0] * lg[2];
    x(i, 5) = lg[1] * lg[2];
  }
  return x;
}

std::vector<double> generate_scenario(const ScenarioSpec& spec,
                                      const LongFrame& frame,
                                      std::uint64_t seed) {
  spec.validate();
  std::vector<std::size_t> all(frame.n_rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Eigen::MatrixXd x = scenario_design(spec.kind, frame, spec.aux_cols, all);
  const Eigen::VectorXd fixed = x * spec.beta_pop;

  const double sd_u = std::sqrt(spec.sigma2_u_pop) / spec.a;
  const double sd_e = std::sqrt(spec.sigma2_e_pop) / spec.a;

  rng::Stream stream = rng::derive(seed, "scenario");
  std::unordered_map<std::string, double> u;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    const std::string& d = frame.row(i).domain_id;
    if (!u.count(d)) {
      u.emplace(d, 0.0);
      order.push_back(d);
    }
  }
  // standard-normal draws first, scaling after: common random numbers
  // across scale divisors
  for (const std::string& d : order) u[d] = sd_u * stream.normal();
  std::vector<double> y(frame.n_rows());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = fixed[static_cast<Eigen::Index>(i)] + u[frame.row(i).domain_id] +
           sd_e * stream.normal();
  }
  return y;
}

ScenarioSpec calibrate_params(const LongFrame& frame, ScenarioKind kind,
                              const std::array<std::string, 3>& aux_cols) {
  std::vector<std::size_t> all(frame.n_rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Eigen::MatrixXd x = scenario_design(kind, frame, aux_cols, all);
  Eigen::VectorXd y(frame.n_rows());
  std::vector<std::string> domains(frame.n_rows());
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    if (!frame.row(i).y) {
      throw DesignError("calibration needs a full population response; row " +
                        std::to_string(i) + " has none");
    }
    y[static_cast<Eigen::Index>(i)] = *frame.row(i).y;
    domains[i] = frame.row(i).domain_id;
  }
  const LmmFit fit = fit_reml(x, y, domains);

  ScenarioSpec spec;
  spec.kind = kind;
  spec.beta_pop = fit.beta;
  spec.sigma2_u_pop = fit.sigma2_u;
  spec.sigma2_e_pop = fit.sigma2_e;
  spec.a = scenario_scale_divisor(kind);
  spec.aux_cols = aux_cols;
  return spec;
}

LongFrame synthetic_frame(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.aux_names.size() != spec.log_mean.size() ||
      spec.aux_names.size() != spec.log_sd.size()) {
    throw ConfigError("synthetic auxiliary name/parameter counts differ");
  }
  rng::Stream stream = rng::derive(seed, "synthetic");
  std::vector<UnitRecord> rows;
  rows.reserve(static_cast<std::size_t>(spec.n_domains) *
               static_cast<std::size_t>(spec.units_per_domain) *
               static_cast<std::size_t>(spec.n_periods));
  for (int d = 0; d < spec.n_domains; ++d) {
    for (int i = 0; i < spec.units_per_domain; ++i) {
      // auxiliaries are per unit, constant over periods (frame data style)
      std::vector<double> x(spec.aux_names.size());
      for (std::size_t j = 0; j < x.size(); ++j) {
        x[j] = std::exp(spec.log_mean[j] + spec.log_sd[j] * stream.normal());
      }
      for (int t = 1; t <= spec.n_periods; ++t) {
        UnitRecord r;
        r.domain_id = "D" + std::to_string(d + 1);
        r.unit_id = "U" + std::to_string(d + 1) + "_" + std::to_string(i + 1);
        r.period = t;
        r.x = x;
        rows.push_back(std::move(r));
      }
    }
  }
  return LongFrame::from_rows(std::move(rows), spec.aux_names);
}

void McConfig::validate() const {
  if (K < 1 || B < 1 || C < 0) throw ConfigError("K,B must be >= 1 and C >= 0");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("sample fraction must lie in (0,1]");
  }
  if (thetas.empty()) throw ConfigError("no theta specs");
  if (predictors.empty()) throw ConfigError("no predictors");
}

namespace {

std::uint64_t subseed(std::uint64_t s, std::string_view tag, std::uint64_t a) {
  return rng::mix(rng::mix(s ^ rng::hash_tag(tag)) ^ a);
}

LongFrame ensure_sample(const McConfig& config, const LongFrame& frame) {
  if (frame.n_sampled() > 0) return frame;
  // the design operation must work on response-less population frames;
  // a placeholder response keeps the frame invariants satisfied and is
  // overwritten by every generated population
  const bool missing_y = std::any_of(
      frame.rows().begin(), frame.rows().end(),
      [](const UnitRecord& r) { return !r.y.has_value(); });
  const LongFrame base =
      missing_y ? frame.with_response(std::vector<double>(frame.n_rows(), 0.0))
                : frame;
  return draw_panel_sample(base, config.fraction,
                           subseed(config.seed, "sample", 0));
}

struct IterationFit {
  std::vector<double> y_full;
  LmmFit lmm;
  std::vector<GbModel> gb;  // aligned with gb predictors
};

/// Fits every configured predictor on the k-th generated sample.
IterationFit fit_iteration(const McConfig& config, const ScenarioSpec& spec,
                           const LongFrame& sampled, std::uint64_t k) {
  IterationFit out;
  out.y_full = generate_scenario(spec, sampled, subseed(config.seed, "mc", k));
  const LongFrame frame_k = sampled.with_response(out.y_full);
  for (const PredictorSetup& ps : config.predictors) {
    if (ps.kind == PredictorKind::lmm) {
      out.lmm = fit_reml(frame_k, config.lmm_aux);
    } else {
      const std::vector<std::size_t> rows_s = frame_k.sampled_indices();
      const Eigen::MatrixXd f_s = gb_features(frame_k, rows_s, ps.gb_feat);
      Eigen::VectorXd y_s(rows_s.size());
      for (std::size_t i = 0; i < rows_s.size(); ++i) {
        y_s[static_cast<Eigen::Index>(i)] = *frame_k.row(rows_s[i]).y;
      }
      out.gb.push_back(fit_gb(f_s, y_s, ps.gb_hp,
                              subseed(config.seed, "mc-gb", k)));
    }
  }
  return out;
}

double predict_theta(const McConfig& config, const LongFrame& frame_k,
                     const IterationFit& fits, std::size_t pi,
                     const ThetaSpec& theta) {
  const PredictorSetup& ps = config.predictors[pi];
  if (ps.kind == PredictorKind::lmm) {
    return plug_in_predict_lmm(frame_k, fits.lmm, config.lmm_aux, theta);
  }
  std::size_t gi = 0;
  for (std::size_t q = 0; q < pi; ++q) {
    if (config.predictors[q].kind == PredictorKind::gb) ++gi;
  }
  return plug_in_predict_gb(frame_k, fits.gb[gi], ps.gb_feat, theta);
}

}  // namespace

MeasureTable mc_predictors(const McConfig& config, const ScenarioSpec& spec,
                           const LongFrame& frame) {
  config.validate();
  spec.validate();
  const LongFrame sampled = ensure_sample(config, frame);
  const std::size_t n_pred = config.predictors.size();
  const std::size_t n_theta = config.thetas.size();
  const std::size_t K = static_cast<std::size_t>(config.K);

  std::vector<std::vector<std::size_t>> masks;
  for (const ThetaSpec& t : config.thetas) {
    masks.push_back(subset_mask(sampled, t.domain, t.period));
  }

  // truth[ti][k], err[pi][ti][k]
  std::vector<std::vector<double>> truth(n_theta, std::vector<double>(K));
  std::vector<std::vector<std::vector<double>>> err(
      n_pred, std::vector<std::vector<double>>(n_theta, std::vector<double>(K)));
  std::atomic<int> redraws{0};

  parallel_for(K, config.n_threads, [&](std::size_t k) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 64) throw FitError("Monte Carlo iteration failed repeatedly");
      try {
        const IterationFit fits =
            fit_iteration(config, spec, sampled,
                          k + attempt * 0x9e3779b9ULL * static_cast<std::uint64_t>(config.K + 1));
        const LongFrame frame_k = sampled.with_response(fits.y_full);
        for (std::size_t ti = 0; ti < n_theta; ++ti) {
          truth[ti][k] = characteristic_of(config.thetas[ti], fits.y_full, masks[ti]);
          for (std::size_t pi = 0; pi < n_pred; ++pi) {
            err[pi][ti][k] =
                predict_theta(config, frame_k, fits, pi, config.thetas[ti]) -
                truth[ti][k];
          }
        }
        return;
      } catch (const FitError&) {
        throw;
      } catch (const std::exception&) {
        redraws.fetch_add(1);
      }
    }
  });

  MeasureTable table;
  table.K = config.K;
  table.seed = config.seed;
  table.failed_redraws = redraws.load();
  for (std::size_t pi = 0; pi < n_pred; ++pi) {
    for (std::size_t ti = 0; ti < n_theta; ++ti) {
      double sum_t = 0.0, sum_e = 0.0, sum_e2 = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        sum_t += truth[ti][k];
        sum_e += err[pi][ti][k];
        sum_e2 += err[pi][ti][k] * err[pi][ti][k];
      }
      const double mean_t = sum_t / static_cast<double>(K);
      const double rmse = std::sqrt(sum_e2 / static_cast<double>(K));
      auto emit = [&](const std::string& measure, double p, double value) {
        table.rows.push_back(MeasureRow{
            to_string(spec.kind), to_string(config.predictors[pi].kind), "",
            config.thetas[ti].label(), measure, p, value});
      };
      emit("rB", 0.0, 100.0 * (sum_e / static_cast<double>(K)) / mean_t);
      emit("rRMSE", 0.0, 100.0 * rmse / mean_t);
      emit("RMSE", 0.0, rmse);
      for (double p : config.qape_orders) {
        std::vector<double> abs_e(K);
        for (std::size_t k = 0; k < K; ++k) abs_e[k] = std::abs(err[pi][ti][k]);
        emit("QAPE", p, quantile_lower(std::move(abs_e), p));
      }
    }
  }
  return table;
}

MeasureTable mc_accuracy_estimators(const McConfig& config,
                                    const ScenarioSpec& spec,
                                    const LongFrame& frame) {
  config.validate();
  spec.validate();
  if (config.B < 2) throw ConfigError("estimator study needs B >= 2");
  const LongFrame sampled = ensure_sample(config, frame);
  const std::size_t n_pred = config.predictors.size();
  const std::size_t n_theta = config.thetas.size();
  const std::size_t K = static_cast<std::size_t>(config.K);

  std::vector<std::vector<std::size_t>> masks;
  for (const ThetaSpec& t : config.thetas) {
    masks.push_back(subset_mask(sampled, t.domain, t.period));
  }

  std::vector<std::vector<std::vector<double>>> err(
      n_pred, std::vector<std::vector<double>>(n_theta, std::vector<double>(K)));
  // estimator reports per (theta, k); cell layout identical across k
  std::vector<std::vector<AccuracyReport>> reports(
      n_theta, std::vector<AccuracyReport>(K));
  std::atomic<int> redraws{0};

  parallel_for(K, config.n_threads, [&](std::size_t k) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 64) throw FitError("Monte Carlo iteration failed repeatedly");
      try {
        const IterationFit fits =
            fit_iteration(config, spec, sampled,
                          k + attempt * 0x9e3779b9ULL * static_cast<std::uint64_t>(config.K + 1));
        const LongFrame frame_k = sampled.with_response(fits.y_full);
        LmmFit lmm_k = fits.lmm;
        if (lmm_k.beta.size() == 0) lmm_k = fit_reml(frame_k, config.lmm_aux);
        for (std::size_t ti = 0; ti < n_theta; ++ti) {
          const double truth_k =
              characteristic_of(config.thetas[ti], fits.y_full, masks[ti]);
          for (std::size_t pi = 0; pi < n_pred; ++pi) {
            err[pi][ti][k] =
                predict_theta(config, frame_k, fits, pi, config.thetas[ti]) -
                truth_k;
          }
          reports[ti][k] = estimate_accuracy(
              lmm_k, frame_k, config.lmm_aux, config.predictors,
              config.thetas[ti], config.estimator_variants, config.qape_orders,
              config.B, config.C, subseed(config.seed, "acc", k), 1);
        }
        return;
      } catch (const FitError&) {
        throw;
      } catch (const std::exception&) {
        redraws.fetch_add(1);
      }
    }
  });

  MeasureTable table;
  table.K = config.K;
  table.B = config.B;
  table.C = config.C;
  table.seed = config.seed;
  table.failed_redraws = redraws.load();

  for (std::size_t ti = 0; ti < n_theta; ++ti) {
    // empirical truths per predictor
    std::vector<double> truth_rmse(n_pred);
    std::vector<std::unordered_map<double, double>> truth_qape(n_pred);
    for (std::size_t pi = 0; pi < n_pred; ++pi) {
      double s2 = 0.0;
      for (double e : err[pi][ti]) s2 += e * e;
      truth_rmse[pi] = std::sqrt(s2 / static_cast<double>(K));
      for (double p : config.qape_orders) {
        std::vector<double> abs_e(K);
        for (std::size_t k = 0; k < K; ++k) abs_e[k] = std::abs(err[pi][ti][k]);
        truth_qape[pi][p] = quantile_lower(std::move(abs_e), p);
      }
    }

    const std::vector<AccuracyCell>& layout = reports[ti][0].cells;
    for (std::size_t ci = 0; ci < layout.size(); ++ci) {
      const AccuracyCell& cell = layout[ci];
      std::size_t pi = 0;
      for (std::size_t q = 0; q < n_pred; ++q) {
        if (to_string(config.predictors[q].kind) == cell.predictor) pi = q;
      }
      const double truth = cell.measure == "RMSE" ? truth_rmse[pi]
                                                  : truth_qape[pi][cell.p];
      double sum = 0.0, sum_sq_dev = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double v = reports[ti][k].cells[ci].value;
        sum += v;
        sum_sq_dev += (v - truth) * (v - truth);
      }
      auto emit = [&](const std::string& measure, double value) {
        table.rows.push_back(MeasureRow{
            to_string(spec.kind), cell.predictor, cell.estimator,
            config.thetas[ti].label(), measure, cell.p, value});
      };
      const std::string base = cell.measure == "RMSE" ? "RMSE" : "QAPE";
      emit("rB(" + base + ")",
           100.0 * (sum / static_cast<double>(K) - truth) / truth);
      emit("rRMSE(" + base + ")",
           100.0 * std::sqrt(sum_sq_dev / static_cast<double>(K)) / truth);
    }
    // truth rows, for reference plots
    for (std::size_t pi = 0; pi < n_pred; ++pi) {
      table.rows.push_back(MeasureRow{
          to_string(spec.kind), to_string(config.predictors[pi].kind), "truth",
          config.thetas[ti].label(), "RMSE", 0.0, truth_rmse[pi]});
      for (double p : config.qape_orders) {
        table.rows.push_back(MeasureRow{
            to_string(spec.kind), to_string(config.predictors[pi].kind),
            "truth", config.thetas[ti].label(), "QAPE", p, truth_qape[pi][p]});
      }
    }
  }
  return table;
}

}  // namespace sae
