#include "sae/accuracy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>

#include "sae/errors.hpp"
#include "sae/parallel.hpp"
#include "sae/rng.hpp"

namespace sae {

PredictorKind predictor_kind_from_string(const std::string& s) {
  if (s == "lmm") return PredictorKind::lmm;
  if (s == "gb") return PredictorKind::gb;
  throw ConfigError("unknown predictor kind '" + s + "'");
}

std::string to_string(PredictorKind k) {
  return k == PredictorKind::lmm ? "lmm" : "gb";
}

namespace {

std::uint64_t subseed(std::uint64_t s, std::string_view tag,
                      std::uint64_t a = 0, std::uint64_t b = 0) {
  return rng::mix(rng::mix(rng::mix(s ^ rng::hash_tag(tag)) ^ a) ^ b);
}

constexpr int kMaxRedraws = 64;

/// Everything about the frame that is constant across bootstrap
/// iterations (designs, features, masks); shared read-only by workers.
struct Workspace {
  std::vector<std::size_t> rows_s, rows_r, mask;
  Eigen::MatrixXd x_s, x_r, x_all;  // LMM design matrices
  std::vector<std::string> dom_s, dom_r, dom_all;
  std::vector<Eigen::MatrixXd> f_s, f_r;  // GB features, per predictor
  std::size_t n_rows = 0;

  Workspace(const LongFrame& frame, const std::vector<std::string>& aux,
            const std::vector<PredictorSetup>& predictors,
            const ThetaSpec& spec) {
    n_rows = frame.n_rows();
    rows_s = frame.sampled_indices();
    rows_r = frame.unsampled_indices();
    mask = subset_mask(frame, spec.domain, spec.period);
    std::vector<std::size_t> all(n_rows);
    for (std::size_t i = 0; i < n_rows; ++i) all[i] = i;
    x_s = design_matrix(frame, aux, rows_s);
    x_r = design_matrix(frame, aux, rows_r);
    x_all = design_matrix(frame, aux, all);
    for (std::size_t i : rows_s) dom_s.push_back(frame.row(i).domain_id);
    for (std::size_t i : rows_r) dom_r.push_back(frame.row(i).domain_id);
    for (std::size_t i = 0; i < n_rows; ++i) {
      dom_all.push_back(frame.row(i).domain_id);
    }
    for (const PredictorSetup& ps : predictors) {
      if (ps.kind == PredictorKind::gb) {
        f_s.push_back(gb_features(frame, rows_s, ps.gb_feat));
        f_r.push_back(gb_features(frame, rows_r, ps.gb_feat));
      } else {
        f_s.emplace_back();
        f_r.emplace_back();
      }
    }
  }

  Eigen::VectorXd sample_response(const std::vector<double>& y_full) const {
    Eigen::VectorXd y(rows_s.size());
    for (std::size_t i = 0; i < rows_s.size(); ++i) y[i] = y_full[rows_s[i]];
    return y;
  }
};

/// Refits one predictor on the generated sample and evaluates the
/// plug-in predictor over the mask. Throws on refit failure.
double refit_and_predict(const Workspace& ws, const PredictorSetup& ps,
                         std::size_t pi, const std::vector<double>& y_full,
                         const ThetaSpec& spec, std::uint64_t iter_seed,
                         LmmFit* refit_out = nullptr) {
  const Eigen::VectorXd y_s = ws.sample_response(y_full);
  std::vector<double> composed = y_full;  // sampled entries stay observed
  if (ps.kind == PredictorKind::lmm) {
    LmmFit refit = fit_reml(ws.x_s, y_s, ws.dom_s);
    Eigen::VectorXd fitted = ws.x_r * refit.beta;
    for (std::size_t i = 0; i < ws.rows_r.size(); ++i) {
      auto it = refit.v_hat.find(ws.dom_r[i]);
      if (it != refit.v_hat.end()) fitted[static_cast<Eigen::Index>(i)] += it->second;
    }
    for (std::size_t i = 0; i < ws.rows_r.size(); ++i) {
      composed[ws.rows_r[i]] = fitted[static_cast<Eigen::Index>(i)];
    }
    if (refit_out) *refit_out = std::move(refit);
  } else {
    const GbModel model =
        fit_gb(ws.f_s[pi], y_s, ps.gb_hp, subseed(iter_seed, "gb-refit", pi));
    const Eigen::VectorXd fitted = predict_gb(model, ws.f_r[pi]);
    for (std::size_t i = 0; i < ws.rows_r.size(); ++i) {
      composed[ws.rows_r[i]] = fitted[static_cast<Eigen::Index>(i)];
    }
  }
  return characteristic_of(spec, composed, ws.mask);
}

/// LMM refit on the generated sample only (Appendix step used by the
/// double bootstrap second level).
LmmParams refit_params(const Workspace& ws, const std::vector<double>& y_full) {
  const LmmFit refit = fit_reml(ws.x_s, ws.sample_response(y_full), ws.dom_s);
  return LmmParams{refit.beta, refit.sigma2_u, refit.sigma2_e};
}

using Generator =
    std::function<std::vector<double>(std::uint64_t draw_seed)>;

/// One first-level iteration with redraw-on-failure; returns the
/// generated population and fills per-predictor errors.
std::vector<double> first_level_iteration(
    const Workspace& ws, const std::vector<PredictorSetup>& predictors,
    const ThetaSpec& spec, const Generator& generate, std::uint64_t seed,
    std::uint64_t b, std::vector<double>& errors_out,
    std::atomic<int>& redraws) {
  for (int attempt = 0;; ++attempt) {
    if (attempt > kMaxRedraws) {
      throw FitError("bootstrap iteration failed after " +
                     std::to_string(kMaxRedraws) + " redraws");
    }
    const std::uint64_t draw_seed = subseed(seed, "boot1", b, attempt);
    const std::vector<double> y_full = generate(draw_seed);
    try {
      const double theta_star = characteristic_of(spec, y_full, ws.mask);
      for (std::size_t pi = 0; pi < predictors.size(); ++pi) {
        const double theta_hat = refit_and_predict(
            ws, predictors[pi], pi, y_full, spec, draw_seed);
        errors_out[pi] = theta_hat - theta_star;
      }
      return y_full;
    } catch (const std::exception&) {
      redraws.fetch_add(1);
    }
  }
}

BootstrapResult run_first_level(const Workspace& ws,
                                const std::vector<PredictorSetup>& predictors,
                                const ThetaSpec& spec, const Generator& generate,
                                int n_iter, int B, std::uint64_t seed,
                                int n_threads) {
  BootstrapResult result;
  result.per_predictor.resize(predictors.size());
  for (ErrorSample& es : result.per_predictor) {
    es.first_level.resize(static_cast<std::size_t>(n_iter));
    es.B = B;
    es.C = 0;
  }
  std::atomic<int> redraws{0};
  parallel_for(static_cast<std::size_t>(n_iter), n_threads, [&](std::size_t b) {
    std::vector<double> errors(predictors.size());
    first_level_iteration(ws, predictors, spec, generate, seed, b, errors,
                          redraws);
    for (std::size_t pi = 0; pi < predictors.size(); ++pi) {
      result.per_predictor[pi].first_level[b] = errors[pi];
    }
  });
  result.failed_redraws = redraws.load();
  return result;
}

}  // namespace

BootstrapResult parametric_bootstrap(const LmmFit& fit, const LongFrame& frame,
                                     const std::vector<std::string>& aux_selection,
                                     const std::vector<PredictorSetup>& predictors,
                                     const ThetaSpec& spec, int B,
                                     std::uint64_t seed, int n_threads) {
  if (B < 2) throw ConfigError("B must be >= 2");
  const Workspace ws(frame, aux_selection, predictors, spec);
  const LmmParams params{fit.beta, fit.sigma2_u, fit.sigma2_e};
  const Generator generate = [&](std::uint64_t draw_seed) {
    return simulate_population(params, ws.x_all, ws.dom_all, draw_seed);
  };
  return run_first_level(ws, predictors, spec, generate, B, B, seed, n_threads);
}

BootstrapResult residual_bootstrap(const LmmFit& fit, const LongFrame& frame,
                                   const std::vector<std::string>& aux_selection,
                                   const std::vector<PredictorSetup>& predictors,
                                   const ThetaSpec& spec, int B,
                                   std::uint64_t seed, bool corrected,
                                   int n_threads) {
  if (B < 2) throw ConfigError("B must be >= 2");
  if (fit.v_hat.size() < 2) {
    throw IdentifiabilityError("residual bootstrap needs >= 2 predicted effects");
  }
  const Workspace ws(frame, aux_selection, predictors, spec);

  // effect pool (one entry per sampled domain) and level-1 residual pool
  std::vector<double> v_pool;
  for (const auto& [d, v] : fit.v_hat) v_pool.push_back(v);
  const Eigen::VectorXd y_s = ws.sample_response([&] {
    std::vector<double> y(frame.n_rows(), 0.0);
    for (std::size_t i : ws.rows_s) y[i] = *frame.row(i).y;
    return y;
  }());
  const Eigen::VectorXd xb_s = ws.x_s * fit.beta;
  std::vector<double> e_pool(ws.rows_s.size());
  for (std::size_t i = 0; i < ws.rows_s.size(); ++i) {
    const auto it = fit.v_hat.find(ws.dom_s[i]);
    const double v = it != fit.v_hat.end() ? it->second : 0.0;
    e_pool[i] = y_s[static_cast<Eigen::Index>(i)] -
                xb_s[static_cast<Eigen::Index>(i)] - v;
  }

  bool correction_skipped = false;
  auto center_scale = [&](std::vector<double>& pool, double target_var) {
    double mean = 0.0;
    for (double v : pool) mean += v;
    mean /= static_cast<double>(pool.size());
    for (double& v : pool) v -= mean;
    double var = 0.0;
    for (double v : pool) var += v * v;
    var /= static_cast<double>(pool.size());
    if (var <= 0.0) {
      correction_skipped = true;
      return;
    }
    const double scale = std::sqrt(target_var / var);
    for (double& v : pool) v *= scale;
  };
  if (corrected) {
    center_scale(v_pool, fit.sigma2_u);
    center_scale(e_pool, fit.sigma2_e);
  }

  const Eigen::VectorXd xb_all = ws.x_all * fit.beta;
  // distinct domains of the full frame, in order of first appearance
  std::vector<std::string> domain_order;
  for (const std::string& d : ws.dom_all) {
    if (std::find(domain_order.begin(), domain_order.end(), d) ==
        domain_order.end()) {
      domain_order.push_back(d);
    }
  }

  const Generator generate = [&](std::uint64_t draw_seed) {
    rng::Stream s = rng::derive(draw_seed, "resid-sim");
    std::vector<double> v_of(domain_order.size());
    for (std::size_t d = 0; d < domain_order.size(); ++d) {
      v_of[d] = v_pool[s.uniform_int(v_pool.size())];
    }
    std::vector<double> y(ws.n_rows);
    for (std::size_t i = 0; i < ws.n_rows; ++i) {
      const std::size_t d = static_cast<std::size_t>(
          std::find(domain_order.begin(), domain_order.end(), ws.dom_all[i]) -
          domain_order.begin());
      y[i] = xb_all[static_cast<Eigen::Index>(i)] + v_of[d] +
             e_pool[s.uniform_int(e_pool.size())];
    }
    return y;
  };
  BootstrapResult result =
      run_first_level(ws, predictors, spec, generate, B, B, seed, n_threads);
  result.correction_skipped = correction_skipped;
  return result;
}

BootstrapResult double_bootstrap(const LmmFit& fit, const LongFrame& frame,
                                 const std::vector<std::string>& aux_selection,
                                 const std::vector<PredictorSetup>& predictors,
                                 const ThetaSpec& spec, int B, int C,
                                 std::uint64_t seed, bool telescoping,
                                 int n_threads) {
  if (B < 2) throw ConfigError("B must be >= 2");
  if (C < 1) throw ConfigError("C must be >= 1");
  const Workspace ws(frame, aux_selection, predictors, spec);
  const LmmParams params{fit.beta, fit.sigma2_u, fit.sigma2_e};
  const Generator generate = [&](std::uint64_t draw_seed) {
    return simulate_population(params, ws.x_all, ws.dom_all, draw_seed);
  };

  const int n_first = telescoping ? B + 1 : B;
  BootstrapResult result;
  result.per_predictor.resize(predictors.size());
  for (ErrorSample& es : result.per_predictor) {
    es.first_level.resize(static_cast<std::size_t>(n_first));
    es.second_level.assign(static_cast<std::size_t>(B),
                           std::vector<double>(static_cast<std::size_t>(C)));
    es.B = B;
    es.C = C;
  }
  std::atomic<int> redraws{0};

  parallel_for(static_cast<std::size_t>(n_first), n_threads, [&](std::size_t b) {
    std::vector<double> errors(predictors.size());
    const std::vector<double> y1 = first_level_iteration(
        ws, predictors, spec, generate, seed, b, errors, redraws);
    for (std::size_t pi = 0; pi < predictors.size(); ++pi) {
      result.per_predictor[pi].first_level[b] = errors[pi];
    }
    if (b >= static_cast<std::size_t>(B)) return;  // no second level for b = B+1

    // second level: re-estimate on the level-1 sample, then C parametric
    // draws from those estimates
    LmmParams params2;
    try {
      params2 = refit_params(ws, y1);
    } catch (const std::exception&) {
      // degenerate level-1 sample; reuse the original estimates
      params2 = params;
      redraws.fetch_add(1);
    }
    for (int c = 0; c < C; ++c) {
      for (int attempt = 0;; ++attempt) {
        if (attempt > kMaxRedraws) {
          throw FitError("second-level iteration failed after redraws");
        }
        const std::uint64_t draw_seed =
            subseed(seed, "boot2", b * 1000003ULL + static_cast<std::uint64_t>(c),
                    static_cast<std::uint64_t>(attempt));
        const std::vector<double> y2 =
            simulate_population(params2, ws.x_all, ws.dom_all, draw_seed);
        try {
          const double theta_star2 = characteristic_of(spec, y2, ws.mask);
          for (std::size_t pi = 0; pi < predictors.size(); ++pi) {
            const double theta_hat2 = refit_and_predict(
                ws, predictors[pi], pi, y2, spec, draw_seed);
            result.per_predictor[pi]
                .second_level[b][static_cast<std::size_t>(c)] =
                theta_hat2 - theta_star2;
          }
          break;
        } catch (const std::exception&) {
          redraws.fetch_add(1);
        }
      }
    }
  });
  result.failed_redraws = redraws.load();
  return result;
}

// ---- estimators ----

double rmse_estimate(std::span<const double> errors) {
  if (errors.empty()) throw EvaluationError("empty error vector");
  double s = 0.0;
  for (double u : errors) s += u * u;
  return std::sqrt(s / static_cast<double>(errors.size()));
}

double qape_estimate(std::span<const double> errors, double p) {
  if (errors.empty()) throw EvaluationError("empty error vector");
  std::vector<double> abs_errors(errors.size());
  for (std::size_t i = 0; i < errors.size(); ++i) {
    abs_errors[i] = std::abs(errors[i]);
  }
  return quantile_lower(std::move(abs_errors), p);
}

double mse_param(const ErrorSample& sample) {
  const std::size_t b_count = static_cast<std::size_t>(sample.B);
  if (sample.first_level.size() < b_count || b_count == 0) {
    throw ShapeError("first-level error vector shorter than B");
  }
  double s = 0.0;
  for (std::size_t b = 0; b < b_count; ++b) {
    s += sample.first_level[b] * sample.first_level[b];
  }
  return s / static_cast<double>(b_count);
}

double mse_db_2lev(const ErrorSample& sample) {
  if (sample.C < 1 || sample.second_level.empty()) {
    throw ShapeError("no second-level errors");
  }
  double s = 0.0;
  for (int b = 0; b < sample.B; ++b) {
    for (int c = 0; c < sample.C; ++c) {
      const double u = sample.second_level[static_cast<std::size_t>(b)]
                                          [static_cast<std::size_t>(c)];
      s += u * u;
    }
  }
  return s / (static_cast<double>(sample.B) * static_cast<double>(sample.C));
}

namespace {

/// Corrected squared errors u_i**(b)^2 per variant.
std::vector<double> corrected_squares(const ErrorSample& sample,
                                      DbVariant variant) {
  if (sample.C < 1 || sample.second_level.empty()) {
    throw ShapeError("variant requires second-level errors");
  }
  if ((variant == DbVariant::db1 || variant == DbVariant::dbTel) &&
      sample.C != 1) {
    throw ShapeError("variant requires C = 1");
  }
  if (variant == DbVariant::dbTel &&
      sample.first_level.size() != static_cast<std::size_t>(sample.B) + 1) {
    throw ShapeError("telescoping variant requires B + 1 first-level errors");
  }
  std::vector<double> sq(static_cast<std::size_t>(sample.B));
  for (int b = 0; b < sample.B; ++b) {
    const double u1 = sample.first_level[static_cast<std::size_t>(b)];
    double mean2 = 0.0;
    for (int c = 0; c < sample.C; ++c) {
      const double u2 = sample.second_level[static_cast<std::size_t>(b)]
                                           [static_cast<std::size_t>(c)];
      mean2 += u2 * u2;
    }
    mean2 /= static_cast<double>(sample.C);
    switch (variant) {
      case DbVariant::dbC:
      case DbVariant::db1:
        sq[static_cast<std::size_t>(b)] = 2.0 * u1 * u1 - mean2;
        break;
      case DbVariant::dbTel: {
        const double u_next = sample.first_level[static_cast<std::size_t>(b) + 1];
        sq[static_cast<std::size_t>(b)] = u1 * u1 + u_next * u_next - mean2;
        break;
      }
    }
  }
  return sq;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

double mse_db_c(const ErrorSample& sample) {
  return mean_of(corrected_squares(sample, DbVariant::dbC));
}

double mse_db1(const ErrorSample& sample) {
  return mean_of(corrected_squares(sample, DbVariant::db1));
}

double mse_db_tel(const ErrorSample& sample) {
  return mean_of(corrected_squares(sample, DbVariant::dbTel));
}

double mse_db_chm(const ErrorSample& sample) {
  const double mp = mse_param(sample);
  const double m2 = mse_db_2lev(sample);
  if (mp >= m2 || m2 <= 0.0) return 2.0 * mp - m2;
  return mp * std::exp((mp - m2) / m2);
}

double mse_db1_ef(const ErrorSample& sample, double q) {
  const double mp = mse_param(sample);
  if (mp == 0.0) return 0.0;
  const double ratio = mse_db_2lev(sample) / mp;
  return ratio < q ? q * mp : mse_db1(sample);
}

double mse_db_tel_ef(const ErrorSample& sample, double q) {
  const double mp = mse_param(sample);
  if (mp == 0.0) return 0.0;
  const double ratio = mse_db_2lev(sample) / mp;
  return ratio < q ? mp : mse_db_tel(sample);
}

std::vector<double> modified_db_errors(const ErrorSample& sample,
                                       DbVariant variant) {
  const std::vector<double> sq = corrected_squares(sample, variant);
  std::vector<double> out(sq.size());
  for (std::size_t b = 0; b < sq.size(); ++b) {
    out[b] = sq[b] >= 0.0 ? std::sqrt(sq[b]) : sample.first_level[b];
  }
  return out;
}

double qape_db(const ErrorSample& sample, double p, DbVariant variant) {
  const std::vector<double> mod = modified_db_errors(sample, variant);
  return qape_estimate(mod, p);
}

// ---- report assembly ----

AccuracyReport estimate_accuracy(const LmmFit& fit, const LongFrame& frame,
                                 const std::vector<std::string>& aux_selection,
                                 const std::vector<PredictorSetup>& predictors,
                                 const ThetaSpec& spec,
                                 const std::vector<std::string>& variants,
                                 const std::vector<double>& qape_orders,
                                 int B, int C, std::uint64_t seed,
                                 int n_threads) {
  auto wants = [&](const std::string& v) {
    return std::find(variants.begin(), variants.end(), v) != variants.end();
  };
  const bool need_db = wants("db1") || wants("dbTel") || wants("db1HM") ||
                       wants("db1EF") || wants("dbTelEF") || wants("dbC");
  if ((wants("db1") || wants("dbTel") || wants("db1EF") || wants("dbTelEF")) &&
      C != 1) {
    throw ConfigError("db1/dbTel estimator variants require C = 1");
  }
  for (const std::string& v : variants) {
    static const std::vector<std::string> known{
        "param", "rb", "rbCor", "dbC", "db1", "dbTel", "db1HM", "db1EF", "dbTelEF"};
    if (std::find(known.begin(), known.end(), v) == known.end()) {
      throw ConfigError("unknown estimator variant '" + v + "'");
    }
  }

  AccuracyReport report;
  report.B = B;
  report.C = need_db ? C : 0;
  report.seed = seed;

  BootstrapResult param_run, rb_run, rbcor_run, db_run;
  if (wants("param")) {
    param_run = parametric_bootstrap(fit, frame, aux_selection, predictors,
                                     spec, B, subseed(seed, "param"), n_threads);
    report.failed_redraws += param_run.failed_redraws;
  }
  if (wants("rb")) {
    rb_run = residual_bootstrap(fit, frame, aux_selection, predictors, spec, B,
                                subseed(seed, "rb"), /*corrected=*/false,
                                n_threads);
    report.failed_redraws += rb_run.failed_redraws;
  }
  if (wants("rbCor")) {
    rbcor_run = residual_bootstrap(fit, frame, aux_selection, predictors, spec,
                                   B, subseed(seed, "rbCor"),
                                   /*corrected=*/true, n_threads);
    report.failed_redraws += rbcor_run.failed_redraws;
    report.correction_skipped = rbcor_run.correction_skipped;
  }
  if (need_db) {
    db_run = double_bootstrap(fit, frame, aux_selection, predictors, spec, B, C,
                              subseed(seed, "db"), /*telescoping=*/true,
                              n_threads);
    report.failed_redraws += db_run.failed_redraws;
  }

  auto emit = [&](std::size_t pi, const std::string& estimator,
                  const std::string& measure, double p, double value) {
    report.cells.push_back(AccuracyCell{to_string(predictors[pi].kind),
                                        estimator, measure, p, value});
  };

  for (std::size_t pi = 0; pi < predictors.size(); ++pi) {
    auto first_level_cells = [&](const std::string& name,
                                 const BootstrapResult& run) {
      const ErrorSample& es = run.per_predictor[pi];
      emit(pi, name, "RMSE", 0.0, rmse_estimate(es.first_level));
      for (double p : qape_orders) {
        emit(pi, name, "QAPE", p, qape_estimate(es.first_level, p));
      }
    };
    if (wants("param")) first_level_cells("param", param_run);
    if (wants("rb")) first_level_cells("rb", rb_run);
    if (wants("rbCor")) first_level_cells("rbCor", rbcor_run);

    if (need_db) {
      const ErrorSample& es = db_run.per_predictor[pi];
      auto rmse_of = [](double mse) { return std::sqrt(std::max(mse, 0.0)); };
      if (wants("dbC")) {
        emit(pi, "dbC", "RMSE", 0.0, rmse_of(mse_db_c(es)));
        for (double p : qape_orders) {
          emit(pi, "dbC", "QAPE", p, qape_db(es, p, DbVariant::dbC));
        }
      }
      if (wants("db1")) {
        emit(pi, "db1", "RMSE", 0.0, rmse_of(mse_db1(es)));
        for (double p : qape_orders) {
          emit(pi, "db1", "QAPE", p, qape_db(es, p, DbVariant::db1));
        }
      }
      if (wants("dbTel")) {
        emit(pi, "dbTel", "RMSE", 0.0, rmse_of(mse_db_tel(es)));
        for (double p : qape_orders) {
          emit(pi, "dbTel", "QAPE", p, qape_db(es, p, DbVariant::dbTel));
        }
      }
      if (wants("db1HM")) emit(pi, "db1HM", "RMSE", 0.0, rmse_of(mse_db_chm(es)));
      if (wants("db1EF")) emit(pi, "db1EF", "RMSE", 0.0, rmse_of(mse_db1_ef(es)));
      if (wants("dbTelEF")) {
        emit(pi, "dbTelEF", "RMSE", 0.0, rmse_of(mse_db_tel_ef(es)));
      }
    }
  }
  return report;
}

}  // namespace sae
