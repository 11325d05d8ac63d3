#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "sae/accuracy.hpp"
#include "sae/errors.hpp"
#include "sae/frame.hpp"
#include "sae/lmm.hpp"
#include "sae/predictor.hpp"
#include "sae/rng.hpp"

using namespace sae;

namespace {

ErrorSample make_sample(std::vector<double> first,
                        std::vector<std::vector<double>> second, int B, int C) {
  ErrorSample es;
  es.first_level = std::move(first);
  es.second_level = std::move(second);
  es.B = B;
  es.C = C;
  return es;
}

LongFrame panel_frame(int n_domains, int units_per_domain, int n_periods,
                      int sampled_per_domain, std::uint64_t seed) {
  rng::Stream gen(seed);
  std::vector<UnitRecord> rows;
  for (int d = 0; d < n_domains; ++d) {
    for (int u = 0; u < units_per_domain; ++u) {
      const double xv = 1.0 + gen.uniform() * 4.0;
      for (int t = 1; t <= n_periods; ++t) {
        UnitRecord r;
        r.domain_id = "D" + std::to_string(d);
        r.unit_id = "u" + std::to_string(d) + "_" + std::to_string(u);
        r.period = t;
        r.x = {xv};
        r.in_sample = u < sampled_per_domain;
        if (r.in_sample) {
          r.y = 2.0 + 1.5 * xv + 0.8 * d + 0.3 * gen.normal();
        }
        rows.push_back(r);
      }
    }
  }
  return LongFrame::from_rows(std::move(rows), {"x1"});
}

}  // namespace

TEST_CASE("rmse_estimate and qape_estimate arithmetic") {
  CHECK(rmse_estimate(std::vector<double>{0.0, 0.0, 0.0}) == 0.0);
  CHECK(rmse_estimate(std::vector<double>{3.0, 4.0}) ==
        doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
  CHECK(rmse_estimate(std::vector<double>{-2.0, 2.0}) == doctest::Approx(2.0));

  CHECK(qape_estimate(std::vector<double>{-1.0, 2.0, -3.0, 4.0}, 0.5) == 2.0);
  CHECK(qape_estimate(std::vector<double>{-1.0, 2.0, -3.0, 4.0}, 0.99) == 4.0);
  CHECK(qape_estimate(std::vector<double>{0.0, 0.0}, 0.5) == 0.0);
  CHECK_THROWS_AS(rmse_estimate(std::vector<double>{}), EvaluationError);
}

TEST_CASE("rmse/qape are invariant to sign flips and permutations") {
  const std::vector<double> e{1.5, -2.0, 0.25, 3.0, -0.5};
  std::vector<double> flipped;
  for (double v : e) flipped.push_back(-v);
  std::vector<double> shuffled{3.0, 0.25, -0.5, 1.5, -2.0};
  CHECK(rmse_estimate(e) == rmse_estimate(flipped));
  CHECK(rmse_estimate(e) == rmse_estimate(shuffled));
  for (double p : {0.3, 0.5, 0.9}) {
    CHECK(qape_estimate(e, p) == qape_estimate(flipped, p));
    CHECK(qape_estimate(e, p) == qape_estimate(shuffled, p));
  }
}

TEST_CASE("mse_db_c arithmetic and boundary cases") {
  const ErrorSample es =
      make_sample({1.0, 2.0}, {{0.5}, {1.0}}, 2, 1);
  CHECK(mse_db_c(es) == doctest::Approx((1.75 + 7.0) / 2.0).epsilon(1e-15));
  CHECK(mse_db_c(es) == doctest::Approx(4.375));

  const ErrorSample zero2 = make_sample({1.0, 2.0}, {{0.0}, {0.0}}, 2, 1);
  CHECK(mse_db_c(zero2) == doctest::Approx(2.0 * mse_param(zero2)));

  // exact cancellation: u**(b)^2 = 2 u*(b)^2
  const double s2 = std::sqrt(2.0);
  const ErrorSample cancel =
      make_sample({1.0, 2.0}, {{s2}, {2.0 * s2}}, 2, 1);
  CHECK(mse_db_c(cancel) == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("mse_db1 and mse_db_tel") {
  // constant case: u* = {1,1,1} with B = 2 (telescoping), u** = {1,1}
  const ErrorSample tel = make_sample({1.0, 1.0, 1.0}, {{1.0}, {1.0}}, 2, 1);
  CHECK(mse_db_tel(tel) == doctest::Approx(1.0));

  const ErrorSample neg = make_sample({1.0}, {{2.0}}, 1, 1);
  CHECK(mse_db1(neg) == doctest::Approx(-2.0));  // negativity permitted

  // C = 1 identity with the classic estimator
  const ErrorSample es = make_sample({0.4, -1.1, 2.0}, {{0.2}, {1.3}, {-0.7}}, 3, 1);
  CHECK(mse_db_c(es) == mse_db1(es));

  // shape contracts
  const ErrorSample short_first = make_sample({1.0, 1.0}, {{1.0}, {1.0}}, 2, 1);
  CHECK_THROWS_AS(mse_db_tel(short_first), ShapeError);
  const ErrorSample c2 = make_sample({1.0, 1.0}, {{1.0, 1.0}, {1.0, 1.0}}, 2, 2);
  CHECK_THROWS_AS(mse_db1(c2), ShapeError);
  const ErrorSample no2 = make_sample({1.0, 1.0}, {}, 2, 0);
  CHECK_THROWS_AS(mse_db_2lev(no2), ShapeError);
}

TEST_CASE("mse_db_chm branches") {
  // MSE_param = 2, MSE_2lev = 1: first branch
  const ErrorSample a = make_sample({std::sqrt(2.0), std::sqrt(2.0)},
                                    {{1.0}, {1.0}}, 2, 1);
  CHECK(mse_param(a) == doctest::Approx(2.0));
  CHECK(mse_db_2lev(a) == doctest::Approx(1.0));
  CHECK(mse_db_chm(a) == doctest::Approx(3.0));

  // MSE_param = 1, MSE_2lev = 2: exponential branch
  const ErrorSample b = make_sample({1.0, 1.0},
                                    {{std::sqrt(2.0)}, {std::sqrt(2.0)}}, 2, 1);
  CHECK(mse_db_chm(b) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));

  // branch boundary: both equal m
  const ErrorSample c = make_sample({2.0, 2.0}, {{2.0}, {2.0}}, 2, 1);
  CHECK(mse_db_chm(c) == doctest::Approx(4.0));
  CHECK(mse_db_chm(c) >= 0.0);

  // never negative on a spread of synthetic samples
  rng::Stream gen(3);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> first(4);
    std::vector<std::vector<double>> second(4, std::vector<double>(1));
    for (int i = 0; i < 4; ++i) {
      first[static_cast<std::size_t>(i)] = gen.normal();
      second[static_cast<std::size_t>(i)][0] = 2.0 * gen.normal();
    }
    CHECK(mse_db_chm(make_sample(first, second, 4, 1)) >= 0.0);
  }
}

TEST_CASE("mse_db1_ef and mse_db_tel_ef gates") {
  // MSE_param = 1, mean u**^2 = 0.5: ratio 0.5 < 0.77 triggers the gate
  const ErrorSample gated = make_sample({1.0, 1.0},
                                        {{std::sqrt(0.5)}, {std::sqrt(0.5)}}, 2, 1);
  CHECK(mse_db1_ef(gated) == doctest::Approx(0.77));

  // ratio exactly 1.0: pass-through to the plain estimators
  const ErrorSample open = make_sample({1.0, 1.0, 1.0}, {{1.0}, {1.0}}, 2, 1);
  CHECK(mse_db1_ef(open) == doctest::Approx(mse_db1(open)));
  CHECK(mse_db_tel_ef(open) == doctest::Approx(mse_db_tel(open)));

  // telescoping gate returns MSE_param itself
  const ErrorSample tel_gated = make_sample(
      {1.0, 1.0, 1.0}, {{std::sqrt(0.5)}, {std::sqrt(0.5)}}, 2, 1);
  CHECK(mse_db_tel_ef(tel_gated) == doctest::Approx(mse_param(tel_gated)));

  // degenerate zero parametric MSE
  const ErrorSample zeros = make_sample({0.0, 0.0}, {{0.0}, {0.0}}, 2, 1);
  CHECK(mse_db1_ef(zeros) == 0.0);
  CHECK(mse_db_tel_ef(zeros) == 0.0);
}

TEST_CASE("modified_db_errors and qape_db") {
  // corrected square negative: fallback to u*
  const ErrorSample fb = make_sample({1.0}, {{std::sqrt(3.0)}}, 1, 1);
  const auto mod = modified_db_errors(fb, DbVariant::db1);
  REQUIRE(mod.size() == 1);
  CHECK(mod[0] == doctest::Approx(1.0));

  // zero second level: sqrt(2) |u*|
  const ErrorSample z = make_sample({1.0, -2.0, 0.5}, {{0.0}, {0.0}, {0.0}}, 3, 1);
  const auto mz = modified_db_errors(z, DbVariant::db1);
  CHECK(mz[0] == doctest::Approx(std::sqrt(2.0)));
  CHECK(mz[1] == doctest::Approx(2.0 * std::sqrt(2.0)));
  for (double p : {0.3, 0.5, 0.9}) {
    CHECK(qape_db(z, p, DbVariant::db1) ==
          doctest::Approx(std::sqrt(2.0) * qape_estimate(z.first_level, p))
              .epsilon(1e-15));
  }

  // corrected square exactly zero
  const ErrorSample boundary = make_sample({0.0}, {{0.0}}, 1, 1);
  CHECK(modified_db_errors(boundary, DbVariant::db1)[0] == 0.0);

  // explicit B = 4 hand enumeration, telescoping variant
  const ErrorSample h = make_sample({1.0, 2.0, 1.0, 0.5, 1.5},
                                    {{1.0}, {1.0}, {2.0}, {1.0}}, 4, 1);
  // squares: 1+4-1=4; 4+1-1=4; 1+0.25-4=-2.75 (fallback 1.0); 0.25+2.25-1=1.5
  const auto mh = modified_db_errors(h, DbVariant::dbTel);
  CHECK(mh[0] == doctest::Approx(2.0));
  CHECK(mh[1] == doctest::Approx(2.0));
  CHECK(mh[2] == doctest::Approx(1.0));
  CHECK(mh[3] == doctest::Approx(std::sqrt(1.5)));
  // |mod| sorted: {1, sqrt(1.5), 2, 2}; rank ceil(0.5*4) = 2
  CHECK(qape_db(h, 0.5, DbVariant::dbTel) == doctest::Approx(std::sqrt(1.5)));
  CHECK(qape_db(h, 0.99, DbVariant::dbTel) == doctest::Approx(2.0));
}

TEST_CASE("parametric bootstrap matches a step-by-step reimplementation") {
  const LongFrame frame = panel_frame(3, 6, 2, 3, 11);
  const std::vector<std::string> aux{"1", "x1"};
  const LmmFit fit = fit_reml(frame, aux);
  ThetaSpec spec;
  spec.statistic = Statistic::mean;
  spec.domain = "D1";
  spec.period = 2;

  const int B = 10;
  const std::uint64_t seed = 404;
  const BootstrapResult res = parametric_bootstrap(
      fit, frame, aux, {PredictorSetup{PredictorKind::lmm}}, spec, B, seed);
  REQUIRE(res.per_predictor.size() == 1);
  REQUIRE(res.per_predictor[0].first_level.size() == 10);
  CHECK(res.failed_redraws == 0);

  // independent replay of the documented seed derivation and pipeline
  std::vector<std::size_t> all(frame.n_rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Eigen::MatrixXd x_all = design_matrix(frame, aux, all);
  const Eigen::MatrixXd x_s = design_matrix(frame, aux, frame.sampled_indices());
  std::vector<std::string> dom_all, dom_s;
  for (const auto& r : frame.rows()) dom_all.push_back(r.domain_id);
  for (std::size_t i : frame.sampled_indices()) {
    dom_s.push_back(frame.row(i).domain_id);
  }
  const LmmParams params{fit.beta, fit.sigma2_u, fit.sigma2_e};
  const auto mask = subset_mask(frame, spec.domain, spec.period);

  for (int b = 0; b < B; ++b) {
    const std::uint64_t draw_seed = rng::mix(
        rng::mix(rng::mix(seed ^ rng::hash_tag("boot1")) ^
                 static_cast<std::uint64_t>(b)) ^ 0ULL);
    const std::vector<double> y_full =
        simulate_population(params, x_all, dom_all, draw_seed);
    const double theta_star = characteristic_of(spec, y_full, mask);

    Eigen::VectorXd y_s(x_s.rows());
    {
      std::size_t j = 0;
      for (std::size_t i : frame.sampled_indices()) y_s[j++] = y_full[i];
    }
    const LmmFit refit = fit_reml(x_s, y_s, dom_s);
    std::vector<double> composed = y_full;
    for (std::size_t i : frame.unsampled_indices()) {
      Eigen::RowVectorXd xr(2);
      xr << 1.0, frame.row(i).x[0];
      double v = 0.0;
      const auto it = refit.v_hat.find(frame.row(i).domain_id);
      if (it != refit.v_hat.end()) v = it->second;
      composed[i] = xr.dot(refit.beta) + v;
    }
    const double theta_hat = characteristic_of(spec, composed, mask);
    CHECK(res.per_predictor[0].first_level[static_cast<std::size_t>(b)] ==
          doctest::Approx(theta_hat - theta_star).epsilon(1e-14));
  }
}

TEST_CASE("degenerate fitted variances give (near) zero bootstrap errors") {
  const LongFrame frame = panel_frame(3, 5, 1, 3, 21);
  const std::vector<std::string> aux{"1", "x1"};
  LmmFit fit = fit_reml(frame, aux);
  fit.sigma2_u = 0.0;
  fit.sigma2_e = 0.0;
  ThetaSpec spec;
  spec.statistic = Statistic::mean;
  spec.domain = "D0";
  spec.period = 1;
  const BootstrapResult res = parametric_bootstrap(
      fit, frame, aux, {PredictorSetup{PredictorKind::lmm}}, spec, 5, 9);
  for (double u : res.per_predictor[0].first_level) {
    CHECK(std::abs(u) < 1e-7);
  }
}

TEST_CASE("bootstraps are deterministic and thread-invariant") {
  const LongFrame frame = panel_frame(3, 6, 2, 3, 31);
  const std::vector<std::string> aux{"1", "x1"};
  const LmmFit fit = fit_reml(frame, aux);
  ThetaSpec spec;
  spec.statistic = Statistic::median;
  spec.domain = kAllDomains;
  spec.period = 1;
  const std::vector<PredictorSetup> preds{PredictorSetup{PredictorKind::lmm}};

  const BootstrapResult a =
      residual_bootstrap(fit, frame, aux, preds, spec, 12, 77, true, 1);
  const BootstrapResult b =
      residual_bootstrap(fit, frame, aux, preds, spec, 12, 77, true, 4);
  CHECK(a.per_predictor[0].first_level == b.per_predictor[0].first_level);

  const BootstrapResult d1 =
      double_bootstrap(fit, frame, aux, preds, spec, 6, 1, 55, true, 1);
  const BootstrapResult d4 =
      double_bootstrap(fit, frame, aux, preds, spec, 6, 1, 55, true, 4);
  REQUIRE(d1.per_predictor[0].first_level.size() == 7);  // telescoping B + 1
  CHECK(d1.per_predictor[0].first_level == d4.per_predictor[0].first_level);
  CHECK(d1.per_predictor[0].second_level == d4.per_predictor[0].second_level);
}

TEST_CASE("corrected residual bootstrap tracks the parametric one") {
  const LongFrame frame = panel_frame(4, 8, 2, 4, 41);
  const std::vector<std::string> aux{"1", "x1"};
  const LmmFit fit = fit_reml(frame, aux);
  ThetaSpec spec;
  spec.statistic = Statistic::mean;
  spec.domain = "D2";
  spec.period = 1;
  const std::vector<PredictorSetup> preds{PredictorSetup{PredictorKind::lmm}};
  const int B = 500;

  const BootstrapResult pr =
      parametric_bootstrap(fit, frame, aux, preds, spec, B, 1001, 4);
  const BootstrapResult rc =
      residual_bootstrap(fit, frame, aux, preds, spec, B, 1001, true, 4);
  CHECK_FALSE(rc.correction_skipped);
  const double rmse_p = rmse_estimate(pr.per_predictor[0].first_level);
  const double rmse_r = rmse_estimate(rc.per_predictor[0].first_level);
  CHECK(rmse_r == doctest::Approx(rmse_p).epsilon(0.10));
}

TEST_CASE("estimate_accuracy: cell layout, validation, determinism") {
  const LongFrame frame = panel_frame(3, 6, 2, 3, 51);
  const std::vector<std::string> aux{"1", "x1"};
  const LmmFit fit = fit_reml(frame, aux);
  ThetaSpec spec;
  spec.statistic = Statistic::mean;
  spec.domain = "D0";
  spec.period = 2;
  const std::vector<PredictorSetup> preds{PredictorSetup{PredictorKind::lmm}};

  CHECK_THROWS_AS(
      estimate_accuracy(fit, frame, aux, preds, spec, {"bogus"}, {0.5}, 8, 1, 1),
      ConfigError);
  CHECK_THROWS_AS(
      estimate_accuracy(fit, frame, aux, preds, spec, {"db1"}, {0.5}, 8, 2, 1),
      ConfigError);

  const std::vector<std::string> variants{"param", "rb", "rbCor", "db1",
                                          "dbTel", "db1HM", "db1EF", "dbTelEF"};
  const AccuracyReport r1 = estimate_accuracy(fit, frame, aux, preds, spec,
                                              variants, {0.5, 0.75}, 8, 1, 13, 1);
  const AccuracyReport r2 = estimate_accuracy(fit, frame, aux, preds, spec,
                                              variants, {0.5, 0.75}, 8, 1, 13, 4);
  REQUIRE(r1.cells.size() == r2.cells.size());
  for (std::size_t i = 0; i < r1.cells.size(); ++i) {
    CHECK(r1.cells[i].estimator == r2.cells[i].estimator);
    CHECK(r1.cells[i].measure == r2.cells[i].measure);
    CHECK(r1.cells[i].value == r2.cells[i].value);
  }
  // param/rb/rbCor/db1/dbTel each emit RMSE + 2 QAPE cells; the HM and EF
  // variants emit RMSE only
  CHECK(r1.cells.size() == 5 * 3 + 3);
  for (const AccuracyCell& c : r1.cells) {
    CHECK(c.predictor == "lmm");
    CHECK(c.value >= 0.0);  // reported RMSE/QAPE values are non-negative
  }
}
