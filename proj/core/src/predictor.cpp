#include "sae/predictor.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include "sae/errors.hpp"

namespace sae {

Statistic statistic_from_string(const std::string& s) {
  if (s == "mean") return Statistic::mean;
  if (s == "median") return Statistic::median;
  if (s == "quantile") return Statistic::quantile;
  if (s == "total") return Statistic::total;
  throw ConfigError("unknown statistic '" + s + "'");
}

std::string to_string(Statistic s) {
  switch (s) {
    case Statistic::mean: return "mean";
    case Statistic::median: return "median";
    case Statistic::quantile: return "quantile";
    case Statistic::total: return "total";
  }
  return "?";
}

void ThetaSpec::validate() const {
  if (statistic == Statistic::quantile && !(p > 0.0 && p < 1.0)) {
    throw ConfigError("quantile order must lie in (0,1)");
  }
  if (period < 1) throw ConfigError("period must be >= 1");
}

std::string ThetaSpec::label() const {
  std::string s = to_string(statistic);
  if (statistic == Statistic::quantile) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), p);
    s += "(" + std::string(buf, res.ptr) + ")";
  }
  return s + "[" + domain + ",t=" + std::to_string(period) + "]";
}

double quantile_lower(std::vector<double> values, double p) {
  if (values.empty()) throw EvaluationError("quantile of an empty set");
  if (!(p > 0.0 && p < 1.0)) throw EvaluationError("quantile order outside (0,1)");
  const std::size_t m = values.size();
  // rank ceil(p*m), 1-based
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(p * static_cast<double>(m)));
  rank = std::clamp<std::size_t>(rank, 1, m);
  std::nth_element(values.begin(), values.begin() + (rank - 1), values.end());
  return values[rank - 1];
}

ComposedVector compose_population(const LongFrame& frame,
                                  const std::vector<double>& fitted_r) {
  if (fitted_r.size() != frame.n_rows() - frame.n_sampled()) {
    throw ShapeError("fitted vector length " + std::to_string(fitted_r.size()) +
                     " != non-sampled count " +
                     std::to_string(frame.n_rows() - frame.n_sampled()));
  }
  ComposedVector out;
  out.values.resize(frame.n_rows());
  out.fitted.resize(frame.n_rows());
  std::size_t r = 0;
  for (std::size_t i = 0; i < frame.n_rows(); ++i) {
    if (frame.row(i).in_sample) {
      out.values[i] = *frame.row(i).y;
      out.fitted[i] = false;
    } else {
      out.values[i] = fitted_r[r++];
      out.fitted[i] = true;
    }
  }
  return out;
}

namespace {

double evaluate(const ThetaSpec& spec, const std::vector<double>& values,
                const std::vector<std::size_t>& mask) {
  spec.validate();
  if (mask.empty()) throw EvaluationError("empty evaluation mask");
  std::vector<double> sub;
  sub.reserve(mask.size());
  for (std::size_t i : mask) sub.push_back(values[i]);
  switch (spec.statistic) {
    case Statistic::mean: {
      double s = 0.0;
      for (double v : sub) s += v;
      return s / static_cast<double>(sub.size());
    }
    case Statistic::total: {
      double s = 0.0;
      for (double v : sub) s += v;
      return s;
    }
    case Statistic::median:
      return quantile_lower(std::move(sub), 0.5);
    case Statistic::quantile:
      return quantile_lower(std::move(sub), spec.p);
  }
  throw EvaluationError("unreachable statistic");
}

}  // namespace

double characteristic(const ThetaSpec& spec, const ComposedVector& composed,
                      const std::vector<std::size_t>& mask) {
  return evaluate(spec, composed.values, mask);
}

double characteristic_of(const ThetaSpec& spec, const std::vector<double>& y,
                         const std::vector<std::size_t>& mask) {
  return evaluate(spec, y, mask);
}

double plug_in_predict_lmm(const LongFrame& frame, const LmmFit& fit,
                           const std::vector<std::string>& aux_selection,
                           const ThetaSpec& spec) {
  const Eigen::VectorXd fitted = fitted_unobserved(fit, frame, aux_selection);
  const ComposedVector composed = compose_population(
      frame, std::vector<double>(fitted.data(), fitted.data() + fitted.size()));
  return characteristic(spec, composed, subset_mask(frame, spec.domain, spec.period));
}

double plug_in_predict_gb(const LongFrame& frame, const GbModel& model,
                          const GbFeatureOptions& feat_opts,
                          const ThetaSpec& spec) {
  const std::vector<std::size_t> rows = frame.unsampled_indices();
  const Eigen::MatrixXd xr = gb_features(frame, rows, feat_opts);
  const Eigen::VectorXd fitted = predict_gb(model, xr);
  const ComposedVector composed = compose_population(
      frame, std::vector<double>(fitted.data(), fitted.data() + fitted.size()));
  return characteristic(spec, composed, subset_mask(frame, spec.domain, spec.period));
}

}  // namespace sae
