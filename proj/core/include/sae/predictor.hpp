#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sae/frame.hpp"
#include "sae/gbt.hpp"
#include "sae/lmm.hpp"

namespace sae {

enum class Statistic { mean, median, quantile, total };

Statistic statistic_from_string(const std::string& s);
std::string to_string(Statistic s);

/// Target characteristic theta: a statistic of a domain x period subset.
struct ThetaSpec {
  Statistic statistic = Statistic::mean;
  std::string domain = kAllDomains;
  int period = 1;
  double p = 0.5;  // quantile order, used iff statistic == quantile

  void validate() const;
  std::string label() const;  // e.g. "mean[D1,t=3]"
};

/// Population vector aligned to frame row order: observed responses on
/// sampled rows, model-fitted values elsewhere.
struct ComposedVector {
  std::vector<double> values;
  std::vector<bool> fitted;  // per entry: true if model-fitted
};

/// Lower-order-statistic sample quantile: the rank-ceil(p*m) smallest of
/// the m values. Shared convention for medians, quantiles, and QAPE.
double quantile_lower(std::vector<double> values, double p);

ComposedVector compose_population(const LongFrame& frame,
                                  const std::vector<double>& fitted_r);

/// Evaluates the statistic over the masked entries of a composed vector.
/// median = quantile(0.5) under the lower-order-statistic convention.
double characteristic(const ThetaSpec& spec, const ComposedVector& composed,
                      const std::vector<std::size_t>& mask);

/// Same statistic, applied directly to a full population vector (no
/// observed/fitted split); used for bootstrap and simulation truths.
double characteristic_of(const ThetaSpec& spec, const std::vector<double>& y,
                         const std::vector<std::size_t>& mask);

/// End-to-end plug-in prediction with the LMM predictor.
double plug_in_predict_lmm(const LongFrame& frame, const LmmFit& fit,
                           const std::vector<std::string>& aux_selection,
                           const ThetaSpec& spec);

/// End-to-end plug-in prediction with the boosted-tree predictor.
double plug_in_predict_gb(const LongFrame& frame, const GbModel& model,
                          const GbFeatureOptions& feat_opts,
                          const ThetaSpec& spec);

}  // namespace sae
