#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "sae/frame.hpp"
#include "sae/rng.hpp"

namespace sae {

struct GbHyperparams {
  double eta = 0.1;          // learning rate, in [0,1]
  int n_rounds = 100;        // boosting rounds B
  double row_fraction = 1.0;  // per-round row subsample, (0,1]
  double col_fraction = 1.0;  // per-split column subsample, (0,1]
  int max_depth = 6;
  int min_leaf = 1;

  void validate() const;
};

/// Binary CART node; feature < 0 marks a leaf. Routing: left iff
/// x[feature] <= threshold.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  double value = 0.0;
  int left = -1;
  int right = -1;
  bool is_leaf() const { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict_row(const Eigen::Ref<const Eigen::RowVectorXd>& x) const;
  double min_leaf_value() const;
  double max_leaf_value() const;
};

/// Boosted ensemble; the prediction is sum over trees of eta times the
/// leaf value the row routes to.
struct GbModel {
  std::vector<Tree> trees;
  double eta = 0.0;
  std::vector<std::string> feature_names;
};

/// CART least-squares regression tree. At every split a fresh random
/// subset of `cols_per_split` columns is drawn from `col_pool`; among
/// those, the (feature, threshold) minimizing the within-child sum of
/// squared deviations is chosen. Candidate thresholds are midpoints
/// between consecutive distinct sorted feature values. Ties break to the
/// lowest feature index, then the smallest threshold. Leaves carry the
/// mean response of their rows.
Tree fit_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
              const std::vector<int>& col_pool, int cols_per_split,
              int max_depth, int min_leaf, rng::Stream& rng);

/// Gradient-boosted trees. Per round: draw ceil(row_fraction * n) rows
/// without replacement, fit a tree on them, compute its fitted values on
/// the full training set, and replace the working response by
/// r_b = y_current - eta * yhat_b. Deterministic given the seed.
GbModel fit_gb(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
               const GbHyperparams& hp, std::uint64_t seed,
               std::vector<std::string> feature_names = {});

Eigen::VectorXd predict_gb(const GbModel& model, const Eigen::MatrixXd& x);

/// K-fold cross-validated hyperparameter choice. Folds group by unit id
/// (all rows of a unit share a fold). Returns the candidate with minimal
/// average held-out MSE; ties break to the first candidate.
GbHyperparams tune_cv(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                      const std::vector<std::string>& unit_ids,
                      const std::vector<GbHyperparams>& candidates,
                      int n_folds, std::uint64_t seed, int n_threads = 1);

/// Per-hyperparameter sampling ranges for random search. eta and
/// n_rounds are drawn log-uniformly, the rest uniformly.
struct GbSearchSpace {
  double eta_min = 0.01, eta_max = 0.3;
  int rounds_min = 20, rounds_max = 500;
  double row_fraction_min = 0.5, row_fraction_max = 1.0;
  double col_fraction_min = 0.5, col_fraction_max = 1.0;
  int depth_min = 2, depth_max = 8;
  int leaf_min = 1, leaf_max = 10;

  void validate() const;
};

std::vector<GbHyperparams> random_search(const GbSearchSpace& space,
                                         int n_candidates, std::uint64_t seed);

/// Feature matrix for frame rows: the p auxiliary columns plus the period
/// index, optionally followed by a one-hot domain encoding.
struct GbFeatureOptions {
  bool include_domain_onehot = false;
};

Eigen::MatrixXd gb_features(const LongFrame& frame,
                            const std::vector<std::size_t>& rows,
                            const GbFeatureOptions& opts,
                            std::vector<std::string>* names = nullptr);

}  // namespace sae
