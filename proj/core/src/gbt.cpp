#include "sae/gbt.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "sae/errors.hpp"
#include "sae/parallel.hpp"

namespace sae {

void GbHyperparams::validate() const {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0,1]");
  if (n_rounds < 1) throw ConfigError("n_rounds must be >= 1");
  if (!(row_fraction > 0.0 && row_fraction <= 1.0)) {
    throw ConfigError("row_fraction must lie in (0,1]");
  }
  if (!(col_fraction > 0.0 && col_fraction <= 1.0)) {
    throw ConfigError("col_fraction must lie in (0,1]");
  }
  if (max_depth < 1) throw ConfigError("max_depth must be >= 1");
  if (min_leaf < 1) throw ConfigError("min_leaf must be >= 1");
}

double Tree::predict_row(const Eigen::Ref<const Eigen::RowVectorXd>& x) const {
  int i = 0;
  while (!nodes[i].is_leaf()) {
    i = x[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left
                                                  : nodes[i].right;
  }
  return nodes[i].value;
}

double Tree::min_leaf_value() const {
  double m = std::numeric_limits<double>::infinity();
  for (const TreeNode& n : nodes) {
    if (n.is_leaf()) m = std::min(m, n.value);
  }
  return m;
}

double Tree::max_leaf_value() const {
  double m = -std::numeric_limits<double>::infinity();
  for (const TreeNode& n : nodes) {
    if (n.is_leaf()) m = std::max(m, n.value);
  }
  return m;
}

namespace {

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double sse = std::numeric_limits<double>::infinity();
};

/// Best split over the given columns; candidate thresholds are midpoints
/// between consecutive distinct sorted values. Ties break to the lowest
/// feature index, then the smallest threshold (columns and thresholds are
/// scanned in ascending order, so "first strict improvement" suffices).
SplitChoice best_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                       const std::vector<int>& rows,
                       const std::vector<int>& cols, int min_leaf) {
  SplitChoice best;
  const int n = static_cast<int>(rows.size());
  std::vector<int> order(rows.size());
  for (int col : cols) {
    order.assign(rows.begin(), rows.end());
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return x(a, col) < x(b, col);
    });
    double sum_l = 0.0, sq_l = 0.0;
    double sum_r = 0.0, sq_r = 0.0;
    for (int r : order) {
      sum_r += y[r];
      sq_r += y[r] * y[r];
    }
    for (int i = 0; i + 1 < n; ++i) {
      const double v = y[order[i]];
      sum_l += v;
      sq_l += v * v;
      sum_r -= v;
      sq_r -= v * v;
      const double a = x(order[i], col);
      const double b = x(order[i + 1], col);
      if (a == b) continue;  // not a distinct-value boundary
      const int n_l = i + 1, n_r = n - n_l;
      if (n_l < min_leaf || n_r < min_leaf) continue;
      const double sse = (sq_l - sum_l * sum_l / n_l) +
                         (sq_r - sum_r * sum_r / n_r);
      if (sse < best.sse) {
        best.found = true;
        best.feature = col;
        best.threshold = 0.5 * (a + b);
        best.sse = sse;
      }
    }
  }
  return best;
}

struct TreeBuilder {
  const Eigen::MatrixXd& x;
  const Eigen::VectorXd& y;
  const std::vector<int>& col_pool;
  int cols_per_split;
  int max_depth;
  int min_leaf;
  rng::Stream& rng;
  Tree tree;

  std::vector<int> draw_columns() {
    if (cols_per_split >= static_cast<int>(col_pool.size())) return col_pool;
    std::vector<int> pool = col_pool;
    std::vector<int> chosen;
    chosen.reserve(cols_per_split);
    for (int k = 0; k < cols_per_split; ++k) {
      const std::size_t j = rng.uniform_int(pool.size());
      chosen.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
  }

  int build(std::vector<int> rows, int depth) {
    double sum = 0.0;
    for (int r : rows) sum += y[r];
    const double mean = sum / static_cast<double>(rows.size());

    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back(TreeNode{.value = mean});

    if (depth >= max_depth ||
        static_cast<int>(rows.size()) < 2 * min_leaf) {
      return id;
    }
    auto [lo, hi] = std::minmax_element(
        rows.begin(), rows.end(), [&](int a, int b) { return y[a] < y[b]; });
    if (y[*lo] == y[*hi]) return id;  // zero-variance node

    const std::vector<int> cols = draw_columns();
    const SplitChoice split = best_split(x, y, rows, cols, min_leaf);
    if (!split.found) return id;

    std::vector<int> left, right;
    for (int r : rows) {
      (x(r, split.feature) <= split.threshold ? left : right).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    tree.nodes[id].feature = split.feature;
    tree.nodes[id].threshold = split.threshold;
    const int l = build(std::move(left), depth + 1);
    const int r = build(std::move(right), depth + 1);
    tree.nodes[id].left = l;
    tree.nodes[id].right = r;
    return id;
  }
};

}  // namespace

Tree fit_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
              const std::vector<int>& col_pool, int cols_per_split,
              int max_depth, int min_leaf, rng::Stream& rng) {
  if (x.rows() == 0 || y.size() != x.rows()) {
    throw FitError("empty or mismatched tree training data");
  }
  if (col_pool.empty() || cols_per_split < 1) {
    throw FitError("column pool must be non-empty");
  }
  std::vector<int> rows(static_cast<std::size_t>(x.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  TreeBuilder builder{x, y, col_pool, cols_per_split, max_depth, min_leaf, rng};
  builder.build(std::move(rows), 0);
  return std::move(builder.tree);
}

GbModel fit_gb(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
               const GbHyperparams& hp, std::uint64_t seed,
               std::vector<std::string> feature_names) {
  hp.validate();
  const int n = static_cast<int>(x.rows());
  const int p = static_cast<int>(x.cols());
  if (n < 2) throw FitError("need at least 2 training rows");

  const int n_sub = static_cast<int>(
      std::ceil(hp.row_fraction * static_cast<double>(n)));
  const int cols_per_split = static_cast<int>(
      std::ceil(hp.col_fraction * static_cast<double>(p)));
  std::vector<int> col_pool(static_cast<std::size_t>(p));
  std::iota(col_pool.begin(), col_pool.end(), 0);

  GbModel model;
  model.eta = hp.eta;
  model.feature_names = std::move(feature_names);
  model.trees.reserve(static_cast<std::size_t>(hp.n_rounds));

  Eigen::VectorXd y_cur = y;
  for (int b = 0; b < hp.n_rounds; ++b) {
    rng::Stream stream = rng::derive(seed, "gb-round", static_cast<std::uint64_t>(b));

    Eigen::MatrixXd x_fit;
    Eigen::VectorXd y_fit;
    if (n_sub >= n) {
      x_fit = x;
      y_fit = y_cur;
    } else {
      // row subsample without replacement (step a)
      std::vector<std::size_t> perm = stream.permutation(static_cast<std::size_t>(n));
      x_fit.resize(n_sub, p);
      y_fit.resize(n_sub);
      for (int i = 0; i < n_sub; ++i) {
        x_fit.row(i) = x.row(static_cast<Eigen::Index>(perm[i]));
        y_fit[i] = y_cur[static_cast<Eigen::Index>(perm[i])];
      }
    }

    Tree tree = fit_tree(x_fit, y_fit, col_pool, cols_per_split, hp.max_depth,
                         hp.min_leaf, stream);

    // fitted values on the full training set, then the working-response
    // update r_b = y_current - eta * yhat_b (steps c-e)
    for (int i = 0; i < n; ++i) {
      y_cur[i] -= hp.eta * tree.predict_row(x.row(i));
    }
    model.trees.push_back(std::move(tree));
  }
  return model;
}

Eigen::VectorXd predict_gb(const GbModel& model, const Eigen::MatrixXd& x) {
  if (!model.feature_names.empty() &&
      x.cols() != static_cast<Eigen::Index>(model.feature_names.size())) {
    throw ShapeError("feature count mismatch with fitted model");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(x.rows());
  for (const Tree& tree : model.trees) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      out[i] += model.eta * tree.predict_row(x.row(i));
    }
  }
  return out;
}

GbHyperparams tune_cv(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                      const std::vector<std::string>& unit_ids,
                      const std::vector<GbHyperparams>& candidates,
                      int n_folds, std::uint64_t seed, int n_threads) {
  if (candidates.empty()) throw ConfigError("candidate list is empty");
  if (n_folds < 2) throw ConfigError("n_folds must be >= 2");
  if (static_cast<Eigen::Index>(unit_ids.size()) != x.rows()) {
    throw ShapeError("unit id list length mismatch");
  }

  // distinct units in order of appearance, shuffled, assigned round-robin
  std::vector<std::string> units;
  std::unordered_map<std::string, int> fold_of;
  for (const std::string& u : unit_ids) {
    if (!fold_of.count(u)) {
      fold_of.emplace(u, 0);
      units.push_back(u);
    }
  }
  if (static_cast<int>(units.size()) < n_folds) {
    throw DesignError("fewer distinct units than folds");
  }
  rng::Stream shuffle = rng::derive(seed, "cv-folds");
  const std::vector<std::size_t> perm = shuffle.permutation(units.size());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    fold_of[units[perm[k]]] = static_cast<int>(k % static_cast<std::size_t>(n_folds));
  }

  const std::size_t n_jobs =
      candidates.size() * static_cast<std::size_t>(n_folds);
  std::vector<double> fold_mse(n_jobs, 0.0);
  parallel_for(n_jobs, n_threads, [&](std::size_t job) {
    const std::size_t ci = job / static_cast<std::size_t>(n_folds);
    const int f = static_cast<int>(job % static_cast<std::size_t>(n_folds));

    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      (fold_of.at(unit_ids[static_cast<std::size_t>(i)]) == f ? test : train)
          .push_back(i);
    }
    Eigen::MatrixXd x_tr(train.size(), x.cols()), x_te(test.size(), x.cols());
    Eigen::VectorXd y_tr(train.size()), y_te(test.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
      x_tr.row(static_cast<Eigen::Index>(i)) = x.row(train[i]);
      y_tr[static_cast<Eigen::Index>(i)] = y[train[i]];
    }
    for (std::size_t i = 0; i < test.size(); ++i) {
      x_te.row(static_cast<Eigen::Index>(i)) = x.row(test[i]);
      y_te[static_cast<Eigen::Index>(i)] = y[test[i]];
    }
    const std::uint64_t fit_seed = rng::mix(
        rng::mix(rng::mix(seed ^ rng::hash_tag("cv-fit")) ^ ci) ^
        static_cast<std::uint64_t>(f));
    const GbModel model = fit_gb(x_tr, y_tr, candidates[ci], fit_seed);
    const Eigen::VectorXd pred = predict_gb(model, x_te);
    fold_mse[job] = (pred - y_te).squaredNorm() / static_cast<double>(test.size());
  });

  std::size_t best = 0;
  double best_mse = std::numeric_limits<double>::infinity();
  for (std::size_t ci = 0; ci < candidates.size(); ++ci) {
    double avg = 0.0;
    for (int f = 0; f < n_folds; ++f) {
      avg += fold_mse[ci * static_cast<std::size_t>(n_folds) +
                      static_cast<std::size_t>(f)];
    }
    avg /= static_cast<double>(n_folds);
    if (avg < best_mse) {
      best_mse = avg;
      best = ci;
    }
  }
  return candidates[best];
}

void GbSearchSpace::validate() const {
  if (!(eta_min > 0.0 && eta_min <= eta_max && eta_max <= 1.0)) {
    throw ConfigError("invalid eta range");
  }
  if (!(rounds_min >= 1 && rounds_min <= rounds_max)) {
    throw ConfigError("invalid n_rounds range");
  }
  if (!(row_fraction_min > 0.0 && row_fraction_min <= row_fraction_max &&
        row_fraction_max <= 1.0)) {
    throw ConfigError("invalid row_fraction range");
  }
  if (!(col_fraction_min > 0.0 && col_fraction_min <= col_fraction_max &&
        col_fraction_max <= 1.0)) {
    throw ConfigError("invalid col_fraction range");
  }
  if (!(depth_min >= 1 && depth_min <= depth_max)) {
    throw ConfigError("invalid max_depth range");
  }
  if (!(leaf_min >= 1 && leaf_min <= leaf_max)) {
    throw ConfigError("invalid min_leaf range");
  }
}

std::vector<GbHyperparams> random_search(const GbSearchSpace& space,
                                         int n_candidates, std::uint64_t seed) {
  space.validate();
  if (n_candidates < 1) throw ConfigError("n_candidates must be >= 1");

  auto log_uniform = [](rng::Stream& s, double lo, double hi) {
    return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * s.uniform());
  };
  auto uniform_real = [](rng::Stream& s, double lo, double hi) {
    return lo + (hi - lo) * s.uniform();
  };
  auto uniform_int = [](rng::Stream& s, int lo, int hi) {
    return lo + static_cast<int>(s.uniform_int(
                    static_cast<std::uint64_t>(hi - lo + 1)));
  };

  std::vector<GbHyperparams> out;
  out.reserve(static_cast<std::size_t>(n_candidates));
  for (int i = 0; i < n_candidates; ++i) {
    rng::Stream s = rng::derive(seed, "search", static_cast<std::uint64_t>(i));
    GbHyperparams hp;
    hp.eta = log_uniform(s, space.eta_min, space.eta_max);
    hp.n_rounds = std::clamp(
        static_cast<int>(std::lround(
            log_uniform(s, space.rounds_min, space.rounds_max))),
        space.rounds_min, space.rounds_max);
    hp.row_fraction = uniform_real(s, space.row_fraction_min, space.row_fraction_max);
    hp.col_fraction = uniform_real(s, space.col_fraction_min, space.col_fraction_max);
    hp.max_depth = uniform_int(s, space.depth_min, space.depth_max);
    hp.min_leaf = uniform_int(s, space.leaf_min, space.leaf_max);
    out.push_back(hp);
  }
  return out;
}

Eigen::MatrixXd gb_features(const LongFrame& frame,
                            const std::vector<std::size_t>& rows,
                            const GbFeatureOptions& opts,
                            std::vector<std::string>* names) {
  const std::size_t p = frame.n_aux();
  const std::vector<std::string>& domains = frame.domains();
  const std::size_t n_cols =
      p + 1 + (opts.include_domain_onehot ? domains.size() : 0);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(rows.size(), n_cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const UnitRecord& r = frame.row(rows[i]);
    for (std::size_t j = 0; j < p; ++j) x(i, j) = r.x[j];
    x(i, p) = static_cast<double>(r.period);
    if (opts.include_domain_onehot) {
      for (std::size_t d = 0; d < domains.size(); ++d) {
        if (r.domain_id == domains[d]) {
          x(i, p + 1 + d) = 1.0;
          break;
        }
      }
    }
  }
  if (names) {
    names->clear();
    for (const std::string& a : frame.aux_names()) names->push_back(a);
    names->push_back("period");
    if (opts.include_domain_onehot) {
      for (const std::string& d : domains) names->push_back("domain=" + d);
    }
  }
  return x;
}

}  // namespace sae
