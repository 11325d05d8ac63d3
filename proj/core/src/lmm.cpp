#include "sae/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "sae/errors.hpp"
#include "sae/rng.hpp"

namespace sae {

namespace {

/// Sufficient statistics grouped by domain; everything the profiled REML
/// objective needs is O(p^2) per evaluation once these are precomputed.
struct Grouped {
  std::vector<std::string> domain_order;  // first appearance
  std::vector<double> n_d;                // per-domain row counts
  Eigen::MatrixXd s;                      // p x D, s.col(d) = sum of x rows
  Eigen::VectorXd t;                      // per-domain sum of y
  Eigen::MatrixXd xtx;
  Eigen::VectorXd xty;
  double yty = 0.0;
  Eigen::Index n = 0, p = 0;
};

Grouped group_by_domain(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                        const std::vector<std::string>& domains) {
  Grouped g;
  g.n = x.rows();
  g.p = x.cols();
  std::unordered_map<std::string, Eigen::Index> index;
  for (const std::string& d : domains) {
    if (!index.count(d)) {
      index.emplace(d, static_cast<Eigen::Index>(g.domain_order.size()));
      g.domain_order.push_back(d);
    }
  }
  const Eigen::Index nd = static_cast<Eigen::Index>(g.domain_order.size());
  g.n_d.assign(nd, 0.0);
  g.s = Eigen::MatrixXd::Zero(g.p, nd);
  g.t = Eigen::VectorXd::Zero(nd);
  for (Eigen::Index i = 0; i < g.n; ++i) {
    const Eigen::Index d = index.at(domains[i]);
    g.n_d[d] += 1.0;
    g.s.col(d) += x.row(i).transpose();
    g.t[d] += y[i];
  }
  g.xtx = x.transpose() * x;
  g.xty = x.transpose() * y;
  g.yty = y.squaredNorm();
  return g;
}

struct GlsAtPsi {
  Eigen::VectorXd beta;
  double q = 0.0;         // (y - Xb)' W^-1 (y - Xb)
  double logdet_w = 0.0;  // log|W|, W = I + psi Z Z'
  double logdet_xtwx = 0.0;
};

GlsAtPsi gls_at_psi(const Grouped& g, double psi) {
  GlsAtPsi r;
  Eigen::MatrixXd xtwx = g.xtx;
  Eigen::VectorXd xtwy = g.xty;
  double ytwy = g.yty;
  for (std::size_t d = 0; d < g.n_d.size(); ++d) {
    const double denom = 1.0 + g.n_d[d] * psi;
    const double c = psi / denom;
    xtwx.noalias() -= c * g.s.col(d) * g.s.col(d).transpose();
    xtwy.noalias() -= c * g.t[d] * g.s.col(d);
    ytwy -= c * g.t[d] * g.t[d];
    r.logdet_w += std::log(denom);
  }
  Eigen::LLT<Eigen::MatrixXd> llt(xtwx);
  if (llt.info() != Eigen::Success) {
    throw SingularityError("X' W^-1 X not positive definite");
  }
  r.beta = llt.solve(xtwy);
  r.q = std::max(0.0, ytwy - r.beta.dot(xtwy));
  r.logdet_xtwx = 0.0;
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    r.logdet_xtwx += 2.0 * std::log(l(i, i));
  }
  return r;
}

/// Profiled restricted log-likelihood: sigma2_e replaced by its closed-form
/// maximizer q / (n - p), subject to the variance floor.
double profiled_objective(const Grouped& g, double psi) {
  const GlsAtPsi r = gls_at_psi(g, psi);
  const double df = static_cast<double>(g.n - g.p);
  const double s2e = std::max(r.q / df, kVarFloor);
  return -0.5 * (df * std::log(2.0 * std::numbers::pi) + df * std::log(s2e) +
                 r.logdet_w + r.logdet_xtwx + r.q / s2e);
}

void check_design(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                  const std::vector<std::string>& domains) {
  if (x.rows() != y.size() ||
      x.rows() != static_cast<Eigen::Index>(domains.size())) {
    throw ShapeError("design, response, and domain lengths differ");
  }
  if (x.rows() <= x.cols() + 1) {
    throw IdentifiabilityError("need more than p + 1 observations");
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < x.cols()) {
    throw SingularityError("design matrix is rank deficient");
  }
}

}  // namespace

Eigen::MatrixXd design_matrix(const LongFrame& frame,
                              const std::vector<std::string>& aux_selection,
                              const std::vector<std::size_t>& rows) {
  Eigen::MatrixXd x(rows.size(), aux_selection.size());
  for (std::size_t j = 0; j < aux_selection.size(); ++j) {
    const std::string& name = aux_selection[j];
    if (name == "1") {
      for (std::size_t i = 0; i < rows.size(); ++i) x(i, j) = 1.0;
    } else {
      const std::size_t a = frame.aux_index(name);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        x(i, j) = frame.row(rows[i]).x[a];
      }
    }
  }
  return x;
}

double reml_loglik_at(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                      const std::vector<std::string>& domains,
                      double sigma2_u, double sigma2_e) {
  const Grouped g = group_by_domain(x, y, domains);
  const double s2e = std::max(sigma2_e, kVarFloor);
  const GlsAtPsi r = gls_at_psi(g, sigma2_u / s2e);
  const double df = static_cast<double>(g.n - g.p);
  return -0.5 * (df * std::log(2.0 * std::numbers::pi) + df * std::log(s2e) +
                 r.logdet_w + r.logdet_xtwx + r.q / s2e);
}

LmmFit fit_reml(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                const std::vector<std::string>& domains,
                std::vector<std::string> beta_names) {
  check_design(x, y, domains);
  const Grouped g = group_by_domain(x, y, domains);
  if (g.domain_order.size() < 2) {
    throw IdentifiabilityError("at least 2 sampled domains required");
  }

  constexpr double kTol = 1e-8;
  constexpr int kMaxIter = 200;
  constexpr double kLogPsiMin = -25.0, kLogPsiMax = 25.0;
  constexpr int kGrid = 101;

  // coarse bracket over log psi, plus the psi = 0 boundary
  double best_psi = 0.0;
  double best_obj = profiled_objective(g, 0.0);
  int best_k = -1;
  std::vector<double> grid_psi(kGrid), grid_obj(kGrid);
  for (int k = 0; k < kGrid; ++k) {
    const double lp =
        kLogPsiMin + (kLogPsiMax - kLogPsiMin) * k / double(kGrid - 1);
    grid_psi[k] = std::exp(lp);
    grid_obj[k] = profiled_objective(g, grid_psi[k]);
    if (grid_obj[k] > best_obj) {
      best_obj = grid_obj[k];
      best_psi = grid_psi[k];
      best_k = k;
    }
  }

  bool converged = true;
  if (best_k >= 0) {
    // golden-section refinement within the bracketing grid cells
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double lo = best_k > 0 ? std::log(grid_psi[best_k - 1]) : kLogPsiMin - 1.0;
    double hi = best_k < kGrid - 1 ? std::log(grid_psi[best_k + 1])
                                   : kLogPsiMax + 1.0;
    double c = hi - inv_phi * (hi - lo);
    double d = lo + inv_phi * (hi - lo);
    double fc = profiled_objective(g, std::exp(c));
    double fd = profiled_objective(g, std::exp(d));
    int iter = 0;
    while (std::abs(fc - fd) > kTol && iter < kMaxIter) {
      if (fc > fd) {
        hi = d;
        d = c;
        fd = fc;
        c = hi - inv_phi * (hi - lo);
        fc = profiled_objective(g, std::exp(c));
      } else {
        lo = c;
        c = d;
        fc = fd;
        d = lo + inv_phi * (hi - lo);
        fd = profiled_objective(g, std::exp(d));
      }
      ++iter;
    }
    converged = iter < kMaxIter;
    const double refined = 0.5 * (lo + hi);
    const double f_ref = profiled_objective(g, std::exp(refined));
    if (f_ref > best_obj) {
      best_obj = f_ref;
      best_psi = std::exp(refined);
    }
    // boundary still wins if the interior maximum does not beat it
    const double f0 = profiled_objective(g, 0.0);
    if (f0 >= best_obj) {
      best_obj = f0;
      best_psi = 0.0;
    }
  }

  const GlsAtPsi r = gls_at_psi(g, best_psi);
  const double df = static_cast<double>(g.n - g.p);

  LmmFit fit;
  fit.beta = r.beta;
  fit.beta_names = std::move(beta_names);
  fit.sigma2_e = std::max(r.q / df, kVarFloor);
  fit.sigma2_u = best_psi * fit.sigma2_e;
  fit.converged = converged;
  fit.reml_loglik = best_obj;
  fit.v_hat = blup_effects(fit, x, y, domains);
  return fit;
}

LmmFit fit_reml(const LongFrame& frame,
                const std::vector<std::string>& aux_selection) {
  const std::vector<std::size_t> rows = frame.sampled_indices();
  const Eigen::MatrixXd x = design_matrix(frame, aux_selection, rows);
  Eigen::VectorXd y(rows.size());
  std::vector<std::string> domains(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    y[i] = *frame.row(rows[i]).y;
    domains[i] = frame.row(rows[i]).domain_id;
  }
  return fit_reml(x, y, domains, aux_selection);
}

std::map<std::string, double> blup_effects(
    const LmmFit& fit, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
    const std::vector<std::string>& domains) {
  const Eigen::VectorXd resid = y - x * fit.beta;
  std::map<std::string, double> sum, count;
  for (Eigen::Index i = 0; i < resid.size(); ++i) {
    sum[domains[i]] += resid[i];
    count[domains[i]] += 1.0;
  }
  std::map<std::string, double> v;
  for (const auto& [d, s] : sum) {
    const double nd = count[d];
    const double denom = nd * fit.sigma2_u + fit.sigma2_e;
    v[d] = denom > 0.0 ? nd * fit.sigma2_u / denom * (s / nd) : 0.0;
  }
  return v;
}

std::map<std::string, double> blup_effects(
    const LmmFit& fit, const LongFrame& sample,
    const std::vector<std::string>& aux_selection) {
  const std::vector<std::size_t> rows = sample.sampled_indices();
  const Eigen::MatrixXd x = design_matrix(sample, aux_selection, rows);
  Eigen::VectorXd y(rows.size());
  std::vector<std::string> domains(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    y[i] = *sample.row(rows[i]).y;
    domains[i] = sample.row(rows[i]).domain_id;
  }
  return blup_effects(fit, x, y, domains);
}

Eigen::VectorXd fitted_unobserved(const LmmFit& fit, const LongFrame& frame,
                                  const std::vector<std::string>& aux_selection) {
  const std::vector<std::size_t> rows = frame.unsampled_indices();
  const Eigen::MatrixXd xr = design_matrix(frame, aux_selection, rows);
  if (xr.cols() != fit.beta.size()) {
    throw ShapeError("auxiliary dimension mismatch with fitted beta");
  }
  Eigen::VectorXd out = xr * fit.beta;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto it = fit.v_hat.find(frame.row(rows[i]).domain_id);
    if (it != fit.v_hat.end()) out[i] += it->second;
  }
  return out;
}

std::vector<double> simulate_population(const LmmParams& params,
                                        const Eigen::MatrixXd& x,
                                        const std::vector<std::string>& domains,
                                        std::uint64_t seed) {
  if (x.rows() != static_cast<Eigen::Index>(domains.size())) {
    throw ShapeError("design and domain lengths differ");
  }
  if (x.cols() != params.beta.size()) {
    throw ShapeError("auxiliary dimension mismatch with beta");
  }
  rng::Stream stream = rng::derive(seed, "lmm-sim");
  const double sd_u = std::sqrt(params.sigma2_u);
  const double sd_e = std::sqrt(params.sigma2_e);

  // one effect per domain, in order of first appearance
  std::unordered_map<std::string, double> u;
  std::vector<std::string> order;
  for (const std::string& d : domains) {
    if (!u.count(d)) {
      u.emplace(d, 0.0);
      order.push_back(d);
    }
  }
  for (const std::string& d : order) u[d] = sd_u * stream.normal();

  const Eigen::VectorXd fixed = x * params.beta;
  std::vector<double> y(domains.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = fixed[static_cast<Eigen::Index>(i)] + u[domains[i]] +
           sd_e * stream.normal();
  }
  return y;
}

std::vector<double> simulate_population(const LmmParams& params,
                                        const LongFrame& frame,
                                        const std::vector<std::string>& aux_selection,
                                        std::uint64_t seed) {
  std::vector<std::size_t> rows(frame.n_rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const Eigen::MatrixXd x = design_matrix(frame, aux_selection, rows);
  std::vector<std::string> domains(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    domains[i] = frame.row(i).domain_id;
  }
  return simulate_population(params, x, domains, seed);
}

}  // namespace sae
