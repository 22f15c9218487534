#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/special_functions/trigamma.hpp>

#include "mmdreg/errors.hpp"
#include "mmdreg/kernels.hpp"
#include "mmdreg/mmd_objective.hpp"
#include "mmdreg/models.hpp"
#include "mmdreg/normal_math.hpp"
#include "mmdreg/rng.hpp"
#include "mmdreg/stochastic_gradient.hpp"

namespace mmdreg {

enum class InitKind { MLEInit, Zero, Custom };

/// Shape estimate used by the gamma baseline: the profile maximum likelihood
/// root, or the moment estimate 1 / (Pearson dispersion) reported by most GLM
/// software.
enum class GammaShape { Profile, Pearson };

inline std::string to_string(GammaShape g) { return g == GammaShape::Pearson ? "pearson" : "profile"; }

inline GammaShape parse_gamma_shape(const std::string& s) {
  if (s == "profile" || s == "mle") return GammaShape::Profile;
  if (s == "pearson" || s == "moment") return GammaShape::Pearson;
  throw ConfigError("unknown gamma shape estimate '" + s + "'");
}

inline std::string to_string(InitKind k) {
  switch (k) {
    case InitKind::MLEInit: return "mle";
    case InitKind::Zero: return "zero";
    case InitKind::Custom: return "custom";
  }
  return "?";
}

inline InitKind parse_init(const std::string& s) {
  if (s == "mle" || s == "MLEInit" || s == "MLE") return InitKind::MLEInit;
  if (s == "zero" || s == "Zero") return InitKind::Zero;
  if (s == "custom" || s == "Custom") return InitKind::Custom;
  throw ConfigError("unknown init '" + s + "'");
}

struct FitConfig {
  Estimator estimator = Estimator::Tilde;
  KernelSpec k_x = KernelSpec::psi_matern(0.01, 1, 1.0);
  KernelSpec k_y = KernelSpec::exponential(1.0);
  double eta = 0.1;
  double adagrad_eps = 1e-8;
  // Unset: 2000 for Tilde, 5000 for Hat.
  std::optional<std::size_t> iterations;
  std::size_t mc_pairs = 1;
  // Unset: PairBudget::defaults(n).
  std::optional<PairBudget> pair_budget;
  std::uint64_t seed = 0;
  InitKind init = InitKind::MLEInit;
  Vector custom_init;  // raw parameterization, used when init == Custom
  bool polyak = false;  // average the iterates of the second half
  std::size_t trace_every = 1;
  std::size_t objective_every = 0;  // 0: no objective values in the trace
  std::size_t objective_pairs = 20;

  std::size_t effective_iterations() const {
    if (iterations) return *iterations;
    return estimator == Estimator::Hat ? 5000 : 2000;
  }

  PairBudget effective_budget(std::size_t n) const { return pair_budget ? *pair_budget : PairBudget::defaults(n); }

  void validate(const RegressionFamily& family, std::size_t n) const {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("learning rate eta must be > 0");
    if (!(adagrad_eps > 0.0)) throw ConfigError("adagrad_eps must be > 0");
    if (effective_iterations() < 1) throw ConfigError("iterations must be >= 1");
    if (mc_pairs < 1) throw ConfigError("mc_pairs must be >= 1");
    if (trace_every < 1) throw ConfigError("trace_every must be >= 1");
    k_y.validate();
    if (estimator == Estimator::Hat) {
      k_x.validate();
      effective_budget(n).validate(n);
    }
    if (init == InitKind::Custom) {
      if (static_cast<std::size_t>(custom_init.size()) != family.param_dim())
        throw ConfigError("custom init has " + std::to_string(custom_init.size()) + " entries, expected " +
                          std::to_string(family.param_dim()));
      if (!custom_init.allFinite()) throw ConfigError("custom init contains non-finite values");
    }
  }
};

struct TraceEntry {
  std::size_t iteration = 0;
  double grad_norm = 0.0;
  std::optional<double> objective;
};

struct FitResult {
  Estimator estimator = Estimator::Tilde;
  Vector theta_raw;
  Vector theta_natural;
  std::vector<TraceEntry> trace;
  Vector init_used;
  double wall_time = 0.0;
  std::size_t iterations_run = 0;
  bool converged = true;
  bool failed = false;
  std::string error;
  std::vector<std::string> warnings;
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

/// Indices in [offset, offset+d) not frozen by the family's mask, shifted to 0.
inline std::vector<Eigen::Index> free_columns(const RegressionFamily& family, std::size_t offset) {
  std::vector<Eigen::Index> cols;
  for (std::size_t j = 0; j < family.d(); ++j)
    if (!family.is_frozen(offset + j)) cols.push_back(static_cast<Eigen::Index>(j));
  return cols;
}

inline Eigen::MatrixXd design(const Dataset& ds, const std::vector<Eigen::Index>& cols) {
  Eigen::MatrixXd A(ds.X.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) A.col(static_cast<Eigen::Index>(c)) = ds.X.col(cols[c]);
  return A;
}

inline double condition_number(const Eigen::MatrixXd& A) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
  const auto& s = svd.singularValues();
  if (s.size() == 0) return std::numeric_limits<double>::infinity();
  const double lo = s[s.size() - 1];
  return lo > 0.0 ? s[0] / lo : std::numeric_limits<double>::infinity();
}

/// Throws NumericalError when the design has (numerically) deficient column rank.
inline void check_design(const Eigen::MatrixXd& A, const std::string& what) {
  if (A.cols() == 0) return;
  if (A.rows() < A.cols())
    throw NumericalError(what + ": design has " + std::to_string(A.rows()) + " rows for " +
                         std::to_string(A.cols()) + " columns");
  const double cond = condition_number(A);
  if (!(cond < 1e12)) {
    throw NumericalError(what + ": singular design matrix (condition number " + std::to_string(cond) + ")");
  }
}

inline Eigen::VectorXd solve_spd(const Eigen::MatrixXd& H, const Eigen::VectorXd& g, const std::string& what) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw NumericalError(what + ": information matrix is not positive definite");
  Eigen::VectorXd step = ldlt.solve(g);
  if (!step.allFinite()) throw NumericalError(what + ": non-finite Newton step");
  return step;
}

inline Eigen::VectorXd least_squares(const Eigen::MatrixXd& A, const Eigen::VectorXd& y, const std::string& what) {
  check_design(A, what);
  return A.colPivHouseholderQr().solve(y);
}

inline void set_coords(Vector& theta, std::size_t offset, const std::vector<Eigen::Index>& cols,
                       const Eigen::VectorXd& values) {
  for (std::size_t c = 0; c < cols.size(); ++c)
    theta[static_cast<Eigen::Index>(offset) + cols[c]] = values[static_cast<Eigen::Index>(c)];
}

inline Eigen::VectorXd responses(const Dataset& ds) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(ds.n()));
  for (std::size_t i = 0; i < ds.n(); ++i) y[static_cast<Eigen::Index>(i)] = ds.y[i].value();
  return y;
}

inline void check_family_data(const RegressionFamily& family, const Dataset& ds) {
  ds.validate();
  if (ds.d() != family.d())
    throw DomainError("dataset has " + std::to_string(ds.d()) + " covariates but the " + family.name() +
                      " model expects " + std::to_string(family.d()));
  if (ds.y.front().kind != family.response_kind())
    throw DomainError(family.name() + " model cannot fit " + to_string(ds.y.front().kind) + " responses");
}

inline double total_log_likelihood(const RegressionFamily& family, const Vector& theta, const Dataset& ds) {
  double s = 0.0;
  for (std::size_t i = 0; i < ds.n(); ++i) s += Conditional(family, theta, ds.row(i)).log_density(ds.y[i]);
  return s;
}

inline Vector total_score(const RegressionFamily& family, const Vector& theta, const Dataset& ds) {
  Vector g = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  for (std::size_t i = 0; i < ds.n(); ++i) Conditional(family, theta, ds.row(i)).accumulate_score(ds.y[i], 1.0, g);
  family.apply_mask(g);
  return g;
}

struct NewtonOutcome {
  Eigen::VectorXd beta;
  bool converged = false;
  std::string note;
};

/// Damped Newton ascent for a concave GLM log-likelihood in beta. `eval`
/// returns (loglik, score, information) at beta.
template <class Eval>
NewtonOutcome newton_ascent(Eigen::VectorXd beta, Eval eval, const std::string& what, double norm_cap,
                            int max_iter = 100) {
  NewtonOutcome out;
  auto [ll, g, H] = eval(beta);
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::VectorXd step = solve_spd(H, g, what);
    double t = 1.0;
    Eigen::VectorXd next;
    double ll_next = -std::numeric_limits<double>::infinity();
    for (int half = 0; half < 40; ++half, t *= 0.5) {
      next = beta + t * step;
      ll_next = std::get<0>(eval(next));
      if (std::isfinite(ll_next) && ll_next >= ll - 1e-12 * std::abs(ll)) break;
    }
    if (!std::isfinite(ll_next)) throw NumericalError(what + ": log-likelihood became non-finite");
    const double change = (next - beta).lpNorm<Eigen::Infinity>();
    beta = next;
    std::tie(ll, g, H) = eval(beta);
    if (beta.norm() > norm_cap) {
      out.note = what + ": coefficient norm exceeded " + std::to_string(norm_cap) +
                 " (possible separation); stopped without convergence";
      out.beta = beta;
      return out;
    }
    if (change < 1e-10 * (1.0 + beta.lpNorm<Eigen::Infinity>())) {
      out.converged = true;
      out.beta = beta;
      return out;
    }
  }
  out.note = what + ": iteration cap reached without convergence";
  out.beta = beta;
  return out;
}

// ---------------------------------------------------------------------------
// Per-family maximum likelihood

inline FitResult finish_baseline(const RegressionFamily& family, Vector theta, Estimator which) {
  family.apply_mask(theta);
  FitResult r;
  r.estimator = which;
  r.theta_raw = theta;
  r.theta_natural = family.natural(theta);
  r.init_used = theta;
  return r;
}

inline FitResult gaussian_least_squares(const RegressionFamily& family, const Dataset& ds, Estimator which) {
  const auto cols = free_columns(family, 0);
  const Eigen::MatrixXd A = design(ds, cols);
  const Eigen::VectorXd y = responses(ds);
  const Eigen::VectorXd beta = least_squares(A, y, which == Estimator::OLS ? "ols" : "gaussian mle");
  const double rss = (y - A * beta).squaredNorm();
  const auto n = static_cast<double>(ds.n());
  const auto p = static_cast<double>(cols.size());
  const double denom = (which == Estimator::OLS && n > p) ? n - p : n;
  double sigma = std::sqrt(rss / denom);
  std::vector<std::string> warnings;
  if (!(sigma > 1e-12)) {
    sigma = 1e-12;
    warnings.emplace_back("residual variance is zero; sigma floored at 1e-12");
  }
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  set_coords(theta, 0, cols, beta);
  theta[static_cast<Eigen::Index>(family.d())] = std::log(sigma);
  FitResult r = finish_baseline(family, theta, which);
  r.warnings = std::move(warnings);
  return r;
}

inline FitResult logistic_mle(const RegressionFamily& family, const Dataset& ds) {
  const auto cols = free_columns(family, 0);
  const Eigen::MatrixXd A = design(ds, cols);
  check_design(A, "logistic mle");
  const Eigen::VectorXd y = responses(ds);
  auto eval = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = A * b;
    double ll = 0.0;
    Eigen::VectorXd resid(eta.size()), w(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double t = y[i] > 0.5 ? eta[i] : -eta[i];
      ll += -std::log1p(std::exp(-std::abs(t))) + std::min(t, 0.0);
      const double p = detail::logistic(eta[i]);
      resid[i] = y[i] - p;
      w[i] = std::max(p * (1.0 - p), 1e-300);
    }
    Eigen::MatrixXd H = A.transpose() * w.asDiagonal() * A;
    return std::tuple<double, Eigen::VectorXd, Eigen::MatrixXd>(ll, A.transpose() * resid, H);
  };
  NewtonOutcome o;
  try {
    o = newton_ascent(Eigen::VectorXd::Zero(A.cols()), eval, "logistic mle", 30.0);
  } catch (const NumericalError& e) {
    // Near-separated data drive the weights to 0 before the norm cap is hit.
    FitResult r = finish_baseline(family, Vector::Zero(static_cast<Eigen::Index>(family.param_dim())),
                                  Estimator::MLE);
    r.converged = false;
    r.warnings.emplace_back(e.what());
    return r;
  }
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  set_coords(theta, 0, cols, o.beta);
  FitResult r = finish_baseline(family, theta, Estimator::MLE);
  r.converged = o.converged;
  if (!o.note.empty()) r.warnings.push_back(o.note);
  return r;
}

inline FitResult poisson_mle(const RegressionFamily& family, const Dataset& ds) {
  const auto cols = free_columns(family, 0);
  const Eigen::MatrixXd A = design(ds, cols);
  check_design(A, "poisson mle");
  const Eigen::VectorXd y = responses(ds);
  auto eval = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = A * b;
    const Eigen::VectorXd mu = eta.array().exp().matrix();
    const double ll = (y.array() * eta.array() - mu.array()).sum();
    Eigen::MatrixXd H = A.transpose() * mu.asDiagonal() * A;
    return std::tuple<double, Eigen::VectorXd, Eigen::MatrixXd>(ll, A.transpose() * (y - mu), H);
  };
  const NewtonOutcome o = newton_ascent(Eigen::VectorXd::Zero(A.cols()), eval, "poisson mle", 1e6);
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  set_coords(theta, 0, cols, o.beta);
  FitResult r = finish_baseline(family, theta, Estimator::MLE);
  r.converged = o.converged;
  if (!o.note.empty()) r.warnings.push_back(o.note);
  return r;
}

inline FitResult gamma_mle(const RegressionFamily& family, const Dataset& ds, GammaShape shape) {
  const auto cols = free_columns(family, 0);
  const Eigen::MatrixXd A = design(ds, cols);
  const Eigen::VectorXd y = responses(ds);
  if ((y.array() <= 0.0).any()) throw DomainError("gamma mle: responses must be positive");
  const Eigen::VectorXd logy = y.array().log().matrix();
  // Newton on the beta part of the log-likelihood; the beta maximizer does not depend on nu.
  auto eval = [&](const Eigen::VectorXd& b) {
    const Eigen::VectorXd eta = A * b;
    const Eigen::VectorXd ratio = (y.array() * (-eta.array()).exp()).matrix();
    const double ll = (-eta.array() - ratio.array()).sum();
    Eigen::MatrixXd H = A.transpose() * ratio.asDiagonal() * A;
    return std::tuple<double, Eigen::VectorXd, Eigen::MatrixXd>(
        ll, A.transpose() * (ratio - Eigen::VectorXd::Ones(y.size())), H);
  };
  const Eigen::VectorXd start = least_squares(A, logy, "gamma mle");
  const NewtonOutcome o = newton_ascent(start, eval, "gamma mle", 1e6);

  const Eigen::VectorXd eta = A * o.beta;
  const Eigen::VectorXd ratio = (y.array() * (-eta.array()).exp()).matrix();
  const auto n = static_cast<double>(ds.n());
  const double S = (logy - eta - ratio).sum();
  const double pearson = (ratio.array() - 1.0).square().sum() / std::max(1.0, n - static_cast<double>(A.cols()));
  double nu = pearson > 0.0 ? std::clamp(1.0 / pearson, 1e-3, 1e6) : 1.0;
  bool nu_converged = shape == GammaShape::Pearson;
  // Newton on log nu for the profile score n(log nu + 1 - digamma(nu)) + S.
  for (int it = 0; it < 100 && shape == GammaShape::Profile; ++it) {
    const double score = n * (std::log(nu) + 1.0 - boost::math::digamma(nu)) + S;
    const double hess = n * (1.0 / nu - boost::math::trigamma(nu));  // < 0
    // Newton step on log nu: d/dlognu = nu*score, curvature nu^2 hess + nu score.
    const double g = nu * score;
    const double h = nu * nu * hess + nu * score;
    double step = h < 0.0 ? -g / h : (g > 0 ? 1.0 : -1.0);
    step = std::clamp(step, -2.0, 2.0);
    nu = std::exp(std::log(nu) + step);
    if (std::abs(step) < 1e-12) {
      nu_converged = true;
      break;
    }
  }
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  set_coords(theta, 0, cols, o.beta);
  theta[static_cast<Eigen::Index>(family.d())] = std::log(nu);
  FitResult r = finish_baseline(family, theta, Estimator::MLE);
  r.converged = o.converged && nu_converged;
  if (!o.note.empty()) r.warnings.push_back(o.note);
  if (!nu_converged) r.warnings.emplace_back("gamma mle: shape iteration did not converge");
  return r;
}

}  // namespace detail

/// Classical two-step estimator: probit for the selection equation, then least
/// squares on the selected rows with the inverse Mills ratio as extra regressor.
inline FitResult heckman_two_step(const RegressionFamily& family, const Dataset& ds) {
  if (family.kind() != FamilyKind::Heckman) throw ConfigError("heckman_two_step needs the heckman family");
  detail::check_family_data(family, ds);
  const std::size_t d = family.d();
  const auto out_cols = detail::free_columns(family, 0);
  const auto sel_cols = detail::free_columns(family, d);
  const Eigen::MatrixXd Z = detail::design(ds, sel_cols);
  detail::check_design(Z, "heckman probit");
  Eigen::VectorXd q(static_cast<Eigen::Index>(ds.n()));
  for (std::size_t i = 0; i < ds.n(); ++i) q[static_cast<Eigen::Index>(i)] = ds.y[i].selected() ? 1.0 : -1.0;

  auto eval = [&](const Eigen::VectorXd& g) {
    const Eigen::VectorXd mu = Z * g;
    double ll = 0.0;
    Eigen::VectorXd score_w(mu.size()), w(mu.size());
    for (Eigen::Index i = 0; i < mu.size(); ++i) {
      const double t = q[i] * mu[i];
      ll += normal_math::log_cdf(t);
      const double lam = normal_math::inverse_mills(t);
      score_w[i] = q[i] * lam;
      // Fisher information weight phi^2 / (Phi (1 - Phi)).
      const double phi = normal_math::pdf(mu[i]);
      const double P = normal_math::cdf(mu[i]);
      w[i] = (P > 0.0 && P < 1.0) ? phi * phi / (P * (1.0 - P)) : lam * (lam + t);
      w[i] = std::max(w[i], 1e-300);
    }
    Eigen::MatrixXd H = Z.transpose() * w.asDiagonal() * Z;
    return std::tuple<double, Eigen::VectorXd, Eigen::MatrixXd>(ll, Z.transpose() * score_w, H);
  };
  const detail::NewtonOutcome probit =
      detail::newton_ascent(Eigen::VectorXd::Zero(Z.cols()), eval, "heckman probit", 1e6);

  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.y[i].selected()) selected.push_back(i);
  const auto n1 = static_cast<Eigen::Index>(selected.size());
  const auto p = static_cast<Eigen::Index>(out_cols.size());
  Eigen::MatrixXd B(n1, p + 1);
  Eigen::VectorXd y1(n1), delta(n1);
  for (Eigen::Index r = 0; r < n1; ++r) {
    const std::size_t i = selected[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < p; ++c) B(r, c) = ds.X(static_cast<Eigen::Index>(i), out_cols[static_cast<std::size_t>(c)]);
    const double mu2 = Z.row(static_cast<Eigen::Index>(i)).dot(probit.beta);
    const double lam = normal_math::inverse_mills(mu2);
    B(r, p) = lam;
    delta[r] = lam * (lam + mu2);
    y1[r] = ds.y[i].value();
  }
  const Eigen::VectorXd coef = detail::least_squares(B, y1, "heckman outcome regression");
  const double beta_lambda = coef[p];
  const double rss = (y1 - B * coef).squaredNorm();
  double sigma2 = rss / static_cast<double>(n1) + beta_lambda * beta_lambda * delta.mean();
  if (!(sigma2 > 0.0)) sigma2 = 1e-12;
  const double sigma = std::sqrt(sigma2);
  const double rho = std::clamp(beta_lambda / sigma, -0.95, 0.95);

  Vector theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  detail::set_coords(theta, 0, out_cols, coef.head(p));
  detail::set_coords(theta, d, sel_cols, probit.beta);
  theta[static_cast<Eigen::Index>(2 * d)] = std::log(sigma);
  theta[static_cast<Eigen::Index>(2 * d + 1)] = std::atanh(rho);
  FitResult r = detail::finish_baseline(family, theta, Estimator::MLE);
  r.converged = probit.converged;
  if (!probit.note.empty()) r.warnings.push_back(probit.note);
  if (std::abs(beta_lambda / sigma) > 0.95) r.warnings.emplace_back("heckman two-step: |rho| clamped to 0.95");
  return r;
}

namespace detail {

/// Quasi-Newton (BFGS, backtracking line search) maximization of the full
/// log-likelihood over the free coordinates.
inline FitResult bfgs_mle(const RegressionFamily& family, const Dataset& ds, Vector theta, int max_iter = 500) {
  std::vector<Eigen::Index> free;
  for (std::size_t i = 0; i < family.param_dim(); ++i)
    if (!family.is_frozen(i)) free.push_back(static_cast<Eigen::Index>(i));
  const auto k = static_cast<Eigen::Index>(free.size());
  auto embed = [&](const Eigen::VectorXd& z) {
    Vector t = theta;
    for (Eigen::Index c = 0; c < k; ++c) t[free[static_cast<std::size_t>(c)]] = z[c];
    return t;
  };
  auto f = [&](const Eigen::VectorXd& z) { return -total_log_likelihood(family, embed(z), ds); };
  auto grad = [&](const Eigen::VectorXd& z) {
    const Vector g = total_score(family, embed(z), ds);
    Eigen::VectorXd out(k);
    for (Eigen::Index c = 0; c < k; ++c) out[c] = -g[free[static_cast<std::size_t>(c)]];
    return out;
  };
  Eigen::VectorXd z(k);
  for (Eigen::Index c = 0; c < k; ++c) z[c] = theta[free[static_cast<std::size_t>(c)]];
  double fz = f(z);
  if (!std::isfinite(fz)) throw NumericalError("mle: log-likelihood is not finite at the starting value");
  Eigen::VectorXd g = grad(z);
  Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(k, k) / std::max(1.0, g.norm());
  bool converged = false;
  for (int it = 0; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < 1e-7 * std::max(1.0, std::abs(fz))) {
      converged = true;
      break;
    }
    Eigen::VectorXd dir = -Hinv * g;
    if (dir.dot(g) >= 0.0) {
      Hinv = Eigen::MatrixXd::Identity(k, k) / std::max(1.0, g.norm());
      dir = -Hinv * g;
    }
    double t = 1.0, f_next = 0.0;
    Eigen::VectorXd z_next;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
      z_next = z + t * dir;
      f_next = f(z_next);
      if (std::isfinite(f_next) && f_next <= fz + 1e-4 * t * dir.dot(g)) {
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    const Eigen::VectorXd g_next = grad(z_next);
    const Eigen::VectorXd s = z_next - z;
    const Eigen::VectorXd yv = g_next - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(k, k);
      Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    const double rel = std::abs(fz - f_next) / std::max(1.0, std::abs(fz));
    z = z_next;
    fz = f_next;
    g = g_next;
    if (rel < 1e-14) {
      converged = true;
      break;
    }
  }
  FitResult r = finish_baseline(family, embed(z), Estimator::MLE);
  r.converged = converged;
  if (!converged) r.warnings.emplace_back("mle: quasi-Newton refinement stopped before convergence");
  return r;
}

inline FitResult mixture_em(const RegressionFamily& family, const Dataset& ds, int iterations = 200) {
  const std::size_t M = family.components();
  const std::size_t d = family.d();
  const auto all = free_columns(RegressionFamily::gaussian_linear(d), 0);
  const Eigen::MatrixXd A = design(ds, all);
  const Eigen::VectorXd y = responses(ds);
  const Eigen::VectorXd b0 = least_squares(A, y, "mixture em");
  const double s0 = std::sqrt(std::max((y - A * b0).squaredNorm() / static_cast<double>(ds.n()), 1e-12));
  std::vector<Eigen::VectorXd> beta(M, b0);
  std::vector<double> sigma(M, s0), weight(M, 1.0 / static_cast<double>(M));
  // Deterministic spread of the starting components around the least-squares fit.
  for (std::size_t m = 0; m < M; ++m) {
    const double shift = static_cast<double>(m) - 0.5 * static_cast<double>(M - 1);
    beta[m] = b0 * (1.0 + 0.25 * shift);
  }
  const auto n = static_cast<Eigen::Index>(ds.n());
  Eigen::MatrixXd R(n, static_cast<Eigen::Index>(M));
  for (int it = 0; it < iterations; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < M; ++m) {
        const double r = (y[i] - A.row(i).dot(beta[m])) / sigma[m];
        R(i, static_cast<Eigen::Index>(m)) = std::log(weight[m]) - std::log(sigma[m]) - 0.5 * r * r;
        mx = std::max(mx, R(i, static_cast<Eigen::Index>(m)));
      }
      R.row(i) = (R.row(i).array() - mx).exp();
      R.row(i) /= R.row(i).sum();
    }
    for (std::size_t m = 0; m < M; ++m) {
      const Eigen::VectorXd w = R.col(static_cast<Eigen::Index>(m));
      const double wsum = w.sum();
      if (wsum < 1e-8) continue;
      const Eigen::MatrixXd H = A.transpose() * w.asDiagonal() * A;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
      if (ldlt.info() == Eigen::Success && ldlt.isPositive()) beta[m] = ldlt.solve(A.transpose() * w.asDiagonal() * y);
      const Eigen::VectorXd res = y - A * beta[m];
      sigma[m] = std::sqrt(std::max((w.array() * res.array().square()).sum() / wsum, 1e-12));
      weight[m] = wsum / static_cast<double>(n);
    }
  }
  Vector theta(static_cast<Eigen::Index>(family.param_dim()));
  for (std::size_t m = 0; m < M; ++m) {
    theta.segment(static_cast<Eigen::Index>(m * d), static_cast<Eigen::Index>(d)) = beta[m];
    theta[static_cast<Eigen::Index>(M * d + m)] = std::log(sigma[m]);
  }
  for (std::size_t m = 0; m + 1 < M; ++m)
    theta[static_cast<Eigen::Index>(M * (d + 1) + m)] = std::log(std::max(weight[m], 1e-300) / std::max(weight[M - 1], 1e-300));
  FitResult r = finish_baseline(family, theta, Estimator::MLE);
  r.converged = false;
  r.warnings.emplace_back("mixture em: fixed iteration count, convergence not checked");
  return r;
}

}  // namespace detail

/// Classical estimators: OLS (GaussianLinear only) or maximum likelihood.
/// Heckman MLE refines the two-step estimate by quasi-Newton on the full
/// likelihood.
inline FitResult fit_baseline(const RegressionFamily& family, const Dataset& ds, Estimator which,
                              GammaShape gamma_shape = GammaShape::Profile) {
  const auto t0 = detail::Clock::now();
  detail::check_family_data(family, ds);
  FitResult r;
  if (which == Estimator::OLS) {
    if (family.kind() != FamilyKind::GaussianLinear) throw ConfigError("OLS is only defined for the gaussian model");
    r = detail::gaussian_least_squares(family, ds, Estimator::OLS);
  } else if (which == Estimator::MLE) {
    switch (family.kind()) {
      case FamilyKind::GaussianLinear: r = detail::gaussian_least_squares(family, ds, Estimator::MLE); break;
      case FamilyKind::Logistic: r = detail::logistic_mle(family, ds); break;
      case FamilyKind::Poisson: r = detail::poisson_mle(family, ds); break;
      case FamilyKind::GammaReg: r = detail::gamma_mle(family, ds, gamma_shape); break;
      case FamilyKind::Heckman: {
        const FitResult start = heckman_two_step(family, ds);
        r = detail::bfgs_mle(family, ds, start.theta_raw);
        r.init_used = start.theta_raw;
        r.warnings.insert(r.warnings.begin(), start.warnings.begin(), start.warnings.end());
        break;
      }
      case FamilyKind::GaussMixture: r = detail::mixture_em(family, ds); break;
    }
  } else {
    throw ConfigError("fit_baseline: estimator must be ols or mle");
  }
  r.wall_time = detail::seconds_since(t0);
  return r;
}

/// Starting value used by fit_mmd for init = MLEInit.
inline FitResult initial_estimate(const RegressionFamily& family, const Dataset& ds) {
  if (family.kind() == FamilyKind::Heckman) return heckman_two_step(family, ds);
  return fit_baseline(family, ds, Estimator::MLE);
}

/// AdaGrad on the Tilde (O(n) per step) or Hat (O(n + M1 + M2 log M2) per step
/// after an O(n^2) setup) objective. The final iterate is returned unless
/// Polyak averaging is enabled.
inline FitResult fit_mmd(const RegressionFamily& family, const Dataset& ds, const FitConfig& config) {
  const auto t0 = detail::Clock::now();
  detail::check_family_data(family, ds);
  if (config.estimator != Estimator::Hat && config.estimator != Estimator::Tilde)
    throw ConfigError("fit_mmd: estimator must be hat or tilde; use fit_baseline for " + to_string(config.estimator));
  config.validate(family, ds.n());

  FitResult res;
  res.estimator = config.estimator;
  Vector theta;
  switch (config.init) {
    case InitKind::Zero: theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim())); break;
    case InitKind::Custom: theta = config.custom_init; break;
    case InitKind::MLEInit:
      try {
        FitResult base = initial_estimate(family, ds);
        theta = base.theta_raw;
        for (auto& w : base.warnings) res.warnings.push_back("init: " + w);
        if (!theta.allFinite()) throw NumericalError("non-finite baseline estimate");
      } catch (const std::exception& e) {
        res.warnings.push_back(std::string("init: baseline failed (") + e.what() + "), starting from zero");
        theta = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
      }
      break;
  }
  family.apply_mask(theta);
  res.init_used = theta;

  const std::size_t T = config.effective_iterations();
  const bool hat = config.estimator == Estimator::Hat;
  const KernelSpec joint = hat ? KernelSpec::product(config.k_x, config.k_y) : config.k_y;
  const PairBudget budget = config.effective_budget(ds.n());
  std::optional<PairSampler> sampler;
  if (hat) sampler.emplace(ds, config.k_x, budget.m1);

  Vector hist = Vector::Zero(theta.size());
  Vector avg = Vector::Zero(theta.size());
  std::size_t averaged = 0;
  res.trace.reserve(T / config.trace_every + 1);
  for (std::size_t t = 0; t < T; ++t) {
    Rng rng = Rng::stream(config.seed, t);
    const GradEstimate g = hat ? grad_full_estimate(family, theta, ds, joint, *sampler, budget, rng, config.mc_pairs)
                               : grad_tilde_full_estimate(family, theta, ds, joint, rng, config.mc_pairs);
    if (!g.vector.allFinite()) {
      res.failed = true;
      res.error = "non-finite gradient at iteration " + std::to_string(t + 1);
      break;
    }
    hist.array() += g.vector.array().square();
    const Vector next = theta.array() - config.eta * g.vector.array() / (hist.array().sqrt() + config.adagrad_eps);
    if (!next.allFinite()) {
      res.failed = true;
      res.error = "non-finite iterate at iteration " + std::to_string(t + 1);
      break;
    }
    theta = next;
    res.iterations_run = t + 1;
    if (config.polyak && 2 * (t + 1) > T) {
      avg += theta;
      ++averaged;
    }
    const bool record = (t + 1) % config.trace_every == 0 || t + 1 == T;
    const bool with_objective = config.objective_every > 0 && ((t + 1) % config.objective_every == 0 || t + 1 == T);
    if (record || with_objective) {
      TraceEntry e{t + 1, g.vector.norm(), std::nullopt};
      if (with_objective) {
        McBudget mc{config.objective_pairs, derive_seed(config.seed, 0x0b1ec7, t), false};
        e.objective = objective(family, theta, ds, joint, config.estimator, mc).value;
      }
      res.trace.push_back(e);
    }
  }
  if (config.polyak && averaged > 0) theta = avg / static_cast<double>(averaged);
  res.theta_raw = theta;
  res.theta_natural = family.natural(theta);
  res.converged = !res.failed;
  res.wall_time = detail::seconds_since(t0);
  return res;
}

/// Dispatch on the configured estimator.
inline FitResult fit(const RegressionFamily& family, const Dataset& ds, const FitConfig& config) {
  if (config.estimator == Estimator::Hat || config.estimator == Estimator::Tilde) return fit_mmd(family, ds, config);
  return fit_baseline(family, ds, config.estimator);
}

}  // namespace mmdreg
