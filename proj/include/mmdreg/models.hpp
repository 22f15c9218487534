#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>

#include "mmdreg/errors.hpp"
#include "mmdreg/kernels.hpp"
#include "mmdreg/normal_math.hpp"
#include "mmdreg/rng.hpp"

namespace mmdreg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Responses and datasets

enum class ResponseKind { Real, Count, Binary, CensoredPair };

inline std::string to_string(ResponseKind k) {
  switch (k) {
    case ResponseKind::Real: return "real";
    case ResponseKind::Count: return "count";
    case ResponseKind::Binary: return "binary";
    case ResponseKind::CensoredPair: return "censored_pair";
  }
  return "?";
}

/// Tagged response value. CensoredPair stores (y1, y2) with y2 in {0,1};
/// every other kind uses v[0] only.
struct Response {
  ResponseKind kind = ResponseKind::Real;
  std::array<double, 2> v{0.0, 0.0};

  static Response real(double y) { return {ResponseKind::Real, {y, 0.0}}; }
  static Response count(std::int64_t y) {
    if (y < 0) throw DomainError("count response must be nonnegative");
    return {ResponseKind::Count, {static_cast<double>(y), 0.0}};
  }
  static Response binary(int y) {
    if (y != 0 && y != 1) throw DomainError("binary response must be 0 or 1");
    return {ResponseKind::Binary, {static_cast<double>(y), 0.0}};
  }
  /// Enforces the selection rule y2 = 0 => y1 = 0.
  static Response censored(double y1, int y2) {
    if (y2 != 0 && y2 != 1) throw DomainError("selection indicator y2 must be 0 or 1");
    if (y2 == 0 && y1 != 0.0) throw DomainError("censored pair with y2 = 0 must have y1 = 0");
    return {ResponseKind::CensoredPair, {y1, static_cast<double>(y2)}};
  }

  std::size_t dim() const { return kind == ResponseKind::CensoredPair ? 2 : 1; }
  std::span<const double> coords() const { return {v.data(), dim()}; }
  double value() const { return v[0]; }
  int selected() const { return static_cast<int>(v[1]); }

  friend bool operator==(const Response&, const Response&) = default;
};

inline double response_kernel(const KernelSpec& k, const Response& a, const Response& b) {
  return eval(k, a.coords(), b.coords());
}

struct ContaminationRecord {
  bool applied = false;
  std::string scheme;
  std::string recipe;
  double epsilon = 0.0;
  double recipe_mean = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> indices;  // sorted modified rows
};

struct Dataset {
  Matrix X;
  std::vector<Response> y;
  std::string family_tag;
  std::uint64_t seed = 0;
  ContaminationRecord contamination;

  std::size_t n() const { return y.size(); }
  std::size_t d() const { return static_cast<std::size_t>(X.cols()); }
  std::span<const double> row(std::size_t i) const {
    return {X.data() + i * static_cast<std::size_t>(X.cols()), static_cast<std::size_t>(X.cols())};
  }

  void validate() const {
    if (y.empty()) throw DomainError("dataset must contain at least one row");
    if (static_cast<std::size_t>(X.rows()) != y.size())
      throw DomainError("dataset has " + std::to_string(X.rows()) + " covariate rows but " +
                        std::to_string(y.size()) + " responses");
    if (!X.allFinite()) throw DomainError("dataset covariates contain non-finite values");
    for (const auto& r : y) {
      if (r.kind != y.front().kind) throw DomainError("dataset responses have mixed kinds");
      if (!std::isfinite(r.v[0]) || !std::isfinite(r.v[1]))
        throw DomainError("dataset responses contain non-finite values");
    }
  }

  /// First `count` rows; contamination indices are restricted accordingly.
  Dataset head(std::size_t count) const {
    if (count > n()) throw DomainError("head: requested more rows than available");
    Dataset out;
    out.X = X.topRows(static_cast<Eigen::Index>(count));
    out.y.assign(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(count));
    out.family_tag = family_tag;
    out.seed = seed;
    out.contamination = contamination;
    std::erase_if(out.contamination.indices, [count](std::size_t i) { return i >= count; });
    return out;
  }
};

// ---------------------------------------------------------------------------
// Families

enum class FamilyKind { GaussianLinear, Logistic, Poisson, GammaReg, Heckman, GaussMixture };

/// Parametric family over an unconstrained parameter vector. Layouts:
///   GaussianLinear  (beta[d], log sigma)
///   Logistic        (beta[d])
///   Poisson         (beta[d])
///   GammaReg        (beta[d], log nu)
///   Heckman         (beta[d], gamma[d], log sigma, atanh rho)
///   GaussMixture    (beta_1..beta_M [M*d], log sigma_1..M, logits a_1..a_{M-1})
/// Frozen coordinates (sparsity mask) stay at 0 and receive zero gradient.
class RegressionFamily {
 public:
  static RegressionFamily gaussian_linear(std::size_t d) { return {FamilyKind::GaussianLinear, d, 1}; }
  static RegressionFamily logistic(std::size_t d) { return {FamilyKind::Logistic, d, 1}; }
  static RegressionFamily poisson(std::size_t d) { return {FamilyKind::Poisson, d, 1}; }
  static RegressionFamily gamma(std::size_t d) { return {FamilyKind::GammaReg, d, 1}; }
  static RegressionFamily heckman(std::size_t d) { return {FamilyKind::Heckman, d, 1}; }
  static RegressionFamily gauss_mixture(std::size_t d, std::size_t components) {
    if (components < 1) throw ConfigError("mixture needs at least one component");
    return {FamilyKind::GaussMixture, d, components};
  }
  /// Heckman with the outcome equation on the first d/2 covariates and the
  /// selection equation on the last d/2.
  static RegressionFamily heckman_split(std::size_t d) {
    if (d % 2 != 0) throw ConfigError("heckman_split needs an even covariate dimension");
    RegressionFamily f = heckman(d);
    std::vector<bool> frozen(f.param_dim(), false);
    for (std::size_t i = 0; i < d / 2; ++i) {
      frozen[d - 1 - i] = true;  // beta_{d-i}
      frozen[d + i] = true;      // gamma_{i+1}
    }
    f.set_frozen(std::move(frozen));
    return f;
  }

  FamilyKind kind() const { return kind_; }
  std::size_t d() const { return d_; }
  std::size_t components() const { return components_; }

  std::size_t param_dim() const {
    switch (kind_) {
      case FamilyKind::GaussianLinear: return d_ + 1;
      case FamilyKind::Logistic:
      case FamilyKind::Poisson: return d_;
      case FamilyKind::GammaReg: return d_ + 1;
      case FamilyKind::Heckman: return 2 * d_ + 2;
      case FamilyKind::GaussMixture: return components_ * (d_ + 1) + (components_ - 1);
    }
    return 0;
  }
  std::size_t free_dim() const {
    std::size_t k = 0;
    for (std::size_t i = 0; i < param_dim(); ++i) k += is_frozen(i) ? 0 : 1;
    return k;
  }
  bool is_frozen(std::size_t i) const { return !frozen_.empty() && frozen_[i]; }
  const std::vector<bool>& frozen() const { return frozen_; }
  void set_frozen(std::vector<bool> frozen) {
    if (!frozen.empty() && frozen.size() != param_dim()) throw ConfigError("sparsity mask has wrong length");
    frozen_ = std::move(frozen);
  }
  void apply_mask(Eigen::Ref<Vector> v) const {
    if (frozen_.empty()) return;
    for (std::size_t i = 0; i < frozen_.size(); ++i)
      if (frozen_[i]) v[static_cast<Eigen::Index>(i)] = 0.0;
  }

  ResponseKind response_kind() const {
    switch (kind_) {
      case FamilyKind::Logistic: return ResponseKind::Binary;
      case FamilyKind::Poisson: return ResponseKind::Count;
      case FamilyKind::Heckman: return ResponseKind::CensoredPair;
      default: return ResponseKind::Real;
    }
  }
  /// Families whose responses have a (truncated) finite support, so losses can be
  /// computed exactly by enumeration.
  bool has_exact_support() const { return kind_ == FamilyKind::Logistic || kind_ == FamilyKind::Poisson; }

  std::string name() const {
    switch (kind_) {
      case FamilyKind::GaussianLinear: return "gaussian";
      case FamilyKind::Logistic: return "logistic";
      case FamilyKind::Poisson: return "poisson";
      case FamilyKind::GammaReg: return "gamma";
      case FamilyKind::Heckman: return frozen_.empty() ? "heckman" : "heckman_split";
      case FamilyKind::GaussMixture: return "mixture";
    }
    return "?";
  }

  void check_theta(const Vector& theta) const {
    if (static_cast<std::size_t>(theta.size()) != param_dim())
      throw DomainError(name() + ": parameter vector has " + std::to_string(theta.size()) +
                        " entries, expected " + std::to_string(param_dim()));
  }
  void check_x(std::span<const double> x) const {
    if (x.size() != d_)
      throw DomainError(name() + ": covariate vector has " + std::to_string(x.size()) + " entries, expected " +
                        std::to_string(d_));
  }

  /// Constrained view: log/atanh/softmax coordinates mapped to sigma, nu, rho, weights.
  Vector natural(const Vector& raw) const {
    check_theta(raw);
    switch (kind_) {
      case FamilyKind::GaussianLinear:
      case FamilyKind::GammaReg: {
        Vector out = raw;
        out[static_cast<Eigen::Index>(d_)] = std::exp(raw[static_cast<Eigen::Index>(d_)]);
        return out;
      }
      case FamilyKind::Logistic:
      case FamilyKind::Poisson: return raw;
      case FamilyKind::Heckman: {
        Vector out = raw;
        const auto s = static_cast<Eigen::Index>(2 * d_);
        out[s] = std::exp(raw[s]);
        out[s + 1] = std::tanh(raw[s + 1]);
        return out;
      }
      case FamilyKind::GaussMixture: {
        const auto M = static_cast<Eigen::Index>(components_);
        const auto off = M * static_cast<Eigen::Index>(d_);
        Vector out(off + 2 * M);
        out.head(off) = raw.head(off);
        for (Eigen::Index m = 0; m < M; ++m) out[off + m] = std::exp(raw[off + m]);
        const std::vector<double> w = softmax_weights(raw);
        for (Eigen::Index m = 0; m < M; ++m) out[off + M + m] = w[static_cast<std::size_t>(m)];
        return out;
      }
    }
    return raw;
  }

  Vector raw_from_natural(const Vector& nat) const {
    switch (kind_) {
      case FamilyKind::GaussianLinear:
      case FamilyKind::GammaReg: {
        if (static_cast<std::size_t>(nat.size()) != param_dim()) throw DomainError("natural vector length");
        Vector out = nat;
        out[static_cast<Eigen::Index>(d_)] = std::log(nat[static_cast<Eigen::Index>(d_)]);
        return out;
      }
      case FamilyKind::Logistic:
      case FamilyKind::Poisson:
        if (static_cast<std::size_t>(nat.size()) != param_dim()) throw DomainError("natural vector length");
        return nat;
      case FamilyKind::Heckman: {
        if (static_cast<std::size_t>(nat.size()) != param_dim()) throw DomainError("natural vector length");
        Vector out = nat;
        const auto s = static_cast<Eigen::Index>(2 * d_);
        out[s] = std::log(nat[s]);
        out[s + 1] = std::atanh(nat[s + 1]);
        return out;
      }
      case FamilyKind::GaussMixture: {
        const auto M = static_cast<Eigen::Index>(components_);
        const auto off = M * static_cast<Eigen::Index>(d_);
        if (nat.size() != off + 2 * M) throw DomainError("natural vector length");
        Vector out(static_cast<Eigen::Index>(param_dim()));
        out.head(off) = nat.head(off);
        for (Eigen::Index m = 0; m < M; ++m) out[off + m] = std::log(nat[off + m]);
        for (Eigen::Index m = 0; m + 1 < M; ++m) out[off + M + m] = std::log(nat[off + M + m] / nat[off + 2 * M - 1]);
        return out;
      }
    }
    return nat;
  }

  std::vector<std::string> natural_names() const {
    std::vector<std::string> names;
    auto push_vec = [&](const std::string& stem) {
      for (std::size_t j = 0; j < d_; ++j) names.push_back(stem + std::to_string(j + 1));
    };
    switch (kind_) {
      case FamilyKind::GaussianLinear: push_vec("beta"); names.emplace_back("sigma"); break;
      case FamilyKind::Logistic:
      case FamilyKind::Poisson: push_vec("beta"); break;
      case FamilyKind::GammaReg: push_vec("beta"); names.emplace_back("nu"); break;
      case FamilyKind::Heckman:
        push_vec("beta");
        push_vec("gamma");
        names.emplace_back("sigma");
        names.emplace_back("rho");
        break;
      case FamilyKind::GaussMixture:
        for (std::size_t m = 0; m < components_; ++m) push_vec("beta" + std::to_string(m + 1) + "_");
        for (std::size_t m = 0; m < components_; ++m) names.push_back("sigma" + std::to_string(m + 1));
        for (std::size_t m = 0; m < components_; ++m) names.push_back("weight" + std::to_string(m + 1));
        break;
    }
    return names;
  }

  std::vector<double> softmax_weights(const Vector& raw) const {
    const std::size_t M = components_;
    const std::size_t off = M * (d_ + 1);
    std::vector<double> w(M);
    double mx = 0.0;  // last logit is pinned at 0
    for (std::size_t m = 0; m + 1 < M; ++m) mx = std::max(mx, raw[static_cast<Eigen::Index>(off + m)]);
    double total = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const double a = (m + 1 < M) ? raw[static_cast<Eigen::Index>(off + m)] : 0.0;
      w[m] = std::exp(a - mx);
      total += w[m];
    }
    for (auto& v : w) v /= total;
    return w;
  }

 private:
  RegressionFamily(FamilyKind k, std::size_t d, std::size_t M) : kind_(k), d_(d), components_(M) {
    if (d == 0) throw ConfigError("covariate dimension must be >= 1");
  }

  FamilyKind kind_;
  std::size_t d_;
  std::size_t components_;
  std::vector<bool> frozen_;
};

// ---------------------------------------------------------------------------
// Natural parameters

struct GaussianParams { double mean, sigma; };
struct BernoulliParams { double probability; };
struct PoissonParams { double rate; };
struct GammaParams {
  double shape, rate;
  double mean() const { return shape / rate; }
};
struct HeckmanParams { double mu1, mu2, sigma, rho; };
struct MixtureParams { std::vector<double> means, sigmas, weights; };

using NaturalParams =
    std::variant<GaussianParams, BernoulliParams, PoissonParams, GammaParams, HeckmanParams, MixtureParams>;

namespace detail {

inline double dot(const Vector& theta, std::size_t offset, std::span<const double> x) {
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) s += theta[static_cast<Eigen::Index>(offset + j)] * x[j];
  return s;
}

inline double logistic(double t) {
  return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

}  // namespace detail

/// Law P_{g(theta,x)} of the response at one covariate point. Caches the
/// linear predictors, so build one per (theta, x) and reuse it for sampling
/// and score evaluation.
class Conditional {
 public:
  Conditional(const RegressionFamily& family, const Vector& theta, std::span<const double> x)
      : family_(&family), x_(x) {
    family.check_theta(theta);
    family.check_x(x);
    const std::size_t d = family.d();
    switch (family.kind()) {
      case FamilyKind::GaussianLinear:
        eta_ = detail::dot(theta, 0, x);
        params_ = GaussianParams{eta_, std::exp(theta[static_cast<Eigen::Index>(d)])};
        break;
      case FamilyKind::Logistic:
        eta_ = detail::dot(theta, 0, x);
        params_ = BernoulliParams{detail::logistic(eta_)};
        break;
      case FamilyKind::Poisson:
        eta_ = detail::dot(theta, 0, x);
        params_ = PoissonParams{std::exp(eta_)};
        break;
      case FamilyKind::GammaReg: {
        eta_ = detail::dot(theta, 0, x);
        const double nu = std::exp(theta[static_cast<Eigen::Index>(d)]);
        params_ = GammaParams{nu, nu * std::exp(-eta_)};
        break;
      }
      case FamilyKind::Heckman: {
        const auto s = static_cast<Eigen::Index>(2 * d);
        params_ = HeckmanParams{detail::dot(theta, 0, x), detail::dot(theta, d, x), std::exp(theta[s]),
                                std::tanh(theta[s + 1])};
        break;
      }
      case FamilyKind::GaussMixture: {
        const std::size_t M = family.components();
        MixtureParams p;
        p.means.resize(M);
        p.sigmas.resize(M);
        for (std::size_t m = 0; m < M; ++m) {
          p.means[m] = detail::dot(theta, m * d, x);
          p.sigmas[m] = std::exp(theta[static_cast<Eigen::Index>(M * d + m)]);
        }
        p.weights = family.softmax_weights(theta);
        params_ = std::move(p);
        break;
      }
    }
  }

  const NaturalParams& params() const { return params_; }
  const RegressionFamily& family() const { return *family_; }

  Response sample(Rng& rng) const {
    switch (family_->kind()) {
      case FamilyKind::GaussianLinear: {
        const auto& p = std::get<GaussianParams>(params_);
        return Response::real(p.mean + p.sigma * rng.normal());
      }
      case FamilyKind::Logistic:
        return Response::binary(rng.bernoulli(std::get<BernoulliParams>(params_).probability) ? 1 : 0);
      case FamilyKind::Poisson:
        return Response::count(rng.poisson(std::get<PoissonParams>(params_).rate));
      case FamilyKind::GammaReg: {
        const auto& p = std::get<GammaParams>(params_);
        return Response::real(rng.gamma(p.shape, p.rate));
      }
      case FamilyKind::Heckman: {
        const auto& p = std::get<HeckmanParams>(params_);
        const double e2 = rng.normal();
        const double e1 = rng.normal();
        const double z2 = p.mu2 + e2;
        if (z2 <= 0.0) return Response{ResponseKind::CensoredPair, {0.0, 0.0}};
        const double z1 = p.mu1 + p.sigma * (p.rho * e2 + std::sqrt(1.0 - p.rho * p.rho) * e1);
        return Response{ResponseKind::CensoredPair, {z1, 1.0}};
      }
      case FamilyKind::GaussMixture: {
        const auto& p = std::get<MixtureParams>(params_);
        const double u = rng.uniform();
        std::size_t m = 0;
        double acc = p.weights[0];
        while (u > acc && m + 1 < p.weights.size()) acc += p.weights[++m];
        return Response::real(p.means[m] + p.sigmas[m] * rng.normal());
      }
    }
    throw ConfigError("sample: unknown family");
  }

  double log_density(const Response& y) const {
    check_response(y);
    switch (family_->kind()) {
      case FamilyKind::GaussianLinear: {
        const auto& p = std::get<GaussianParams>(params_);
        const double r = (y.value() - p.mean) / p.sigma;
        return -normal_math::kLogSqrt2Pi - std::log(p.sigma) - 0.5 * r * r;
      }
      case FamilyKind::Logistic: {
        // log sigma(eta) and log(1 - sigma(eta)) without cancellation
        const double t = y.value() > 0.5 ? eta_ : -eta_;
        return -std::log1p(std::exp(-std::abs(t))) + std::min(t, 0.0);
      }
      case FamilyKind::Poisson:
        return y.value() * eta_ - std::exp(eta_) - std::lgamma(y.value() + 1.0);
      case FamilyKind::GammaReg: {
        const auto& p = std::get<GammaParams>(params_);
        const double nu = p.shape;
        return nu * std::log(nu) - nu * eta_ - std::lgamma(nu) + (nu - 1.0) * std::log(y.value()) -
               nu * y.value() * std::exp(-eta_);
      }
      case FamilyKind::Heckman: {
        const auto& p = std::get<HeckmanParams>(params_);
        if (y.selected() == 0) return normal_math::log_cdf(-p.mu2);
        const double r = (y.value() - p.mu1) / p.sigma;
        const double s = std::sqrt(1.0 - p.rho * p.rho);
        const double w = (p.mu2 + p.rho * r) / s;
        return -normal_math::kLogSqrt2Pi - std::log(p.sigma) - 0.5 * r * r + normal_math::log_cdf(w);
      }
      case FamilyKind::GaussMixture: {
        const auto& p = std::get<MixtureParams>(params_);
        std::vector<double> terms(p.weights.size());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < terms.size(); ++m) {
          const double r = (y.value() - p.means[m]) / p.sigmas[m];
          terms[m] = std::log(p.weights[m]) - normal_math::kLogSqrt2Pi - std::log(p.sigmas[m]) - 0.5 * r * r;
          mx = std::max(mx, terms[m]);
        }
        double s = 0.0;
        for (double t : terms) s += std::exp(t - mx);
        return mx + std::log(s);
      }
    }
    throw ConfigError("log_density: unknown family");
  }

  /// grad += weight * d/dtheta log p(y), in the unconstrained layout.
  void accumulate_score(const Response& y, double weight, Eigen::Ref<Vector> grad) const {
    check_response(y);
    const std::size_t d = family_->d();
    auto axpy_x = [&](std::size_t offset, double coef) {
      for (std::size_t j = 0; j < d; ++j) grad[static_cast<Eigen::Index>(offset + j)] += coef * x_[j];
    };
    switch (family_->kind()) {
      case FamilyKind::GaussianLinear: {
        const auto& p = std::get<GaussianParams>(params_);
        const double r = (y.value() - p.mean) / p.sigma;
        axpy_x(0, weight * r / p.sigma);
        grad[static_cast<Eigen::Index>(d)] += weight * (r * r - 1.0);
        return;
      }
      case FamilyKind::Logistic:
        axpy_x(0, weight * (y.value() - std::get<BernoulliParams>(params_).probability));
        return;
      case FamilyKind::Poisson:
        axpy_x(0, weight * (y.value() - std::get<PoissonParams>(params_).rate));
        return;
      case FamilyKind::GammaReg: {
        const double nu = std::get<GammaParams>(params_).shape;
        const double ratio = y.value() * std::exp(-eta_);
        axpy_x(0, weight * nu * (ratio - 1.0));
        const double dnu = std::log(nu) + 1.0 - eta_ - boost::math::digamma(nu) + std::log(y.value()) - ratio;
        grad[static_cast<Eigen::Index>(d)] += weight * nu * dnu;
        return;
      }
      case FamilyKind::Heckman: {
        const auto& p = std::get<HeckmanParams>(params_);
        const auto s_idx = static_cast<Eigen::Index>(2 * d);
        if (y.selected() == 0) {
          axpy_x(d, -weight * normal_math::inverse_mills(-p.mu2));
          return;
        }
        const double r = (y.value() - p.mu1) / p.sigma;
        const double s = std::sqrt(1.0 - p.rho * p.rho);
        const double w = (p.mu2 + p.rho * r) / s;
        const double lam = normal_math::inverse_mills(w);
        const double d_mu1 = r / p.sigma - lam * p.rho / (p.sigma * s);
        const double d_mu2 = lam / s;
        const double d_logsigma = r * r - 1.0 - lam * p.rho * r / s;
        const double d_atanh_rho = lam * (r + p.rho * p.mu2) / s;
        axpy_x(0, weight * d_mu1);
        axpy_x(d, weight * d_mu2);
        grad[s_idx] += weight * d_logsigma;
        grad[s_idx + 1] += weight * d_atanh_rho;
        return;
      }
      case FamilyKind::GaussMixture: {
        const auto& p = std::get<MixtureParams>(params_);
        const std::size_t M = p.weights.size();
        std::vector<double> resp(M);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t m = 0; m < M; ++m) {
          const double r = (y.value() - p.means[m]) / p.sigmas[m];
          resp[m] = std::log(p.weights[m]) - std::log(p.sigmas[m]) - 0.5 * r * r;
          mx = std::max(mx, resp[m]);
        }
        double total = 0.0;
        for (auto& v : resp) total += (v = std::exp(v - mx));
        for (auto& v : resp) v /= total;
        for (std::size_t m = 0; m < M; ++m) {
          const double r = (y.value() - p.means[m]) / p.sigmas[m];
          axpy_x(m * d, weight * resp[m] * r / p.sigmas[m]);
          grad[static_cast<Eigen::Index>(M * d + m)] += weight * resp[m] * (r * r - 1.0);
        }
        for (std::size_t m = 0; m + 1 < M; ++m)
          grad[static_cast<Eigen::Index>(M * (d + 1) + m)] += weight * (resp[m] - p.weights[m]);
        return;
      }
    }
  }

  /// Support points with probabilities. Count support is truncated around the
  /// mode once the retained mass reaches 1 - 1e-12.
  std::vector<std::pair<Response, double>> support() const {
    switch (family_->kind()) {
      case FamilyKind::Logistic: {
        const double p = std::get<BernoulliParams>(params_).probability;
        return {{Response::binary(0), 1.0 - p}, {Response::binary(1), p}};
      }
      case FamilyKind::Poisson: {
        const double rate = std::get<PoissonParams>(params_).rate;
        auto log_pmf = [&](double k) { return k * eta_ - rate - std::lgamma(k + 1.0); };
        const double mode = std::floor(rate);
        std::vector<std::pair<Response, double>> out;
        double mass = std::exp(log_pmf(mode));
        out.emplace_back(Response::count(static_cast<std::int64_t>(mode)), mass);
        double lo = mode - 1.0, hi = mode + 1.0;
        while (mass < 1.0 - 1e-12) {
          const double p_lo = lo >= 0.0 ? std::exp(log_pmf(lo)) : 0.0;
          const double p_hi = std::exp(log_pmf(hi));
          if (p_lo == 0.0 && p_hi == 0.0 && lo < 0.0) break;
          if (p_lo >= p_hi && lo >= 0.0) {
            out.emplace_back(Response::count(static_cast<std::int64_t>(lo)), p_lo);
            mass += p_lo;
            lo -= 1.0;
          } else {
            out.emplace_back(Response::count(static_cast<std::int64_t>(hi)), p_hi);
            mass += p_hi;
            hi += 1.0;
          }
        }
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first.v[0] < b.first.v[0]; });
        return out;
      }
      default:
        throw DomainError(family_->name() + ": response distribution has no finite support");
    }
  }

 private:
  void check_response(const Response& y) const {
    if (y.kind != family_->response_kind())
      throw DomainError(family_->name() + ": zero density for a " + to_string(y.kind) + " response");
    if (family_->kind() == FamilyKind::GammaReg && !(y.value() > 0.0))
      throw DomainError("gamma: zero density for a nonpositive response");
    if (y.kind == ResponseKind::CensoredPair && y.selected() == 0 && y.value() != 0.0)
      throw DomainError("heckman: zero density for y2 = 0 with y1 != 0");
  }

  const RegressionFamily* family_;
  std::span<const double> x_;
  double eta_ = 0.0;
  NaturalParams params_;
};

inline NaturalParams link(const RegressionFamily& family, const Vector& theta, std::span<const double> x) {
  return Conditional(family, theta, x).params();
}

inline Response sample(const RegressionFamily& family, const Vector& theta, std::span<const double> x, Rng& rng) {
  return Conditional(family, theta, x).sample(rng);
}

inline double log_density(const RegressionFamily& family, const Vector& theta, std::span<const double> x,
                          const Response& y) {
  return Conditional(family, theta, x).log_density(y);
}

inline Vector grad_log_density(const RegressionFamily& family, const Vector& theta, std::span<const double> x,
                               const Response& y) {
  Vector g = Vector::Zero(static_cast<Eigen::Index>(family.param_dim()));
  Conditional(family, theta, x).accumulate_score(y, 1.0, g);
  family.apply_mask(g);
  return g;
}

// ---------------------------------------------------------------------------
// Synthetic scenarios

enum class Scenario { GaussLinearLaplace, HeckmanSynthetic, GammaSynthetic };

struct ScenarioInfo {
  RegressionFamily family;
  Vector truth;             // natural-scale parameter of the data-generating law
  std::vector<bool> rmse_mask;  // coordinates scored as "theta"
  std::vector<bool> beta_mask;  // outcome-coefficient sub-vector
};

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::GaussLinearLaplace: return "gauss_linear_laplace";
    case Scenario::HeckmanSynthetic: return "heckman_synthetic";
    case Scenario::GammaSynthetic: return "gamma_synthetic";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& s) {
  if (s == "gauss_linear_laplace" || s == "GaussLinearLaplace") return Scenario::GaussLinearLaplace;
  if (s == "heckman_synthetic" || s == "HeckmanSynthetic") return Scenario::HeckmanSynthetic;
  if (s == "gamma_synthetic" || s == "GammaSynthetic") return Scenario::GammaSynthetic;
  throw ConfigError("unknown scenario '" + s + "'");
}

inline ScenarioInfo scenario_info(Scenario s) {
  constexpr std::size_t d = 8;
  switch (s) {
    case Scenario::GaussLinearLaplace: {
      Vector truth(d + 1);
      truth << 4, 4, 3, 3, 2, 2, 1, 1, 1;  // last entry: Laplace scale, not a model parameter
      std::vector<bool> mask(d + 1, true);
      mask[d] = false;
      return {RegressionFamily::gaussian_linear(d), truth, mask, mask};
    }
    case Scenario::HeckmanSynthetic: {
      RegressionFamily f = RegressionFamily::heckman_split(d);
      Vector truth(2 * d + 2);
      truth << 4, 3, 2, 1, 0, 0, 0, 0, 0, 0, 0, 0, 4, 3, 2, 1, 1.5, 0.5;
      std::vector<bool> mask(2 * d + 2), beta(2 * d + 2, false);
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = !f.is_frozen(i);
      for (std::size_t i = 0; i < d; ++i) beta[i] = !f.is_frozen(i);
      return {f, truth, mask, beta};
    }
    case Scenario::GammaSynthetic: {
      Vector truth = Vector::Ones(d + 1);
      std::vector<bool> mask(d + 1, true), beta(d + 1, true);
      beta[d] = false;
      return {RegressionFamily::gamma(d), truth, mask, beta};
    }
  }
  throw ConfigError("unknown scenario");
}

/// Rows are drawn from per-row streams, so simulate(N)[0:n] == simulate(n).
inline Dataset simulate_dataset(Scenario scenario, std::size_t N, std::uint64_t seed) {
  if (N < 1) throw ConfigError("simulate_dataset: N must be >= 1");
  const ScenarioInfo info = scenario_info(scenario);
  const std::size_t d = info.family.d();
  Dataset ds;
  ds.X.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(d));
  ds.y.resize(N);
  ds.seed = seed;
  ds.family_tag = info.family.name();
  const Vector raw_truth = scenario == Scenario::GaussLinearLaplace ? Vector() : info.family.raw_from_natural(info.truth);
  for (std::size_t i = 0; i < N; ++i) {
    Rng rng = Rng::stream(seed, i);
    for (std::size_t j = 0; j < d; ++j) ds.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rng.normal();
    const auto x = ds.row(i);
    if (scenario == Scenario::GaussLinearLaplace) {
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += info.truth[static_cast<Eigen::Index>(j)] * x[j];
      ds.y[i] = Response::real(mean + rng.laplace(0.0, info.truth[static_cast<Eigen::Index>(d)]));
    } else {
      ds.y[i] = sample(info.family, raw_truth, x, rng);
    }
  }
  return ds;
}

}  // namespace mmdreg
