#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "mmdreg/kernels.hpp"
#include "mmdreg/models.hpp"
#include "mmdreg/rng.hpp"

namespace mmdreg {

enum class ObjectiveMode { Exact, MonteCarlo };

struct ObjectiveValue {
  double value = 0.0;
  ObjectiveMode mode = ObjectiveMode::Exact;
  std::size_t mc_samples = 0;
  double std_error = 0.0;
  std::vector<std::string> warnings;
};

/// Monte Carlo settings for objective evaluation. Ignored for families with
/// finite support, which are always evaluated exactly.
struct McBudget {
  std::size_t pairs = 1000;
  std::uint64_t seed = 0;
  // Reuse one random stream for every loss term instead of independent streams.
  bool common_random_numbers = false;
};

enum class Estimator { Hat, Tilde, MLE, OLS };

inline std::string to_string(Estimator e) {
  switch (e) {
    case Estimator::Hat: return "hat";
    case Estimator::Tilde: return "tilde";
    case Estimator::MLE: return "mle";
    case Estimator::OLS: return "ols";
  }
  return "?";
}

inline Estimator parse_estimator(const std::string& s) {
  if (s == "hat" || s == "Hat") return Estimator::Hat;
  if (s == "tilde" || s == "Tilde") return Estimator::Tilde;
  if (s == "mle" || s == "MLE") return Estimator::MLE;
  if (s == "ols" || s == "OLS") return Estimator::OLS;
  throw ConfigError("unknown estimator '" + s + "'");
}

// ---------------------------------------------------------------------------
// MMD between weighted point sets

struct WeightedPointSet {
  std::vector<std::vector<double>> points;
  std::vector<double> weights;

  static WeightedPointSet uniform(std::vector<std::vector<double>> pts) {
    WeightedPointSet s;
    s.weights.assign(pts.size(), pts.empty() ? 0.0 : 1.0 / static_cast<double>(pts.size()));
    s.points = std::move(pts);
    return s;
  }

  void validate(const char* label) const {
    if (points.empty()) throw DomainError(std::string("mmd: point set ") + label + " is empty");
    if (points.size() != weights.size())
      throw DomainError(std::string("mmd: point set ") + label + " has mismatched weights");
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw DomainError(std::string("mmd: negative weight in ") + label);
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError(std::string("mmd: weights of ") + label + " do not sum to 1");
  }
};

namespace detail {

inline double cross_term(const KernelSpec& k, const WeightedPointSet& a, const WeightedPointSet& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    if (a.weights[i] == 0.0) continue;
    double row = 0.0;
    for (std::size_t j = 0; j < b.points.size(); ++j) row += b.weights[j] * eval(k, a.points[i], b.points[j]);
    s += a.weights[i] * row;
  }
  return s;
}

}  // namespace detail

/// Squared MMD between two discrete measures (V-statistic, diagonal included).
/// Tiny negative round-off is clamped to 0.
inline double mmd_sq_vstat(const KernelSpec& k, const WeightedPointSet& a, const WeightedPointSet& b) {
  a.validate("A");
  b.validate("B");
  const double v = detail::cross_term(k, a, a) - 2.0 * detail::cross_term(k, a, b) + detail::cross_term(k, b, b);
  return v < 0.0 ? 0.0 : v;
}

// ---------------------------------------------------------------------------
// Per-observation losses

namespace detail {

struct Moments {
  double mean = 0.0;
  double std_error = 0.0;
};

/// E[kY(Y,Y') - 2 kY(Y,y)], Y ~ law_a, Y' ~ law_b, by enumeration.
inline double exact_pair_loss(const Conditional& law_a, const Conditional& law_b, const Response& y,
                              const KernelSpec& ky) {
  const auto sa = law_a.support();
  const auto sb = (&law_a == &law_b) ? sa : law_b.support();
  double cross = 0.0, target = 0.0;
  for (const auto& [ya, pa] : sa) {
    double row = 0.0;
    for (const auto& [yb, pb] : sb) row += pb * response_kernel(ky, ya, yb);
    cross += pa * row;
    target += pa * response_kernel(ky, ya, y);
  }
  return cross - 2.0 * target;
}

inline Moments mc_pair_loss(const Conditional& law_a, const Conditional& law_b, const Response& y,
                            const KernelSpec& ky, std::size_t pairs, Rng& rng) {
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t s = 0; s < pairs; ++s) {
    const Response ya = law_a.sample(rng);
    const Response yb = law_b.sample(rng);
    const double v = response_kernel(ky, ya, yb) - 2.0 * response_kernel(ky, ya, y);
    sum += v;
    sum_sq += v * v;
  }
  const double n = static_cast<double>(pairs);
  Moments m;
  m.mean = sum / n;
  if (pairs > 1) {
    const double var = std::max(0.0, (sum_sq - n * m.mean * m.mean) / (n - 1.0));
    m.std_error = std::sqrt(var / n);
  }
  return m;
}

inline ObjectiveValue pair_loss(const Conditional& law_a, const Conditional& law_b, const Response& y,
                                const KernelSpec& ky, std::size_t pairs, Rng& rng, double scale) {
  ObjectiveValue out;
  if (law_a.family().has_exact_support()) {
    out.mode = ObjectiveMode::Exact;
    out.value = scale * exact_pair_loss(law_a, law_b, y, ky);
    return out;
  }
  if (pairs == 0) throw ConfigError("Monte Carlo loss needs a budget of at least one pair");
  const Moments m = mc_pair_loss(law_a, law_b, y, ky, pairs, rng);
  out.mode = ObjectiveMode::MonteCarlo;
  out.value = scale * m.mean;
  out.std_error = std::abs(scale) * m.std_error;
  out.mc_samples = pairs;
  return out;
}

inline const KernelSpec& response_part(const KernelSpec& k) { return k.is_product() ? k.y_kernel() : k; }

}  // namespace detail

/// E_{Y,Y' iid P_{g(theta,x)}}[kY(Y,Y') - 2 kY(Y,y)].
inline ObjectiveValue loss_tilde(const RegressionFamily& family, const Vector& theta, std::span<const double> x,
                                 const Response& y, const KernelSpec& ky, std::size_t pairs, Rng& rng) {
  const Conditional law(family, theta, x);
  return detail::pair_loss(law, law, y, ky, pairs, rng, 1.0);
}

/// kX(x,x') * E[kY(Y,Y') - 2 kY(Y,y)] with Y ~ P_{g(theta,x)}, Y' ~ P_{g(theta,x')},
/// for a product kernel k = kX (x) kY.
inline ObjectiveValue loss_hat(const RegressionFamily& family, const Vector& theta, std::span<const double> x,
                               std::span<const double> xp, const Response& y, const KernelSpec& k,
                               std::size_t pairs, Rng& rng) {
  if (!k.is_product()) throw ConfigError("loss_hat requires a product kernel");
  const double kx = eval(k.x_kernel(), x, xp);
  if (kx == 0.0) {
    family.check_theta(theta);
    return {};
  }
  const Conditional law_a(family, theta, x);
  const Conditional law_b(family, theta, xp);
  return detail::pair_loss(law_a, law_b, y, k.y_kernel(), pairs, rng, kx);
}

namespace detail {

inline std::vector<Conditional> laws_for(const RegressionFamily& family, const Vector& theta, const Dataset& ds) {
  std::vector<Conditional> laws;
  laws.reserve(ds.n());
  for (std::size_t i = 0; i < ds.n(); ++i) laws.emplace_back(family, theta, ds.row(i));
  return laws;
}

inline void accumulate(ObjectiveValue& total, const ObjectiveValue& term, double& var) {
  total.value += term.value;
  var += term.std_error * term.std_error;
  if (term.mode == ObjectiveMode::MonteCarlo) {
    total.mode = ObjectiveMode::MonteCarlo;
    total.mc_samples += term.mc_samples;
  }
}

inline Rng term_rng(const McBudget& budget, std::uint64_t term) {
  return Rng::stream(budget.seed, budget.common_random_numbers ? 0 : term);
}

}  // namespace detail

/// Tilde: sum_i loss_tilde(X_i, Y_i).  Hat: sum_{i,j} loss_hat(X_i, X_j, Y_j).
/// Terms are summed in index order, so Exact-mode values are reproducible.
inline ObjectiveValue objective(const RegressionFamily& family, const Vector& theta, const Dataset& ds,
                                const KernelSpec& kernel, Estimator which, const McBudget& budget = {}) {
  if (ds.n() < 1) throw DomainError("objective: empty dataset");
  const auto laws = detail::laws_for(family, theta, ds);
  ObjectiveValue total;
  double var = 0.0;
  if (which == Estimator::Tilde) {
    const KernelSpec& ky = detail::response_part(kernel);
    for (std::size_t i = 0; i < ds.n(); ++i) {
      Rng rng = detail::term_rng(budget, i);
      detail::accumulate(total, detail::pair_loss(laws[i], laws[i], ds.y[i], ky, budget.pairs, rng, 1.0), var);
    }
  } else if (which == Estimator::Hat) {
    if (!kernel.is_product()) throw ConfigError("Hat objective requires a product kernel");
    const std::size_t n = ds.n();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double kx = eval(kernel.x_kernel(), ds.row(i), ds.row(j));
        if (kx == 0.0) continue;
        Rng rng = detail::term_rng(budget, i * n + j);
        detail::accumulate(
            total, detail::pair_loss(laws[i], laws[j], ds.y[j], kernel.y_kernel(), budget.pairs, rng, kx), var);
      }
    }
  } else {
    throw ConfigError("objective: estimator must be hat or tilde");
  }
  total.std_error = std::sqrt(var);
  return total;
}

/// Hat minus Tilde: sum over i<j of kX(X_i,X_j) [l(i,j,Y_j) + l(j,i,Y_i)], where
/// l(i,j,y) = E[kY(Y,Y') - 2 kY(Y,y)], Y ~ P_{g(theta,X_i)}, Y' ~ P_{g(theta,X_j)}.
inline ObjectiveValue link_term(const RegressionFamily& family, const Vector& theta, const Dataset& ds,
                                const KernelSpec& kx, const KernelSpec& ky, const McBudget& budget = {}) {
  if (ds.n() < 1) throw DomainError("link_term: empty dataset");
  const double self = eval(kx, ds.row(0), ds.row(0));
  if (std::abs(self - 1.0) > 1e-12) throw ConfigError("link_term: covariate kernel must satisfy kX(x,x) = 1");
  const auto laws = detail::laws_for(family, theta, ds);
  const std::size_t n = ds.n();
  ObjectiveValue total;
  double var = 0.0;
  bool duplicates = false;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double k = eval(kx, ds.row(i), ds.row(j));
      if (!(k > 0.0)) {
        if (k < 0.0) throw ConfigError("link_term: covariate kernel must be strictly positive");
        continue;
      }
      if (k == 1.0) duplicates = true;
      Rng rng_ij = detail::term_rng(budget, 2 * (i * n + j));
      Rng rng_ji = detail::term_rng(budget, 2 * (i * n + j) + 1);
      detail::accumulate(total, detail::pair_loss(laws[i], laws[j], ds.y[j], ky, budget.pairs, rng_ij, k), var);
      detail::accumulate(total, detail::pair_loss(laws[j], laws[i], ds.y[i], ky, budget.pairs, rng_ji, k), var);
    }
  }
  total.std_error = std::sqrt(var);
  if (duplicates) {
    total.warnings.emplace_back(
        "duplicate covariate rows: the link term does not vanish as the covariate bandwidth goes to 0");
  }
  return total;
}

}  // namespace mmdreg
