#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <string>
#include <vector>

#include "mmdreg/kernels.hpp"
#include "mmdreg/mmd_objective.hpp"
#include "mmdreg/models.hpp"
#include "mmdreg/rng.hpp"

namespace mmdreg {

inline std::uint64_t pair_count(std::size_t n) {
  return static_cast<std::uint64_t>(n) * (n > 0 ? n - 1 : 0) / 2;
}

/// M1 deterministic (largest covariate-kernel) pairs plus M2 pairs sampled
/// without replacement from the remaining ones.
struct PairBudget {
  std::size_t m1 = 0;
  std::size_t m2 = 1;

  /// M1 = M2 = n, clipped to the number of available pairs.
  static PairBudget defaults(std::size_t n) {
    const std::uint64_t total = pair_count(n);
    PairBudget b;
    b.m1 = static_cast<std::size_t>(std::min<std::uint64_t>(n, total));
    b.m2 = static_cast<std::size_t>(std::min<std::uint64_t>(n, total - b.m1));
    return b;
  }

  void validate(std::size_t n) const {
    const std::uint64_t total = pair_count(n);
    if (m1 + m2 > total)
      throw ConfigError("pair budget M1+M2=" + std::to_string(m1 + m2) + " exceeds the " + std::to_string(total) +
                        " available pairs");
    if (m2 == 0 && m1 < total)
      throw ConfigError("pair budget needs M2 >= 1 unless M1 covers every pair");
  }
};

enum class GradTarget { GradTilde, GradHat };

struct GradEstimate {
  Vector vector;
  GradTarget target = GradTarget::GradTilde;
  std::size_t draws_used = 0;
};

namespace detail {

/// += 2 (kY(Y,Y') - kY(Y,y)) * score(Y) * scale, averaged over `pairs` draws.
inline std::size_t add_one_sided(const Conditional& law_a, const Conditional& law_b, const Response& y,
                                 const KernelSpec& ky, double scale, std::size_t pairs, Rng& rng,
                                 Eigen::Ref<Vector> grad) {
  const double w = 2.0 * scale / static_cast<double>(pairs);
  for (std::size_t s = 0; s < pairs; ++s) {
    const Response ya = law_a.sample(rng);
    const Response yb = law_b.sample(rng);
    const double c = response_kernel(ky, ya, yb) - response_kernel(ky, ya, y);
    if (c != 0.0) law_a.accumulate_score(ya, w * c, grad);
  }
  return 2 * pairs;
}

/// Half the sum of the (i,j) and (j,i) one-sided terms, sharing one draw from
/// each law: unbiased for the gradient of 1/2 [l(i,j,y_j) + l(j,i,y_i)].
inline std::size_t add_assembled(const Conditional& law_i, const Response& y_i, const Conditional& law_j,
                                 const Response& y_j, const KernelSpec& ky, double scale, std::size_t pairs,
                                 Rng& rng, Eigen::Ref<Vector> grad) {
  const double w = scale / static_cast<double>(pairs);
  for (std::size_t s = 0; s < pairs; ++s) {
    const Response a = law_i.sample(rng);
    const Response b = law_j.sample(rng);
    const double kab = response_kernel(ky, a, b);
    const double ci = kab - response_kernel(ky, a, y_j);
    const double cj = kab - response_kernel(ky, b, y_i);
    if (ci != 0.0) law_i.accumulate_score(a, w * ci, grad);
    if (cj != 0.0) law_j.accumulate_score(b, w * cj, grad);
  }
  return 2 * pairs;
}

inline void check_pairs(std::size_t pairs) {
  if (pairs == 0) throw ConfigError("gradient estimate needs at least one draw pair");
}

}  // namespace detail

/// Unbiased estimate of the gradient of loss_tilde(theta, x, y).
inline GradEstimate grad_tilde_estimate(const RegressionFamily& family, const Vector& theta,
                                        std::span<const double> x, const Response& y, const KernelSpec& ky,
                                        Rng& rng, std::size_t pairs = 1) {
  detail::check_pairs(pairs);
  const Conditional law(family, theta, x);
  GradEstimate g{Vector::Zero(static_cast<Eigen::Index>(family.param_dim())), GradTarget::GradTilde, 0};
  g.draws_used = detail::add_one_sided(law, law, y, ky, 1.0, pairs, rng, g.vector);
  family.apply_mask(g.vector);
  return g;
}

/// One-sided term 2 kX(x,x') E[(kY(Y,Y') - kY(Y,y)) score_x(Y)]: differentiates
/// through P_{g(theta,x)} only. The gradient of a pair is the sum of the (x,x')
/// and (x',x) terms; see grad_hat_pair_assembled.
inline GradEstimate grad_hat_pair_estimate(const RegressionFamily& family, const Vector& theta,
                                           std::span<const double> x, std::span<const double> xp,
                                           const Response& y, const KernelSpec& k, Rng& rng,
                                           std::size_t pairs = 1) {
  if (!k.is_product()) throw ConfigError("pair gradient requires a product kernel");
  detail::check_pairs(pairs);
  GradEstimate g{Vector::Zero(static_cast<Eigen::Index>(family.param_dim())), GradTarget::GradHat, 0};
  const double kx = eval(k.x_kernel(), x, xp);
  if (kx == 0.0) return g;
  const Conditional law_a(family, theta, x);
  const Conditional law_b(family, theta, xp);
  g.draws_used = detail::add_one_sided(law_a, law_b, y, k.y_kernel(), kx, pairs, rng, g.vector);
  family.apply_mask(g.vector);
  return g;
}

/// Unbiased for the gradient of 1/2 [loss_hat(x_i,x_j,y_j) + loss_hat(x_j,x_i,y_i)].
inline GradEstimate grad_hat_pair_assembled(const RegressionFamily& family, const Vector& theta,
                                            std::span<const double> xi, const Response& yi,
                                            std::span<const double> xj, const Response& yj, const KernelSpec& k,
                                            Rng& rng, std::size_t pairs = 1) {
  if (!k.is_product()) throw ConfigError("pair gradient requires a product kernel");
  detail::check_pairs(pairs);
  GradEstimate g{Vector::Zero(static_cast<Eigen::Index>(family.param_dim())), GradTarget::GradHat, 0};
  const double kx = eval(k.x_kernel(), xi, xj);
  if (kx == 0.0) return g;
  const Conditional law_i(family, theta, xi);
  const Conditional law_j(family, theta, xj);
  g.draws_used = detail::add_assembled(law_i, yi, law_j, yj, k.y_kernel(), kx, pairs, rng, g.vector);
  family.apply_mask(g.vector);
  return g;
}

/// Simple random sample without replacement of M2 indices from {0,...,pool-1}.
inline std::vector<std::uint64_t> sample_pairs_srswor(std::uint64_t pool, std::uint64_t m2, Rng& rng) {
  if (m2 < 1) throw DomainError("sample_pairs_srswor: M2 must be >= 1");
  return sample_without_replacement(pool, m2, rng);
}

// ---------------------------------------------------------------------------
// Covariate pairs

struct IndexPair {
  std::size_t i = 0;
  std::size_t j = 0;
  double k = 0.0;

  friend bool operator==(const IndexPair& a, const IndexPair& b) { return a.i == b.i && a.j == b.j; }
};

/// Covariate kernel over dataset rows, with the psi transform precomputed.
class CovariateGram {
 public:
  CovariateGram(const Dataset& ds, const KernelSpec& kx) : ds_(&ds), kx_(kx) {
    if (kx.family == KernelFamily::PsiMatern) {
      transformed_.resize(ds.X.rows(), ds.X.cols());
      for (Eigen::Index i = 0; i < ds.X.rows(); ++i)
        for (Eigen::Index j = 0; j < ds.X.cols(); ++j) transformed_(i, j) = psi(ds.X(i, j));
    }
  }

  double operator()(std::size_t i, std::size_t j) const {
    if (transformed_.size() == 0) return eval(kx_, ds_->row(i), ds_->row(j));
    const auto d = transformed_.cols();
    const double* a = transformed_.data() + static_cast<Eigen::Index>(i) * d;
    const double* b = transformed_.data() + static_cast<Eigen::Index>(j) * d;
    double s = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
      const double t = a[c] - b[c];
      s += t * t;
    }
    return radial_profile(kx_, std::sqrt(s));
  }

 private:
  const Dataset* ds_;
  KernelSpec kx_;
  Matrix transformed_;
};

/// Linear index of pair (i,j), i<j, in lexicographic order.
inline std::uint64_t pair_linear_index(std::size_t i, std::size_t j, std::size_t n) {
  const std::uint64_t ii = i;
  return ii * n - ii * (ii + 1) / 2 + (j - i - 1);
}

inline std::pair<std::size_t, std::size_t> pair_from_linear_index(std::uint64_t L, std::size_t n) {
  // Row i starts at offset(i) = i*n - i(i+1)/2; invert approximately then fix up.
  const double nn = static_cast<double>(n);
  const double disc = (2.0 * nn - 1.0) * (2.0 * nn - 1.0) - 8.0 * static_cast<double>(L);
  auto i = static_cast<std::int64_t>(std::floor(((2.0 * nn - 1.0) - std::sqrt(std::max(0.0, disc))) / 2.0));
  i = std::clamp<std::int64_t>(i, 0, static_cast<std::int64_t>(n) - 2);
  auto offset = [n](std::int64_t r) {
    const auto ur = static_cast<std::uint64_t>(r);
    return ur * n - ur * (ur + 1) / 2;
  };
  while (i > 0 && offset(i) > L) --i;
  while (i + 1 < static_cast<std::int64_t>(n) - 1 && offset(i + 1) <= L) ++i;
  const auto j = static_cast<std::size_t>(L - offset(i)) + static_cast<std::size_t>(i) + 1;
  return {static_cast<std::size_t>(i), j};
}

namespace detail {
// Larger kernel value first; ties broken by lexicographic (i,j).
inline bool pair_better(const IndexPair& a, const IndexPair& b) {
  if (a.k != b.k) return a.k > b.k;
  if (a.i != b.i) return a.i < b.i;
  return a.j < b.j;
}
}  // namespace detail

/// The M1 pairs i<j with the largest kX(x_i,x_j), best first. O(n^2 log M1) time,
/// O(M1) memory.
inline std::vector<IndexPair> top_pairs(const Dataset& ds, const KernelSpec& kx, std::size_t m1) {
  const std::size_t n = ds.n();
  if (m1 > pair_count(n)) throw DomainError("top_pairs: M1 exceeds the number of pairs");
  if (m1 == 0) return {};
  const CovariateGram gram(ds, kx);
  std::priority_queue<IndexPair, std::vector<IndexPair>, decltype(&detail::pair_better)> heap(&detail::pair_better);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      IndexPair p{i, j, gram(i, j)};
      if (heap.size() < m1) {
        heap.push(p);
      } else if (detail::pair_better(p, heap.top())) {
        heap.pop();
        heap.push(p);
      }
    }
  }
  std::vector<IndexPair> out;
  out.reserve(m1);
  while (!heap.empty()) {
    out.push_back(heap.top());
    heap.pop();
  }
  std::reverse(out.begin(), out.end());
  return out;
}

/// Precomputed pair structure for the Hat gradient: the top-M1 set plus an
/// O(log M1) map from positions in the complement pool to pairs.
class PairSampler {
 public:
  PairSampler(const Dataset& ds, const KernelSpec& kx, std::size_t m1)
      : n_(ds.n()), gram_(ds, kx), top_(top_pairs(ds, kx, m1)) {
    std::vector<std::uint64_t> lin;
    lin.reserve(top_.size());
    for (const auto& p : top_) lin.push_back(pair_linear_index(p.i, p.j, n_));
    std::sort(lin.begin(), lin.end());
    shifted_.resize(lin.size());
    for (std::size_t m = 0; m < lin.size(); ++m) shifted_[m] = lin[m] - m;
  }

  const std::vector<IndexPair>& top() const { return top_; }
  std::uint64_t pool_size() const { return pair_count(n_) - top_.size(); }
  std::size_t n() const { return n_; }

  IndexPair pool_pair(std::uint64_t p) const {
    const auto skipped = static_cast<std::uint64_t>(std::upper_bound(shifted_.begin(), shifted_.end(), p) -
                                                    shifted_.begin());
    const auto [i, j] = pair_from_linear_index(p + skipped, n_);
    return {i, j, gram_(i, j)};
  }

  std::vector<IndexPair> sample(std::size_t m2, Rng& rng) const {
    std::vector<IndexPair> out;
    if (m2 == 0) return out;
    const auto idx = sample_pairs_srswor(pool_size(), m2, rng);
    out.reserve(idx.size());
    for (auto p : idx) out.push_back(pool_pair(p));
    return out;
  }

 private:
  std::size_t n_;
  CovariateGram gram_;
  std::vector<IndexPair> top_;
  std::vector<std::uint64_t> shifted_;
};

namespace detail {

// Stream layout inside one gradient evaluation, shared by the Tilde and Hat
// estimators so both see identical diagonal draws for a given seed.
enum StreamTag : std::uint64_t { kDiagonal = 0, kTopPair = 1, kPairSelection = 2, kSampledPair = 3 };

inline std::size_t add_diagonal(const std::vector<Conditional>& laws, const Dataset& ds, const KernelSpec& ky,
                                std::uint64_t base, std::size_t pairs, Eigen::Ref<Vector> grad) {
  std::size_t draws = 0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    Rng rng = Rng::stream(base, kDiagonal, i);
    draws += add_one_sided(laws[i], laws[i], ds.y[i], ky, 1.0, pairs, rng, grad);
  }
  return draws;
}

}  // namespace detail

/// Unbiased estimate of grad F_tilde = sum_i grad loss_tilde(X_i, Y_i).
inline GradEstimate grad_tilde_full_estimate(const RegressionFamily& family, const Vector& theta, const Dataset& ds,
                                             const KernelSpec& kernel, Rng& rng, std::size_t pairs = 1) {
  detail::check_pairs(pairs);
  const auto laws = detail::laws_for(family, theta, ds);
  GradEstimate g{Vector::Zero(static_cast<Eigen::Index>(family.param_dim())), GradTarget::GradTilde, 0};
  const std::uint64_t base = rng();
  g.draws_used = detail::add_diagonal(laws, ds, detail::response_part(kernel), base, pairs, g.vector);
  family.apply_mask(g.vector);
  return g;
}

/// Unbiased estimate of grad F_hat:
///   sum_i diag_i + 2 sum_{top M1} pair + ((n-1)n - 2 M1)/M2 sum_{M2 sampled} pair.
inline GradEstimate grad_full_estimate(const RegressionFamily& family, const Vector& theta, const Dataset& ds,
                                       const KernelSpec& k, const PairSampler& sampler, const PairBudget& budget,
                                       Rng& rng, std::size_t pairs = 1) {
  if (!k.is_product()) throw ConfigError("Hat gradient requires a product kernel");
  detail::check_pairs(pairs);
  const std::size_t n = ds.n();
  budget.validate(n);
  if (sampler.n() != n || sampler.top().size() != budget.m1)
    throw ConfigError("pair sampler was built for a different dataset or M1");
  const auto laws = detail::laws_for(family, theta, ds);
  const KernelSpec& ky = k.y_kernel();
  GradEstimate g{Vector::Zero(static_cast<Eigen::Index>(family.param_dim())), GradTarget::GradHat, 0};
  const std::uint64_t base = rng();
  g.draws_used = detail::add_diagonal(laws, ds, ky, base, pairs, g.vector);

  const auto& top = sampler.top();
  for (std::size_t m = 0; m < top.size(); ++m) {
    const auto& p = top[m];
    if (p.k == 0.0) continue;
    Rng r = Rng::stream(base, detail::kTopPair, m);
    g.draws_used +=
        detail::add_assembled(laws[p.i], ds.y[p.i], laws[p.j], ds.y[p.j], ky, 2.0 * p.k, pairs, r, g.vector);
  }
  if (budget.m2 > 0) {
    Rng sel = Rng::stream(base, detail::kPairSelection);
    const auto sampled = sampler.sample(budget.m2, sel);
    const double coef = (static_cast<double>(n) * static_cast<double>(n - 1) - 2.0 * static_cast<double>(budget.m1)) /
                        static_cast<double>(budget.m2);
    for (std::size_t m = 0; m < sampled.size(); ++m) {
      const auto& p = sampled[m];
      if (p.k == 0.0) continue;
      Rng r = Rng::stream(base, detail::kSampledPair, m);
      g.draws_used +=
          detail::add_assembled(laws[p.i], ds.y[p.i], laws[p.j], ds.y[p.j], ky, coef * p.k, pairs, r, g.vector);
    }
  }
  family.apply_mask(g.vector);
  return g;
}

/// Convenience overload that builds the pair structure (O(n^2)) on every call.
inline GradEstimate grad_full_estimate(const RegressionFamily& family, const Vector& theta, const Dataset& ds,
                                       const KernelSpec& k, const PairBudget& budget, Rng& rng,
                                       std::size_t pairs = 1) {
  if (!k.is_product()) throw ConfigError("Hat gradient requires a product kernel");
  budget.validate(ds.n());
  const PairSampler sampler(ds, k.x_kernel(), budget.m1);
  return grad_full_estimate(family, theta, ds, k, sampler, budget, rng, pairs);
}

}  // namespace mmdreg
