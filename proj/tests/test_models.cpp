#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "mmdreg/models.hpp"

using namespace mmdreg;

namespace {

struct Case {
  std::string label;
  RegressionFamily family;
};

std::vector<Case> all_families() {
  return {{"gaussian", RegressionFamily::gaussian_linear(3)},
          {"logistic", RegressionFamily::logistic(3)},
          {"poisson", RegressionFamily::poisson(3)},
          {"gamma", RegressionFamily::gamma(3)},
          {"heckman", RegressionFamily::heckman(3)},
          {"heckman_split", RegressionFamily::heckman_split(4)},
          {"mixture2", RegressionFamily::gauss_mixture(2, 2)},
          {"mixture3", RegressionFamily::gauss_mixture(2, 3)}};
}

Vector random_theta(const RegressionFamily& f, Rng& rng, double scale = 0.5) {
  Vector t(static_cast<Eigen::Index>(f.param_dim()));
  for (auto& v : t) v = scale * rng.normal();
  f.apply_mask(t);
  return t;
}

std::vector<double> random_x(const RegressionFamily& f, Rng& rng) {
  std::vector<double> x(f.d());
  for (auto& v : x) v = rng.normal();
  return x;
}

double fd_log_density(const RegressionFamily& f, Vector theta, std::span<const double> x, const Response& y,
                      Eigen::Index k, double h) {
  const double t0 = theta[k];
  theta[k] = t0 + h;
  const double up = log_density(f, theta, x, y);
  theta[k] = t0 - h;
  const double down = log_density(f, theta, x, y);
  return (up - down) / (2.0 * h);
}

}  // namespace

TEST(Family, RawDimensions) {
  EXPECT_EQ(RegressionFamily::gaussian_linear(8).param_dim(), 9u);
  EXPECT_EQ(RegressionFamily::logistic(8).param_dim(), 8u);
  EXPECT_EQ(RegressionFamily::poisson(8).param_dim(), 8u);
  EXPECT_EQ(RegressionFamily::gamma(8).param_dim(), 9u);
  EXPECT_EQ(RegressionFamily::heckman(8).param_dim(), 18u);
  EXPECT_EQ(RegressionFamily::heckman_split(8).free_dim(), 10u);
  // M regressions, M scales and M-1 free logits.
  EXPECT_EQ(RegressionFamily::gauss_mixture(8, 2).param_dim(), 2u * 9u + 1u);
  EXPECT_EQ(RegressionFamily::gauss_mixture(8, 3).param_dim(), 3u * 9u + 2u);
}

TEST(Family, HeckmanSplitMask) {
  const auto f = RegressionFamily::heckman_split(8);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FALSE(f.is_frozen(i));
  for (std::size_t i = 4; i < 8; ++i) EXPECT_TRUE(f.is_frozen(i));
  for (std::size_t i = 8; i < 12; ++i) EXPECT_TRUE(f.is_frozen(i));
  for (std::size_t i = 12; i < 18; ++i) EXPECT_FALSE(f.is_frozen(i));
  EXPECT_THROW(RegressionFamily::heckman_split(3), ConfigError);
}

TEST(Family, NaturalRoundTrip) {
  Rng rng(3);
  for (const auto& c : all_families()) {
    const Vector raw = random_theta(c.family, rng);
    const Vector nat = c.family.natural(raw);
    EXPECT_EQ(nat.size(), static_cast<Eigen::Index>(c.family.natural_names().size())) << c.label;
    const Vector back = c.family.raw_from_natural(nat);
    EXPECT_LE((back - raw).lpNorm<Eigen::Infinity>(), 1e-12) << c.label;
  }
}

TEST(Family, DimensionMismatchIsDomainError) {
  const auto f = RegressionFamily::logistic(3);
  const std::vector<double> x{1.0, 2.0};
  EXPECT_THROW(link(f, Vector::Zero(3), x), DomainError);
  const std::vector<double> x3{1.0, 2.0, 3.0};
  EXPECT_THROW(link(f, Vector::Zero(2), x3), DomainError);
}

TEST(Link, Examples) {
  const std::vector<double> x{0.3, -1.2, 2.0};
  const auto lg = std::get<BernoulliParams>(link(RegressionFamily::logistic(3), Vector::Zero(3), x));
  EXPECT_EQ(lg.probability, 0.5);

  Vector theta = Vector::Zero(3);
  theta[0] = 1.0;
  const std::vector<double> zero(3, 0.0);
  EXPECT_EQ(std::get<PoissonParams>(link(RegressionFamily::poisson(3), theta, zero)).rate, 1.0);

  const auto gm = std::get<GammaParams>(link(RegressionFamily::gamma(3), Vector::Zero(4), x));
  EXPECT_EQ(gm.shape, 1.0);
  EXPECT_EQ(gm.rate, 1.0);
}

TEST(Link, Transforms) {
  const std::vector<double> x{0.5, -1.0};
  Vector t(2);
  t << 0.4, 0.7;
  const auto lg = std::get<BernoulliParams>(link(RegressionFamily::logistic(2), t, x));
  EXPECT_NEAR(lg.probability, 1.0 / (1.0 + std::exp(-(0.2 - 0.7))), 1e-15);

  Vector g(3);
  g << 0.4, 0.7, std::log(2.5);
  const auto gm = std::get<GammaParams>(link(RegressionFamily::gamma(2), g, x));
  EXPECT_NEAR(gm.shape, 2.5, 1e-14);
  EXPECT_NEAR(gm.mean(), std::exp(0.2 - 0.7), 1e-14);

  Vector h(6);
  h << 1.0, 2.0, -1.0, 0.5, std::log(1.5), std::atanh(0.3);
  const auto hk = std::get<HeckmanParams>(link(RegressionFamily::heckman(2), h, x));
  EXPECT_NEAR(hk.mu1, -1.5, 1e-15);
  EXPECT_NEAR(hk.mu2, -1.0, 1e-15);
  EXPECT_NEAR(hk.sigma, 1.5, 1e-14);
  EXPECT_NEAR(hk.rho, 0.3, 1e-15);

  const auto mix = RegressionFamily::gauss_mixture(2, 3);
  Vector m = Vector::Zero(static_cast<Eigen::Index>(mix.param_dim()));
  m[9] = std::log(2.0);  // logit of the first component; the last is the reference
  const auto mp = std::get<MixtureParams>(link(mix, m, x));
  EXPECT_NEAR(mp.weights[0], 0.5, 1e-15);
  EXPECT_NEAR(mp.weights[1], 0.25, 1e-15);
  EXPECT_NEAR(mp.weights[2], 0.25, 1e-15);
}

TEST(Sample, LogisticMean) {
  const auto f = RegressionFamily::logistic(1);
  const std::vector<double> x{1.0};
  Rng rng(5);
  double s = 0.0;
  const int N = 100000;
  for (int i = 0; i < N; ++i) s += sample(f, Vector::Zero(1), x, rng).value();
  EXPECT_GE(s / N, 0.494);
  EXPECT_LE(s / N, 0.506);
}

TEST(Sample, PoissonMean) {
  const auto f = RegressionFamily::poisson(1);
  const std::vector<double> x{1.0};
  Rng rng(6);
  double s = 0.0;
  const int N = 100000;
  for (int i = 0; i < N; ++i) s += sample(f, Vector::Zero(1), x, rng).value();
  EXPECT_GE(s / N, 0.99);
  EXPECT_LE(s / N, 1.01);
}

TEST(Sample, HeckmanAlmostAlwaysSelected) {
  const auto f = RegressionFamily::heckman(1);
  Vector t(4);
  t << 0.0, 8.0, 0.0, 0.0;  // mu2 = 8, rho = 0
  const std::vector<double> x{1.0};
  Rng rng(7);
  int sel = 0;
  for (int i = 0; i < 10000; ++i) sel += sample(f, t, x, rng).selected();
  EXPECT_GE(sel / 10000.0, 0.9999);
}

TEST(Sample, HeckmanCensoringInvariant) {
  const auto f = RegressionFamily::heckman(2);
  Rng rng(8);
  for (int t = 0; t < 20000; ++t) {
    const Vector theta = random_theta(f, rng, 1.0);
    const auto x = random_x(f, rng);
    const Response y = sample(f, theta, x, rng);
    ASSERT_EQ(y.kind, ResponseKind::CensoredPair);
    if (y.selected() == 0) {
      ASSERT_EQ(y.value(), 0.0);
    }
  }
}

TEST(Sample, GammaMeanMatchesLink) {
  const auto f = RegressionFamily::gamma(2);
  Vector t(3);
  t << 0.3, -0.2, std::log(3.0);
  const std::vector<double> x{1.0, 0.5};
  Rng rng(9);
  double s = 0.0, s2 = 0.0;
  const int N = 100000;
  for (int i = 0; i < N; ++i) {
    const double v = sample(f, t, x, rng).value();
    s += v;
    s2 += v * v;
  }
  const double mean = s / N, var = s2 / N - mean * mean;
  const double mu = std::exp(0.2);
  EXPECT_NEAR(mean, mu, 4.0 * std::sqrt(var / N));
  EXPECT_NEAR(var, mu * mu / 3.0, 0.03 * mu * mu / 3.0);
}

TEST(Score, Examples) {
  const std::vector<double> x{1.0};
  const Vector gl = grad_log_density(RegressionFamily::logistic(1), Vector::Zero(1), x, Response::binary(1));
  EXPECT_DOUBLE_EQ(gl[0], 0.5);
  const Vector gp = grad_log_density(RegressionFamily::poisson(1), Vector::Zero(1), x, Response::count(0));
  EXPECT_DOUBLE_EQ(gp[0], -1.0);
}

TEST(Score, ZeroDensityResponsesAreDomainErrors) {
  const std::vector<double> x{1.0};
  EXPECT_THROW(grad_log_density(RegressionFamily::gaussian_linear(1), Vector::Zero(2), x, Response::count(2)),
               DomainError);
  EXPECT_THROW(log_density(RegressionFamily::gamma(1), Vector::Zero(2), x, Response::real(-1.0)), DomainError);
  EXPECT_THROW(Response::censored(1.3, 0), DomainError);
}

TEST(Score, MatchesFiniteDifferencesForEveryFamily) {
  Rng rng(10);
  for (const auto& c : all_families()) {
    const auto& f = c.family;
    for (int t = 0; t < 200; ++t) {
      const Vector theta = random_theta(f, rng);
      const auto x = random_x(f, rng);
      const Response y = sample(f, theta, x, rng);
      const Vector g = grad_log_density(f, theta, x, y);
      for (Eigen::Index k = 0; k < g.size(); ++k) {
        if (f.is_frozen(static_cast<std::size_t>(k))) {
          ASSERT_EQ(g[k], 0.0);
          continue;
        }
        const double fd = fd_log_density(f, theta, x, y, k, 1e-5);
        ASSERT_LE(std::abs(g[k] - fd), 1e-5 * std::abs(fd) + 1e-7)
            << c.label << " point " << t << " coord " << k << ": " << g[k] << " vs " << fd;
      }
    }
  }
}

TEST(Score, FiniteDifferencesInTheHeckmanTails) {
  const auto f = RegressionFamily::heckman(1);
  const std::vector<double> x{1.0};
  for (double mu2 : {-30.0, -12.0, -6.0, 6.0, 12.0}) {
    Vector t(4);
    t << 0.5, mu2, std::log(1.2), std::atanh(0.4);
    for (const Response& y : {Response::censored(0.0, 0), Response::censored(0.8, 1)}) {
      const Vector g = grad_log_density(f, t, x, y);
      for (Eigen::Index k = 0; k < 4; ++k) {
        const double fd = fd_log_density(f, t, x, y, k, 1e-5);
        EXPECT_LE(std::abs(g[k] - fd), 1e-5 * std::abs(fd) + 1e-7) << mu2 << " " << k;
      }
    }
  }
}

TEST(Density, DiscreteFamiliesSumToOne) {
  Rng rng(11);
  for (const auto& f : {RegressionFamily::logistic(2), RegressionFamily::poisson(2)}) {
    for (int t = 0; t < 50; ++t) {
      const Vector theta = random_theta(f, rng, 1.0);
      const auto x = random_x(f, rng);
      const Conditional law(f, theta, x);
      double total = 0.0;
      for (const auto& [y, p] : law.support()) {
        total += p;
        ASSERT_NEAR(std::exp(law.log_density(y)), p, 1e-14 + 1e-12 * p);
      }
      ASSERT_NEAR(total, 1.0, 1e-10);
    }
  }
}

TEST(Density, ContinuousFamiliesIntegrateToOne) {
  // Importance sampling with a wide Laplace proposal; the estimate must sit
  // within 3 standard errors of 1.
  Rng rng(12);
  const int N = 200000;
  for (const auto& c : all_families()) {
    const auto& f = c.family;
    if (f.has_exact_support()) continue;
    const Vector theta = random_theta(f, rng);
    const auto x = random_x(f, rng);
    const Conditional law(f, theta, x);
    const double centre = 0.0, scale = 4.0;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < N; ++i) {
      const double z = rng.laplace(centre, scale);
      const double q = std::exp(-std::abs(z - centre) / scale) / (2.0 * scale);
      double w = 0.0;
      if (f.kind() == FamilyKind::GammaReg) {
        // Integrate over log y to cover the positive half-line.
        const double y = std::exp(z);
        w = std::exp(law.log_density(Response::real(y))) * y / q;
      } else if (f.kind() == FamilyKind::Heckman) {
        w = std::exp(law.log_density(Response::censored(z, 1))) / q;
      } else {
        w = std::exp(law.log_density(Response::real(z))) / q;
      }
      s += w;
      s2 += w * w;
    }
    double mean = s / N;
    const double se = std::sqrt((s2 / N - mean * mean) / N);
    if (f.kind() == FamilyKind::Heckman) mean += std::exp(law.log_density(Response::censored(0.0, 0)));
    EXPECT_NEAR(mean, 1.0, 3.0 * se) << c.label;
  }
}

TEST(Density, ScoreHasZeroMeanUnderTheModel) {
  Rng rng(13);
  const int N = 100000;
  for (const auto& c : all_families()) {
    const auto& f = c.family;
    const Vector theta = random_theta(f, rng);
    const auto x = random_x(f, rng);
    const Conditional law(f, theta, x);
    const auto D = static_cast<Eigen::Index>(f.param_dim());
    Vector s = Vector::Zero(D), s2 = Vector::Zero(D);
    for (int i = 0; i < N; ++i) {
      Vector g = Vector::Zero(D);
      law.accumulate_score(law.sample(rng), 1.0, g);
      s += g;
      s2 += g.cwiseProduct(g);
    }
    const Vector mean = s / N;
    const Vector var = s2 / N - mean.cwiseProduct(mean);
    const double se = std::sqrt(var.sum() / N);
    EXPECT_LE(mean.norm(), 4.0 * se) << c.label;
  }
}

TEST(Simulate, Deterministic) {
  for (auto s : {Scenario::GaussLinearLaplace, Scenario::HeckmanSynthetic, Scenario::GammaSynthetic}) {
    const Dataset a = simulate_dataset(s, 300, 42);
    const Dataset b = simulate_dataset(s, 300, 42);
    EXPECT_TRUE(a.X == b.X);
    for (std::size_t i = 0; i < a.n(); ++i) ASSERT_EQ(a.y[i].v, b.y[i].v);
    const Dataset c = simulate_dataset(s, 300, 43);
    EXPECT_FALSE(a.X == c.X);
  }
}

TEST(Simulate, PrefixProperty) {
  const Dataset big = simulate_dataset(Scenario::GammaSynthetic, 500, 9);
  const Dataset small = simulate_dataset(Scenario::GammaSynthetic, 120, 9);
  EXPECT_TRUE(big.head(120).X == small.X);
  for (std::size_t i = 0; i < 120; ++i) ASSERT_EQ(big.y[i].v, small.y[i].v);
}

TEST(Simulate, GaussResponsesCentred) {
  const Dataset ds = simulate_dataset(Scenario::GaussLinearLaplace, 5000, 1);
  double s = 0.0;
  for (const auto& y : ds.y) s += y.value();
  EXPECT_NEAR(s / 5000.0, 0.0, 0.5);
  EXPECT_EQ(ds.d(), 8u);
}

TEST(Simulate, HeckmanSelectionRate) {
  const Dataset ds = simulate_dataset(Scenario::HeckmanSynthetic, 10000, 2);
  double sel = 0.0;
  for (const auto& y : ds.y) {
    sel += y.selected();
    if (y.selected() == 0) {
      ASSERT_EQ(y.value(), 0.0);
    }
  }
  EXPECT_GE(sel / 10000.0, 0.45);
  EXPECT_LE(sel / 10000.0, 0.55);
}

TEST(Simulate, GaussNoiseIsLaplace) {
  const Dataset ds = simulate_dataset(Scenario::GaussLinearLaplace, 20000, 3);
  const ScenarioInfo info = scenario_info(Scenario::GaussLinearLaplace);
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += info.truth[static_cast<Eigen::Index>(j)] * ds.row(i)[j];
    const double e = ds.y[i].value() - mean;
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  // Laplace(0,1): E|e| = 1, E e^2 = 2.
  EXPECT_NEAR(abs_sum / 20000.0, 1.0, 0.03);
  EXPECT_NEAR(sq_sum / 20000.0, 2.0, 0.12);
}

TEST(Simulate, GammaMeanResponse) {
  const Dataset ds = simulate_dataset(Scenario::GammaSynthetic, 20000, 4);
  double s = 0.0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    double eta = 0.0;
    for (double v : ds.row(i)) eta += v;
    s += ds.y[i].value() / std::exp(eta);
  }
  EXPECT_NEAR(s / 20000.0, 1.0, 0.03);
}

TEST(Simulate, UnknownScenario) { EXPECT_THROW(parse_scenario("nope"), ConfigError); }

TEST(Dataset, ValidateRejectsMixedKinds) {
  Dataset ds;
  ds.X = Matrix::Zero(2, 1);
  ds.y = {Response::real(1.0), Response::binary(1)};
  EXPECT_THROW(ds.validate(), DomainError);
}
