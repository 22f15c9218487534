#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "mmdreg/contamination.hpp"

using namespace mmdreg;

namespace {

Dataset real_data(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < ds.X.size(); ++i) ds.X.data()[i] = rng.normal();
  for (std::size_t i = 0; i < n; ++i) ds.y.push_back(Response::real(rng.normal()));
  return ds;
}

bool rows_equal(const Dataset& a, const Dataset& b, std::size_t i) {
  const auto ra = a.row(i), rb = b.row(i);
  for (std::size_t j = 0; j < ra.size(); ++j)
    if (std::memcmp(&ra[j], &rb[j], sizeof(double)) != 0) return false;
  return std::memcmp(a.y[i].v.data(), b.y[i].v.data(), 2 * sizeof(double)) == 0 && a.y[i].kind == b.y[i].kind;
}

}  // namespace

TEST(Contamination, ZeroRateIsIdentity) {
  const Dataset ds = real_data(200, 3, 1);
  for (auto scheme : {ContaminationScheme::Adversarial, ContaminationScheme::Huber}) {
    const Dataset out = contaminate(ds, ContaminationSpec::type_x(0.0, 5.0, 2, scheme));
    EXPECT_TRUE(out.contamination.indices.empty());
    EXPECT_TRUE(out.contamination.applied);
    for (std::size_t i = 0; i < ds.n(); ++i) EXPECT_TRUE(rows_equal(ds, out, i));
  }
}

TEST(Contamination, AdversarialCountAndUntouchedRows) {
  const Dataset ds = simulate_dataset(Scenario::GaussLinearLaplace, 1000, 3);
  const Dataset out = contaminate(ds, ContaminationSpec::type_x(0.03, 5.0, 4));
  const auto& idx = out.contamination.indices;
  ASSERT_EQ(idx.size(), 30u);
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), 30u);
  const std::set<std::size_t> hit(idx.begin(), idx.end());
  for (std::size_t i = 0; i < ds.n(); ++i) {
    if (hit.count(i)) {
      EXPECT_FALSE(rows_equal(ds, out, i));
    } else {
      EXPECT_TRUE(rows_equal(ds, out, i)) << i;
    }
  }
  EXPECT_EQ(out.contamination.scheme, "adversarial");
  EXPECT_EQ(out.contamination.recipe, to_string(RecipeKind::TypeX));
  EXPECT_EQ(out.contamination.epsilon, 0.03);
  EXPECT_EQ(out.contamination.seed, 4u);
}

TEST(Contamination, AdversarialCountGrid) {
  for (std::size_t n : {1u, 7u, 33u, 100u, 999u, 1000u}) {
    const Dataset ds = real_data(n, 2, 5);
    for (double eps : {0.0, 0.01, 0.03, 0.1, 0.25, 0.5, 0.999}) {
      const Dataset out = contaminate(ds, ContaminationSpec::type_y(eps, 10.0, 6));
      EXPECT_EQ(out.contamination.indices.size(), static_cast<std::size_t>(std::floor(eps * static_cast<double>(n))))
          << n << " " << eps;
    }
  }
}

TEST(Contamination, InvalidRate) {
  const Dataset ds = real_data(10, 1, 7);
  EXPECT_THROW(contaminate(ds, ContaminationSpec::type_x(1.0, 5.0, 0)), ConfigError);
  EXPECT_THROW(contaminate(ds, ContaminationSpec::type_x(-0.1, 5.0, 0)), ConfigError);
  EXPECT_THROW(contaminate(ds, ContaminationSpec::type_x(std::nan(""), 5.0, 0)), ConfigError);
  EXPECT_THROW(contaminate(ds, ContaminationSpec::type_x(0.1, INFINITY, 0)), ConfigError);
}

TEST(Contamination, TypeXTouchesOnlyFirstCovariate) {
  const Dataset ds = real_data(500, 4, 8);
  const Dataset out = contaminate(ds, ContaminationSpec::type_x(0.2, 5.0, 9));
  for (std::size_t i : out.contamination.indices) {
    const auto a = ds.row(i), b = out.row(i);
    EXPECT_NE(a[0], b[0]);
    for (std::size_t j = 1; j < 4; ++j) EXPECT_EQ(a[j], b[j]);
    EXPECT_EQ(ds.y[i], out.y[i]);
  }
}

TEST(Contamination, TypeYTouchesOnlyTheResponse) {
  const Dataset ds = real_data(500, 3, 10);
  const Dataset out = contaminate(ds, ContaminationSpec::type_y(0.2, 10.0, 11));
  for (std::size_t i : out.contamination.indices) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(ds.row(i)[j], out.row(i)[j]);
    EXPECT_NE(ds.y[i], out.y[i]);
  }
}

TEST(Contamination, TypeYOutlierLaw) {
  const Dataset ds = real_data(10000, 1, 12);
  const Dataset out = contaminate(ds, ContaminationSpec::type_y(0.5, 10.0, 13));
  double s = 0.0, s2 = 0.0;
  for (std::size_t i : out.contamination.indices) {
    s += out.y[i].value();
    s2 += out.y[i].value() * out.y[i].value();
  }
  const double m = s / 5000.0;
  EXPECT_GE(m, 9.95);
  EXPECT_LE(m, 10.05);
  EXPECT_NEAR(s2 / 5000.0 - m * m, 1.0, 0.06);
}

TEST(Contamination, TypeXOutlierLaw) {
  const Dataset ds = real_data(10000, 2, 14);
  const Dataset out = contaminate(ds, ContaminationSpec::type_x(0.5, 5.0, 15));
  double s = 0.0;
  for (std::size_t i : out.contamination.indices) s += out.row(i)[0];
  EXPECT_NEAR(s / 5000.0, 5.0, 0.05);
}

TEST(Contamination, HuberCountIsBinomial) {
  const Dataset ds = real_data(100, 1, 16);
  const int trials = 10000;
  double s = 0.0, s2 = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto k = static_cast<double>(
        contaminate(ds, ContaminationSpec::type_x(0.1, 5.0, static_cast<std::uint64_t>(t), ContaminationScheme::Huber))
            .contamination.indices.size());
    s += k;
    s2 += k * k;
  }
  const double m = s / trials, v = s2 / trials - m * m;
  EXPECT_GE(m, 9.0);
  EXPECT_LE(m, 11.0);
  EXPECT_GE(v, 7.2);
  EXPECT_LE(v, 10.8);
  EXPECT_NEAR(m, 10.0, 4.0 * std::sqrt(9.0 / trials));
}

TEST(Contamination, Deterministic) {
  const Dataset ds = real_data(300, 2, 17);
  const auto spec = ContaminationSpec::type_y(0.1, 10.0, 18, ContaminationScheme::Huber);
  const Dataset a = contaminate(ds, spec), b = contaminate(ds, spec);
  EXPECT_EQ(a.contamination.indices, b.contamination.indices);
  EXPECT_EQ(a.X, b.X);
  EXPECT_EQ(a.y, b.y);
  const Dataset c = contaminate(ds, ContaminationSpec::type_y(0.1, 10.0, 19, ContaminationScheme::Huber));
  EXPECT_NE(a.contamination.indices, c.contamination.indices);
}

TEST(Contamination, ReplacementDependsOnlyOnRowAndSeed) {
  const Dataset ds = real_data(400, 2, 20);
  const Dataset small = contaminate(ds, ContaminationSpec::type_x(0.05, 5.0, 21));
  const Dataset large = contaminate(ds, ContaminationSpec::type_x(0.5, 5.0, 21));
  const std::set<std::size_t> hit(large.contamination.indices.begin(), large.contamination.indices.end());
  for (std::size_t i : small.contamination.indices) {
    if (hit.count(i)) {
      EXPECT_EQ(small.row(i)[0], large.row(i)[0]);
    }
  }
}

TEST(Contamination, SelectionFlip) {
  const Dataset ds = simulate_dataset(Scenario::HeckmanSynthetic, 500, 22);
  const Dataset out = contaminate(ds, ContaminationSpec::selection_flip(0.2, 23));
  ASSERT_EQ(out.contamination.indices.size(), 100u);
  for (std::size_t i : out.contamination.indices) {
    EXPECT_EQ(out.y[i].selected(), 1 - ds.y[i].selected());
    EXPECT_EQ(out.y[i].value(), 0.0);
    for (std::size_t j = 0; j < ds.d(); ++j) EXPECT_EQ(ds.row(i)[j], out.row(i)[j]);
  }
  EXPECT_NO_THROW(out.validate());
}

TEST(Contamination, IncompatibleRecipes) {
  const Dataset real = real_data(20, 1, 24);
  EXPECT_THROW(contaminate(real, ContaminationSpec::selection_flip(0.1, 0)), DomainError);
  const Dataset heck = simulate_dataset(Scenario::HeckmanSynthetic, 20, 25);
  EXPECT_THROW(contaminate(heck, ContaminationSpec::type_y(0.1, 10.0, 0)), DomainError);
  EXPECT_NO_THROW(contaminate(heck, ContaminationSpec::type_x(0.1, 5.0, 0)));
  Dataset counts;
  counts.X = Matrix::Zero(5, 1);
  counts.y.assign(5, Response::count(2));
  EXPECT_THROW(contaminate(counts, ContaminationSpec::type_y(0.1, 10.0, 0)), DomainError);
}

TEST(Contamination, CustomRecipe) {
  register_custom_recipe("negate", [](std::span<double> x, Response& y, Rng&) {
    for (auto& v : x) v = -v;
    y = Response::real(-y.value());
  });
  const Dataset ds = real_data(100, 2, 26);
  ContaminationSpec spec;
  spec.epsilon = 0.1;
  spec.recipe = RecipeKind::CustomQ;
  spec.custom_id = "negate";
  spec.seed = 27;
  const Dataset out = contaminate(ds, spec);
  ASSERT_EQ(out.contamination.indices.size(), 10u);
  for (std::size_t i : out.contamination.indices) {
    EXPECT_EQ(out.row(i)[0], -ds.row(i)[0]);
    EXPECT_EQ(out.y[i].value(), -ds.y[i].value());
  }
  EXPECT_EQ(out.contamination.recipe, "custom:negate");

  spec.custom_id = "missing";
  EXPECT_THROW(contaminate(ds, spec), ConfigError);
  spec.custom_id.clear();
  EXPECT_THROW(contaminate(ds, spec), ConfigError);

  register_custom_recipe("bad", [](std::span<double> x, Response&, Rng&) { x[0] = NAN; });
  spec.custom_id = "bad";
  EXPECT_THROW(contaminate(ds, spec), DomainError);
}

TEST(Contamination, ParseNames) {
  EXPECT_EQ(parse_scheme("huber"), ContaminationScheme::Huber);
  EXPECT_EQ(parse_scheme("adversarial"), ContaminationScheme::Adversarial);
  EXPECT_EQ(parse_recipe("type_x"), RecipeKind::TypeX);
  EXPECT_EQ(parse_recipe("selection_flip"), RecipeKind::SelectionFlip);
  EXPECT_THROW(parse_scheme("random"), ConfigError);
  EXPECT_THROW(parse_recipe("type_z"), ConfigError);
}
