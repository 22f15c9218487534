#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mmdreg/contamination.hpp"
#include "mmdreg/errors.hpp"
#include "mmdreg/fit.hpp"
#include "mmdreg/models.hpp"
#include "mmdreg/rng.hpp"

namespace mmdreg {

// ---------------------------------------------------------------------------
// RMSE

enum class RmseScale {
  PerCoordinate,  // sqrt(mean_r ||theta_r - theta0||^2 / dim)
  Total           // sqrt(mean_r ||theta_r - theta0||^2)
};

inline double squared_error(const Vector& estimate, const Vector& truth, const std::vector<bool>& mask = {}) {
  if (estimate.size() != truth.size())
    throw DomainError("rmse: estimate has " + std::to_string(estimate.size()) + " entries, truth has " +
                      std::to_string(truth.size()));
  if (!mask.empty() && mask.size() != static_cast<std::size_t>(truth.size()))
    throw DomainError("rmse: mask length does not match the parameter dimension");
  double s = 0.0;
  for (Eigen::Index i = 0; i < truth.size(); ++i) {
    if (!mask.empty() && !mask[static_cast<std::size_t>(i)]) continue;
    const double e = estimate[i] - truth[i];
    s += e * e;
  }
  return s;
}

inline std::size_t masked_dim(const Vector& truth, const std::vector<bool>& mask) {
  if (mask.empty()) return static_cast<std::size_t>(truth.size());
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
}

inline double rmse(const std::vector<Vector>& estimates, const Vector& truth, const std::vector<bool>& mask = {},
                   RmseScale scale = RmseScale::PerCoordinate) {
  if (estimates.empty()) throw DomainError("rmse: no estimates");
  const std::size_t dim = masked_dim(truth, mask);
  if (dim == 0) throw DomainError("rmse: mask selects no coordinates");
  double s = 0.0;
  for (const auto& e : estimates) s += squared_error(e, truth, mask);
  s /= static_cast<double>(estimates.size());
  if (scale == RmseScale::PerCoordinate) s /= static_cast<double>(dim);
  return std::sqrt(s);
}

/// ||theta_a - theta_b|| (optionally on a coordinate subset): the change in an
/// estimate between a clean and a contaminated dataset.
inline double sensitivity(const Vector& theta_contaminated, const Vector& theta_clean,
                          const std::vector<bool>& mask = {}) {
  return std::sqrt(squared_error(theta_contaminated, theta_clean, mask));
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// ---------------------------------------------------------------------------
// Plans

struct RecipeSpec {
  RecipeKind kind = RecipeKind::TypeX;
  double mean = 5.0;
  ContaminationScheme scheme = ContaminationScheme::Adversarial;
  std::string custom_id;

  std::string label() const {
    std::string s = kind == RecipeKind::CustomQ ? "custom:" + custom_id : to_string(kind);
    if (kind == RecipeKind::TypeX || kind == RecipeKind::TypeY) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "(%g)", mean);
      s += buf;
    }
    if (scheme == ContaminationScheme::Huber) s += "/huber";
    return s;
  }
};

/// Outlier recipe used for each scenario's robustness tables.
inline RecipeSpec default_recipe(Scenario s) {
  switch (s) {
    case Scenario::GaussLinearLaplace:
    case Scenario::HeckmanSynthetic: return {RecipeKind::TypeX, 5.0, ContaminationScheme::Adversarial, {}};
    case Scenario::GammaSynthetic: return {RecipeKind::TypeX, -0.5, ContaminationScheme::Adversarial, {}};
  }
  return {};
}

struct ExperimentPlan {
  Scenario scenario = Scenario::GaussLinearLaplace;
  std::vector<std::size_t> n_values{1000};
  std::vector<double> eps_values{0.0};
  std::vector<RecipeSpec> recipes;  // empty: the scenario's default recipe
  std::vector<Estimator> estimators{Estimator::Tilde};
  std::size_t replications = 25;
  std::uint64_t master_seed = 0;
  std::string output;
  FitConfig fit;  // estimator and seed are overridden per fit
  GammaShape gamma_shape = GammaShape::Profile;
  // false: every (cell, rep) draws a fresh dataset of size n.
  // true: each rep draws one base dataset of size base_n (default: max n) and
  //       every cell of that rep uses its first n rows.
  bool nested = false;
  std::size_t base_n = 0;
  std::size_t threads = 0;  // 0: MMDR_THREADS, else hardware concurrency

  std::vector<RecipeSpec> effective_recipes() const {
    return recipes.empty() ? std::vector<RecipeSpec>{default_recipe(scenario)} : recipes;
  }

  void validate() const {
    if (replications < 1) throw ConfigError("plan: replications must be >= 1");
    if (n_values.empty()) throw ConfigError("plan: n list is empty");
    if (eps_values.empty()) throw ConfigError("plan: eps list is empty");
    if (estimators.empty()) throw ConfigError("plan: estimator list is empty");
    for (auto n : n_values)
      if (n < 2) throw ConfigError("plan: every n must be >= 2");
    for (double e : eps_values)
      if (!(e >= 0.0 && e < 1.0)) throw ConfigError("plan: eps values must lie in [0,1)");
    const std::size_t max_n = *std::max_element(n_values.begin(), n_values.end());
    if (nested && base_n != 0 && base_n < max_n) throw ConfigError("plan: base_n is smaller than the largest n");
    for (auto e : estimators)
      if (e == Estimator::OLS && scenario_info(scenario).family.kind() != FamilyKind::GaussianLinear)
        throw ConfigError("plan: OLS is only available for the gaussian scenario");
  }
};

struct Cell {
  std::size_t n = 0;
  double epsilon = 0.0;
  RecipeSpec recipe;
  bool contaminated() const { return epsilon > 0.0; }
};

/// Grid cells in canonical order (n, eps, recipe). Uncontaminated cells appear
/// once regardless of the number of recipes.
inline std::vector<Cell> plan_cells(const ExperimentPlan& plan) {
  std::vector<Cell> cells;
  const auto recipes = plan.effective_recipes();
  for (auto n : plan.n_values) {
    for (double eps : plan.eps_values) {
      if (eps == 0.0) {
        cells.push_back({n, 0.0, recipes.front()});
        continue;
      }
      for (const auto& r : recipes) cells.push_back({n, eps, r});
    }
  }
  return cells;
}

struct RepOutcome {
  std::uint64_t data_seed = 0;
  std::uint64_t fit_seed = 0;
  Vector estimate;  // natural scale; empty when the fit failed
  double error = std::numeric_limits<double>::quiet_NaN();  // ||estimate - truth|| on the theta mask
  double wall_time = 0.0;
  bool failed = false;
  std::string message;
  std::vector<std::string> warnings;
};

struct ResultRow {
  std::string scenario;
  std::size_t n = 0;
  double epsilon = 0.0;
  std::string recipe;
  Estimator estimator = Estimator::Tilde;
  double rmse = 0.0;             // theta coordinates, per-coordinate scale
  double rmse_total = 0.0;       // theta coordinates, total scale
  double rmse_beta = 0.0;        // outcome coefficients, per-coordinate scale
  double rmse_beta_total = 0.0;  // outcome coefficients, total scale
  double median_error = 0.0;
  double mean_wall_time = 0.0;
  std::size_t failures = 0;
  std::vector<RepOutcome> reps;
};

struct ResultTable {
  int schema_version = 1;
  std::string scenario;
  std::uint64_t master_seed = 0;
  std::size_t replications = 0;
  bool nested = false;
  Vector truth;
  std::vector<bool> theta_mask;
  std::vector<bool> beta_mask;
  std::vector<std::string> parameter_names;
  std::vector<ResultRow> rows;

  const ResultRow& find(std::size_t n, double eps, Estimator e) const {
    for (const auto& r : rows)
      if (r.n == n && r.epsilon == eps && r.estimator == e) return r;
    throw DomainError("result table has no row for n=" + std::to_string(n) + ", eps=" + std::to_string(eps) +
                      ", estimator=" + to_string(e));
  }
};

namespace detail {

enum SeedTag : std::uint64_t { kDataSeed = 1, kContaminationSeed = 2, kFitSeed = 3 };

inline std::size_t thread_count(std::size_t requested, std::size_t jobs) {
  std::size_t t = requested;
  if (t == 0) {
    if (const char* env = std::getenv("MMDR_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end != env && v > 0) t = static_cast<std::size_t>(v);
    }
  }
  if (t == 0) t = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(t, jobs));
}

/// Runs job(i) for i in [0, count) on up to `threads` workers.
template <class Job>
void parallel_for(std::size_t count, std::size_t threads, Job job) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace detail

/// Per (cell, rep): simulate, contaminate, fit every estimator. Seeds depend
/// only on (master seed, cell, rep), so the table does not depend on the
/// number of threads. Individual fit failures are recorded, not thrown.
inline ResultTable run_plan(const ExperimentPlan& plan) {
  plan.validate();
  const ScenarioInfo info = scenario_info(plan.scenario);
  const auto cells = plan_cells(plan);
  const std::size_t R = plan.replications;
  const std::size_t E = plan.estimators.size();
  const std::size_t max_n = *std::max_element(plan.n_values.begin(), plan.n_values.end());
  const std::size_t base_n = plan.base_n ? plan.base_n : max_n;

  std::vector<std::vector<RepOutcome>> outcomes(cells.size() * E, std::vector<RepOutcome>(R));
  const std::size_t jobs = cells.size() * R;
  detail::parallel_for(jobs, detail::thread_count(plan.threads, jobs), [&](std::size_t job) {
    const std::size_t c = job / R;
    const std::size_t r = job % R;
    const Cell& cell = cells[c];
    const std::uint64_t data_seed = plan.nested ? derive_seed(plan.master_seed, detail::kDataSeed, 0, r)
                                                : derive_seed(plan.master_seed, detail::kDataSeed, c + 1, r);
    std::optional<Dataset> ds;
    std::string data_error;
    try {
      ds = plan.nested ? simulate_dataset(plan.scenario, base_n, data_seed).head(cell.n)
                       : simulate_dataset(plan.scenario, cell.n, data_seed);
      if (cell.contaminated()) {
        ContaminationSpec spec{cell.epsilon, cell.recipe.scheme, cell.recipe.kind, cell.recipe.mean,
                               cell.recipe.custom_id,
                               derive_seed(plan.master_seed, detail::kContaminationSeed, c, r)};
        ds = contaminate(*ds, spec);
      }
    } catch (const std::exception& e) {
      data_error = e.what();
    }
    for (std::size_t k = 0; k < E; ++k) {
      RepOutcome& out = outcomes[c * E + k][r];
      out.data_seed = data_seed;
      out.fit_seed = derive_seed(plan.master_seed, detail::kFitSeed, c * E + k, r);
      if (!ds) {
        out.failed = true;
        out.message = "data generation failed: " + data_error;
        continue;
      }
      const auto t0 = detail::Clock::now();
      try {
        FitConfig cfg = plan.fit;
        cfg.estimator = plan.estimators[k];
        cfg.seed = out.fit_seed;
        FitResult fr = (cfg.estimator == Estimator::MLE || cfg.estimator == Estimator::OLS)
                           ? fit_baseline(info.family, *ds, cfg.estimator, plan.gamma_shape)
                           : fit_mmd(info.family, *ds, cfg);
        out.warnings = fr.warnings;
        if (fr.failed || !fr.theta_natural.allFinite()) {
          out.failed = true;
          out.message = fr.error.empty() ? "non-finite estimate" : fr.error;
        } else {
          out.estimate = fr.theta_natural;
          out.error = std::sqrt(squared_error(out.estimate, info.truth, info.rmse_mask));
        }
      } catch (const std::exception& e) {
        out.failed = true;
        out.message = e.what();
      }
      out.wall_time = detail::seconds_since(t0);
    }
  });

  ResultTable table;
  table.scenario = to_string(plan.scenario);
  table.master_seed = plan.master_seed;
  table.replications = R;
  table.nested = plan.nested;
  table.truth = info.truth;
  table.theta_mask = info.rmse_mask;
  table.beta_mask = info.beta_mask;
  table.parameter_names = info.family.natural_names();
  if (plan.scenario == Scenario::GaussLinearLaplace) table.parameter_names.back() = "laplace_scale";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t k = 0; k < E; ++k) {
      ResultRow row;
      row.scenario = table.scenario;
      row.n = cells[c].n;
      row.epsilon = cells[c].epsilon;
      row.recipe = cells[c].contaminated() ? cells[c].recipe.label() : "none";
      row.estimator = plan.estimators[k];
      row.reps = std::move(outcomes[c * E + k]);
      std::vector<Vector> ok;
      std::vector<double> errors;
      double wall = 0.0;
      for (const auto& rep : row.reps) {
        wall += rep.wall_time;
        if (rep.failed) {
          ++row.failures;
          continue;
        }
        ok.push_back(rep.estimate);
        errors.push_back(rep.error);
      }
      row.mean_wall_time = wall / static_cast<double>(R);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      if (ok.empty()) {
        row.rmse = row.rmse_total = row.rmse_beta = row.rmse_beta_total = row.median_error = nan;
      } else {
        row.rmse = rmse(ok, info.truth, info.rmse_mask, RmseScale::PerCoordinate);
        row.rmse_total = rmse(ok, info.truth, info.rmse_mask, RmseScale::Total);
        row.rmse_beta = rmse(ok, info.truth, info.beta_mask, RmseScale::PerCoordinate);
        row.rmse_beta_total = rmse(ok, info.truth, info.beta_mask, RmseScale::Total);
        row.median_error = median(errors);
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

}  // namespace mmdreg
