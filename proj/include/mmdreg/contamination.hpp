#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>

#include "mmdreg/errors.hpp"
#include "mmdreg/models.hpp"
#include "mmdreg/rng.hpp"

namespace mmdreg {

enum class ContaminationScheme { Adversarial, Huber };
enum class RecipeKind { TypeX, TypeY, SelectionFlip, CustomQ };

inline std::string to_string(ContaminationScheme s) { return s == ContaminationScheme::Huber ? "huber" : "adversarial"; }

inline ContaminationScheme parse_scheme(const std::string& s) {
  if (s == "adversarial" || s == "Adversarial") return ContaminationScheme::Adversarial;
  if (s == "huber" || s == "Huber") return ContaminationScheme::Huber;
  throw ConfigError("unknown contamination scheme '" + s + "'");
}

inline std::string to_string(RecipeKind r) {
  switch (r) {
    case RecipeKind::TypeX: return "type_x";
    case RecipeKind::TypeY: return "type_y";
    case RecipeKind::SelectionFlip: return "selection_flip";
    case RecipeKind::CustomQ: return "custom";
  }
  return "?";
}

inline RecipeKind parse_recipe(const std::string& s) {
  if (s == "type_x" || s == "TypeX" || s == "x") return RecipeKind::TypeX;
  if (s == "type_y" || s == "TypeY" || s == "y") return RecipeKind::TypeY;
  if (s == "selection_flip" || s == "SelectionFlip" || s == "flip") return RecipeKind::SelectionFlip;
  if (s == "custom" || s == "CustomQ") return RecipeKind::CustomQ;
  throw ConfigError("unknown contamination recipe '" + s + "'");
}

/// Replacement rule for one row: modifies the covariates and/or response in place.
using CustomRecipe = std::function<void(std::span<double> x, Response& y, Rng& rng)>;

namespace detail {
inline std::map<std::string, CustomRecipe>& recipe_registry() {
  static std::map<std::string, CustomRecipe> registry;
  return registry;
}
inline std::mutex& recipe_registry_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

inline void register_custom_recipe(const std::string& id, CustomRecipe recipe) {
  if (id.empty()) throw ConfigError("custom recipe id must not be empty");
  std::lock_guard lock(detail::recipe_registry_mutex());
  detail::recipe_registry()[id] = std::move(recipe);
}

inline CustomRecipe find_custom_recipe(const std::string& id) {
  std::lock_guard lock(detail::recipe_registry_mutex());
  auto it = detail::recipe_registry().find(id);
  if (it == detail::recipe_registry().end()) throw ConfigError("no custom recipe registered under '" + id + "'");
  return it->second;
}

struct ContaminationSpec {
  double epsilon = 0.0;
  ContaminationScheme scheme = ContaminationScheme::Adversarial;
  RecipeKind recipe = RecipeKind::TypeX;
  double recipe_mean = 5.0;  // TypeX / TypeY: outliers drawn from N(recipe_mean, 1)
  std::string custom_id;     // CustomQ only
  std::uint64_t seed = 0;

  static ContaminationSpec type_x(double eps, double mean, std::uint64_t seed,
                                  ContaminationScheme s = ContaminationScheme::Adversarial) {
    return {eps, s, RecipeKind::TypeX, mean, {}, seed};
  }
  static ContaminationSpec type_y(double eps, double mean, std::uint64_t seed,
                                  ContaminationScheme s = ContaminationScheme::Adversarial) {
    return {eps, s, RecipeKind::TypeY, mean, {}, seed};
  }
  static ContaminationSpec selection_flip(double eps, std::uint64_t seed,
                                          ContaminationScheme s = ContaminationScheme::Adversarial) {
    return {eps, s, RecipeKind::SelectionFlip, 0.0, {}, seed};
  }

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("contamination rate eps must lie in [0,1)");
    if (!std::isfinite(recipe_mean)) throw ConfigError("recipe_mean must be finite");
    if (recipe == RecipeKind::CustomQ && custom_id.empty()) throw ConfigError("custom recipe needs an id");
  }
};

namespace detail {

inline void check_recipe_compatible(const ContaminationSpec& spec, const Dataset& ds) {
  const ResponseKind kind = ds.y.front().kind;
  switch (spec.recipe) {
    case RecipeKind::TypeX:
      if (ds.d() < 1) throw DomainError("type_x contamination needs at least one covariate");
      break;
    case RecipeKind::TypeY:
      if (kind != ResponseKind::Real)
        throw DomainError("type_y contamination draws real responses; dataset has " + to_string(kind) + " responses");
      break;
    case RecipeKind::SelectionFlip:
      if (kind != ResponseKind::CensoredPair)
        throw DomainError("selection_flip contamination needs censored-pair responses, dataset has " +
                          to_string(kind));
      break;
    case RecipeKind::CustomQ: break;
  }
}

/// Flips the selection indicator while keeping y2 = 0 => y1 = 0: a selected
/// row becomes (0, 0) and an unselected row becomes (0, 1).
inline Response flip_selection(const Response& y) {
  return y.selected() ? Response::censored(0.0, 0) : Response::censored(0.0, 1);
}

}  // namespace detail

/// Applies the spec to a copy of `ds`. Rows outside the returned record's
/// index set are bit-identical to the input.
inline Dataset contaminate(const Dataset& ds, const ContaminationSpec& spec) {
  spec.validate();
  ds.validate();
  detail::check_recipe_compatible(spec, ds);
  CustomRecipe custom;
  if (spec.recipe == RecipeKind::CustomQ) custom = find_custom_recipe(spec.custom_id);

  Dataset out = ds;
  const std::size_t N = ds.n();
  std::vector<std::size_t> rows;
  Rng selector = Rng::stream(spec.seed, 0);
  if (spec.scheme == ContaminationScheme::Adversarial) {
    const auto count = static_cast<std::size_t>(std::floor(spec.epsilon * static_cast<double>(N)));
    for (auto idx : sample_without_replacement(N, count, selector)) rows.push_back(static_cast<std::size_t>(idx));
  } else {
    for (std::size_t i = 0; i < N; ++i)
      if (selector.bernoulli(spec.epsilon)) rows.push_back(i);
  }
  std::sort(rows.begin(), rows.end());

  const auto d = static_cast<std::size_t>(ds.X.cols());
  for (std::size_t i : rows) {
    // Per-row stream: a row's replacement does not depend on which other rows were picked.
    Rng rng = Rng::stream(spec.seed, 1, i);
    std::span<double> x(out.X.data() + i * d, d);
    switch (spec.recipe) {
      case RecipeKind::TypeX: x[0] = spec.recipe_mean + rng.normal(); break;
      case RecipeKind::TypeY: out.y[i] = Response::real(spec.recipe_mean + rng.normal()); break;
      case RecipeKind::SelectionFlip: out.y[i] = detail::flip_selection(out.y[i]); break;
      case RecipeKind::CustomQ: custom(x, out.y[i], rng); break;
    }
  }
  if (spec.recipe == RecipeKind::CustomQ) out.validate();

  ContaminationRecord& rec = out.contamination;
  rec.applied = true;
  rec.scheme = to_string(spec.scheme);
  rec.recipe = spec.recipe == RecipeKind::CustomQ ? "custom:" + spec.custom_id : to_string(spec.recipe);
  rec.epsilon = spec.epsilon;
  rec.recipe_mean = spec.recipe_mean;
  rec.seed = spec.seed;
  rec.indices = std::move(rows);
  return out;
}

}  // namespace mmdreg
