#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "mmdreg/bench.hpp"
#include "mmdreg/contamination.hpp"
#include "mmdreg/errors.hpp"
#include "mmdreg/fit.hpp"
#include "mmdreg/kernels.hpp"
#include "mmdreg/mmd_objective.hpp"
#include "mmdreg/models.hpp"

namespace mmdreg {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Number formatting and parsing

/// Shortest decimal string that reads back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw FormatError("could not format a number");
  return {buf, ptr};
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::string where(const std::string& path, std::size_t line) {
  return path + ":" + std::to_string(line) + ": ";
}

inline double parse_number(std::string_view field, const std::string& path, std::size_t line) {
  double v = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (field.empty() || ec != std::errc() || ptr != last)
    throw FormatError(where(path, line) + "'" + std::string(field) + "' is not a number");
  if (!std::isfinite(v)) throw FormatError(where(path, line) + "non-finite value '" + std::string(field) + "'");
  return v;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::string& path) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  return out;
}

inline Response make_response(ResponseKind kind, const std::vector<double>& v, const std::string& path,
                              std::size_t line) {
  try {
    switch (kind) {
      case ResponseKind::Real: return Response::real(v[0]);
      case ResponseKind::Count:
        if (v[0] != std::floor(v[0])) throw DomainError("count response must be an integer");
        return Response::count(static_cast<std::int64_t>(v[0]));
      case ResponseKind::Binary:
        if (v[0] != 0.0 && v[0] != 1.0) throw DomainError("binary response must be 0 or 1");
        return Response::binary(static_cast<int>(v[0]));
      case ResponseKind::CensoredPair:
        if (v[1] != 0.0 && v[1] != 1.0) throw DomainError("selection indicator y2 must be 0 or 1");
        return Response::censored(v[0], static_cast<int>(v[1]));
    }
  } catch (const DomainError& e) {
    throw FormatError(where(path, line) + e.what());
  }
  throw FormatError(where(path, line) + "unknown response kind");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset CSV: header x1,...,xd,y  or  x1,...,xd,y1,y2

/// Reads a dataset. `kind` selects how the response columns are interpreted
/// (header y1,y2 requires CensoredPair). When `expected_d` is given the
/// number of covariate columns must match it.
inline Dataset load_csv(const std::string& path, ResponseKind kind, std::optional<std::size_t> expected_d = {}) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::trim(line).empty()) break;
  }
  if (detail::trim(line).empty()) throw FormatError(path + ": file is empty");
  const auto header = detail::split_csv(line);
  const bool pair = header.size() >= 2 && header[header.size() - 2] == "y1" && header.back() == "y2";
  const bool single = !header.empty() && header.back() == "y";
  if (!pair && !single) throw FormatError(detail::where(path, lineno) + "header must end with 'y' or 'y1,y2'");
  if (pair != (kind == ResponseKind::CensoredPair)) {
    throw FormatError(detail::where(path, lineno) + "header has " + (pair ? "two" : "one") +
                      " response column(s) but the model expects " +
                      (kind == ResponseKind::CensoredPair ? "y1,y2" : "y"));
  }
  const std::size_t ny = pair ? 2 : 1;
  const std::size_t d = header.size() - ny;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "x" + std::to_string(j + 1))
      throw FormatError(detail::where(path, lineno) + "expected column 'x" + std::to_string(j + 1) + "', found '" +
                        std::string(header[j]) + "'");
  }
  if (expected_d && *expected_d != d) {
    throw FormatError(path + ": file has " + std::to_string(d) + " covariate columns but the model expects d=" +
                      std::to_string(*expected_d));
  }

  std::vector<double> xs;
  Dataset ds;
  std::vector<double> yv(2, 0.0);
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    if (fields.size() != header.size()) {
      throw FormatError(detail::where(path, lineno) + "expected " + std::to_string(header.size()) +
                        " fields, found " + std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < d; ++j) xs.push_back(detail::parse_number(fields[j], path, lineno));
    for (std::size_t j = 0; j < ny; ++j) yv[j] = detail::parse_number(fields[d + j], path, lineno);
    ds.y.push_back(detail::make_response(kind, yv, path, lineno));
  }
  if (ds.y.empty()) throw FormatError(path + ": no data rows");
  ds.X = Eigen::Map<Matrix>(xs.data(), static_cast<Eigen::Index>(ds.y.size()), static_cast<Eigen::Index>(d));
  ds.validate();
  return ds;
}

inline Dataset load_csv(const std::string& path, const RegressionFamily& family) {
  return load_csv(path, family.response_kind(), family.d());
}

/// Response kind implied by a CSV header: CensoredPair for y1,y2, Real otherwise.
inline ResponseKind sniff_response_kind(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  while (std::getline(in, line))
    if (!detail::trim(line).empty()) break;
  const auto header = detail::split_csv(line);
  return (header.size() >= 2 && header.back() == "y2") ? ResponseKind::CensoredPair : ResponseKind::Real;
}

inline void write_csv(const Dataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out = detail::open_out(path);
  for (std::size_t j = 0; j < ds.d(); ++j) out << 'x' << j + 1 << ',';
  out << (ds.y.front().kind == ResponseKind::CensoredPair ? "y1,y2" : "y") << '\n';
  for (std::size_t i = 0; i < ds.n(); ++i) {
    for (double v : ds.row(i)) out << format_double(v) << ',';
    const Response& r = ds.y[i];
    if (r.kind == ResponseKind::CensoredPair)
      out << format_double(r.v[0]) << ',' << r.selected() << '\n';
    else
      out << format_double(r.v[0]) << '\n';
  }
  if (!out) throw FormatError("write to '" + path + "' failed");
}

/// Numeric point set (all columns, header skipped) for the mmd command.
inline std::vector<std::vector<double>> load_points(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  std::size_t lineno = 0, width = 0;
  std::vector<std::vector<double>> pts;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv(line);
    if (!header_seen) {
      header_seen = true;
      width = fields.size();
      continue;
    }
    if (fields.size() != width)
      throw FormatError(detail::where(path, lineno) + "expected " + std::to_string(width) + " fields, found " +
                        std::to_string(fields.size()));
    std::vector<double> p;
    for (auto f : fields) p.push_back(detail::parse_number(f, path, lineno));
    pts.push_back(std::move(p));
  }
  if (pts.empty()) throw FormatError(path + ": no data rows");
  return pts;
}

// ---------------------------------------------------------------------------
// JSON conversions

namespace detail {

inline const json& require(const json& j, const char* key, const char* where) {
  if (!j.contains(key)) throw ConfigError(std::string(where) + ": missing key '" + key + "'");
  return j.at(key);
}

template <class T>
T get_as(const json& j, const char* key, const char* where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(where) + ": key '" + key + "' has the wrong type");
  }
}

inline void reject_unknown(const json& j, std::initializer_list<std::string_view> allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
  }
}

inline json vector_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

inline Vector vector_from_json(const json& j, const char* where) {
  if (!j.is_array()) throw ConfigError(std::string(where) + ": expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(std::string(where) + ": expected an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace detail

inline KernelFamily parse_kernel_family(const std::string& s) {
  if (s == "exponential") return KernelFamily::Exponential;
  if (s == "gaussian") return KernelFamily::Gaussian;
  if (s == "matern") return KernelFamily::MaternHalfInt;
  if (s == "psi_matern") return KernelFamily::PsiMatern;
  if (s == "affine_shift") return KernelFamily::AffineShift;
  if (s == "product") return KernelFamily::Product;
  throw ConfigError("unknown kernel family '" + s + "'");
}

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::Exponential: return "exponential";
    case KernelFamily::Gaussian: return "gaussian";
    case KernelFamily::MaternHalfInt: return "matern";
    case KernelFamily::PsiMatern: return "psi_matern";
    case KernelFamily::AffineShift: return "affine_shift";
    case KernelFamily::Product: return "product";
  }
  return "?";
}

/// {"family": ..., "gamma", "m", "c"}; affine_shift adds "beta" and "kernel";
/// product takes "x_kernel", "y_kernel" and optionally "x_dim".
inline KernelSpec kernel_from_json(const json& j) {
  constexpr const char* where = "kernel";
  detail::reject_unknown(j, {"family", "gamma", "m", "beta", "c", "kernel", "x_kernel", "y_kernel", "x_dim"}, where);
  KernelSpec k;
  k.family = parse_kernel_family(detail::get_as<std::string>(j, "family", where));
  if (j.contains("gamma")) k.gamma = detail::get_as<double>(j, "gamma", where);
  if (j.contains("m")) k.m = detail::get_as<int>(j, "m", where);
  if (j.contains("c")) k.c = detail::get_as<double>(j, "c", where);
  if (j.contains("beta")) k.beta = detail::get_as<double>(j, "beta", where);
  if (k.family == KernelFamily::AffineShift) k.children.push_back(kernel_from_json(detail::require(j, "kernel", where)));
  if (k.family == KernelFamily::Product) {
    k.children.push_back(kernel_from_json(detail::require(j, "x_kernel", where)));
    k.children.push_back(kernel_from_json(detail::require(j, "y_kernel", where)));
    if (j.contains("x_dim")) k.x_dim = detail::get_as<std::size_t>(j, "x_dim", where);
  }
  k.validate();
  return k;
}

inline json to_json(const KernelSpec& k) {
  json j;
  j["family"] = to_string(k.family);
  switch (k.family) {
    case KernelFamily::AffineShift:
      j["beta"] = k.beta;
      j["kernel"] = to_json(k.children.at(0));
      break;
    case KernelFamily::Product:
      j["x_kernel"] = to_json(k.children.at(0));
      j["y_kernel"] = to_json(k.children.at(1));
      if (k.x_dim) j["x_dim"] = k.x_dim;
      break;
    default:
      j["gamma"] = k.gamma;
      j["c"] = k.c;
      if (k.family != KernelFamily::Exponential && k.family != KernelFamily::Gaussian) j["m"] = k.m;
  }
  return j;
}

/// Keys: estimator, eta, adagrad_eps, iters, mc_pairs, m1, m2, seed, init
/// ("mle" | "zero" | array of raw values), polyak, k_x, k_y, trace_every,
/// objective_every, objective_pairs.
inline FitConfig fit_config_from_json(const json& j) {
  constexpr const char* where = "fit config";
  detail::reject_unknown(j,
                         {"estimator", "eta", "adagrad_eps", "iters", "mc_pairs", "m1", "m2", "seed", "init", "polyak",
                          "k_x", "k_y", "trace_every", "objective_every", "objective_pairs", "gamma_shape"},
                         where);
  FitConfig c;
  if (j.contains("estimator")) c.estimator = parse_estimator(detail::get_as<std::string>(j, "estimator", where));
  if (j.contains("eta")) c.eta = detail::get_as<double>(j, "eta", where);
  if (j.contains("adagrad_eps")) c.adagrad_eps = detail::get_as<double>(j, "adagrad_eps", where);
  if (j.contains("iters")) c.iterations = detail::get_as<std::size_t>(j, "iters", where);
  if (j.contains("mc_pairs")) c.mc_pairs = detail::get_as<std::size_t>(j, "mc_pairs", where);
  if (j.contains("m1") != j.contains("m2")) throw ConfigError("fit config: give both m1 and m2 or neither");
  if (j.contains("m1"))
    c.pair_budget = PairBudget{detail::get_as<std::size_t>(j, "m1", where), detail::get_as<std::size_t>(j, "m2", where)};
  if (j.contains("seed")) c.seed = detail::get_as<std::uint64_t>(j, "seed", where);
  if (j.contains("init")) {
    const json& init = j.at("init");
    if (init.is_array()) {
      c.init = InitKind::Custom;
      c.custom_init = detail::vector_from_json(init, "fit config init");
    } else if (init.is_string()) {
      c.init = parse_init(init.get<std::string>());
      if (c.init == InitKind::Custom) throw ConfigError("fit config: custom init must be given as an array");
    } else {
      throw ConfigError("fit config: init must be \"mle\", \"zero\" or an array");
    }
  }
  if (j.contains("polyak")) c.polyak = detail::get_as<bool>(j, "polyak", where);
  if (j.contains("k_x")) c.k_x = kernel_from_json(j.at("k_x"));
  if (j.contains("k_y")) c.k_y = kernel_from_json(j.at("k_y"));
  if (j.contains("trace_every")) c.trace_every = detail::get_as<std::size_t>(j, "trace_every", where);
  if (j.contains("objective_every")) c.objective_every = detail::get_as<std::size_t>(j, "objective_every", where);
  if (j.contains("objective_pairs")) c.objective_pairs = detail::get_as<std::size_t>(j, "objective_pairs", where);
  return c;
}

inline GammaShape gamma_shape_from_json(const json& j) {
  if (!j.contains("gamma_shape")) return GammaShape::Profile;
  return parse_gamma_shape(detail::get_as<std::string>(j, "gamma_shape", "config"));
}

/// Keys: eps, scheme, recipe, recipe_mean, seed, custom_id.
inline ContaminationSpec contamination_from_json(const json& j) {
  constexpr const char* where = "contamination";
  detail::reject_unknown(j, {"eps", "scheme", "recipe", "recipe_mean", "seed", "custom_id"}, where);
  ContaminationSpec s;
  detail::require(j, "eps", where);
  s.epsilon = detail::get_as<double>(j, "eps", where);
  if (j.contains("scheme")) s.scheme = parse_scheme(detail::get_as<std::string>(j, "scheme", where));
  if (j.contains("recipe")) s.recipe = parse_recipe(detail::get_as<std::string>(j, "recipe", where));
  if (j.contains("recipe_mean")) s.recipe_mean = detail::get_as<double>(j, "recipe_mean", where);
  if (j.contains("seed")) s.seed = detail::get_as<std::uint64_t>(j, "seed", where);
  if (j.contains("custom_id")) s.custom_id = detail::get_as<std::string>(j, "custom_id", where);
  s.validate();
  return s;
}

inline json to_json(const ContaminationRecord& r) {
  json j;
  j["applied"] = r.applied;
  j["scheme"] = r.scheme;
  j["recipe"] = r.recipe;
  j["eps"] = r.epsilon;
  j["recipe_mean"] = r.recipe_mean;
  j["seed"] = r.seed;
  j["indices"] = r.indices;
  j["count"] = r.indices.size();
  return j;
}

/// Keys: scenario, n, eps, recipes [{recipe, recipe_mean, scheme, custom_id}],
/// estimators, replications, seed, output, nested, base_n, threads, fit {...},
/// gamma_shape.
inline ExperimentPlan plan_from_json(const json& j) {
  constexpr const char* where = "plan";
  detail::reject_unknown(j,
                         {"scenario", "n", "eps", "recipes", "estimators", "replications", "seed", "output", "nested",
                          "base_n", "threads", "fit", "gamma_shape"},
                         where);
  ExperimentPlan p;
  p.scenario = parse_scenario(detail::get_as<std::string>(j, "scenario", where));
  if (j.contains("n")) p.n_values = detail::get_as<std::vector<std::size_t>>(j, "n", where);
  if (j.contains("eps")) p.eps_values = detail::get_as<std::vector<double>>(j, "eps", where);
  if (j.contains("recipes")) {
    for (const auto& r : j.at("recipes")) {
      detail::reject_unknown(r, {"recipe", "recipe_mean", "scheme", "custom_id"}, "plan recipe");
      RecipeSpec spec = default_recipe(p.scenario);
      spec.kind = parse_recipe(detail::get_as<std::string>(r, "recipe", "plan recipe"));
      if (r.contains("recipe_mean")) spec.mean = detail::get_as<double>(r, "recipe_mean", "plan recipe");
      if (r.contains("scheme")) spec.scheme = parse_scheme(detail::get_as<std::string>(r, "scheme", "plan recipe"));
      if (r.contains("custom_id")) spec.custom_id = detail::get_as<std::string>(r, "custom_id", "plan recipe");
      p.recipes.push_back(spec);
    }
  }
  if (j.contains("estimators")) {
    p.estimators.clear();
    for (const auto& e : detail::get_as<std::vector<std::string>>(j, "estimators", where))
      p.estimators.push_back(parse_estimator(e));
  }
  if (j.contains("replications")) p.replications = detail::get_as<std::size_t>(j, "replications", where);
  if (j.contains("seed")) p.master_seed = detail::get_as<std::uint64_t>(j, "seed", where);
  if (j.contains("output")) p.output = detail::get_as<std::string>(j, "output", where);
  if (j.contains("nested")) p.nested = detail::get_as<bool>(j, "nested", where);
  if (j.contains("base_n")) p.base_n = detail::get_as<std::size_t>(j, "base_n", where);
  if (j.contains("threads")) p.threads = detail::get_as<std::size_t>(j, "threads", where);
  if (j.contains("fit")) p.fit = fit_config_from_json(j.at("fit"));
  p.gamma_shape = gamma_shape_from_json(j);
  p.validate();
  return p;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path + ": invalid JSON (" + e.what() + ")");
  }
}

inline void write_json_file(const json& j, const std::string& path) {
  std::ofstream out = detail::open_out(path);
  out << j.dump(2) << '\n';
  if (!out) throw FormatError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Fit results

inline json to_json(const FitResult& r, const RegressionFamily& family) {
  json j;
  j["schema_version"] = 1;
  j["model"] = family.name();
  j["estimator"] = to_string(r.estimator);
  j["theta_raw"] = detail::vector_json(r.theta_raw);
  json natural;
  const auto names = family.natural_names();
  for (std::size_t i = 0; i < names.size() && i < static_cast<std::size_t>(r.theta_natural.size()); ++i)
    natural[names[i]] = detail::number_or_null(r.theta_natural[static_cast<Eigen::Index>(i)]);
  j["theta_natural"] = natural;
  j["init_used"] = detail::vector_json(r.init_used);
  j["wall_time"] = r.wall_time;
  j["iterations_run"] = r.iterations_run;
  j["converged"] = r.converged;
  j["failed"] = r.failed;
  j["error"] = r.error;
  j["warnings"] = r.warnings;
  json trace = json::array();
  for (const auto& e : r.trace) {
    json t;
    t["iter"] = e.iteration;
    t["grad_norm"] = detail::number_or_null(e.grad_norm);
    if (e.objective) t["objective"] = detail::number_or_null(*e.objective);
    trace.push_back(t);
  }
  j["trace"] = trace;
  return j;
}

inline void write_trace_csv(const FitResult& r, const std::string& path) {
  std::ofstream out = detail::open_out(path);
  out << "iter,grad_norm,objective\n";
  for (const auto& e : r.trace) {
    out << e.iteration << ',' << format_double(e.grad_norm) << ',';
    if (e.objective) out << format_double(*e.objective);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Contaminated dataset export

inline std::string sidecar_path(const std::string& csv_path) {
  std::filesystem::path p(csv_path);
  p.replace_extension(".meta.json");
  return p.string();
}

/// Writes the CSV and a sidecar JSON with the seed and contamination record.
inline void export_contaminated(const Dataset& ds, const std::string& path) {
  write_csv(ds, path);
  json meta;
  meta["schema_version"] = 1;
  meta["family"] = ds.family_tag;
  meta["seed"] = ds.seed;
  meta["n"] = ds.n();
  meta["d"] = ds.d();
  meta["contamination"] = to_json(ds.contamination);
  write_json_file(meta, sidecar_path(path));
}

// ---------------------------------------------------------------------------
// Result tables

inline json to_json(const ResultTable& t) {
  json j;
  j["schema_version"] = t.schema_version;
  j["scenario"] = t.scenario;
  j["master_seed"] = t.master_seed;
  j["replications"] = t.replications;
  j["nested"] = t.nested;
  j["truth"] = detail::vector_json(t.truth);
  j["parameter_names"] = t.parameter_names;
  j["theta_mask"] = t.theta_mask;
  j["beta_mask"] = t.beta_mask;
  json rows = json::array();
  for (const auto& r : t.rows) {
    json row;
    row["scenario"] = r.scenario;
    row["n"] = r.n;
    row["eps"] = r.epsilon;
    row["recipe"] = r.recipe;
    row["estimator"] = to_string(r.estimator);
    row["rmse"] = detail::number_or_null(r.rmse);
    row["rmse_total"] = detail::number_or_null(r.rmse_total);
    row["rmse_beta"] = detail::number_or_null(r.rmse_beta);
    row["rmse_beta_total"] = detail::number_or_null(r.rmse_beta_total);
    row["median_error"] = detail::number_or_null(r.median_error);
    row["mean_wall_time"] = r.mean_wall_time;
    row["failures"] = r.failures;
    json reps = json::array();
    for (const auto& rep : r.reps) {
      json jr;
      jr["data_seed"] = rep.data_seed;
      jr["fit_seed"] = rep.fit_seed;
      jr["estimate"] = rep.failed ? json(nullptr) : detail::vector_json(rep.estimate);
      jr["error"] = detail::number_or_null(rep.error);
      jr["wall_time"] = rep.wall_time;
      jr["failed"] = rep.failed;
      jr["message"] = rep.message;
      jr["warnings"] = rep.warnings;
      reps.push_back(jr);
    }
    row["reps"] = reps;
    rows.push_back(row);
  }
  j["rows"] = rows;
  return j;
}

/// Writes <dir>/results.json (per-rep detail) and <dir>/results.csv (summary).
inline void write_results(const ResultTable& t, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_json_file(to_json(t), (std::filesystem::path(dir) / "results.json").string());
  std::ofstream out = detail::open_out((std::filesystem::path(dir) / "results.csv").string());
  out << "scenario,n,eps,recipe,estimator,rmse,rmse_total,rmse_beta,rmse_beta_total,median_error,failures,"
         "mean_wall_time\n";
  auto num = [](double v) { return std::isfinite(v) ? format_double(v) : std::string("nan"); };
  for (const auto& r : t.rows) {
    out << r.scenario << ',' << r.n << ',' << format_double(r.epsilon) << ',' << r.recipe << ','
        << to_string(r.estimator) << ',' << num(r.rmse) << ',' << num(r.rmse_total) << ',' << num(r.rmse_beta) << ','
        << num(r.rmse_beta_total) << ',' << num(r.median_error) << ',' << r.failures << ','
        << format_double(r.mean_wall_time) << '\n';
  }
}

/// Per-rep estimates of one row, read back from results.json.
inline std::vector<Vector> load_row_estimates(const json& results, std::size_t row) {
  std::vector<Vector> out;
  for (const auto& rep : results.at("rows").at(row).at("reps"))
    if (!rep.at("estimate").is_null()) out.push_back(detail::vector_from_json(rep.at("estimate"), "results"));
  return out;
}

// ---------------------------------------------------------------------------
// Model selection by name

/// gaussian | logistic | poisson | gamma | heckman | heckman_split | mixture
inline RegressionFamily family_from_name(const std::string& name, std::size_t d, std::size_t components = 2) {
  if (name == "gaussian") return RegressionFamily::gaussian_linear(d);
  if (name == "logistic") return RegressionFamily::logistic(d);
  if (name == "poisson") return RegressionFamily::poisson(d);
  if (name == "gamma") return RegressionFamily::gamma(d);
  if (name == "heckman") return RegressionFamily::heckman(d);
  if (name == "heckman_split") return RegressionFamily::heckman_split(d);
  if (name == "mixture") return RegressionFamily::gauss_mixture(d, components);
  throw ConfigError("unknown model '" + name + "'");
}

inline ResponseKind response_kind_for(const std::string& model) {
  if (model == "logistic") return ResponseKind::Binary;
  if (model == "poisson") return ResponseKind::Count;
  if (model == "heckman" || model == "heckman_split") return ResponseKind::CensoredPair;
  if (model == "gaussian" || model == "gamma" || model == "mixture") return ResponseKind::Real;
  throw ConfigError("unknown model '" + model + "'");
}

/// Number of covariate columns in a dataset CSV header.
inline std::size_t csv_covariate_count(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  while (std::getline(in, line))
    if (!detail::trim(line).empty()) break;
  const auto header = detail::split_csv(line);
  const std::size_t ny = (header.size() >= 2 && header.back() == "y2") ? 2 : 1;
  if (header.size() <= ny) throw FormatError(path + ": header has no covariate columns");
  return header.size() - ny;
}

}  // namespace mmdreg
