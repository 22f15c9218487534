// mmdreg: simulate, contaminate, fit and benchmark MMD regression estimators.
//
// Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.

#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "mmdreg/mmdreg.hpp"

namespace {

using namespace mmdreg;

constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

int cmd_simulate(const std::string& scenario, std::size_t n, std::uint64_t seed, const std::string& out) {
  const Dataset ds = simulate_dataset(parse_scenario(scenario), n, seed);
  export_contaminated(ds, out);
  std::cout << "wrote " << ds.n() << " rows to " << out << '\n';
  return 0;
}

int cmd_contaminate(const std::string& in, const ContaminationSpec& spec, const std::string& model,
                    const std::string& out) {
  const ResponseKind kind = model.empty() ? sniff_response_kind(in) : response_kind_for(model);
  const Dataset ds = load_csv(in, kind);
  const Dataset dirty = contaminate(ds, spec);
  export_contaminated(dirty, out);
  std::cout << "modified " << dirty.contamination.indices.size() << " of " << dirty.n() << " rows; wrote " << out
            << '\n';
  return 0;
}

int cmd_fit(const std::string& in, const std::string& model, std::size_t components, const std::string& estimator,
            const std::string& config_path, const std::string& out, const std::string& trace) {
  json cfg_json = config_path.empty() ? json::object() : read_json_file(config_path);
  GammaShape shape = gamma_shape_from_json(cfg_json);
  cfg_json.erase("gamma_shape");
  FitConfig cfg = fit_config_from_json(cfg_json);
  if (!estimator.empty()) cfg.estimator = parse_estimator(estimator);
  const RegressionFamily family = family_from_name(model, csv_covariate_count(in), components);
  const Dataset ds = load_csv(in, family);
  const FitResult res = (cfg.estimator == Estimator::MLE || cfg.estimator == Estimator::OLS)
                            ? fit_baseline(family, ds, cfg.estimator, shape)
                            : fit_mmd(family, ds, cfg);
  const json j = to_json(res, family);
  if (out.empty())
    std::cout << j.dump(2) << '\n';
  else
    write_json_file(j, out);
  if (!trace.empty()) write_trace_csv(res, trace);
  for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
  if (res.failed) {
    std::cerr << "error: " << res.error << '\n';
    return kExitNumerical;
  }
  return 0;
}

int cmd_bench(const std::string& plan_path, const std::string& out) {
  ExperimentPlan plan = plan_from_json(read_json_file(plan_path));
  if (!out.empty()) plan.output = out;
  if (plan.output.empty()) throw ConfigError("bench: no output directory (use --out or the plan's 'output' key)");
  const ResultTable table = run_plan(plan);
  write_results(table, plan.output);
  std::printf("%-22s %6s %6s %-16s %-6s %9s %9s %5s\n", "scenario", "n", "eps", "recipe", "est", "rmse_tot",
              "rmse/dim", "fail");
  for (const auto& r : table.rows) {
    std::printf("%-22s %6zu %6.3f %-16s %-6s %9.4f %9.4f %5zu\n", r.scenario.c_str(), r.n, r.epsilon,
                r.recipe.c_str(), to_string(r.estimator).c_str(), r.rmse_total, r.rmse, r.failures);
  }
  std::cout << "results written to " << plan.output << '\n';
  return 0;
}

int cmd_mmd(const std::string& a, const std::string& b, const std::string& kernel_path) {
  const KernelSpec k = kernel_from_json(read_json_file(kernel_path));
  const auto A = WeightedPointSet::uniform(load_points(a));
  const auto B = WeightedPointSet::uniform(load_points(b));
  std::printf("%.17g\n", mmd_sq_vstat(k, A, B));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MMD-based robust regression toolkit"};
  app.require_subcommand(1);

  std::string scenario, out, in, model, estimator, config, trace, plan, a, b, kernel;
  std::string scheme = "adversarial", recipe = "type_x";
  std::size_t n = 1000, components = 2;
  std::uint64_t seed = 0;
  double eps = 0.0, recipe_mean = 5.0;

  auto* sim = app.add_subcommand("simulate", "Simulate a synthetic dataset");
  sim->add_option("--scenario", scenario, "gauss_linear_laplace | heckman_synthetic | gamma_synthetic")->required();
  sim->add_option("--n", n, "Number of rows")->default_val(1000);
  sim->add_option("--seed", seed, "Random seed")->default_val(0);
  sim->add_option("--out", out, "Output CSV")->required();

  auto* con = app.add_subcommand("contaminate", "Contaminate a dataset");
  con->add_option("--in", in, "Input CSV")->required();
  con->add_option("--eps", eps, "Contamination rate in [0,1)")->required();
  con->add_option("--scheme", scheme, "adversarial | huber")->default_val("adversarial");
  con->add_option("--recipe", recipe, "type_x | type_y | selection_flip")->default_val("type_x");
  con->add_option("--recipe-mean", recipe_mean, "Mean of the N(mean,1) outlier draws")->default_val(5.0);
  con->add_option("--model", model, "Model name (sets the response type; default inferred from the header)");
  con->add_option("--seed", seed, "Random seed")->default_val(0);
  con->add_option("--out", out, "Output CSV")->required();

  auto* fit = app.add_subcommand("fit", "Fit a model to a dataset");
  fit->add_option("--in", in, "Input CSV")->required();
  fit->add_option("--model", model, "gaussian | logistic | poisson | gamma | heckman | heckman_split | mixture")
      ->required();
  fit->add_option("--components", components, "Mixture components")->default_val(2);
  fit->add_option("--estimator", estimator, "hat | tilde | mle | ols (overrides the config)");
  fit->add_option("--config", config, "JSON fit configuration");
  fit->add_option("--out", out, "Output JSON (default: stdout)");
  fit->add_option("--trace", trace, "Optional trace CSV");

  auto* bench = app.add_subcommand("bench", "Run an experiment plan");
  bench->add_option("--plan", plan, "JSON experiment plan")->required();
  bench->add_option("--out", out, "Output directory (overrides the plan)");

  auto* mmd = app.add_subcommand("mmd", "Squared MMD between two point sets");
  mmd->add_option("--a", a, "CSV of points (header row, all columns used)")->required();
  mmd->add_option("--b", b, "CSV of points")->required();
  mmd->add_option("--kernel", kernel, "JSON kernel spec")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*sim) return cmd_simulate(scenario, n, seed, out);
    if (*con) {
      ContaminationSpec spec;
      spec.epsilon = eps;
      spec.scheme = parse_scheme(scheme);
      spec.recipe = parse_recipe(recipe);
      spec.recipe_mean = recipe_mean;
      spec.seed = seed;
      return cmd_contaminate(in, spec, model, out);
    }
    if (*fit) return cmd_fit(in, model, components, estimator, config, out, trace);
    if (*bench) return cmd_bench(plan, out);
    if (*mmd) return cmd_mmd(a, b, kernel);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  }
  return kExitValidation;
}
