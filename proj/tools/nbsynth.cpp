// nbsynth: validate datasets, fit the hierarchical model, run the classical
// comparator and simulation-based recovery checks.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <cstdint>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "nbsynth/commands.hpp"

namespace {

using namespace nbsynth;

const std::map<std::string, SubsetLabel> kSubsets{
    {"A", SubsetLabel::A}, {"B", SubsetLabel::B}, {"C", SubsetLabel::C}};
const std::map<std::string, SeArmRouting> kRouting{
    {"normal", SeArmRouting::normal}, {"counts", SeArmRouting::counts}};
const std::map<std::string, TruncatedVariance> kVariance{
    {"exact", TruncatedVariance::exact}, {"published", TruncatedVariance::published}};
const std::map<std::string, Tau2Method> kMethods{
    {"reml", Tau2Method::reml}, {"dl", Tau2Method::dersimonian_laird}};

// Sampler flags shared by `fit` and `simulate --fit`.
void add_run_flags(CLI::App* cmd, RunConfig& cfg, std::uint64_t& seed) {
  cmd->add_option("--chains", cfg.chains, "number of chains")->check(CLI::Range(2, 64));
  cmd->add_option("--iters", cfg.iterations, "iterations per chain (>= 1000)")
      ->check(CLI::Range(std::size_t{1000}, std::size_t{1} << 40));
  cmd->add_option("--burnin-frac", cfg.burn_in_fraction, "fraction of iterations discarded")
      ->check(CLI::Range(0.0, 0.99));
  cmd->add_option("--thin", cfg.thinning, "keep every k-th draw")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", seed, "master seed");
  cmd->add_option("--se-arms", cfg.se_arms, "likelihood for arms with rate and SE")
      ->transform(CLI::CheckedTransformer(kRouting, CLI::ignore_case));
  cmd->add_option("--truncated-variance", cfg.truncated_variance,
                  "variance of zero-truncated counts in the joint likelihood")
      ->transform(CLI::CheckedTransformer(kVariance, CLI::ignore_case));
  cmd->add_flag("--strict", cfg.strict, "exit 2 when PSRF exceeds the threshold");
  cmd->add_option("--psrf-threshold", cfg.psrf_threshold, "convergence threshold")
      ->check(CLI::Range(1.0, 10.0));
  cmd->add_option("--predictive-draws", cfg.predictive_draws, "posterior predictive draws");
}

// `--config FILE` holds flat `key = value` lines (keys are long flag names
// without dashes). Entries are appended as `--key=value` unless the same
// flag is already on the command line, so flags take precedence.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  std::vector<std::string> rest;
  std::set<std::string> given;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config" && i + 1 < args.size()) {
      path = args[++i];
      continue;
    }
    if (a.rfind("--config=", 0) == 0) {
      path = a.substr(9);
      continue;
    }
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') - 2));
    rest.push_back(a);
  }
  if (path.empty()) return rest;
  std::ifstream in(path);
  if (!in) throw CLI::FileError::Missing(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (trim(line).empty()) continue;
    if (eq == std::string::npos) {
      throw CLI::ConversionError(path + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (given.count(key)) continue;
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      rest.push_back("--" + key + "=" + value.substr(1, value.size() - 2));
      continue;
    }
    // unquoted lists (durations, mix) become one token per item
    std::istringstream words(value);
    std::vector<std::string> items{std::istream_iterator<std::string>(words), {}};
    if (items.size() <= 1) {
      rest.push_back("--" + key + "=" + value);
    } else {
      rest.push_back("--" + key);
      rest.insert(rest.end(), items.begin(), items.end());
    }
  }
  return rest;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical negative-binomial evidence synthesis from aggregate count data"};
  app.require_subcommand(1);

  // validate
  std::string validate_input;
  auto* validate = app.add_subcommand("validate", "check a dataset and report subset tallies");
  validate->add_option("--input", validate_input, "dataset CSV")->required();

  // fit
  RunConfig fit_cfg;
  std::uint64_t fit_seed = 0;
  auto* fit = app.add_subcommand("fit", "sample the posterior for one subset");
  fit->add_option("--config", "flat key = value file (see docs/config.md)");
  fit->add_option("--input", fit_cfg.input, "dataset CSV")->required();
  fit->add_option("--subset", fit_cfg.subset, "A, B or C")
      ->transform(CLI::CheckedTransformer(kSubsets, CLI::ignore_case));
  fit->add_option("--out", fit_cfg.out_dir, "output directory")->required();
  fit->add_flag("--prior-only", fit_cfg.prior_only, "disable the likelihood");
  add_run_flags(fit, fit_cfg, fit_seed);

  // classic
  ClassicOptions classic_opt;
  auto* classic = app.add_subcommand("classic", "random-effects pooling of log rate ratios");
  classic->add_option("--input", classic_opt.input, "dataset CSV")->required();
  classic->add_option("--subset", classic_opt.subset, "A, B or C")
      ->transform(CLI::CheckedTransformer(kSubsets, CLI::ignore_case));
  classic->add_option("--method", classic_opt.method, "reml or dl")
      ->transform(CLI::CheckedTransformer(kMethods, CLI::ignore_case));
  classic->add_option("--json", classic_opt.json_path, "write JSON here ('-' for stdout)");

  // simulate
  SimulateOptions sim_opt;
  std::uint64_t sim_seed = 0;
  double lambda_median = std::exp(sim_opt.spec.mu_lambda);
  double phi_median = std::exp(sim_opt.spec.mu_phi);
  std::vector<double> mix;
  auto* simulate = app.add_subcommand("simulate", "generate a synthetic dataset");
  simulate->add_option("--config", "flat key = value file (see docs/config.md)");
  simulate->add_option("--out", sim_opt.out_dir, "output directory")->required();
  simulate->add_option("--studies", sim_opt.spec.n_studies, "number of studies")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--theta", sim_opt.spec.theta, "true rate ratio")->check(CLI::PositiveNumber);
  simulate->add_option("--lambda-median", lambda_median, "median placebo rate")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--sigma-lambda", sim_opt.spec.sigma_lambda, "sd of log rates");
  simulate->add_option("--phi-median", phi_median, "median overdispersion")
      ->check(CLI::PositiveNumber);
  simulate->add_option("--sigma-phi", sim_opt.spec.sigma_phi, "sd of log overdispersion");
  simulate->add_option("--sigma-psi", sim_opt.spec.sigma_psi, "scale of arm effects");
  simulate->add_option("--patients-min", sim_opt.spec.min_patients, "smallest arm");
  simulate->add_option("--patients-max", sim_opt.spec.max_patients, "largest arm");
  simulate->add_option("--durations", sim_opt.spec.durations, "study durations in years");
  simulate->add_option("--mix", mix, "shares: rate+SE, both, total only, zeroes only")
      ->expected(4);
  simulate->add_flag("--fit", sim_opt.fit, "fit the model and report recovery");
  add_run_flags(simulate, sim_opt.fit_config, sim_seed);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_code::usage;
  }

  if (validate->parsed()) return cmd_validate(validate_input, std::cout, std::cerr);
  if (fit->parsed()) {
    if (fit->count("--seed") == 0) {
      std::cerr << "error: --seed is required\n";
      return exit_code::usage;
    }
    fit_cfg.seed = fit_seed;
    return cmd_fit(fit_cfg, std::cout, std::cerr);
  }
  if (classic->parsed()) return cmd_classic(classic_opt, std::cout, std::cerr);
  if (simulate->parsed()) {
    if (simulate->count("--seed") == 0) {
      std::cerr << "error: --seed is required\n";
      return exit_code::usage;
    }
    sim_opt.seed = sim_seed;
    sim_opt.spec.mu_lambda = std::log(lambda_median);
    sim_opt.spec.mu_phi = std::log(phi_median);
    if (!mix.empty()) sim_opt.spec.mix = {mix[0], mix[1], mix[2], mix[3]};
    return cmd_simulate(sim_opt, std::cout, std::cerr);
  }
  return exit_code::usage;
}
