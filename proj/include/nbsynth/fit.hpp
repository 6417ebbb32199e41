#pragma once

// End-to-end posterior fit of the hierarchical model on a dataset subset,
// with the summary / chain / density / predictive artifacts.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "nbsynth/evidence.hpp"
#include "nbsynth/hiermodel.hpp"
#include "nbsynth/sampler.hpp"

namespace nbsynth {

struct RunConfig {
  std::string input;
  SubsetLabel subset = SubsetLabel::C;
  std::size_t chains = 4;
  std::size_t iterations = 200000;
  double burn_in_fraction = 0.5;
  std::size_t thinning = 20;
  std::optional<std::uint64_t> seed;
  SeArmRouting se_arms = SeArmRouting::normal;
  TruncatedVariance truncated_variance = TruncatedVariance::exact;
  bool strict = false;
  bool prior_only = false;
  std::string out_dir;
  double psrf_threshold = 1.01;
  std::size_t predictive_draws = 20000;
  PriorSpec priors;

  void validate() const {
    if (iterations < 1000) throw config_error("iterations must be at least 1000");
    if (chains < 2) throw config_error("at least two chains are required");
    if (!seed) throw config_error("a seed is required");
    if (thinning < 1) throw config_error("thinning must be positive");
    if (!(burn_in_fraction >= 0.0 && burn_in_fraction < 1.0)) {
      throw config_error("burn-in fraction must lie in [0, 1)");
    }
  }
};

/// A reported quantity: a sampler coordinate and its reporting-scale map.
struct ReportedParam {
  std::string name;
  std::size_t column = 0;
  bool exponentiate = false;
};

inline std::vector<ReportedParam> reported_params(const HierarchicalModel& m) {
  std::vector<ReportedParam> out{
      {"theta", m.idx_log_theta(), true},
      {"sigma_psi", m.idx_log_sigma_psi(), true},
      {"mu_lambda", m.idx_mu_lambda(), false},
      {"sigma_lambda", m.idx_log_sigma_lambda(), true},
      {"mu_phi", m.idx_mu_phi(), false},
      {"sigma_phi", m.idx_log_sigma_phi(), true},
  };
  for (std::size_t i = 0; i < m.num_studies(); ++i) {
    out.push_back({"lambda[" + std::to_string(i + 1) + "]", m.idx_log_lambda(i), true});
    out.push_back({"phi[" + std::to_string(i + 1) + "]", m.idx_log_phi(i), true});
  }
  for (std::size_t j = 0; j < m.num_active_arms(); ++j) {
    out.push_back({"psi[" + std::to_string(j + 1) + "]", m.idx_log_psi(j), true});
  }
  return out;
}

/// Names of the reported parameters that gate convergence.
inline const std::vector<std::string>& key_params() {
  static const std::vector<std::string> names{"theta",     "sigma_psi", "mu_lambda",
                                              "sigma_lambda", "mu_phi", "sigma_phi"};
  return names;
}

struct FitOutput {
  RunConfig config;
  std::vector<StudyRecord> studies;
  ChainSet chains;
  PsrfResult psrf;
  std::vector<ReportedParam> params;
  std::map<std::string, PosteriorSummary> summaries;
  std::map<std::string, double> param_psrf;
  std::vector<PredictiveDraw> predictive;
  bool converged = true;
  std::vector<std::string> warnings;

  const PosteriorSummary& at(const std::string& name) const { return summaries.at(name); }
};

inline HierarchicalModel build_model(const std::vector<StudyRecord>& studies,
                                     const RunConfig& cfg) {
  ModelConfig mc;
  mc.priors = cfg.priors;
  mc.se_arms = cfg.se_arms;
  mc.use_likelihood = !cfg.prior_only;
  mc.truncated_variance = cfg.truncated_variance;
  return HierarchicalModel(studies, mc);
}

/// Samples the posterior of the selected subset. `studies` is the full
/// dataset; the subset is selected here.
inline FitOutput fit_model(const std::vector<StudyRecord>& studies, const RunConfig& cfg) {
  cfg.validate();
  FitOutput out;
  out.config = cfg;
  out.studies = select_subset(studies, cfg.subset);
  if (out.studies.empty()) throw config_error("selected subset contains no studies");
  const HierarchicalModel model = build_model(out.studies, cfg);

  RunOptions opt;
  opt.n_chains = cfg.chains;
  opt.n_iterations = cfg.iterations;
  opt.burn_in_fraction = cfg.burn_in_fraction;
  opt.thinning = cfg.thinning;
  opt.master_seed = *cfg.seed;
  out.chains = run_chains(model, opt);
  out.psrf = psrf(out.chains);

  out.params = reported_params(model);
  for (const ReportedParam& p : out.params) {
    std::function<double(double)> tr;
    if (p.exponentiate) tr = [](double v) { return std::exp(v); };
    out.summaries.emplace(p.name, summarize(out.chains, p.column, tr));
    out.param_psrf[p.name] = out.psrf.univariate[p.column];
  }

  for (const std::string& name : key_params()) {
    const double r = out.param_psrf.at(name);
    if (std::isfinite(r) && r > cfg.psrf_threshold) {
      out.converged = false;
      std::ostringstream os;
      os << "PSRF of " << name << " is " << r << " (threshold " << cfg.psrf_threshold << ")";
      out.warnings.push_back(os.str());
    }
  }

  std::vector<HyperDraw> hyper;
  for (const auto& c : out.chains.chains) {
    for (Eigen::Index r = 0; r < c.rows(); ++r) {
      hyper.push_back({c(r, static_cast<Eigen::Index>(model.idx_mu_lambda())),
                       std::exp(c(r, static_cast<Eigen::Index>(model.idx_log_sigma_lambda()))),
                       c(r, static_cast<Eigen::Index>(model.idx_mu_phi())),
                       std::exp(c(r, static_cast<Eigen::Index>(model.idx_log_sigma_phi())))});
    }
  }
  std::uint64_t pred_state = *cfg.seed ^ 0x7072656469637469ULL;
  out.predictive = posterior_predictive(hyper, cfg.predictive_draws, splitmix64(pred_state));
  return out;
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline nlohmann::json json_number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline nlohmann::json summary_json(const FitOutput& f) {
  using nlohmann::json;
  json j;
  j["subset"] = std::string(1, to_char(f.config.subset));
  j["n_studies"] = f.studies.size();
  j["chains"] = f.config.chains;
  j["iterations"] = f.config.iterations;
  j["burn_in_fraction"] = f.config.burn_in_fraction;
  j["thinning"] = f.config.thinning;
  j["seed"] = *f.config.seed;
  j["se_arms"] = f.config.se_arms == SeArmRouting::normal ? "normal" : "counts";
  j["prior_only"] = f.config.prior_only;
  j["truncated_variance"] =
      f.config.truncated_variance == TruncatedVariance::exact ? "exact" : "published";
  j["converged"] = f.converged;
  j["psrf_threshold"] = f.config.psrf_threshold;
  j["multivariate_psrf"] = detail::json_number(f.psrf.multivariate);
  j["warnings"] = f.warnings;
  json params = json::object();
  for (const auto& p : f.params) {
    const PosteriorSummary& s = f.summaries.at(p.name);
    params[p.name] = {
        {"median", s.median}, {"mean", s.mean},   {"q025", s.q025},
        {"q05", s.q05},       {"q25", s.q25},     {"q75", s.q75},
        {"q95", s.q95},       {"q975", s.q975},   {"psrf", detail::json_number(f.param_psrf.at(p.name))},
        {"ess", s.ess}};
  }
  j["parameters"] = params;
  json studies = json::array();
  for (std::size_t i = 0; i < f.studies.size(); ++i) {
    studies.push_back({{"index", i + 1}, {"study", f.studies[i].study_id}});
  }
  j["studies"] = studies;
  return j;
}

inline std::string report_text(const FitOutput& f) {
  std::ostringstream os;
  os << "subset " << to_char(f.config.subset) << ": " << f.studies.size() << " studies, "
     << f.config.chains << " chains x " << f.config.iterations << " iterations (burn-in "
     << f.config.burn_in_fraction << ", thinning " << f.config.thinning << "), seed "
     << *f.config.seed << (f.config.prior_only ? ", prior only" : "")
     << (f.config.truncated_variance == TruncatedVariance::published ? ", published truncated variance" : "")
     << "\n\n";
  os << "parameter        median      2.5%     97.5%      psrf       ess\n";
  for (const auto& name : key_params()) {
    const auto& s = f.summaries.at(name);
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %10.4f %9.4f %9.4f %9.4f %9.0f\n", name.c_str(),
                  s.median, s.q025, s.q975, f.param_psrf.at(name), s.ess);
    os << line;
  }
  os << "\nmultivariate PSRF: " << f.psrf.multivariate << "\n";
  for (std::size_t i = 0; i < f.studies.size(); ++i) {
    const auto& l = f.summaries.at("lambda[" + std::to_string(i + 1) + "]");
    const auto& p = f.summaries.at("phi[" + std::to_string(i + 1) + "]");
    char line[200];
    std::snprintf(line, sizeof line, "  [%2zu] %-20s lambda %.3f [%.3f, %.3f]  phi %.3f [%.3f, %.3f]\n",
                  i + 1, f.studies[i].study_id.c_str(), l.median, l.q025, l.q975, p.median,
                  p.q025, p.q975);
    os << line;
  }
  if (!f.warnings.empty()) {
    os << "\nwarnings:\n";
    for (const auto& w : f.warnings) os << "  " << w << "\n";
  }
  return os.str();
}

/// summary.json, chains/chain-<k>.tsv, density/<param>.tsv, predictive.tsv
/// and report.txt under `dir`.
inline void write_fit_artifacts(const FitOutput& f, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "chains");
  fs::create_directories(dir / "density");
  {
    std::ofstream os(dir / "summary.json");
    os << summary_json(f).dump(2) << '\n';
  }
  for (std::size_t c = 0; c < f.chains.chains.size(); ++c) {
    std::ofstream os(dir / "chains" / ("chain-" + std::to_string(c + 1) + ".tsv"));
    const auto& names = f.chains.param_names;
    for (std::size_t j = 0; j < names.size(); ++j) os << (j ? "\t" : "") << names[j];
    os << '\n';
    const auto& m = f.chains.chains[c];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) os << (j ? "\t" : "") << detail::fmt(m(r, j));
      os << '\n';
    }
  }
  for (const auto& name : key_params()) {
    const DensityGrid& g = f.summaries.at(name).density;
    std::ofstream os(dir / "density" / (name + ".tsv"));
    os << name << "\tdensity\n";
    for (std::size_t i = 0; i < g.x.size(); ++i) {
      os << detail::fmt(g.x[i]) << '\t' << detail::fmt(g.density[i]) << '\n';
    }
  }
  {
    // log-normal prior of theta on the posterior grid
    const DensityGrid& g = f.summaries.at("theta").density;
    const double sd = f.config.priors.log_theta_sd;
    std::ofstream os(dir / "density" / "theta_prior.tsv");
    os << "theta\tdensity\n";
    for (double x : g.x) {
      const double d = x > 0.0 ? std::exp(detail::normal_log_pdf(std::log(x), 0.0, sd * sd)) / x : 0.0;
      os << detail::fmt(x) << '\t' << detail::fmt(d) << '\n';
    }
  }
  {
    std::ofstream os(dir / "predictive.tsv");
    os << "lambda\tphi\n";
    for (const auto& d : f.predictive) os << detail::fmt(d.lambda) << '\t' << detail::fmt(d.phi) << '\n';
  }
  {
    std::ofstream os(dir / "report.txt");
    os << report_text(f);
  }
}

}  // namespace nbsynth
