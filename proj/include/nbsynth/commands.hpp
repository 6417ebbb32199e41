#pragma once

// Batch commands behind the nbsynth executable. Each returns a process exit
// code: 0 success, 1 usage or parse error, 2 model error or (strict mode)
// non-convergence.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "nbsynth/evidence.hpp"
#include "nbsynth/fit.hpp"
#include "nbsynth/hiermodel.hpp"
#include "nbsynth/metaclassic.hpp"
#include "nbsynth/simulate.hpp"

namespace nbsynth {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 1;
inline constexpr int model = 2;
}  // namespace exit_code

namespace detail {

inline std::optional<ParsedDataset> read_dataset(const std::string& path, std::ostream& err) {
  std::ifstream in(path);
  if (!in) {
    err << "error: cannot read '" << path << "'\n";
    return std::nullopt;
  }
  std::stringstream text;
  text << in.rdbuf();
  // a blank file is a dataset without studies rather than a header error
  if (text.str().find_first_not_of(" \t\r\n") == std::string::npos) return ParsedDataset{};
  try {
    return parse_dataset_rows(text);
  } catch (const parse_error& e) {
    err << "error: " << path << ": " << e.what() << '\n';
    return std::nullopt;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// validate

inline int cmd_validate(const std::string& path, std::ostream& out, std::ostream& err) {
  const auto parsed = detail::read_dataset(path, err);
  if (!parsed) return exit_code::usage;
  const auto& studies = parsed->studies;
  if (studies.empty()) {
    err << "error: " << path << ": no studies\n";
    return exit_code::usage;
  }
  std::size_t arms = 0;
  for (const auto& s : studies) arms += s.arms.size();
  const SubsetTally t = tally_subsets(studies);
  out << "studies: " << studies.size() << "\narms: " << arms << '\n';
  out << "subsets: A=" << t.a << " B=" << t.b << " C=" << t.c << '\n';
  out << "outside A: both=" << t.both << " total-only=" << t.total_only
      << " zeroes-only=" << t.zeroes_only << '\n';

  std::vector<std::string> violations;
  std::vector<std::string> notes;
  out << "derived totals (rate x patients x duration):\n";
  for (std::size_t i = 0; i < studies.size(); ++i) {
    const auto& s = studies[i];
    const auto cls = classify_subset(s);
    for (const auto& d : cls.diagnostics) notes.push_back("row " + std::to_string(parsed->first_row[i]) + ": " + d);
    if (!cls.highest()) {
      violations.push_back("row " + std::to_string(parsed->first_row[i]) + ": study '" +
                           s.study_id + "' carries no usable evidence");
    } else {
      const std::string computed(1, to_char(*cls.highest()));
      const std::string& declared = parsed->declared_group[i];
      if (!declared.empty() && declared != computed) {
        notes.push_back("row " + std::to_string(parsed->first_row[i]) + ": study '" +
                             s.study_id + "' declared group " + declared + ", computed " + computed);
      }
    }
    for (std::size_t j = 0; j < s.arms.size(); ++j) {
      const auto& a = s.arms[j];
      if (!a.rate_est) continue;
      const long derived = derive_total(*a.rate_est, a.n_patients, s.duration);
      out << "  row " << parsed->first_row[i] + j << ' ' << s.study_id << ' '
          << (a.treatment_class == TreatmentClass::placebo ? 'P' : 'L') << ": " << derived;
      if (a.total) {
        out << " (reported " << *a.total << (*a.total == derived ? ", match)" : ", differs)");
        if (*a.total != derived) {
          notes.push_back("row " + std::to_string(parsed->first_row[i] + j) + ": derived total " +
                          std::to_string(derived) + " differs from reported " +
                          std::to_string(*a.total));
        }
      }
      out << '\n';
    }
  }
  for (const auto& n : notes) out << "note: " << n << '\n';
  for (const auto& v : violations) err << "violation: " << v << '\n';
  out << (violations.empty() ? "clean\n" : "violations found\n");
  return violations.empty() ? exit_code::ok : exit_code::usage;
}

// ---------------------------------------------------------------------------
// fit

inline int cmd_fit(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    cfg.validate();
  } catch (const config_error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  }
  if (cfg.out_dir.empty()) {
    err << "error: an output directory is required\n";
    return exit_code::usage;
  }
  const auto parsed = detail::read_dataset(cfg.input, err);
  if (!parsed) return exit_code::usage;
  if (parsed->studies.empty()) {
    err << "error: " << cfg.input << ": no studies\n";
    return exit_code::usage;
  }
  FitOutput fit;
  try {
    fit = fit_model(parsed->studies, cfg);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::model;
  }
  write_fit_artifacts(fit, cfg.out_dir);
  out << report_text(fit);
  for (const auto& w : fit.warnings) err << "warning: " << w << '\n';
  if (!fit.converged && cfg.strict) return exit_code::model;
  return exit_code::ok;
}

// ---------------------------------------------------------------------------
// classic

struct ClassicOptions {
  std::string input;
  SubsetLabel subset = SubsetLabel::A;
  Tau2Method method = Tau2Method::reml;
  std::string json_path;  // "-" prints JSON to stdout instead of the table
};

inline nlohmann::json classic_json(const std::vector<EffectEstimate>& est, const PooledResult& r,
                                   SubsetLabel subset) {
  using nlohmann::json;
  json j;
  j["subset"] = std::string(1, to_char(subset));
  j["method"] = to_string(r.method);
  json studies = json::array();
  for (std::size_t i = 0; i < est.size(); ++i) {
    studies.push_back({{"study", est[i].study_id},
                       {"log_rate_ratio", est[i].log_effect},
                       {"std_err", est[i].std_err},
                       {"rate_ratio", std::exp(est[i].log_effect)},
                       {"weight", r.weights[i]}});
  }
  j["estimates"] = studies;
  j["pooled"] = {{"rate_ratio", r.pooled_ratio()},
                 {"log_rate_ratio", r.pooled_log_effect},
                 {"std_err", r.std_err},
                 {"tau_sq", r.tau_sq},
                 {"ci95", {r.ci95.first, r.ci95.second}}};
  return j;
}

inline int cmd_classic(const ClassicOptions& opt, std::ostream& out, std::ostream& err) {
  const auto parsed = detail::read_dataset(opt.input, err);
  if (!parsed) return exit_code::usage;
  std::vector<StudyRecord> eligible;
  std::size_t skipped = 0;
  for (const auto& s : select_subset(parsed->studies, opt.subset)) {
    const bool ok = std::all_of(s.arms.begin(), s.arms.end(),
                                [](const ArmRecord& a) { return a.has_rate_se(); });
    if (ok) eligible.push_back(s);
    else ++skipped;
  }
  if (eligible.empty()) {
    err << "error: no eligible studies (all arms need rate and standard error)\n";
    return exit_code::usage;
  }
  const auto est = rate_ratio_estimates(eligible);
  const PooledResult r = random_effects_pool(est, opt.method);
  const auto j = classic_json(est, r, opt.subset);
  if (opt.json_path == "-") {
    out << j.dump(2) << '\n';
    return exit_code::ok;
  }
  if (!opt.json_path.empty()) {
    std::ofstream os(opt.json_path);
    if (!os) {
      err << "error: cannot write '" << opt.json_path << "'\n";
      return exit_code::usage;
    }
    os << j.dump(2) << '\n';
  }
  char line[200];
  out << "study                  rate ratio   log RR       SE   weight\n";
  for (std::size_t i = 0; i < est.size(); ++i) {
    std::snprintf(line, sizeof line, "%-20s %12.4f %8.4f %8.4f %8.3f\n", est[i].study_id.c_str(),
                  std::exp(est[i].log_effect), est[i].log_effect, est[i].std_err, r.weights[i]);
    out << line;
  }
  std::snprintf(line, sizeof line, "pooled (%s, tau^2 = %.4f): %.3f [%.3f, %.3f]\n",
                to_string(r.method), r.tau_sq, r.pooled_ratio(), r.ci95.first, r.ci95.second);
  out << line;
  if (skipped) out << skipped << " studies without rate and SE in every arm skipped\n";
  return exit_code::ok;
}

// ---------------------------------------------------------------------------
// simulate

struct RecoveryRow {
  std::string name;
  double truth = 0.0;
  PosteriorSummary posterior;
  bool covered() const { return posterior.q025 <= truth && truth <= posterior.q975; }
};

inline std::vector<RecoveryRow> recovery_rows(const SimulatedDataset& data, const FitOutput& fit) {
  const SimulationSpec& s = data.spec;
  std::vector<RecoveryRow> rows{
      {"theta", s.theta, fit.at("theta")},
      {"mu_lambda", s.mu_lambda, fit.at("mu_lambda")},
      {"sigma_lambda", s.sigma_lambda, fit.at("sigma_lambda")},
      {"mu_phi", s.mu_phi, fit.at("mu_phi")},
      {"sigma_phi", s.sigma_phi, fit.at("sigma_phi")},
      {"sigma_psi", s.sigma_psi, fit.at("sigma_psi")},
  };
  for (std::size_t i = 0; i < data.studies.size(); ++i) {
    const std::string k = std::to_string(i + 1);
    rows.push_back({"lambda[" + k + "]", data.studies[i].lambda, fit.at("lambda[" + k + "]")});
    rows.push_back({"phi[" + k + "]", data.studies[i].phi, fit.at("phi[" + k + "]")});
  }
  return rows;
}

inline nlohmann::json recovery_json(const SimulatedDataset& data, const FitOutput& fit) {
  using nlohmann::json;
  json j;
  j["seed"] = data.seed;
  j["n_studies"] = data.studies.size();
  j["converged"] = fit.converged;
  json params = json::object();
  std::size_t covered = 0, total = 0;
  for (const auto& r : recovery_rows(data, fit)) {
    params[r.name] = {{"truth", r.truth},
                      {"median", r.posterior.median},
                      {"q025", r.posterior.q025},
                      {"q975", r.posterior.q975},
                      {"covered", r.covered()}};
    ++total;
    if (r.covered()) ++covered;
  }
  j["parameters"] = params;
  j["coverage"] = static_cast<double>(covered) / static_cast<double>(total);
  return j;
}

inline nlohmann::json truth_json(const SimulatedDataset& data) {
  using nlohmann::json;
  const SimulationSpec& s = data.spec;
  json j{{"seed", data.seed},
         {"n_studies", s.n_studies},
         {"theta", s.theta},
         {"mu_lambda", s.mu_lambda},
         {"sigma_lambda", s.sigma_lambda},
         {"mu_phi", s.mu_phi},
         {"sigma_phi", s.sigma_phi},
         {"sigma_psi", s.sigma_psi}};
  json studies = json::array();
  const char* names[] = {"rate_se", "both", "total_only", "zeroes_only"};
  for (const auto& st : data.studies) {
    studies.push_back({{"study", st.record.study_id},
                       {"format", names[static_cast<int>(st.format)]},
                       {"lambda", st.lambda},
                       {"phi", st.phi},
                       {"psi", st.psi}});
  }
  j["studies"] = studies;
  return j;
}

struct SimulateOptions {
  SimulationSpec spec;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool fit = false;
  RunConfig fit_config;  // input, seed and out_dir are filled in here
};

inline int cmd_simulate(const SimulateOptions& opt, std::ostream& out, std::ostream& err) {
  if (!opt.seed) {
    err << "error: a seed is required\n";
    return exit_code::usage;
  }
  if (opt.out_dir.empty()) {
    err << "error: an output directory is required\n";
    return exit_code::usage;
  }
  SimulatedDataset data;
  try {
    data = simulate_dataset(opt.spec, *opt.seed);
  } catch (const config_error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  }
  namespace fs = std::filesystem;
  const fs::path dir(opt.out_dir);
  fs::create_directories(dir);
  {
    std::ofstream os(dir / "dataset.csv");
    serialize_dataset(os, data.records());
  }
  {
    std::ofstream os(dir / "truth.json");
    os << truth_json(data).dump(2) << '\n';
  }
  out << "wrote " << data.studies.size() << " studies to " << (dir / "dataset.csv").string() << '\n';
  if (!opt.fit) return exit_code::ok;

  RunConfig cfg = opt.fit_config;
  cfg.input = (dir / "dataset.csv").string();
  cfg.out_dir = (dir / "fit").string();
  if (!cfg.seed) cfg.seed = *opt.seed;
  FitOutput fit;
  try {
    fit = fit_model(data.records(), cfg);
  } catch (const config_error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::usage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::model;
  }
  write_fit_artifacts(fit, cfg.out_dir);
  const auto rec = recovery_json(data, fit);
  {
    std::ofstream os(dir / "recovery.json");
    os << rec.dump(2) << '\n';
  }
  out << "parameter          truth    median      2.5%     97.5%  covered\n";
  char line[160];
  for (const auto& r : recovery_rows(data, fit)) {
    std::snprintf(line, sizeof line, "%-14s %9.4f %9.4f %9.4f %9.4f  %s\n", r.name.c_str(), r.truth,
                  r.posterior.median, r.posterior.q025, r.posterior.q975,
                  r.covered() ? "yes" : "no");
    out << line;
  }
  out << "coverage: " << rec["coverage"].get<double>() << '\n';
  for (const auto& w : fit.warnings) err << "warning: " << w << '\n';
  if (!fit.converged && cfg.strict) return exit_code::model;
  return exit_code::ok;
}

}  // namespace nbsynth
