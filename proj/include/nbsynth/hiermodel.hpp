#pragma once

// Hierarchical negative-binomial model for arm-level aggregate evidence.
//
//   arm rate        lambda_i                  (placebo)
//                   lambda_i * theta * psi_ij (active)
//   log lambda_i ~ Normal(mu_lambda, sigma_lambda^2)
//   log phi_i    ~ Normal(mu_phi, sigma_phi^2)
//   log psi_ij   ~ t_3(0, sigma_psi)          (sigma_psi is the scale)
//   log theta    ~ Normal(0, log(4)^2)
//   mu_lambda, mu_phi, log sigma_* ~ Uniform on the PriorSpec bounds
//
// The sampler works on the flat vector
//   [log lambda_1..k, log phi_1..k, log psi_1..a, log theta,
//    mu_lambda, log sigma_lambda, mu_phi, log sigma_phi, log sigma_psi]
// and all densities are with respect to these coordinates (so the uniform
// priors on log sigma are flat there).

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbsynth/evidence.hpp"
#include "nbsynth/nbcore.hpp"
#include "nbsynth/target.hpp"

namespace nbsynth {

class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PriorSpec {
  double mu_lambda_lo = std::log(1e-2);
  double mu_lambda_hi = std::log(1e2);
  double log_sigma_lambda_lo = std::log(1e-3);
  double log_sigma_lambda_hi = std::log(10.0);
  double mu_phi_lo = std::log(1e-4);
  double mu_phi_hi = std::log(1e4);
  double log_sigma_phi_lo = std::log(1e-3);
  double log_sigma_phi_hi = std::log(10.0);
  double log_theta_sd = std::log(4.0);
  double psi_df = 3.0;
  double log_sigma_psi_lo = std::log(1e-3);
  double log_sigma_psi_hi = std::log(10.0);

  void validate() const {
    auto ordered = [](double lo, double hi) {
      return std::isfinite(lo) && std::isfinite(hi) && lo < hi;
    };
    if (!ordered(mu_lambda_lo, mu_lambda_hi) ||
        !ordered(log_sigma_lambda_lo, log_sigma_lambda_hi) ||
        !ordered(mu_phi_lo, mu_phi_hi) || !ordered(log_sigma_phi_lo, log_sigma_phi_hi) ||
        !ordered(log_sigma_psi_lo, log_sigma_psi_hi) || !(log_theta_sd > 0.0) ||
        !(psi_df > 0.0)) {
      throw config_error("prior bounds must be finite and ordered");
    }
  }
};

enum class SeArmRouting {
  normal,  // rate +/- SE arms use the normal approximation only
  counts,  // such arms use their totals / zero counts instead
};

struct ModelConfig {
  PriorSpec priors;
  SeArmRouting se_arms = SeArmRouting::normal;
  bool use_likelihood = true;  // false: sample the prior
  TruncatedVariance truncated_variance = TruncatedVariance::exact;
};

enum class LikelihoodKind { rate_se, joint, total_only, zero_only };

inline const char* to_string(LikelihoodKind k) {
  switch (k) {
    case LikelihoodKind::rate_se: return "rate_se";
    case LikelihoodKind::joint: return "joint";
    case LikelihoodKind::total_only: return "total_only";
    case LikelihoodKind::zero_only: return "zero_only";
  }
  return "?";
}

struct ModelState {
  std::vector<double> log_lambda;
  std::vector<double> log_phi;
  std::vector<double> log_psi;  // one per active arm, study order
  double log_theta = 0.0;
  double mu_lambda = 0.0;
  double sigma_lambda = 1.0;
  double mu_phi = 0.0;
  double sigma_phi = 1.0;
  double sigma_psi = 1.0;
};

namespace detail {

inline double student_t_log_pdf(double x, double df, double scale) {
  const double u = x / scale;
  return std::lgamma((df + 1.0) / 2.0) - std::lgamma(df / 2.0) -
         0.5 * std::log(df * std::numbers::pi) - std::log(scale) -
         (df + 1.0) / 2.0 * std::log1p(u * u / df);
}

inline double uniform_log_pdf(double x, double lo, double hi) {
  if (!(x >= lo && x <= hi)) return -std::numeric_limits<double>::infinity();
  return -std::log(hi - lo);
}

}  // namespace detail

class HierarchicalModel {
 public:
  struct Arm {
    std::size_t study = 0;
    std::size_t arm_in_study = 0;
    std::optional<std::size_t> psi;  // index into log_psi for active arms
    LikelihoodKind kind = LikelihoodKind::rate_se;
    long n = 0;
    double duration = 1.0;
    double rate = 0.0;
    double se = 0.0;
    long total = 0;
    long zeroes = 0;
    double log_choose = 0.0;
  };

  HierarchicalModel(std::vector<StudyRecord> studies, ModelConfig config = {})
      : studies_(std::move(studies)), config_(config) {
    config_.priors.validate();
    if (studies_.empty()) throw config_error("model needs at least one study");
    build_arms();
    build_blocks();
  }

  const std::vector<StudyRecord>& studies() const { return studies_; }
  const ModelConfig& config() const { return config_; }
  const std::vector<Arm>& arms() const { return arms_; }
  std::size_t num_studies() const { return studies_.size(); }
  std::size_t num_active_arms() const { return n_psi_; }

  // flat layout
  std::size_t idx_log_lambda(std::size_t i) const { return i; }
  std::size_t idx_log_phi(std::size_t i) const { return num_studies() + i; }
  std::size_t idx_log_psi(std::size_t j) const { return 2 * num_studies() + j; }
  std::size_t idx_log_theta() const { return 2 * num_studies() + n_psi_; }
  std::size_t idx_mu_lambda() const { return idx_log_theta() + 1; }
  std::size_t idx_log_sigma_lambda() const { return idx_log_theta() + 2; }
  std::size_t idx_mu_phi() const { return idx_log_theta() + 3; }
  std::size_t idx_log_sigma_phi() const { return idx_log_theta() + 4; }
  std::size_t idx_log_sigma_psi() const { return idx_log_theta() + 5; }
  std::size_t dimension() const { return idx_log_theta() + 6; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < num_studies(); ++i) {
      out.push_back("log_lambda[" + std::to_string(i + 1) + "]");
    }
    for (std::size_t i = 0; i < num_studies(); ++i) {
      out.push_back("log_phi[" + std::to_string(i + 1) + "]");
    }
    for (std::size_t j = 0; j < n_psi_; ++j) {
      out.push_back("log_psi[" + std::to_string(j + 1) + "]");
    }
    for (const char* s : {"log_theta", "mu_lambda", "log_sigma_lambda", "mu_phi",
                          "log_sigma_phi", "log_sigma_psi"}) {
      out.emplace_back(s);
    }
    return out;
  }

  std::vector<double> pack(const ModelState& s) const {
    check_dims(s);
    std::vector<double> x(dimension());
    std::copy(s.log_lambda.begin(), s.log_lambda.end(), x.begin());
    std::copy(s.log_phi.begin(), s.log_phi.end(), x.begin() + idx_log_phi(0));
    std::copy(s.log_psi.begin(), s.log_psi.end(), x.begin() + idx_log_psi(0));
    x[idx_log_theta()] = s.log_theta;
    x[idx_mu_lambda()] = s.mu_lambda;
    x[idx_log_sigma_lambda()] = std::log(s.sigma_lambda);
    x[idx_mu_phi()] = s.mu_phi;
    x[idx_log_sigma_phi()] = std::log(s.sigma_phi);
    x[idx_log_sigma_psi()] = std::log(s.sigma_psi);
    return x;
  }

  ModelState unpack(std::span<const double> x) const {
    if (x.size() != dimension()) throw std::invalid_argument("state dimension mismatch");
    ModelState s;
    const auto k = static_cast<std::ptrdiff_t>(num_studies());
    s.log_lambda.assign(x.begin(), x.begin() + k);
    s.log_phi.assign(x.begin() + k, x.begin() + 2 * k);
    s.log_psi.assign(x.begin() + 2 * k, x.begin() + 2 * k + static_cast<std::ptrdiff_t>(n_psi_));
    s.log_theta = x[idx_log_theta()];
    s.mu_lambda = x[idx_mu_lambda()];
    s.sigma_lambda = std::exp(x[idx_log_sigma_lambda()]);
    s.mu_phi = x[idx_mu_phi()];
    s.sigma_phi = std::exp(x[idx_log_sigma_phi()]);
    s.sigma_psi = std::exp(x[idx_log_sigma_psi()]);
    return s;
  }

  /// Event rate of arm `arm_index` (position within the study's arm list).
  double arm_rate(const ModelState& s, std::size_t study_index, std::size_t arm_index) const {
    if (study_index >= num_studies() || arm_index >= studies_[study_index].arms.size()) {
      throw std::out_of_range("arm_rate: index out of range");
    }
    const Arm& a = arms_[arm_offset_[study_index] + arm_index];
    double log_rate = s.log_lambda.at(study_index);
    if (a.psi) log_rate += s.log_theta + s.log_psi.at(*a.psi);
    return std::exp(log_rate);
  }

  double log_prior(std::span<const double> x) const {
    double lp = hyper_lambda_log_prior(x) + hyper_phi_log_prior(x) + hyper_psi_log_prior(x) +
                theta_log_prior(x);
    if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < num_studies(); ++i) lp += lambda_log_prior(x, i);
    for (std::size_t i = 0; i < num_studies(); ++i) lp += phi_log_prior(x, i);
    for (std::size_t j = 0; j < n_psi_; ++j) lp += psi_log_prior(x, j);
    return lp;
  }
  double log_prior(const ModelState& s) const { return log_prior(pack(s)); }

  double log_likelihood(std::span<const double> x) const {
    double ll = 0.0;
    for (std::size_t a = 0; a < arms_.size(); ++a) ll += arm_log_lik(x, a);
    return ll;
  }
  double log_likelihood(const ModelState& s) const { return log_likelihood(pack(s)); }

  double log_posterior(std::span<const double> x) const {
    const double lp = log_prior(x);
    if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
    if (!config_.use_likelihood) return lp;
    const double ll = log_likelihood(x);
    return std::isnan(ll) ? -std::numeric_limits<double>::infinity() : lp + ll;
  }
  double log_posterior(const ModelState& s) const { return log_posterior(pack(s)); }

  /// Likelihood contribution of one arm.
  double arm_log_lik(std::span<const double> x, std::size_t a) const {
    const Arm& arm = arms_[a];
    double log_rate = x[idx_log_lambda(arm.study)];
    if (arm.psi) log_rate += x[idx_log_theta()] + x[idx_log_psi(*arm.psi)];
    const double rate = std::exp(log_rate);
    if (arm.kind == LikelihoodKind::rate_se) {
      return detail::normal_log_pdf(arm.rate, rate, arm.se * arm.se);
    }
    const double phi = std::exp(x[idx_log_phi(arm.study)]);
    return count_log_lik(arm, rate, phi);
  }

  // -- sampler interface -------------------------------------------------

  std::vector<Block> blocks() const { return blocks_; }

  double block_log_density(std::span<const double> x, std::size_t b) const {
    const Terms& t = block_terms_[b];
    double lp = 0.0;
    if (t.hyper_lambda) lp += hyper_lambda_log_prior(x);
    if (t.hyper_phi) lp += hyper_phi_log_prior(x);
    if (t.hyper_psi) lp += hyper_psi_log_prior(x);
    if (!std::isfinite(lp)) return -std::numeric_limits<double>::infinity();
    if (t.theta) lp += theta_log_prior(x);
    for (std::size_t i : t.lambda_priors) lp += lambda_log_prior(x, i);
    for (std::size_t i : t.phi_priors) lp += phi_log_prior(x, i);
    for (std::size_t j : t.psi_priors) lp += psi_log_prior(x, j);
    if (config_.use_likelihood) {
      for (std::size_t a : t.arms) lp += arm_log_lik(x, a);
    }
    return std::isnan(lp) ? -std::numeric_limits<double>::infinity() : lp;
  }

  /// Data-driven start: crude placebo rates, phi = 0.5, theta = psi = 1,
  /// hyper-means at the mean of the study-level logs, scales 0.5. Chains
  /// other than 0 get N(0, 0.5^2) jitter on the log scale.
  std::vector<double> initial_state(std::size_t chain, Rng& rng) const {
    ModelState s;
    for (std::size_t i = 0; i < num_studies(); ++i) {
      s.log_lambda.push_back(std::log(crude_rate(studies_[i])));
      s.log_phi.push_back(std::log(0.5));
    }
    s.log_psi.assign(n_psi_, 0.0);
    s.log_theta = 0.0;
    double mean_ll = 0.0;
    for (double v : s.log_lambda) mean_ll += v;
    mean_ll /= static_cast<double>(num_studies());
    const PriorSpec& p = config_.priors;
    s.mu_lambda = std::clamp(mean_ll, p.mu_lambda_lo + 0.1, p.mu_lambda_hi - 0.1);
    s.mu_phi = std::clamp(std::log(0.5), p.mu_phi_lo + 0.1, p.mu_phi_hi - 0.1);
    s.sigma_lambda = s.sigma_phi = s.sigma_psi = 0.5;

    std::vector<double> x = pack(s);
    if (chain == 0) {
      if (std::isfinite(log_posterior(x))) return x;
    }
    std::normal_distribution<double> z(0.0, 0.5);
    const std::vector<double> base = x;
    for (int attempt = 0; attempt < 100; ++attempt) {
      x = base;
      for (double& v : x) v += z(rng);
      x[idx_mu_lambda()] = std::clamp(x[idx_mu_lambda()], p.mu_lambda_lo, p.mu_lambda_hi);
      x[idx_mu_phi()] = std::clamp(x[idx_mu_phi()], p.mu_phi_lo, p.mu_phi_hi);
      x[idx_log_sigma_lambda()] =
          std::clamp(x[idx_log_sigma_lambda()], p.log_sigma_lambda_lo, p.log_sigma_lambda_hi);
      x[idx_log_sigma_phi()] =
          std::clamp(x[idx_log_sigma_phi()], p.log_sigma_phi_lo, p.log_sigma_phi_hi);
      x[idx_log_sigma_psi()] =
          std::clamp(x[idx_log_sigma_psi()], p.log_sigma_psi_lo, p.log_sigma_psi_hi);
      if (std::isfinite(log_posterior(x))) return x;
    }
    throw config_error("no finite-posterior starting point found");
  }

  /// One draw from the prior, hyperparameters first.
  ModelState sample_prior(Rng& rng) const {
    const PriorSpec& p = config_.priors;
    auto unif = [&](double lo, double hi) {
      return std::uniform_real_distribution<double>(lo, hi)(rng);
    };
    std::normal_distribution<double> z;
    std::student_t_distribution<double> t(p.psi_df);
    ModelState s;
    s.mu_lambda = unif(p.mu_lambda_lo, p.mu_lambda_hi);
    s.sigma_lambda = std::exp(unif(p.log_sigma_lambda_lo, p.log_sigma_lambda_hi));
    s.mu_phi = unif(p.mu_phi_lo, p.mu_phi_hi);
    s.sigma_phi = std::exp(unif(p.log_sigma_phi_lo, p.log_sigma_phi_hi));
    s.sigma_psi = std::exp(unif(p.log_sigma_psi_lo, p.log_sigma_psi_hi));
    s.log_theta = p.log_theta_sd * z(rng);
    for (std::size_t i = 0; i < num_studies(); ++i) {
      s.log_lambda.push_back(s.mu_lambda + s.sigma_lambda * z(rng));
      s.log_phi.push_back(s.mu_phi + s.sigma_phi * z(rng));
    }
    for (std::size_t j = 0; j < n_psi_; ++j) s.log_psi.push_back(s.sigma_psi * t(rng));
    return s;
  }

  /// Crude event rate of a study's placebo arm: quoted rate, total over
  /// patient-time, or inversion of the Poisson zero fraction.
  static double crude_rate(const StudyRecord& s) {
    const ArmRecord& p = s.arms[s.placebo_index()];
    const double exposure = static_cast<double>(p.n_patients) * s.duration;
    if (p.rate_est) return *p.rate_est;
    if (p.total) return std::max(*p.total, 1L) / exposure;
    if (p.zeroes) {
      const double frac = std::clamp(static_cast<double>(*p.zeroes) /
                                         static_cast<double>(p.n_patients),
                                     0.5 / static_cast<double>(p.n_patients),
                                     1.0 - 0.5 / static_cast<double>(p.n_patients));
      return -std::log(frac) / s.duration;
    }
    return 1.0;
  }

 private:
  struct Terms {
    std::vector<std::size_t> arms;
    std::vector<std::size_t> lambda_priors;
    std::vector<std::size_t> phi_priors;
    std::vector<std::size_t> psi_priors;
    bool theta = false;
    bool hyper_lambda = false;
    bool hyper_phi = false;
    bool hyper_psi = false;
  };

  void check_dims(const ModelState& s) const {
    if (s.log_lambda.size() != num_studies() || s.log_phi.size() != num_studies() ||
        s.log_psi.size() != n_psi_) {
      throw std::invalid_argument("model state dimensions do not match the dataset");
    }
  }

  void build_arms() {
    arm_offset_.clear();
    for (std::size_t i = 0; i < studies_.size(); ++i) {
      const StudyRecord& s = studies_[i];
      arm_offset_.push_back(arms_.size());
      std::size_t placebo = 0;
      for (const auto& r : s.arms) placebo += r.treatment_class == TreatmentClass::placebo;
      if (placebo != 1 || s.arms.size() < 2) {
        throw config_error(s.study_id + ": needs exactly one placebo and one or more active arms");
      }
      for (std::size_t j = 0; j < s.arms.size(); ++j) {
        const ArmRecord& r = s.arms[j];
        Arm a;
        a.study = i;
        a.arm_in_study = j;
        if (r.treatment_class == TreatmentClass::active) a.psi = n_psi_++;
        a.n = r.n_patients;
        a.duration = s.duration;
        const bool se_route = r.has_rate_se() && config_.se_arms == SeArmRouting::normal;
        std::optional<long> total = r.total;
        if (!total && r.rate_est) total = derive_total(*r.rate_est, r.n_patients, s.duration);
        if (se_route) {
          a.kind = LikelihoodKind::rate_se;
          a.rate = *r.rate_est;
          a.se = *r.std_err;
        } else if (total && r.zeroes) {
          a.kind = LikelihoodKind::joint;
          a.total = *total;
          a.zeroes = *r.zeroes;
          if (a.zeroes == a.n && a.total > 0) {
            throw config_error(s.study_id + ": arm " + std::to_string(j + 1) +
                               ": all patients event-free but a positive total");
          }
        } else if (total) {
          a.kind = LikelihoodKind::total_only;
          a.total = *total;
        } else if (r.zeroes) {
          a.kind = LikelihoodKind::zero_only;
          a.zeroes = *r.zeroes;
        } else {
          throw config_error(s.study_id + ": arm " + std::to_string(j + 1) +
                             " has no usable evidence");
        }
        if (a.kind == LikelihoodKind::joint || a.kind == LikelihoodKind::zero_only) {
          a.log_choose = detail::log_choose(a.n, a.zeroes);
        }
        arms_.push_back(a);
      }
    }
  }

  void build_blocks() {
    const std::size_t k = num_studies();
    std::vector<std::size_t> all_arms(arms_.size());
    for (std::size_t a = 0; a < arms_.size(); ++a) all_arms[a] = a;
    std::vector<std::size_t> active_arms, studies_idx, psi_idx;
    for (std::size_t a = 0; a < arms_.size(); ++a) {
      if (arms_[a].psi) active_arms.push_back(a);
    }
    for (std::size_t i = 0; i < k; ++i) studies_idx.push_back(i);
    for (std::size_t j = 0; j < n_psi_; ++j) psi_idx.push_back(j);

    auto add = [&](Block b, Terms t) {
      blocks_.push_back(std::move(b));
      block_terms_.push_back(std::move(t));
    };

    for (std::size_t i = 0; i < k; ++i) {
      Terms t;
      t.lambda_priors = {i};
      t.phi_priors = {i};
      for (std::size_t a = 0; a < arms_.size(); ++a) {
        if (arms_[a].study == i) t.arms.push_back(a);
      }
      add({.name = "study[" + std::to_string(i + 1) + "]",
           .coords = {idx_log_lambda(i), idx_log_phi(i)}},
          std::move(t));
    }
    for (std::size_t a : active_arms) {
      const std::size_t j = *arms_[a].psi;
      Terms t;
      t.psi_priors = {j};
      t.arms = {a};
      add({.name = "psi[" + std::to_string(j + 1) + "]", .coords = {idx_log_psi(j)}},
          std::move(t));
    }
    {
      Terms t;
      t.theta = true;
      t.arms = active_arms;
      add({.name = "theta", .coords = {idx_log_theta()}}, std::move(t));
    }
    {
      Terms t;
      t.hyper_lambda = true;
      t.lambda_priors = studies_idx;
      add({.name = "hyper_lambda", .coords = {idx_mu_lambda(), idx_log_sigma_lambda()}},
          std::move(t));
    }
    {
      Terms t;
      t.hyper_phi = true;
      t.phi_priors = studies_idx;
      add({.name = "hyper_phi", .coords = {idx_mu_phi(), idx_log_sigma_phi()}}, std::move(t));
    }
    {
      Terms t;
      t.hyper_psi = true;
      t.psi_priors = psi_idx;
      add({.name = "hyper_psi", .coords = {idx_log_sigma_psi()}}, std::move(t));
    }

    // Joint translation / rescaling of a hierarchy level with its
    // hyperparameters; these leave the conditional prior of the members
    // invariant and mix across the funnel when the data are weak.
    std::vector<std::size_t> lambda_coords{idx_mu_lambda()}, phi_coords{idx_mu_phi()};
    std::vector<std::size_t> lambda_members, phi_members, psi_members;
    for (std::size_t i = 0; i < k; ++i) {
      lambda_coords.push_back(idx_log_lambda(i));
      phi_coords.push_back(idx_log_phi(i));
      lambda_members.push_back(idx_log_lambda(i));
      phi_members.push_back(idx_log_phi(i));
    }
    for (std::size_t j = 0; j < n_psi_; ++j) psi_members.push_back(idx_log_psi(j));

    {
      Terms t;
      t.hyper_lambda = true;
      t.lambda_priors = studies_idx;
      t.arms = all_arms;
      add({.name = "shift_lambda", .kind = MoveKind::shift, .coords = lambda_coords}, t);
      add({.name = "scale_lambda",
           .kind = MoveKind::scale,
           .coords = {idx_log_sigma_lambda()},
           .members = lambda_members,
           .centre = idx_mu_lambda()},
          t);
    }
    {
      Terms t;
      t.hyper_phi = true;
      t.phi_priors = studies_idx;
      for (std::size_t a = 0; a < arms_.size(); ++a) {
        if (arms_[a].kind != LikelihoodKind::rate_se) t.arms.push_back(a);
      }
      add({.name = "shift_phi", .kind = MoveKind::shift, .coords = phi_coords}, t);
      add({.name = "scale_phi",
           .kind = MoveKind::scale,
           .coords = {idx_log_sigma_phi()},
           .members = phi_members,
           .centre = idx_mu_phi()},
          t);
    }
    if (n_psi_ > 0) {
      Terms t;
      t.hyper_psi = true;
      t.psi_priors = psi_idx;
      t.arms = active_arms;
      add({.name = "scale_psi",
           .kind = MoveKind::scale,
           .coords = {idx_log_sigma_psi()},
           .members = psi_members},
          t);
      Terms u;
      u.theta = true;
      u.psi_priors = psi_idx;
      add({.name = "shift_theta_psi",
           .kind = MoveKind::shift,
           .coords = {idx_log_theta()},
           .negated = psi_members},
          std::move(u));
    }
  }

  double hyper_lambda_log_prior(std::span<const double> x) const {
    const PriorSpec& p = config_.priors;
    return detail::uniform_log_pdf(x[idx_mu_lambda()], p.mu_lambda_lo, p.mu_lambda_hi) +
           detail::uniform_log_pdf(x[idx_log_sigma_lambda()], p.log_sigma_lambda_lo,
                                   p.log_sigma_lambda_hi);
  }
  double hyper_phi_log_prior(std::span<const double> x) const {
    const PriorSpec& p = config_.priors;
    return detail::uniform_log_pdf(x[idx_mu_phi()], p.mu_phi_lo, p.mu_phi_hi) +
           detail::uniform_log_pdf(x[idx_log_sigma_phi()], p.log_sigma_phi_lo,
                                   p.log_sigma_phi_hi);
  }
  double hyper_psi_log_prior(std::span<const double> x) const {
    const PriorSpec& p = config_.priors;
    return detail::uniform_log_pdf(x[idx_log_sigma_psi()], p.log_sigma_psi_lo,
                                   p.log_sigma_psi_hi);
  }
  double theta_log_prior(std::span<const double> x) const {
    const double sd = config_.priors.log_theta_sd;
    return detail::normal_log_pdf(x[idx_log_theta()], 0.0, sd * sd);
  }
  double lambda_log_prior(std::span<const double> x, std::size_t i) const {
    const double sd = std::exp(x[idx_log_sigma_lambda()]);
    return detail::normal_log_pdf(x[idx_log_lambda(i)], x[idx_mu_lambda()], sd * sd);
  }
  double phi_log_prior(std::span<const double> x, std::size_t i) const {
    const double sd = std::exp(x[idx_log_sigma_phi()]);
    return detail::normal_log_pdf(x[idx_log_phi(i)], x[idx_mu_phi()], sd * sd);
  }
  double psi_log_prior(std::span<const double> x, std::size_t j) const {
    return detail::student_t_log_pdf(x[idx_log_psi(j)], config_.priors.psi_df,
                                     std::exp(x[idx_log_sigma_psi()]));
  }

  // Same quantities as nbcore's likelihoods, skipping the argument checks
  // already done at build time.
  double count_log_lik(const Arm& a, double rate, double phi) const {
    const double m = rate * a.duration;
    const double n = static_cast<double>(a.n);
    if (a.kind == LikelihoodKind::total_only) {
      return detail::normal_log_pdf(static_cast<double>(a.total), n * m,
                                    n * m * (1.0 + phi * m));
    }
    const double log_pi0 = -detail::log1p_over_phi(phi, m);
    const double z = static_cast<double>(a.zeroes);
    const double nz = n - z;
    double ll = a.log_choose + (a.zeroes > 0 ? z * log_pi0 : 0.0);
    if (a.zeroes == a.n) return ll;
    const double one_minus = -std::expm1(log_pi0);
    ll += nz * std::log(one_minus);
    if (a.kind == LikelihoodKind::zero_only) return ll;
    const double pi0 = std::exp(log_pi0);
    const double theta = m / one_minus;
    double var = theta + m * m * (phi - (1.0 + phi) * pi0) / (one_minus * one_minus);
    if (config_.truncated_variance == TruncatedVariance::published) {
      var += 2.0 * m * m * pi0 * pi0 / (one_minus * one_minus);
    }
    if (!(var > 0.0)) var = std::numeric_limits<double>::min();
    return ll + detail::normal_log_pdf(static_cast<double>(a.total), nz * theta, nz * var);
  }

  std::vector<StudyRecord> studies_;
  ModelConfig config_;
  std::vector<Arm> arms_;
  std::vector<std::size_t> arm_offset_;
  std::size_t n_psi_ = 0;
  std::vector<Block> blocks_;
  std::vector<Terms> block_terms_;
};

}  // namespace nbsynth
