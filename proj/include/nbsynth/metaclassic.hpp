#pragma once

// Random-effects pooling of log rate ratios and the rate-ratio / odds-ratio
// relations under Poisson and negative-binomial event counts.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/tools/minima.hpp>

#include "nbsynth/evidence.hpp"

namespace nbsynth {

class routing_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EffectEstimate {
  double log_effect = 0.0;
  double std_err = 1.0;
  std::string study_id;
};

enum class Tau2Method {
  dersimonian_laird,  // moment estimator, truncated at 0
  reml,               // restricted maximum likelihood
};

inline const char* to_string(Tau2Method m) {
  return m == Tau2Method::reml ? "REML" : "DL";
}

struct PooledResult {
  double pooled_log_effect = 0.0;
  double std_err = 0.0;
  double tau_sq = 0.0;
  std::pair<double, double> ci95;  // on the ratio scale
  Tau2Method method = Tau2Method::dersimonian_laird;
  std::vector<double> weights;     // normalised, input order

  double pooled_ratio() const { return std::exp(pooled_log_effect); }
};

/// Log rate ratio (active / placebo) with a delta-method standard error.
inline EffectEstimate rate_ratio_estimate(const ArmRecord& placebo, const ArmRecord& active,
                                          std::string study_id = {}) {
  if (!placebo.has_rate_se() || !active.has_rate_se()) {
    throw routing_error("rate ratio needs rate and standard error in both arms" +
                        (study_id.empty() ? std::string() : " (" + study_id + ")"));
  }
  const double rp = *placebo.rate_est, sp = *placebo.std_err;
  const double ra = *active.rate_est, sa = *active.std_err;
  EffectEstimate e;
  e.study_id = std::move(study_id);
  e.log_effect = std::log(ra / rp);
  e.std_err = std::sqrt((sa / ra) * (sa / ra) + (sp / rp) * (sp / rp));
  return e;
}

/// One estimate per active arm of every study whose arms all report rate
/// and standard error.
inline std::vector<EffectEstimate> rate_ratio_estimates(const std::vector<StudyRecord>& studies) {
  std::vector<EffectEstimate> out;
  for (const auto& s : studies) {
    const ArmRecord& p = s.arms[s.placebo_index()];
    for (const auto& a : s.arms) {
      if (a.treatment_class != TreatmentClass::active) continue;
      out.push_back(rate_ratio_estimate(p, a, s.study_id));
    }
  }
  return out;
}

namespace detail {

inline double dl_tau2(const std::vector<double>& y, const std::vector<double>& v) {
  const std::size_t k = y.size();
  if (k < 2) return 0.0;
  double sw = 0.0, sw2 = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const double w = 1.0 / v[i];
    sw += w;
    sw2 += w * w;
    swy += w * y[i];
  }
  const double ybar = swy / sw;
  double q = 0.0;
  for (std::size_t i = 0; i < k; ++i) q += (y[i] - ybar) * (y[i] - ybar) / v[i];
  const double c = sw - sw2 / sw;
  return c > 0.0 ? std::max(0.0, (q - static_cast<double>(k - 1)) / c) : 0.0;
}

// Negative restricted log-likelihood (up to a constant).
inline double neg_reml(double tau2, const std::vector<double>& y, const std::vector<double>& v) {
  double sw = 0.0, swy = 0.0, logdet = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double w = 1.0 / (v[i] + tau2);
    sw += w;
    swy += w * y[i];
    logdet += std::log(v[i] + tau2);
  }
  const double mu = swy / sw;
  double q = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) q += (y[i] - mu) * (y[i] - mu) / (v[i] + tau2);
  return 0.5 * (logdet + std::log(sw) + q);
}

inline double reml_tau2(const std::vector<double>& y, const std::vector<double>& v) {
  if (y.size() < 2) return 0.0;
  double spread = 0.0;
  const double ybar = [&] {
    double s = 0.0;
    for (double d : y) s += d;
    return s / static_cast<double>(y.size());
  }();
  for (double d : y) spread += (d - ybar) * (d - ybar);
  const double upper = 10.0 * (spread + *std::max_element(v.begin(), v.end()));
  auto f = [&](double t) { return neg_reml(t, y, v); };
  auto [t, fv] = boost::math::tools::brent_find_minima(f, 0.0, upper, 60);
  if (f(0.0) <= fv) t = 0.0;
  return t;
}

}  // namespace detail

/// Inverse-variance random-effects pooling with the chosen between-study
/// variance estimator and a normal-theory 95% interval.
inline PooledResult random_effects_pool(const std::vector<EffectEstimate>& estimates,
                                        Tau2Method method) {
  if (estimates.empty()) throw std::invalid_argument("pooling needs at least one estimate");
  std::vector<double> y, v;
  for (const auto& e : estimates) {
    if (!(e.std_err > 0.0)) throw std::invalid_argument("standard errors must be positive");
    y.push_back(e.log_effect);
    v.push_back(e.std_err * e.std_err);
  }
  PooledResult r;
  r.method = method;
  r.tau_sq = method == Tau2Method::reml ? detail::reml_tau2(y, v) : detail::dl_tau2(y, v);
  double sw = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double w = 1.0 / (v[i] + r.tau_sq);
    r.weights.push_back(w);
    sw += w;
    swy += w * y[i];
  }
  for (double& w : r.weights) w /= sw;
  r.pooled_log_effect = swy / sw;
  r.std_err = std::sqrt(1.0 / sw);
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.975);
  r.ci95 = {std::exp(r.pooled_log_effect - z * r.std_err),
            std::exp(r.pooled_log_effect + z * r.std_err)};
  return r;
}

/// DerSimonian-Laird random-effects pooling.
inline PooledResult dl_pool(const std::vector<EffectEstimate>& estimates) {
  return random_effects_pool(estimates, Tau2Method::dersimonian_laird);
}

/// Odds ratio of "at least one event" implied by a rate ratio theta under a
/// Poisson model: (exp(d theta l) - 1) / (exp(d l) - 1).
inline double poisson_odds_ratio(double theta, double rate, double duration) {
  if (!(theta > 0.0 && rate > 0.0 && duration > 0.0)) {
    throw domain_error("odds ratio inputs must be positive");
  }
  const double m = duration * rate;
  return std::expm1(theta * m) / std::expm1(m);
}

/// Negative-binomial analogue:
///   ((1 + phi d theta l)^(1/phi) - 1) / ((1 + phi d l)^(1/phi) - 1).
inline double nb_odds_ratio(double theta, double rate, double duration, double overdispersion) {
  if (!(overdispersion >= 0.0)) throw domain_error("overdispersion must be non-negative");
  if (overdispersion == 0.0) return poisson_odds_ratio(theta, rate, duration);
  if (!(theta > 0.0 && rate > 0.0 && duration > 0.0)) {
    throw domain_error("odds ratio inputs must be positive");
  }
  // phi = 1: numerator and denominator reduce to d theta l and d l.
  if (overdispersion == 1.0) return theta;
  const double m = duration * rate;
  const double phi = overdispersion;
  return std::expm1(detail::log1p_over_phi(phi, theta * m)) /
         std::expm1(detail::log1p_over_phi(phi, m));
}

}  // namespace nbsynth
