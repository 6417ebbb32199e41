#pragma once

// Poisson / negative-binomial count probabilities: pmf, zero probability,
// zero-truncated moments, the (total, zeroes) likelihoods for aggregated
// arms, an exact convolution oracle and a maximum-likelihood fit.
//
// Parameterisation: a patient observed for `exposure` time units with event
// rate `rate` has mean m = exposure * rate and variance m * (1 + phi * m);
// phi = 0 is the Poisson model.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/tools/minima.hpp>

namespace nbsynth {

class domain_error : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Data that cannot have been produced by the model (e.g. every patient
/// event-free but a positive total).
class impossible_data_error : public domain_error {
 public:
  using domain_error::domain_error;
};

/// Below this overdispersion the zero-probability exponent is evaluated by
/// a series in phi instead of log1p(phi m) / phi.
inline constexpr double kPhiSeriesThreshold = 1e-8;

struct NbParams {
  double rate = 1.0;            // events per unit time
  double overdispersion = 0.0;  // phi >= 0
  double exposure = 1.0;        // time units

  double mean() const { return exposure * rate; }
  double variance() const {
    const double m = mean();
    return m * (1.0 + overdispersion * m);
  }
};

inline void validate(const NbParams& p) {
  const bool ok = std::isfinite(p.rate) && std::isfinite(p.overdispersion) &&
                  std::isfinite(p.exposure) && p.rate > 0.0 &&
                  p.exposure > 0.0 && p.overdispersion >= 0.0;
  if (!ok) {
    std::ostringstream os;
    os << "invalid negative-binomial parameters: rate=" << p.rate
       << " overdispersion=" << p.overdispersion << " exposure=" << p.exposure;
    throw domain_error(os.str());
  }
}

/// Conditional variance used in the joint (T, Z) likelihood. `published`
/// adds 2 m^2 a^2 to the exact value, the form found in the literature
/// derivation (it adds rather than subtracts the squared mean shift).
enum class TruncatedVariance { exact, published };

struct TruncatedMoments {
  double zero_prob = 0.0;   // P(X = 0)
  double trunc_mean = 0.0;  // E[X | X > 0]
  double trunc_var = 0.0;   // Var(X | X > 0)
};

/// One arm's aggregate report. Either optional may be absent; `rate_est`
/// and `std_err` travel together.
struct AggregateObservation {
  long n_patients = 0;
  std::optional<long> total;
  std::optional<long> zeroes;
  std::optional<double> rate_est;
  std::optional<double> std_err;
};

namespace detail {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

inline double normal_log_pdf(double x, double mean, double variance) {
  const double d = x - mean;
  return -0.5 * d * d / variance - 0.5 * std::log(variance) - kLogSqrt2Pi;
}

inline double log_choose(long n, long k) {
  return std::lgamma(static_cast<double>(n) + 1.0) -
         std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

// log(1 - exp(a)) for a < 0
inline double log1m_exp(double a) {
  return a > -std::numbers::ln2 ? std::log(-std::expm1(a))
                                : std::log1p(-std::exp(a));
}

// log1p(phi * m) / phi, continuous at phi = 0 where it equals m.
inline double log1p_over_phi(double phi, double m) {
  if (phi < kPhiSeriesThreshold) {
    const double u = phi * m;
    return m * (1.0 - u / 2.0 + u * u / 3.0);
  }
  return std::log1p(phi * m) / phi;
}

inline void check_counts(long n, long zeroes) {
  if (n < 1) throw domain_error("number of patients must be positive");
  if (zeroes < 0 || zeroes > n) {
    throw domain_error("zero count must lie in [0, n]");
  }
}

}  // namespace detail

/// log P(X = 0)
inline double log_zero_prob(const NbParams& p) {
  validate(p);
  return -detail::log1p_over_phi(p.overdispersion, p.mean());
}

/// P(X = 0): (1 + phi m)^(-1/phi), or exp(-m) at phi = 0.
inline double zero_prob(const NbParams& p) { return std::exp(log_zero_prob(p)); }

/// log P(X = x). Computed as the product form
///   m^x / x! * (1 + phi m)^(-1/phi) * prod_{j<x} (1 + phi (j - m) / (1 + phi m))
/// which reduces to the Poisson pmf at phi = 0 without cancellation.
inline double nb_log_pmf(long x, const NbParams& p) {
  validate(p);
  if (x < 0) return -std::numeric_limits<double>::infinity();
  const double m = p.mean();
  const double phi = p.overdispersion;
  const double xd = static_cast<double>(x);
  double out = xd * std::log(m) - std::lgamma(xd + 1.0) -
               detail::log1p_over_phi(phi, m);
  if (phi == 0.0) return out;
  if (x <= 4096) {
    const double denom = 1.0 + phi * m;
    for (long j = 0; j < x; ++j) {
      out += std::log1p(phi * (static_cast<double>(j) - m) / denom);
    }
    return out;
  }
  const double r = 1.0 / phi;
  return std::lgamma(xd + r) - std::lgamma(r) - std::lgamma(xd + 1.0) -
         r * std::log1p(phi * m) + xd * (std::log(m) - std::log(r + m));
}

inline double nb_pmf(long x, const NbParams& p) { return std::exp(nb_log_pmf(x, p)); }

/// Mean and variance of the total count over n patients.
inline std::pair<double, double> total_count_moments(long n, const NbParams& p) {
  validate(p);
  if (n < 1) throw domain_error("number of patients must be positive");
  const double nd = static_cast<double>(n);
  return {nd * p.mean(), nd * p.variance()};
}

/// Moments of X conditional on X > 0.
///
/// With a = P(X=0)/(1-P(X=0)) and m = E[X]:
///   E[X | X>0]   = m / (1 - P(X=0))
///   Var(X | X>0) = (Var X - m^2 P(X=0)) / (1 - P(X=0)) - m^2 a^2
/// i.e. theta + m^2 (phi - (1+phi) pi0) / (1-pi0)^2 for phi > 0 and
/// m + (m - m^2) a - m^2 a^2 for phi = 0.
inline TruncatedMoments truncated_moments(const NbParams& p,
                                          TruncatedVariance form = TruncatedVariance::exact) {
  validate(p);
  const double m = p.mean();
  if (!(m > 0.0)) throw domain_error("truncation undefined for zero mean");
  const double phi = p.overdispersion;
  const double log_pi0 = -detail::log1p_over_phi(phi, m);
  const double pi0 = std::exp(log_pi0);
  const double one_minus = -std::expm1(log_pi0);
  TruncatedMoments out;
  out.zero_prob = pi0;
  out.trunc_mean = m / one_minus;
  if (phi == 0.0) {
    const double a = 1.0 / std::expm1(m);
    out.trunc_var = m + (m - m * m) * a - m * m * a * a;
  } else {
    out.trunc_var =
        out.trunc_mean + m * m * (phi - (1.0 + phi) * pi0) / (one_minus * one_minus);
  }
  if (form == TruncatedVariance::published) {
    const double a = pi0 / one_minus;
    out.trunc_var += 2.0 * m * m * a * a;
  }
  // Guard against rounding for vanishing m where the variance is O(m).
  if (!(out.trunc_var > 0.0)) {
    out.trunc_var = std::numeric_limits<double>::min();
  }
  return out;
}

/// Exact binomial log-pmf of the number of event-free patients.
inline double zero_only_log_lik(long zeroes, long n, const NbParams& p) {
  detail::check_counts(n, zeroes);
  const double log_pi0 = log_zero_prob(p);
  const double log_pi1 = detail::log1m_exp(log_pi0);
  const double z = static_cast<double>(zeroes);
  const double nz = static_cast<double>(n - zeroes);
  double out = detail::log_choose(n, zeroes);
  if (zeroes > 0) out += z * log_pi0;
  if (n - zeroes > 0) out += nz * log_pi1;
  return out;
}

/// Normal approximation to the total count over n patients.
inline double total_only_log_lik(long total, long n, const NbParams& p) {
  if (total < 0) throw domain_error("total count must be non-negative");
  const auto [mean, var] = total_count_moments(n, p);
  return detail::normal_log_pdf(static_cast<double>(total), mean, var);
}

/// log p(t, z) = log Binomial(z; n, pi0) + log Normal(t; (n-z) theta,
/// (n-z) sigma^2), with the normal factor a point mass at 0 when z = n.
inline double joint_log_lik(long total, long zeroes, long n, const NbParams& p,
                            TruncatedVariance form = TruncatedVariance::exact) {
  detail::check_counts(n, zeroes);
  if (total < 0) throw domain_error("total count must be non-negative");
  if (zeroes == n) {
    if (total != 0) {
      throw impossible_data_error("all patients event-free but total > 0");
    }
    return static_cast<double>(n) * log_zero_prob(p);
  }
  const TruncatedMoments tm = truncated_moments(p, form);
  const double k = static_cast<double>(n - zeroes);
  return zero_only_log_lik(zeroes, n, p) +
         detail::normal_log_pdf(static_cast<double>(total), k * tm.trunc_mean,
                                k * tm.trunc_var);
}

inline double log_lik(const AggregateObservation& obs, const NbParams& p,
                      TruncatedVariance form = TruncatedVariance::exact) {
  if (obs.total && obs.zeroes) {
    return joint_log_lik(*obs.total, *obs.zeroes, obs.n_patients, p, form);
  }
  if (obs.total) return total_only_log_lik(*obs.total, obs.n_patients, p);
  if (obs.zeroes) return zero_only_log_lik(*obs.zeroes, obs.n_patients, p);
  throw domain_error("observation carries neither a total nor a zero count");
}

// ---------------------------------------------------------------------------
// Exact joint pmf of (T, Z) by convolution.

inline constexpr long kExactPmfMaxPatients = 30;
inline constexpr double kTruncationMass = 1e-14;

struct JointPmfTable {
  long n = 0;
  long max_total = 0;
  // prob[z][t] = P(T = t, Z = z), t in [0, max_total]
  std::vector<std::vector<double>> prob;
  double omitted_mass = 0.0;

  double at(long total, long zeroes) const {
    if (zeroes < 0 || zeroes > n || total < 0 || total > max_total) return 0.0;
    return prob[static_cast<std::size_t>(zeroes)][static_cast<std::size_t>(total)];
  }
  double mass() const {
    double s = 0.0;
    for (const auto& row : prob) {
      for (double v : row) s += v;
    }
    return s;
  }
};

/// Zero-truncated pmf q[j] = P(X = j | X > 0), j >= 1 (q[0] = 0), cut where
/// the cumulative mass first exceeds 1 - 1e-14 or at `max_len`.
inline std::vector<double> zero_truncated_pmf(const NbParams& p, long max_len) {
  const double pi0 = zero_prob(p);
  std::vector<double> q{0.0};
  double cum = 0.0;
  for (long j = 1; j <= max_len; ++j) {
    const double v = nb_pmf(j, p) / (1.0 - pi0);
    q.push_back(v);
    cum += v;
    if (cum > 1.0 - kTruncationMass) break;
  }
  return q;
}

/// Exact P(T = t, Z = z) for small n: binomial factor for z times the
/// (n - z)-fold convolution of the zero-truncated pmf.
inline JointPmfTable exact_joint_pmf(long n, const NbParams& p, long max_total) {
  validate(p);
  if (n < 1) throw domain_error("number of patients must be positive");
  if (n > kExactPmfMaxPatients) {
    throw domain_error("exact_joint_pmf: n = " + std::to_string(n) +
                       " exceeds the cost guard of " +
                       std::to_string(kExactPmfMaxPatients));
  }
  if (max_total < 0) throw domain_error("max_total must be non-negative");
  const auto len = static_cast<std::size_t>(max_total) + 1;
  const std::vector<double> q = zero_truncated_pmf(p, max_total);

  JointPmfTable table;
  table.n = n;
  table.max_total = max_total;
  table.prob.assign(static_cast<std::size_t>(n) + 1, std::vector<double>(len, 0.0));

  // conv holds the k-fold convolution, k = n - z
  std::vector<double> conv(len, 0.0);
  conv[0] = 1.0;
  for (long k = 0; k <= n; ++k) {
    const long z = n - k;
    const double pz = std::exp(zero_only_log_lik(z, n, p));
    auto& row = table.prob[static_cast<std::size_t>(z)];
    for (std::size_t t = 0; t < len; ++t) row[t] = pz * conv[t];
    if (k == n) break;
    std::vector<double> next(len, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      if (conv[t] == 0.0) continue;
      for (std::size_t j = 1; j < q.size() && t + j < len; ++j) {
        next[t + j] += conv[t] * q[j];
      }
    }
    conv = std::move(next);
  }
  table.omitted_mass = std::max(0.0, 1.0 - table.mass());
  return table;
}

/// Smallest max_total (grown geometrically) for which the omitted mass of
/// the exact table is below `tail`.
inline JointPmfTable exact_joint_pmf(long n, const NbParams& p) {
  constexpr double tail = 1e-12;
  const auto [mean, var] = total_count_moments(n, p);
  long max_total = static_cast<long>(mean + 10.0 * std::sqrt(var)) + 10;
  for (;;) {
    JointPmfTable t = exact_joint_pmf(n, p, max_total);
    if (t.omitted_mass < tail) return t;
    max_total *= 2;
  }
}

/// Total variation distance between exp(joint_log_lik) on the integer
/// lattice and the exact joint pmf, over the exact table's support.
inline double joint_approximation_tv(long n, const NbParams& p,
                                     TruncatedVariance form = TruncatedVariance::exact) {
  const JointPmfTable exact = exact_joint_pmf(n, p);
  double tv = 0.0;
  for (long z = 0; z <= n; ++z) {
    for (long t = 0; t <= exact.max_total; ++t) {
      double approx = 0.0;
      if (z < n || t == 0) approx = std::exp(joint_log_lik(t, z, n, p, form));
      tv += std::abs(approx - exact.at(t, z));
    }
  }
  return 0.5 * tv;
}

// ---------------------------------------------------------------------------
// Maximum likelihood for individual counts with a common exposure.

enum class FitStatus {
  interior,    // phi > 0 maximiser
  boundary,    // phi collapsed to 0 (Poisson)
  degenerate,  // all counts zero: rate not identified
};

struct MleFit {
  FitStatus status = FitStatus::interior;
  double rate_hat = 0.0;
  double overdispersion_hat = 0.0;
  double se_rate = 0.0;
  double se_overdispersion = 0.0;  // 0 at the boundary
  double loglik = 0.0;
};

inline double nb_sample_log_lik(std::span<const long> counts, const NbParams& p) {
  double s = 0.0;
  for (long c : counts) s += nb_log_pmf(c, p);
  return s;
}

/// Fits (rate, overdispersion) by maximum likelihood. With a common exposure
/// the rate score vanishes at the sample mean for every phi, so the
/// optimisation profiles log phi with the rate held at mean / exposure. An
/// optimum below 1e-8 falls back to the Poisson fit.
inline MleFit mle_fit(std::span<const long> counts, double exposure) {
  if (counts.size() < 2) throw domain_error("mle_fit needs at least two counts");
  if (!(exposure > 0.0) || !std::isfinite(exposure)) {
    throw domain_error("exposure must be positive");
  }
  double sum = 0.0;
  for (long c : counts) {
    if (c < 0) throw domain_error("counts must be non-negative");
    sum += static_cast<double>(c);
  }
  const double n = static_cast<double>(counts.size());
  MleFit fit;
  if (sum == 0.0) {
    fit.status = FitStatus::degenerate;
    fit.loglik = 0.0;
    return fit;
  }
  const double mean = sum / n;
  fit.rate_hat = mean / exposure;

  auto loglik_at = [&](double phi) {
    return nb_sample_log_lik(counts, {fit.rate_hat, phi, exposure});
  };
  const double poisson_ll = loglik_at(0.0);

  auto neg = [&](double log_phi) { return -loglik_at(std::exp(log_phi)); };
  const auto [log_phi, neg_ll] =
      boost::math::tools::brent_find_minima(neg, std::log(1e-10), std::log(1e4), 60);
  double phi = std::exp(log_phi);

  if (phi < kPhiSeriesThreshold || -neg_ll <= poisson_ll) {
    fit.status = FitStatus::boundary;
    fit.overdispersion_hat = 0.0;
    fit.loglik = poisson_ll;
    fit.se_rate = std::sqrt(mean / n) / exposure;
    return fit;
  }

  fit.status = FitStatus::interior;
  fit.overdispersion_hat = phi;
  fit.loglik = -neg_ll;

  // Observed information in (mu, phi); the cross term vanishes at mu = mean.
  const double mu = mean;
  double i_mu = 0.0;
  for (long c : counts) {
    const double x = static_cast<double>(c);
    const double d = 1.0 + phi * mu;
    i_mu += x / (mu * mu) - (x * phi + 1.0) * phi / (d * d);
  }
  fit.se_rate = std::sqrt(1.0 / i_mu) / exposure;

  const double h = 1e-4 * phi;
  const double d2 = (loglik_at(phi + h) - 2.0 * fit.loglik + loglik_at(phi - h)) / (h * h);
  fit.se_overdispersion = d2 < 0.0 ? std::sqrt(-1.0 / d2) : 0.0;
  return fit;
}

}  // namespace nbsynth
