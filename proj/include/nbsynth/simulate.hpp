#pragma once

// Synthetic two-arm trials drawn from the hierarchical model: per-patient
// negative-binomial counts, aggregated to the reporting formats of the
// evidence schema.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbsynth/evidence.hpp"
#include "nbsynth/hiermodel.hpp"
#include "nbsynth/target.hpp"

namespace nbsynth {

enum class ReportFormat { rate_se, both, total_only, zeroes_only };

/// Relative shares of the reporting formats; normalised on use.
struct ReportingMix {
  double rate_se = 0.2;
  double both = 0.3;
  double total_only = 0.15;
  double zeroes_only = 0.35;
};

struct SimulationSpec {
  std::size_t n_studies = 20;
  double theta = 0.75;
  double mu_lambda = std::log(0.9);
  double sigma_lambda = 0.3;
  double mu_phi = std::log(0.5);
  double sigma_phi = 0.3;
  double sigma_psi = 0.05;
  double psi_df = 3.0;
  long min_patients = 150;
  long max_patients = 500;
  std::vector<double> durations{0.5, 1.0};
  ReportingMix mix;

  void validate() const {
    if (n_studies == 0) throw config_error("need at least one study");
    if (!(theta > 0.0)) throw config_error("theta must be positive");
    if (!(sigma_lambda >= 0.0 && sigma_phi >= 0.0 && sigma_psi >= 0.0)) {
      throw config_error("scale parameters must be non-negative");
    }
    if (min_patients < 1 || max_patients < min_patients) {
      throw config_error("invalid patient range");
    }
    if (durations.empty()) throw config_error("need at least one duration");
    for (double d : durations) {
      if (!(d > 0.0)) throw config_error("durations must be positive");
    }
    const double s = mix.rate_se + mix.both + mix.total_only + mix.zeroes_only;
    if (!(mix.rate_se >= 0 && mix.both >= 0 && mix.total_only >= 0 && mix.zeroes_only >= 0) ||
        !(s > 0.0)) {
      throw config_error("reporting mix must be non-negative with a positive sum");
    }
  }
};

struct SimulatedStudy {
  StudyRecord record;
  ReportFormat format = ReportFormat::both;
  double lambda = 0.0;
  double phi = 0.0;
  double psi = 1.0;
  std::vector<std::vector<long>> counts;  // per arm, per patient
};

struct SimulatedDataset {
  SimulationSpec spec;
  std::uint64_t seed = 0;
  std::vector<SimulatedStudy> studies;

  std::vector<StudyRecord> records() const {
    std::vector<StudyRecord> out;
    for (const auto& s : studies) out.push_back(s.record);
    return out;
  }
};

/// Formats assigned in proportion to the mix by largest remainder, then
/// shuffled.
inline std::vector<ReportFormat> allocate_formats(const ReportingMix& mix, std::size_t n,
                                                  Rng& rng) {
  const double w[4] = {mix.rate_se, mix.both, mix.total_only, mix.zeroes_only};
  const double total = w[0] + w[1] + w[2] + w[3];
  std::size_t count[4];
  double rem[4];
  std::size_t used = 0;
  for (int k = 0; k < 4; ++k) {
    const double exact = w[k] / total * static_cast<double>(n);
    count[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = exact - static_cast<double>(count[k]);
    used += count[k];
  }
  while (used < n) {
    const int k = static_cast<int>(std::max_element(rem, rem + 4) - rem);
    ++count[k];
    rem[k] = -1.0;
    ++used;
  }
  std::vector<ReportFormat> out;
  for (int k = 0; k < 4; ++k) out.insert(out.end(), count[k], static_cast<ReportFormat>(k));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline long draw_nb(double mean, double phi, Rng& rng) {
  double m = mean;
  if (phi > 0.0) {
    std::gamma_distribution<double> g(1.0 / phi, phi * mean);
    m = g(rng);
  }
  if (!(m > 0.0)) return 0;
  std::poisson_distribution<long> p(m);
  return p(rng);
}

namespace detail {

inline ArmRecord aggregate_arm(TreatmentClass cls, const std::vector<long>& x, double duration,
                               ReportFormat format) {
  ArmRecord a;
  a.treatment_class = cls;
  a.n_patients = static_cast<long>(x.size());
  const long total = std::accumulate(x.begin(), x.end(), 0L);
  const long zeroes = static_cast<long>(std::count(x.begin(), x.end(), 0L));
  const double n = static_cast<double>(x.size());
  const double rate = static_cast<double>(total) / (n * duration);
  switch (format) {
    case ReportFormat::rate_se: {
      double ss = 0.0;
      for (long v : x) {
        const double r = static_cast<double>(v) / duration - rate;
        ss += r * r;
      }
      const double sd = x.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      a.rate_est = rate;
      // a single-patient or constant arm has no spread; keep the SE usable
      a.std_err = std::max(sd / std::sqrt(n), 1e-3);
      break;
    }
    case ReportFormat::both:
      a.total = total;
      a.zeroes = zeroes;
      break;
    case ReportFormat::total_only:
      a.total = total;
      break;
    case ReportFormat::zeroes_only:
      a.zeroes = zeroes;
      break;
  }
  return a;
}

}  // namespace detail

/// Study i gets log lambda_i ~ N(mu_lambda, sigma_lambda^2), log phi_i ~
/// N(mu_phi, sigma_phi^2), one active arm with log psi ~ sigma_psi t_df;
/// arm means are duration * lambda_i (placebo) and duration * lambda_i *
/// theta * psi (active).
inline SimulatedDataset simulate_dataset(const SimulationSpec& spec, std::uint64_t seed) {
  spec.validate();
  SimulatedDataset out;
  out.spec = spec;
  out.seed = seed;
  std::uint64_t state = seed;
  Rng rng(splitmix64(state));
  const std::vector<ReportFormat> formats = allocate_formats(spec.mix, spec.n_studies, rng);
  std::normal_distribution<double> z;
  std::student_t_distribution<double> t(spec.psi_df);
  std::uniform_int_distribution<long> npat(spec.min_patients, spec.max_patients);
  std::uniform_int_distribution<std::size_t> pick(0, spec.durations.size() - 1);
  for (std::size_t i = 0; i < spec.n_studies; ++i) {
    SimulatedStudy s;
    s.format = formats[i];
    s.lambda = std::exp(spec.mu_lambda + spec.sigma_lambda * z(rng));
    s.phi = std::exp(spec.mu_phi + spec.sigma_phi * z(rng));
    s.psi = std::exp(spec.sigma_psi * t(rng));
    const double duration = spec.durations[pick(rng)];
    s.record.study_id = "sim" + std::to_string(i + 1);
    s.record.duration = duration;
    for (TreatmentClass cls : {TreatmentClass::placebo, TreatmentClass::active}) {
      const double rate = cls == TreatmentClass::placebo ? s.lambda : s.lambda * spec.theta * s.psi;
      std::vector<long> x(static_cast<std::size_t>(npat(rng)));
      for (long& v : x) v = draw_nb(duration * rate, s.phi, rng);
      s.record.arms.push_back(detail::aggregate_arm(cls, x, duration, s.format));
      s.counts.push_back(std::move(x));
    }
    out.studies.push_back(std::move(s));
  }
  return out;
}

}  // namespace nbsynth
