#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "nbsynth/metaclassic.hpp"

using namespace nbsynth;

namespace {

std::vector<StudyRecord> shipped() {
  std::ifstream in(std::string(NBSYNTH_DATA_DIR) + "/copd_lama.csv");
  return parse_dataset(in);
}

ArmRecord arm(double rate, double se) {
  return {TreatmentClass::placebo, 100, rate, se, {}, {}};
}

// log odds ratio of "any event" estimated from n draws per arm, with its
// delta-method standard error
template <typename DrawA, typename DrawP>
std::pair<double, double> simulated_log_or(DrawA active, DrawP placebo, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  int pa = 0, pp = 0;
  for (int i = 0; i < n; ++i) {
    pa += active(rng) > 0;
    pp += placebo(rng) > 0;
  }
  const double a = static_cast<double>(pa) / n, p = static_cast<double>(pp) / n;
  const double lor = std::log(a / (1 - a)) - std::log(p / (1 - p));
  const double se = std::sqrt(1.0 / (n * a * (1 - a)) + 1.0 / (n * p * (1 - p)));
  return {lor, se};
}

}  // namespace

TEST(RateRatio, IdenticalArms) {
  const auto e = rate_ratio_estimate(arm(0.8, 0.05), arm(0.8, 0.05));
  EXPECT_DOUBLE_EQ(e.log_effect, 0.0);
}

TEST(RateRatio, Tashkin) {
  const auto e = rate_ratio_estimate(arm(0.85, 0.02), arm(0.73, 0.02), "Tashkin (2008)");
  EXPECT_NEAR(e.log_effect, -0.1520, 5e-4);
  EXPECT_NEAR(e.std_err, std::hypot(0.02 / 0.73, 0.02 / 0.85), 1e-15);
  EXPECT_NEAR(e.std_err, 0.03611, 1e-5);
  EXPECT_EQ(e.study_id, "Tashkin (2008)");
}

TEST(RateRatio, ScaleInvariant) {
  const auto a = rate_ratio_estimate(arm(0.85, 0.03), arm(0.61, 0.04));
  const auto b = rate_ratio_estimate(arm(1.70, 0.06), arm(1.22, 0.08));
  EXPECT_NEAR(a.log_effect, b.log_effect, 1e-14);
  EXPECT_NEAR(a.std_err, b.std_err, 1e-14);
}

TEST(RateRatio, MissingSeIsRoutingError) {
  ArmRecord p = arm(0.8, 0.05);
  p.std_err.reset();
  EXPECT_THROW(rate_ratio_estimate(p, arm(0.7, 0.05)), routing_error);
  // subset C contains count-only studies
  EXPECT_THROW(rate_ratio_estimates(shipped()), routing_error);
}

// ---------------------------------------------------------------------------

TEST(Pool, SingleStudyUnchanged) {
  for (auto method : {Tau2Method::dersimonian_laird, Tau2Method::reml}) {
    const auto r = random_effects_pool({{-0.3, 0.1, "x"}}, method);
    EXPECT_DOUBLE_EQ(r.pooled_log_effect, -0.3);
    EXPECT_DOUBLE_EQ(r.std_err, 0.1);
    EXPECT_DOUBLE_EQ(r.tau_sq, 0.0);
  }
}

TEST(Pool, IdenticalStudies) {
  for (auto method : {Tau2Method::dersimonian_laird, Tau2Method::reml}) {
    const std::vector<EffectEstimate> e(5, {0.2, 0.15, "x"});
    const auto r = random_effects_pool(e, method);
    EXPECT_NEAR(r.pooled_log_effect, 0.2, 1e-14);
    EXPECT_NEAR(r.std_err, 0.15 / std::sqrt(5.0), 1e-14);
    EXPECT_DOUBLE_EQ(r.tau_sq, 0.0);
  }
}

TEST(Pool, WeightsAndBounds) {
  const std::vector<EffectEstimate> e{{-0.5, 0.1, "a"}, {0.1, 0.2, "b"}, {-0.2, 0.05, "c"},
                                      {0.4, 0.3, "d"}};
  for (auto method : {Tau2Method::dersimonian_laird, Tau2Method::reml}) {
    const auto r = random_effects_pool(e, method);
    double sum = 0.0;
    for (double w : r.weights) sum += w;
    EXPECT_NEAR(sum, 1.0, 1e-14);
    EXPECT_GE(r.pooled_log_effect, -0.5);
    EXPECT_LE(r.pooled_log_effect, 0.4);
    EXPECT_LT(r.ci95.first, r.pooled_ratio());
    EXPECT_GT(r.ci95.second, r.pooled_ratio());
    EXPECT_GT(r.tau_sq, 0.0);
  }
}

TEST(Pool, DerSimonianLairdMoment) {
  // hand computation of the moment estimator
  const std::vector<double> y{-0.5, 0.1, -0.2}, s{0.1, 0.2, 0.05};
  double sw = 0, swy = 0, sw2 = 0;
  for (int i = 0; i < 3; ++i) {
    const double w = 1 / (s[i] * s[i]);
    sw += w;
    swy += w * y[i];
    sw2 += w * w;
  }
  const double fixed = swy / sw;
  double q = 0;
  for (int i = 0; i < 3; ++i) q += (y[i] - fixed) * (y[i] - fixed) / (s[i] * s[i]);
  const double tau2 = std::max(0.0, (q - 2) / (sw - sw2 / sw));
  const auto r = dl_pool({{y[0], s[0], ""}, {y[1], s[1], ""}, {y[2], s[2], ""}});
  EXPECT_NEAR(r.tau_sq, tau2, 1e-14);
}

TEST(Pool, RemlIsStationary) {
  const std::vector<double> y{-0.5, 0.1, -0.2, 0.4}, s{0.1, 0.2, 0.05, 0.3};
  std::vector<EffectEstimate> e;
  for (int i = 0; i < 4; ++i) e.push_back({y[i], s[i], ""});
  const double tau2 = random_effects_pool(e, Tau2Method::reml).tau_sq;
  auto restricted = [&](double t) {
    double sw = 0, swy = 0, ll = 0;
    for (int i = 0; i < 4; ++i) {
      const double w = 1 / (s[i] * s[i] + t);
      sw += w;
      swy += w * y[i];
      ll += -0.5 * std::log(s[i] * s[i] + t);
    }
    const double mu = swy / sw;
    for (int i = 0; i < 4; ++i) ll += -0.5 * (y[i] - mu) * (y[i] - mu) / (s[i] * s[i] + t);
    return ll - 0.5 * std::log(sw);
  };
  const double h = 1e-5;
  EXPECT_NEAR((restricted(tau2 + h) - restricted(tau2 - h)) / (2 * h), 0.0, 1e-4);
  EXPECT_GT(restricted(tau2), restricted(tau2 * 1.5));
  EXPECT_GT(restricted(tau2), restricted(tau2 * 0.5));
}

TEST(Pool, SubsetA) {
  const auto a = select_subset(shipped(), SubsetLabel::A);
  const auto r = random_effects_pool(rate_ratio_estimates(a), Tau2Method::reml);
  EXPECT_NEAR(r.pooled_ratio(), 0.69, 0.02);
  EXPECT_NEAR(r.ci95.first, 0.52, 0.02);
  EXPECT_NEAR(r.ci95.second, 0.93, 0.02);
}

// ---------------------------------------------------------------------------

TEST(OddsRatio, PoissonValue) {
  EXPECT_NEAR(poisson_odds_ratio(0.5, 1.0, 1.0), (std::exp(0.5) - 1) / (std::exp(1.0) - 1), 1e-15);
  EXPECT_NEAR(poisson_odds_ratio(0.5, 1.0, 1.0), 0.37754, 5e-6);
  EXPECT_DOUBLE_EQ(poisson_odds_ratio(1.0, 2.3, 0.7), 1.0);
  EXPECT_NEAR(poisson_odds_ratio(0.6, 1e-8, 1.0), 0.6, 0.6e-6);
  EXPECT_THROW(poisson_odds_ratio(0.0, 1.0, 1.0), domain_error);
}

TEST(OddsRatio, PoissonMonteCarlo) {
  const auto [lor, se] = simulated_log_or([](auto& r) { return std::poisson_distribution<int>(0.5)(r); },
                                          [](auto& r) { return std::poisson_distribution<int>(1.0)(r); },
                                          400000, 21);
  EXPECT_LT(std::abs(lor - std::log(poisson_odds_ratio(0.5, 1.0, 1.0))), 3 * se);
}

TEST(OddsRatio, NbUnitOverdispersionIsTheta) {
  for (double theta : {0.3, 0.73, 1.0, 1.9}) {
    for (double m : {0.01, 0.5, 1.0, 7.0}) EXPECT_EQ(nb_odds_ratio(theta, m, 1.0, 1.0), theta);
  }
}

TEST(OddsRatio, NbOrderingAroundTheta) {
  for (double theta : {0.5, 0.8}) {
    for (double m : {0.5, 1.0, 2.0}) {
      EXPECT_LT(nb_odds_ratio(theta, m, 1.0, 0.25), theta);
      EXPECT_EQ(nb_odds_ratio(theta, m, 1.0, 1.0), theta);
      EXPECT_GT(nb_odds_ratio(theta, m, 1.0, 2.0), theta);
    }
  }
}

TEST(OddsRatio, NbSmallRateLimit) {
  for (double phi : {0.25, 0.5, 2.0}) EXPECT_NEAR(nb_odds_ratio(0.7, 1e-8, 1.0, phi), 0.7, 1e-6);
}

TEST(OddsRatio, NbContinuousAtZero) {
  for (double theta : {0.3, 0.5, 0.8, 1.4}) {
    for (double m : {0.1, 0.5, 1.0, 2.0, 5.0}) {
      EXPECT_LT(std::abs(nb_odds_ratio(theta, m, 1.0, 1e-10) - poisson_odds_ratio(theta, m, 1.0)),
                1e-6);
      EXPECT_EQ(nb_odds_ratio(theta, m, 1.0, 0.0), poisson_odds_ratio(theta, m, 1.0));
    }
  }
}

TEST(OddsRatio, NbMonteCarlo) {
  const double theta = 0.73, m = 0.9, phi = 0.5;
  auto nb = [phi](double mean) {
    return [=](std::mt19937_64& r) {
      const double g = std::gamma_distribution<double>(1 / phi, phi * mean)(r);
      return std::poisson_distribution<int>(g)(r);
    };
  };
  const double value = nb_odds_ratio(theta, m, 1.0, phi);
  EXPECT_LT(value, theta);
  const auto [lor, se] = simulated_log_or(nb(theta * m), nb(m), 400000, 22);
  EXPECT_LT(std::abs(lor - std::log(value)), 3 * se);
}
