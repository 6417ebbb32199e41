#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "nbsynth/simulate.hpp"

using namespace nbsynth;

TEST(Simulate, SameSeedSameDataset) {
  const SimulationSpec spec;
  const auto a = simulate_dataset(spec, 5);
  const auto b = simulate_dataset(spec, 5);
  EXPECT_EQ(a.records(), b.records());
  EXPECT_NE(a.records(), simulate_dataset(spec, 6).records());
}

TEST(Simulate, AggregatesMatchPatientCounts) {
  const auto d = simulate_dataset(SimulationSpec{}, 11);
  ASSERT_EQ(d.studies.size(), 20u);
  for (const auto& s : d.studies) {
    ASSERT_EQ(s.record.arms.size(), 2u);
    ASSERT_EQ(s.counts.size(), 2u);
    for (std::size_t j = 0; j < 2; ++j) {
      const ArmRecord& a = s.record.arms[j];
      const auto& x = s.counts[j];
      const long total = std::accumulate(x.begin(), x.end(), 0L);
      const long zeroes = static_cast<long>(std::count(x.begin(), x.end(), 0L));
      EXPECT_EQ(a.n_patients, static_cast<long>(x.size()));
      EXPECT_GE(a.n_patients, 150);
      EXPECT_LE(a.n_patients, 500);
      if (a.total) {
        EXPECT_EQ(*a.total, total);
      }
      if (a.zeroes) {
        EXPECT_EQ(*a.zeroes, zeroes);
      }
      if (a.rate_est) {
        EXPECT_NEAR(*a.rate_est, total / (static_cast<double>(x.size()) * s.record.duration),
                    1e-12);
        EXPECT_GT(*a.std_err, 0.0);
      }
    }
  }
}

TEST(Simulate, FormatsFollowTheMix) {
  const auto d = simulate_dataset(SimulationSpec{}, 12);
  std::map<ReportFormat, int> n;
  for (const auto& s : d.studies) {
    ++n[s.format];
    const ArmRecord& a = s.record.arms[1];
    switch (s.format) {
      case ReportFormat::rate_se:
        EXPECT_TRUE(a.has_rate_se() && !a.total && !a.zeroes);
        break;
      case ReportFormat::both:
        EXPECT_TRUE(!a.rate_est && a.total && a.zeroes);
        break;
      case ReportFormat::total_only:
        EXPECT_TRUE(!a.rate_est && a.total && !a.zeroes);
        break;
      case ReportFormat::zeroes_only:
        EXPECT_TRUE(!a.rate_est && !a.total && a.zeroes);
        break;
    }
  }
  // 20 studies at (.2, .3, .15, .35)
  EXPECT_EQ(n[ReportFormat::rate_se], 4);
  EXPECT_EQ(n[ReportFormat::both], 6);
  EXPECT_EQ(n[ReportFormat::total_only], 3);
  EXPECT_EQ(n[ReportFormat::zeroes_only], 7);
}

TEST(Simulate, AllocationSumsToN) {
  Rng rng(1);
  for (std::size_t n : {1u, 3u, 7u, 13u, 20u, 101u}) {
    const auto f = allocate_formats({0.1, 0.2, 0.3, 0.4}, n, rng);
    EXPECT_EQ(f.size(), n);
  }
  const auto only = allocate_formats({0.0, 1.0, 0.0, 0.0}, 9, rng);
  EXPECT_TRUE(std::all_of(only.begin(), only.end(), [](auto f) { return f == ReportFormat::both; }));
}

TEST(Simulate, DatasetRoundTripsThroughCsv) {
  const auto d = simulate_dataset(SimulationSpec{}, 13);
  std::ostringstream out;
  serialize_dataset(out, d.records());
  std::istringstream in(out.str());
  const auto back = parse_dataset(in);
  ASSERT_EQ(back.size(), d.studies.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].arms[0].total, d.studies[i].record.arms[0].total);
    EXPECT_EQ(back[i].arms[1].zeroes, d.studies[i].record.arms[1].zeroes);
    EXPECT_FALSE(classify_subset(back[i]).labels.empty());
  }
}

TEST(Simulate, NegativeBinomialDrawMoments) {
  Rng rng(14);
  const double mean = 0.9, phi = 0.5;
  const int n = 200000;
  double s = 0, ss = 0;
  long zeros = 0;
  for (int i = 0; i < n; ++i) {
    const double x = static_cast<double>(draw_nb(mean, phi, rng));
    s += x;
    ss += x * x;
    zeros += x == 0;
  }
  const double m = s / n, v = ss / n - m * m;
  const double var = mean * (1 + phi * mean);
  EXPECT_LT(std::abs(m - mean), 4 * std::sqrt(var / n));
  EXPECT_NEAR(v / var, 1.0, 0.03);
  EXPECT_NEAR(static_cast<double>(zeros) / n, std::pow(1 + phi * mean, -1 / phi), 0.004);
  EXPECT_EQ(draw_nb(0.0, phi, rng), 0);
}

TEST(Simulate, RejectsBadSpec) {
  SimulationSpec s;
  s.n_studies = 0;
  EXPECT_THROW(simulate_dataset(s, 1), config_error);
  s = {};
  s.min_patients = 600;
  EXPECT_THROW(simulate_dataset(s, 1), config_error);
  s = {};
  s.mix = {0, 0, 0, 0};
  EXPECT_THROW(simulate_dataset(s, 1), config_error);
}
