#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "fedlayer/defenses.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fedlayer {
namespace {

FlatVector flat(std::vector<double> v) { return FlatVector{"", {}, std::move(v)}; }

std::vector<Update> updates_from(const oracle::Points& pts, const std::vector<double>& w = {}) {
  std::vector<Update> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out.push_back({static_cast<int>(i), flat(pts[i]), w.empty() ? 1.0 : w[i]});
  }
  return out;
}

FlatVector zeros(std::size_t d) { return flat(std::vector<double>(d, 0.0)); }

std::vector<int> sorted_ids(std::vector<int> ids) {
  std::sort(ids.begin(), ids.end());
  return ids;
}

TEST(FedAvg, Examples) {
  auto r = fedavg(updates_from({{0, 0}, {2, 4}}), zeros(2));
  EXPECT_EQ(r.aggregate.values, (std::vector<double>{1, 2}));
  EXPECT_EQ(r.accepted, (std::vector<int>{0, 1}));
  EXPECT_TRUE(r.rejected.empty());
  r = fedavg(updates_from({{3, -1}, {3, -1}, {3, -1}}, {0.2, 0.5, 0.3}), zeros(2));
  EXPECT_NEAR(r.aggregate.values[0], 3.0, 1e-15);
  EXPECT_NEAR(r.aggregate.values[1], -1.0, 1e-15);
}

TEST(FedAvg, RenormalizesDeclaredWeights) {
  const auto r = fedavg(updates_from({{0.0}, {4.0}}, {0.1, 0.3}), zeros(1));
  EXPECT_NEAR(r.aggregate.values[0], 3.0, 1e-15);
}

TEST(FedAvg, Errors) {
  EXPECT_THROW(fedavg({}, zeros(2)), Error);
  EXPECT_THROW(fedavg(updates_from({{1, 1}}, {0.0}), zeros(2)), Error);
  EXPECT_THROW(fedavg(updates_from({{1, 1, 1}}), zeros(2)), Error);
  std::vector<Update> dup = updates_from({{1, 1}, {2, 2}});
  dup[1].client_id = 0;
  EXPECT_THROW(fedavg(dup, zeros(2)), Error);
}

TEST(Median, Examples) {
  EXPECT_EQ(coordinate_median(updates_from({{1, 5}, {2, 4}, {3, 3}}), zeros(2)).aggregate.values,
            (std::vector<double>{2, 4}));
  EXPECT_EQ(coordinate_median(updates_from({{7, -2}}), zeros(2)).aggregate.values, (std::vector<double>{7, -2}));
  EXPECT_EQ(coordinate_median(updates_from({{1}, {2}, {4}, {10}}), zeros(1)).aggregate.values,
            (std::vector<double>{3}));
  const auto r = coordinate_median(updates_from({{1, 0}, {2, 0}, {3, 0}, {4, 0}, {1e6, 0}}), zeros(2));
  EXPECT_EQ(r.aggregate.values[0], 3.0);
  EXPECT_EQ(r.accepted.size(), 5u);
}

TEST(Median, StaysWithinBenignRangeUnderMinorityAttack) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    oracle::Points pts;
    for (int i = 0; i < 6; ++i) pts.push_back(testutil::random_vector(rng, 4, 1.0));
    for (int i = 0; i < 2; ++i) pts.push_back(testutil::random_vector(rng, 4, 1e9));
    const auto agg = coordinate_median(updates_from(pts), zeros(4)).aggregate.values;
    for (std::size_t j = 0; j < 4; ++j) {
      double lo = INFINITY, hi = -INFINITY;
      for (int i = 0; i < 6; ++i) {
        lo = std::min(lo, pts[static_cast<std::size_t>(i)][j]);
        hi = std::max(hi, pts[static_cast<std::size_t>(i)][j]);
      }
      EXPECT_GE(agg[j], lo);
      EXPECT_LE(agg[j], hi);
    }
  }
}

TEST(TrimmedMean, Examples) {
  DefenseParams p;
  p.trim_fraction = 0.25;
  EXPECT_EQ(trimmed_mean(updates_from({{1}, {2}, {3}, {100}}), zeros(1), p).aggregate.values,
            (std::vector<double>{2.5}));
  p.trim_fraction = 0.0;
  EXPECT_NEAR(trimmed_mean(updates_from({{1}, {2}, {6}}), zeros(1), p).aggregate.values[0], 3.0, 1e-15);
  p.trim_fraction = 0.2;
  EXPECT_EQ(trimmed_mean(updates_from({{4, 4}, {4, 4}, {4, 4}, {4, 4}, {4, 4}}), zeros(2), p).aggregate.values,
            (std::vector<double>{4, 4}));
}

TEST(TrimmedMean, RejectsOverTrimming) {
  DefenseParams p;
  p.trim_fraction = 0.6;
  EXPECT_THROW(trimmed_mean(updates_from({{1}, {2}}), zeros(1), p), Error);
}

TEST(MultiKrum, OutlierNeverSelected) {
  DefenseParams p;
  p.krum_f = 1;
  p.krum_m = 1;
  const auto r = multi_krum(updates_from({{0, 0}, {0.1, 0}, {0, 0.1}, {50, 50}}), zeros(2), p);
  EXPECT_EQ(r.rejected.size(), 3u);
  EXPECT_TRUE(std::find(r.rejected.begin(), r.rejected.end(), 3) != r.rejected.end());
  p.krum_m = 3;
  const auto r3 = multi_krum(updates_from({{0, 0}, {0.1, 0}, {0, 0.1}, {50, 50}}), zeros(2), p);
  EXPECT_EQ(r3.rejected, (std::vector<int>{3}));
}

TEST(MultiKrum, IdenticalUpdatesGiveCommonUpdate) {
  const auto r = multi_krum(updates_from({{1, 2}, {1, 2}, {1, 2}, {1, 2}, {1, 2}}), zeros(2));
  EXPECT_EQ(r.aggregate.values, (std::vector<double>{1, 2}));
}

TEST(MultiKrum, DefaultsAndErrors) {
  EXPECT_EQ(default_krum_f(10), 1);
  EXPECT_EQ(default_krum_f(11), 2);
  DefenseParams p;
  p.krum_f = 2;
  EXPECT_THROW(multi_krum(updates_from({{0}, {1}, {2}, {3}}), zeros(1), p), Error);
  p.krum_f = 0;
  p.krum_m = 5;
  EXPECT_THROW(multi_krum(updates_from({{0}, {1}, {2}, {3}}), zeros(1), p), Error);
}

TEST(Defenses, PermutationInvariant) {
  Rng rng(77);
  oracle::Points pts;
  std::vector<double> w;
  for (int i = 0; i < 7; ++i) {
    pts.push_back(testutil::random_vector(rng, 5, 1.0));
    w.push_back(0.1 + 0.1 * i);
  }
  const auto base = updates_from(pts, w);
  auto shuffled = base;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  DefenseParams p;
  p.flame_noise_sigma = 0.0;
  p.fltrust_root = testutil::blobs(2, 3, 1, 1);
  for (auto kind : {DefenseKind::kFedAvg, DefenseKind::kMedian, DefenseKind::kTrimmedMean, DefenseKind::kMultiKrum,
                    DefenseKind::kFlame}) {
    const auto a = aggregate(kind, base, zeros(5), p);
    const auto b = aggregate(kind, shuffled, zeros(5), p);
    EXPECT_EQ(a.aggregate.values, b.aggregate.values) << to_string(kind);
    EXPECT_EQ(a.accepted, b.accepted) << to_string(kind);
  }
}

TEST(Defenses, AcceptedAndRejectedPartitionInputs) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    oracle::Points pts;
    for (int i = 0; i < 8; ++i) pts.push_back(testutil::random_vector(rng, 6, 1.0));
    for (auto kind : {DefenseKind::kFedAvg, DefenseKind::kMedian, DefenseKind::kTrimmedMean,
                      DefenseKind::kMultiKrum, DefenseKind::kFlame}) {
      const auto r = aggregate(kind, updates_from(pts), zeros(6), DefenseParams{});
      std::vector<int> all = r.accepted;
      all.insert(all.end(), r.rejected.begin(), r.rejected.end());
      EXPECT_EQ(sorted_ids(all), (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7})) << to_string(kind);
      EXPECT_FALSE(r.accepted.empty());
    }
  }
}

TEST(Defenses, MatchBruteForceOracles) {
  Rng rng(2024);
  std::uniform_int_distribution<int> nclients(1, 5);
  std::uniform_int_distribution<int> dims(1, 8);
  std::uniform_real_distribution<double> weight(0.05, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(nclients(rng));
    const auto d = static_cast<std::size_t>(dims(rng));
    oracle::Points pts;
    std::vector<double> w;
    for (std::size_t i = 0; i < n; ++i) {
      pts.push_back(testutil::random_vector(rng, d, 10.0));
      w.push_back(weight(rng));
    }
    const auto ups = updates_from(pts, w);
    worst = std::max(worst, testutil::max_abs_diff(fedavg(ups, zeros(d)).aggregate.values, oracle::weighted_mean(pts, w)));
    worst = std::max(worst, testutil::max_abs_diff(coordinate_median(ups, zeros(d)).aggregate.values, oracle::median(pts)));
    DefenseParams p;
    p.trim_fraction = 0.2;
    worst = std::max(worst, testutil::max_abs_diff(trimmed_mean(ups, zeros(d), p).aggregate.values,
                                                   oracle::trimmed_mean(pts, 0.2)));
    if (n >= 3) {
      p.krum_f = static_cast<int>(n) - 3 > 0 ? 1 : 0;
      p.krum_m = std::max(1, static_cast<int>(n) - *p.krum_f - 2);
      const auto o = oracle::multi_krum(pts, *p.krum_f, *p.krum_m);
      const auto r = multi_krum(ups, zeros(d), p);
      worst = std::max(worst, testutil::max_abs_diff(r.aggregate.values, o.aggregate));
      std::vector<int> ids;
      for (auto i : o.selected) ids.push_back(static_cast<int>(i));
      EXPECT_EQ(r.accepted, sorted_ids(ids));
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(FLTrust, TrustOneAndTrustZero) {
  const Vector ref = (Vector(3) << 1.0, 2.0, -1.0).finished();
  const auto prev = flat({1.0, 1.0, 1.0});
  std::vector<Update> ups = {{0, flat({2.0, 3.0, 0.0}), 1.0}, {1, flat({0.0, -1.0, 2.0}), 1.0}};
  const auto r = fltrust_with_reference(ups, prev, ref);
  EXPECT_EQ(r.accepted, (std::vector<int>{0}));
  EXPECT_EQ(r.rejected, (std::vector<int>{1}));
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(r.aggregate.values[static_cast<std::size_t>(j)], prev.values[static_cast<std::size_t>(j)] + ref[j], 1e-15);
}

TEST(FLTrust, MatchesFormulaByHand) {
  // Reference delta (3, 4), |ref| = 5.
  const Vector ref = (Vector(2) << 3.0, 4.0).finished();
  const auto prev = flat({0.0, 0.0});
  std::vector<Update> ups = {{0, flat({6.0, 8.0}), 1.0}, {1, flat({1.0, 0.0}), 1.0}, {2, flat({0.0, -2.0}), 1.0}};
  const auto r = fltrust_with_reference(ups, prev, ref);
  // trust: 1, 0.6, 0 ; rescaled: (3,4), (5,0)
  const double t0 = 1.0, t1 = 0.6;
  const double x = (t0 * 3.0 + t1 * 5.0) / (t0 + t1);
  const double y = (t0 * 4.0 + t1 * 0.0) / (t0 + t1);
  EXPECT_NEAR(r.aggregate.values[0], x, 1e-14);
  EXPECT_NEAR(r.aggregate.values[1], y, 1e-14);
  EXPECT_EQ(r.accepted, (std::vector<int>{0, 1}));
  EXPECT_EQ(r.rejected, (std::vector<int>{2}));
}

TEST(FLTrust, AllZeroTrustRejectsEveryone) {
  const Vector ref = (Vector(2) << 1.0, 0.0).finished();
  std::vector<Update> ups = {{0, flat({-1.0, 0.0}), 1.0}, {1, flat({0.0, 1.0}), 1.0}};
  const auto r = fltrust_with_reference(ups, flat({0.0, 0.0}), ref);
  EXPECT_TRUE(r.accepted.empty());
  EXPECT_EQ(r.aggregate.values, (std::vector<double>{0.0, 0.0}));
}

TEST(FLTrust, NeedsRootSet) {
  const auto m = build_model(ArchSpec{{2, 2}}, 1);
  const auto f = flatten(m);
  std::vector<Update> ups = {{0, f, 1.0}};
  EXPECT_THROW(fltrust_like(ups, f, DefenseParams{}), Error);
}

TEST(MajorityCluster, GrowsUntilMinimumSize) {
  // Points on a line at 0, 1, 2, 10, 11 with |a - b| distances.
  const double pos[] = {0, 1, 2, 10, 11};
  Matrix d(5, 5);
  for (int a = 0; a < 5; ++a) {
    for (int b = 0; b < 5; ++b) d(a, b) = std::abs(pos[a] - pos[b]);
  }
  EXPECT_EQ(majority_cluster(d, 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(majority_cluster(d, 4).size(), 5u);
}

TEST(Flame, RejectsOppositeDirection) {
  Rng rng(3);
  std::normal_distribution<double> jitter(0.0, 0.01);
  oracle::Points pts;
  for (int i = 0; i < 9; ++i) pts.push_back({1.0 + jitter(rng), 1.0 + jitter(rng), 1.0 + jitter(rng)});
  pts.push_back({-1.0, -1.0, -1.0});
  const auto r = flame_lite(updates_from(pts), zeros(3));
  EXPECT_EQ(r.rejected, (std::vector<int>{9}));
  EXPECT_EQ(r.accepted.size(), 9u);
}

TEST(Flame, IdenticalDeltasWithoutNoise) {
  DefenseParams p;
  p.flame_noise_sigma = 0.0;
  const auto prev = flat({1.0, -1.0});
  std::vector<Update> ups;
  for (int i = 0; i < 4; ++i) ups.push_back({i, flat({1.5, -0.5}), 1.0});
  const auto r = flame_lite(ups, prev, p);
  EXPECT_EQ(r.aggregate.values, (std::vector<double>{1.5, -0.5}));
  EXPECT_EQ(r.accepted.size(), 4u);
}

TEST(Flame, ClipsToMedianNorm) {
  DefenseParams p;
  p.flame_noise_sigma = 0.0;
  // Three deltas along x with norms 2, 2 and 10.
  std::vector<Update> ups = {{0, flat({2.0, 0.0}), 1.0}, {1, flat({2.0, 0.0}), 1.0}, {2, flat({10.0, 0.0}), 1.0}};
  const auto r = flame_lite(ups, zeros(2), p);
  EXPECT_EQ(r.accepted.size(), 3u);
  EXPECT_NEAR(r.aggregate.values[0], 2.0, 1e-15);
  EXPECT_NEAR(r.aggregate.values[1], 0.0, 1e-15);
}

TEST(Flame, NoiseIsSeeded) {
  DefenseParams p;
  p.seed = 9;
  oracle::Points pts = {{1, 0}, {1, 0.1}, {1, -0.1}};
  const auto a = flame_lite(updates_from(pts), zeros(2), p);
  const auto b = flame_lite(updates_from(pts), zeros(2), p);
  EXPECT_EQ(a.aggregate.values, b.aggregate.values);
  p.seed = 10;
  EXPECT_NE(flame_lite(updates_from(pts), zeros(2), p).aggregate.values, a.aggregate.values);
}

TEST(Flame, NeedsTwoUpdates) { EXPECT_THROW(flame_lite(updates_from({{1.0}}), zeros(1)), Error); }

TEST(DefenseParams, Validation) {
  DefenseParams p;
  p.trim_fraction = 0.5;
  EXPECT_THROW(p.validate(), Error);
  p = {};
  p.krum_m = 0;
  EXPECT_THROW(p.validate(), Error);
  p = {};
  p.flame_noise_sigma = -1.0;
  EXPECT_THROW(p.validate(), Error);
  EXPECT_EQ(parse_defense("multi_krum"), DefenseKind::kMultiKrum);
  EXPECT_THROW(parse_defense("krum"), Error);
}

}  // namespace
}  // namespace fedlayer
