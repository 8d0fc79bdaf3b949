#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fedlayer/data.hpp"
#include "test_util.hpp"

namespace fedlayer {
namespace {

// Labels 0..classes-1, per_class each, feature 0 holds the sample's index.
SampleSet tagged(int classes, int per_class) {
  SampleSet out;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      out.push_back({{static_cast<double>(out.size()), 0.5}, c});
    }
  }
  return out;
}

// Group of client id under round-robin assignment.
int group_of(int client_id, int classes) { return client_id % classes; }

TEST(GenerateDataset, SizeLabelsAndRange) {
  const auto d = generate_dataset(10, 100, 64, 1);
  ASSERT_EQ(d.size(), 1000u);
  std::map<int, int> counts;
  for (const auto& s : d) {
    ++counts[s.label];
    ASSERT_EQ(s.features.size(), 64u);
    for (double f : s.features) {
      ASSERT_GE(f, 0.0);
      ASSERT_LE(f, 1.0);
    }
  }
  for (int c = 0; c < 10; ++c) EXPECT_EQ(counts[c], 100);
}

TEST(GenerateDataset, DeterministicPerSeed) {
  const auto a = generate_dataset(4, 20, 64, 9);
  const auto b = generate_dataset(4, 20, 64, 9);
  const auto c = generate_dataset(4, 20, 64, 10);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].features, b[i].features);
  EXPECT_NE(a[0].features, c[0].features);
}

TEST(GenerateDataset, ClassMeansSeparated) {
  const DatasetOptions opts;
  const auto g = generate_dataset_with_means(10, 10, 64, 3, opts);
  for (std::size_t a = 0; a < g.class_means.size(); ++a) {
    for (std::size_t b = a + 1; b < g.class_means.size(); ++b) {
      EXPECT_GT((g.class_means[a] - g.class_means[b]).norm(), 4.0 * opts.sigma);
    }
  }
}

TEST(GenerateDataset, LinearProbeBeatsSixtyPercent) {
  const auto d = generate_dataset(10, 100, 64, 5);
  const auto probe = train_local(build_model(ArchSpec{{64, 10}}, 1), d, {20, 0.5, 32}, 2);
  EXPECT_GT(accuracy(probe, pack(d)), 0.60);
}

TEST(GenerateDataset, RejectsTooFewDimensions) {
  EXPECT_THROW(generate_dataset(10, 5, 8, 1), Error);
}

TEST(ApplyTrigger, Examples) {
  const Sample s{{0.0, 0.0, 0.0, 0.0}, 2};
  const TriggerSpec none{{}, {}, 3};
  const auto a = apply_trigger(s, none);
  EXPECT_EQ(a.features, s.features);
  EXPECT_EQ(a.label, 3);

  const TriggerSpec t{{0, 1}, {1.0, 1.0}, 3};
  const auto b = apply_trigger(s, t);
  EXPECT_EQ(b.features, (std::vector<double>{1.0, 1.0, 0.0, 0.0}));
  EXPECT_EQ(b.label, 3);
  const auto c = apply_trigger(b, t);
  EXPECT_EQ(c.features, b.features);
  EXPECT_EQ(c.label, b.label);
}

TEST(ApplyTrigger, LeavesOtherFeaturesBitIdentical) {
  Rng rng(3);
  const auto d = generate_dataset(10, 5, 64, 2);
  const auto t = corner_trigger(64, 9);
  for (const auto& s : d) {
    const auto x = apply_trigger(s, t);
    for (std::size_t j = 0; j < 64; ++j) {
      if (std::find(t.indices.begin(), t.indices.end(), j) == t.indices.end()) {
        EXPECT_EQ(x.features[j], s.features[j]);
      }
    }
  }
}

TEST(CornerTrigger, BottomRightPatch) {
  const auto t = corner_trigger(64, 9);
  EXPECT_EQ(t.indices, (std::vector<std::size_t>{54, 55, 62, 63}));
  EXPECT_EQ(t.values, (std::vector<double>(4, 1.0)));
  EXPECT_NO_THROW(t.validate(64, 10));
}

TEST(TriggerSpec, ValidationErrors) {
  EXPECT_THROW((TriggerSpec{{64}, {1.0}, 0}.validate(64, 10)), Error);
  EXPECT_THROW((TriggerSpec{{1, 1}, {1.0, 1.0}, 0}.validate(64, 10)), Error);
  EXPECT_THROW((TriggerSpec{{1}, {1.0}, 10}.validate(64, 10)), Error);
  EXPECT_THROW((TriggerSpec{{1}, {1.5}, 0}.validate(64, 10)), Error);
}

TEST(TriggerShard, PartitionArithmetic) {
  const auto t = corner_trigger(64, 9);
  const auto a = trigger_shard(t, 0, 2);
  const auto b = trigger_shard(t, 1, 2);
  EXPECT_EQ(a.indices.size(), 2u);
  EXPECT_EQ(b.indices.size(), 2u);
  std::set<std::size_t> all(a.indices.begin(), a.indices.end());
  all.insert(b.indices.begin(), b.indices.end());
  EXPECT_EQ(all, std::set<std::size_t>(t.indices.begin(), t.indices.end()));
  EXPECT_EQ(trigger_shard(t, 0, 1).indices, t.indices);
  EXPECT_THROW(trigger_shard(t, 0, 5), Error);
  EXPECT_THROW(trigger_shard(t, 2, 2), Error);
}

TEST(PartitionNonIid, FullSkewGivesSingleClassClients) {
  const auto d = tagged(10, 50);
  const auto clients = partition_noniid(d, {1.0, 20, 10}, 4);
  for (const auto& c : clients) {
    for (const auto& s : c.all) EXPECT_EQ(s.label, group_of(c.client_id, 10));
  }
}

TEST(PartitionNonIid, HalfSkewStatistics) {
  const auto d = tagged(10, 2000);
  const auto clients = partition_noniid(d, {0.5, 30, 10}, 7);
  // share[y][g]: fraction of label-y samples placed in group g.
  std::vector<std::vector<double>> share(10, std::vector<double>(10, 0.0));
  std::multiset<double> seen;
  for (const auto& c : clients) {
    for (const auto& s : c.all) {
      share[static_cast<std::size_t>(s.label)][static_cast<std::size_t>(group_of(c.client_id, 10))] += 1.0 / 2000.0;
      seen.insert(s.features[0]);
    }
  }
  ASSERT_EQ(seen.size(), d.size());
  EXPECT_EQ(std::set<double>(seen.begin(), seen.end()).size(), d.size());
  for (std::size_t y = 0; y < 10; ++y) {
    double total = 0.0;
    for (std::size_t g = 0; g < 10; ++g) {
      total += share[y][g];
      if (g == y) {
        EXPECT_NEAR(share[y][g], 0.5, 0.03);
      } else {
        EXPECT_NEAR(share[y][g], 0.5 / 9.0, 0.02);  // about 4 binomial sigmas
      }
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(PartitionNonIid, WeightsSumToOne) {
  const auto clients = partition_noniid(tagged(10, 30), {0.5, 12, 10}, 1);
  double w = 0.0;
  for (const auto& c : clients) w += c.weight;
  EXPECT_NEAR(w, 1.0, 1e-12);
}

TEST(PartitionNonIid, RejectsBadConfig) {
  const auto d = tagged(10, 5);
  EXPECT_THROW(partition_noniid(d, {0.1, 30, 10}, 1), Error);
  EXPECT_THROW(partition_noniid(d, {1.2, 30, 10}, 1), Error);
  EXPECT_THROW(partition_noniid(d, {0.5, 5, 10}, 1), Error);
}

ClientDataset client_with(int n) {
  ClientDataset c;
  c.client_id = 4;
  for (int i = 0; i < n; ++i) c.all.push_back({{static_cast<double>(i), 0.0, 0.0, 0.0}, i % 5});
  c.weight = 0.25;
  return c;
}

TEST(SplitFourWay, CountsAndLabels) {
  const TriggerSpec t{{2, 3}, {1.0, 1.0}, 4};
  const auto s = split_four_way(client_with(100), t, 0.5, 0.2, 3);
  EXPECT_EQ(s.clean_val.size(), 20u);
  EXPECT_EQ(s.clean_train.size(), 80u);
  EXPECT_EQ(s.poison_train.size(), 40u);
  EXPECT_LE(s.poison_val.size(), 10u);
  EXPECT_FALSE(s.poison_val.empty());
  std::set<double> val_ids;
  for (const auto& x : s.clean_val) val_ids.insert(x.features[0]);
  for (const auto& x : s.clean_train) EXPECT_FALSE(val_ids.contains(x.features[0]));
  for (const auto& x : s.poison_train) EXPECT_EQ(x.label, 4);
  for (const auto& x : s.poison_val) {
    EXPECT_EQ(x.label, 4);
    EXPECT_TRUE(val_ids.contains(x.features[0]));
    // The original of every poison_val sample carried a different label.
    EXPECT_NE(static_cast<int>(x.features[0]) % 5, 4);
    EXPECT_EQ(x.features[2], 1.0);
  }
  EXPECT_EQ(s.weight, 0.25);
}

TEST(SplitFourWay, Deterministic) {
  const TriggerSpec t{{2, 3}, {1.0, 1.0}, 4};
  const auto a = split_four_way(client_with(50), t, 0.5, 0.2, 3);
  const auto b = split_four_way(client_with(50), t, 0.5, 0.2, 3);
  ASSERT_EQ(a.poison_train.size(), b.poison_train.size());
  for (std::size_t i = 0; i < a.poison_train.size(); ++i) {
    EXPECT_EQ(a.poison_train[i].features, b.poison_train[i].features);
  }
}

TEST(SplitFourWay, EmptySplitIsNamed) {
  const TriggerSpec t{{2, 3}, {1.0, 1.0}, 4};
  try {
    split_four_way(client_with(2), t, 0.5, 0.2, 3);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("clean_val"), std::string::npos);
  }
  EXPECT_THROW(split_four_way(client_with(50), t, 0.0, 0.2, 3), Error);
  EXPECT_THROW(split_four_way(client_with(50), t, 0.5, 1.0, 3), Error);
}

TEST(HoldOut, DisjointAndComplete) {
  const auto d = tagged(4, 25);
  const auto [rest, held] = hold_out(d, 0.1, 2);
  EXPECT_EQ(held.size(), 10u);
  EXPECT_EQ(rest.size(), 90u);
  std::set<double> ids;
  for (const auto& s : rest) ids.insert(s.features[0]);
  for (const auto& s : held) ids.insert(s.features[0]);
  EXPECT_EQ(ids.size(), 100u);
}

TEST(DatasetText, RoundTripIsExact) {
  const auto d = generate_dataset(3, 4, 64, 1);
  std::stringstream ss;
  write_dataset(ss, d);
  EXPECT_EQ(ss.str().rfind("fedlayer-dataset 1 12 64\n", 0), 0u);
  const auto back = read_dataset(ss);
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back[i].label, d[i].label);
    EXPECT_EQ(back[i].features, d[i].features);
  }
}

TEST(DatasetText, RejectsMalformedInput) {
  std::stringstream a("not-a-dataset 1 1 2\n0 1 2\n");
  EXPECT_THROW(read_dataset(a), Error);
  std::stringstream b("fedlayer-dataset 1 1 2\n0 1\n");
  EXPECT_THROW(read_dataset(b), Error);
  std::stringstream c("fedlayer-dataset 1 2 2\n0 1 2\n");
  EXPECT_THROW(read_dataset(c), Error);
}

}  // namespace
}  // namespace fedlayer
