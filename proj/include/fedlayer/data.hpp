#pragma once

// Synthetic classification data, backdoor triggers, label-skewed client
// partitioning and the per-client clean/poison x train/val split.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <locale>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "fedlayer/error.hpp"
#include "fedlayer/random.hpp"
#include "fedlayer/sample.hpp"

namespace fedlayer {

struct DatasetOptions {
  double sigma = 0.15;        // per-feature noise around the class mean
  double mean_spread = 0.12;  // class means are drawn from 0.5 +- mean_spread
  double min_separation_sigmas = 4.0;
};

struct GeneratedDataset {
  SampleSet samples;             // class-major order
  std::vector<Vector> class_means;
};

// Each class is an isotropic Gaussian blob clipped to [0, 1]. Class means are
// placed one by one and redrawn until they sit more than
// min_separation_sigmas * sigma away from every earlier mean.
inline GeneratedDataset generate_dataset_with_means(int classes, int per_class, int dim, std::uint64_t seed,
                                                    const DatasetOptions& opts = {}) {
  if (classes < 2) throw Error("data", "need at least 2 classes");
  if (per_class < 1) throw Error("data", "need at least 1 sample per class");
  if (dim < classes) {
    throw Error("data", "dimension " + std::to_string(dim) + " too small for " + std::to_string(classes) +
                            " distinct class means");
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> mean_dist(0.5 - opts.mean_spread, 0.5 + opts.mean_spread);
  std::normal_distribution<double> noise(0.0, opts.sigma);
  const double min_dist = opts.min_separation_sigmas * opts.sigma;

  GeneratedDataset out;
  constexpr int kMaxTries = 10000;
  for (int c = 0; c < classes; ++c) {
    Vector mean(dim);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxTries && !placed; ++attempt) {
      for (int j = 0; j < dim; ++j) mean[j] = mean_dist(rng);
      placed = std::all_of(out.class_means.begin(), out.class_means.end(),
                           [&](const Vector& m) { return (m - mean).norm() > min_dist; });
    }
    if (!placed) throw Error("data", "could not place class mean " + std::to_string(c) + " with required separation");
    out.class_means.push_back(mean);
  }

  out.samples.reserve(static_cast<std::size_t>(classes) * static_cast<std::size_t>(per_class));
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Sample s;
      s.label = c;
      s.features.resize(static_cast<std::size_t>(dim));
      for (int j = 0; j < dim; ++j) {
        s.features[static_cast<std::size_t>(j)] = std::clamp(out.class_means[static_cast<std::size_t>(c)][j] + noise(rng), 0.0, 1.0);
      }
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

inline SampleSet generate_dataset(int classes, int per_class, int dim, std::uint64_t seed,
                                  const DatasetOptions& opts = {}) {
  return generate_dataset_with_means(classes, per_class, dim, seed, opts).samples;
}

// ---------------------------------------------------------------------------
// Triggers

struct TriggerSpec {
  std::vector<std::size_t> indices;
  std::vector<double> values;
  int target_label = 0;

  void validate(std::size_t dim, int classes) const {
    if (indices.size() != values.size()) throw Error("trigger", "indices and values differ in length");
    std::set<std::size_t> seen;
    for (auto i : indices) {
      if (i >= dim) throw Error("trigger", "index " + std::to_string(i) + " outside feature dimension " + std::to_string(dim));
      if (!seen.insert(i).second) throw Error("trigger", "duplicate index " + std::to_string(i));
    }
    for (double v : values) {
      if (!(v >= 0.0 && v <= 1.0)) throw Error("trigger", "trigger value outside [0, 1]");
    }
    if (target_label < 0 || target_label >= classes) throw Error("trigger", "target label out of range");
  }
};

// 2x2 patch in the bottom-right corner of the square grid the features are
// read as, every pixel set to 1.
inline TriggerSpec corner_trigger(std::size_t dim, int target_label) {
  const auto side = static_cast<std::size_t>(std::sqrt(static_cast<double>(dim)));
  if (side < 2) throw Error("trigger", "dimension too small for a corner patch");
  const std::size_t last_row = (side - 1) * side;
  const std::size_t prev_row = (side - 2) * side;
  return {{prev_row + side - 2, prev_row + side - 1, last_row + side - 2, last_row + side - 1},
          {1.0, 1.0, 1.0, 1.0},
          target_label};
}

inline Sample apply_trigger(const Sample& sample, const TriggerSpec& trigger) {
  Sample out = sample;
  for (std::size_t k = 0; k < trigger.indices.size(); ++k) {
    const auto i = trigger.indices[k];
    if (i >= out.features.size()) throw Error("trigger", "index " + std::to_string(i) + " outside sample");
    out.features[i] = trigger.values[k];
  }
  out.label = trigger.target_label;
  return out;
}

// Triggered copies of every sample whose true label differs from the target.
inline SampleSet triggered_copies(std::span<const Sample> samples, const TriggerSpec& trigger) {
  SampleSet out;
  for (const auto& s : samples) {
    if (s.label != trigger.target_label) out.push_back(apply_trigger(s, trigger));
  }
  return out;
}

// Splits the trigger into `shard_count` contiguous, non-empty pieces and
// returns piece `shard_index`. Values and target label carry over.
inline TriggerSpec trigger_shard(const TriggerSpec& trigger, int shard_index, int shard_count) {
  if (shard_count < 1 || shard_index < 0 || shard_index >= shard_count) {
    throw Error("trigger", "shard index out of range");
  }
  const auto n = trigger.indices.size();
  if (n < static_cast<std::size_t>(shard_count)) {
    throw Error("trigger", "trigger has " + std::to_string(n) + " positions, fewer than " +
                               std::to_string(shard_count) + " shards");
  }
  const auto begin = n * static_cast<std::size_t>(shard_index) / static_cast<std::size_t>(shard_count);
  const auto end = n * static_cast<std::size_t>(shard_index + 1) / static_cast<std::size_t>(shard_count);
  TriggerSpec out;
  out.target_label = trigger.target_label;
  out.indices.assign(trigger.indices.begin() + static_cast<std::ptrdiff_t>(begin),
                     trigger.indices.begin() + static_cast<std::ptrdiff_t>(end));
  out.values.assign(trigger.values.begin() + static_cast<std::ptrdiff_t>(begin),
                    trigger.values.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

// ---------------------------------------------------------------------------
// Partitioning

struct PartitionConfig {
  double q = 0.5;
  int num_clients = 100;
  int classes = 10;

  void validate() const {
    if (classes < 2) throw Error("partition", "need at least 2 classes");
    if (!(q > 1.0 / classes && q <= 1.0)) throw Error("partition", "q must lie in (1/X, 1]");
    if (num_clients < classes) {
      throw Error("partition", "num_clients " + std::to_string(num_clients) + " is smaller than class count " +
                                   std::to_string(classes));
    }
  }
};

struct ClientDataset {
  int client_id = 0;
  SampleSet all;
  SampleSet clean_train;
  SampleSet poison_train;
  SampleSet clean_val;
  SampleSet poison_val;
  double weight = 0.0;
};

// Clients are assigned to X groups round-robin (client i -> group i mod X).
// A sample labelled y lands in group y with probability q and in each other
// group with probability (1-q)/(X-1); within the group it goes to a uniformly
// chosen client.
inline std::vector<ClientDataset> partition_noniid(std::span<const Sample> samples, const PartitionConfig& cfg,
                                                   std::uint64_t seed) {
  cfg.validate();
  const int groups = cfg.classes;
  std::vector<std::vector<int>> members(static_cast<std::size_t>(groups));
  for (int c = 0; c < cfg.num_clients; ++c) members[static_cast<std::size_t>(c % groups)].push_back(c);

  std::vector<ClientDataset> clients(static_cast<std::size_t>(cfg.num_clients));
  for (int c = 0; c < cfg.num_clients; ++c) clients[static_cast<std::size_t>(c)].client_id = c;

  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> other(0, groups - 2);
  for (const auto& s : samples) {
    if (s.label < 0 || s.label >= groups) throw Error("partition", "sample label out of range");
    int g = s.label;
    if (unit(rng) >= cfg.q) {
      const int r = other(rng);
      g = r < s.label ? r : r + 1;
    }
    const auto& group = members[static_cast<std::size_t>(g)];
    std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
    clients[static_cast<std::size_t>(group[pick(rng)])].all.push_back(s);
  }

  std::size_t total = 0;
  for (const auto& c : clients) total += c.all.size();
  for (auto& c : clients) {
    c.weight = total == 0 ? 0.0 : static_cast<double>(c.all.size()) / static_cast<double>(total);
  }
  return clients;
}

// Fills the four subsets of `client`:
//   clean_val     round(val_frac * n) shuffled samples, clean_train the rest
//   poison_train  triggered copies of a poison_rate fraction of clean_train
//   poison_val    triggered copies of a poison_rate fraction of clean_val,
//                 skipping samples already labelled with the target class
inline ClientDataset split_four_way(const ClientDataset& client, const TriggerSpec& trigger, double poison_rate,
                                    double val_frac, std::uint64_t seed) {
  if (!(poison_rate > 0.0 && poison_rate < 1.0)) throw Error("split", "poison_rate must lie in (0, 1)");
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw Error("split", "val_frac must lie in (0, 1)");
  ClientDataset out;
  out.client_id = client.client_id;
  out.all = client.all;
  out.weight = client.weight;

  Rng rng(seed);
  SampleSet shuffled = client.all;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto n = shuffled.size();
  const auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n)));
  out.clean_val.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, n)));
  out.clean_train.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(std::min(n_val, n)), shuffled.end());

  auto poison_count = [&](std::size_t pool) {
    if (pool == 0) return std::size_t{0};
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(poison_rate * static_cast<double>(pool))));
  };

  std::vector<std::size_t> idx(out.clean_train.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(poison_count(idx.size()));
  for (auto i : idx) out.poison_train.push_back(apply_trigger(out.clean_train[i], trigger));

  idx.assign(out.clean_val.size(), 0);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(poison_count(idx.size()));
  for (auto i : idx) {
    if (out.clean_val[i].label != trigger.target_label) out.poison_val.push_back(apply_trigger(out.clean_val[i], trigger));
  }

  const std::pair<const char*, const SampleSet*> parts[] = {{"clean_train", &out.clean_train},
                                                            {"clean_val", &out.clean_val},
                                                            {"poison_train", &out.poison_train},
                                                            {"poison_val", &out.poison_val}};
  for (const auto& [name, set] : parts) {
    if (set->empty()) {
      throw Error("split", std::string(name) + " is empty for client " + std::to_string(client.client_id));
    }
  }
  return out;
}

// Holds out the first `frac` of a seeded shuffle; returns {rest, held_out}.
inline std::pair<SampleSet, SampleSet> hold_out(std::span<const Sample> samples, double frac, std::uint64_t seed) {
  if (!(frac > 0.0 && frac < 1.0)) throw Error("data", "holdout fraction must lie in (0, 1)");
  SampleSet shuffled(samples.begin(), samples.end());
  Rng rng(seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto k = static_cast<std::size_t>(std::llround(frac * static_cast<double>(shuffled.size())));
  SampleSet held(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(k));
  SampleSet rest(shuffled.begin() + static_cast<std::ptrdiff_t>(k), shuffled.end());
  return {std::move(rest), std::move(held)};
}

// ---------------------------------------------------------------------------
// Text dump
//
//   fedlayer-dataset 1 <count> <dim>
//   <label> <f_1> ... <f_dim>
//
// One sample per line, single spaces, shortest round-trip decimal form with
// '.' as separator regardless of locale.

inline void write_dataset(std::ostream& os, std::span<const Sample> samples) {
  const std::size_t dim = samples.empty() ? 0 : samples.front().features.size();
  os << "fedlayer-dataset 1 " << samples.size() << ' ' << dim << '\n';
  char buf[64];
  for (const auto& s : samples) {
    if (s.features.size() != dim) throw Error("dataset-io", "samples differ in dimension");
    os.write(buf, std::to_chars(buf, buf + sizeof buf, s.label).ptr - buf);
    for (double f : s.features) {
      os.put(' ');
      os.write(buf, std::to_chars(buf, buf + sizeof buf, f).ptr - buf);
    }
    os.put('\n');
  }
}

inline SampleSet read_dataset(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("dataset-io", "missing header");
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  std::size_t dim = 0;
  {
    std::istringstream hs(line);
    hs.imbue(std::locale::classic());
    hs >> magic >> version >> count >> dim;
    if (magic != "fedlayer-dataset" || version != 1) throw Error("dataset-io", "bad header '" + line + "'");
  }
  SampleSet out;
  out.reserve(count);
  for (std::size_t row = 0; row < count; ++row) {
    if (!std::getline(is, line)) throw Error("dataset-io", "expected " + std::to_string(count) + " rows");
    const char* p = line.data();
    const char* end = line.data() + line.size();
    Sample s;
    auto r = std::from_chars(p, end, s.label);
    if (r.ec != std::errc()) throw Error("dataset-io", "bad label on row " + std::to_string(row + 1));
    p = r.ptr;
    s.features.resize(dim);
    for (std::size_t j = 0; j < dim; ++j) {
      if (p == end || *p != ' ') throw Error("dataset-io", "too few features on row " + std::to_string(row + 1));
      r = std::from_chars(p + 1, end, s.features[j]);
      if (r.ec != std::errc()) throw Error("dataset-io", "bad feature on row " + std::to_string(row + 1));
      p = r.ptr;
    }
    if (p != end) throw Error("dataset-io", "trailing data on row " + std::to_string(row + 1));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fedlayer
