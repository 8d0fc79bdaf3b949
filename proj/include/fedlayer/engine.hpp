#pragma once

// Federated round orchestration: client sampling, benign local training,
// adversary invocation, defense aggregation and per-round bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedlayer/data.hpp"
#include "fedlayer/defenses.hpp"
#include "fedlayer/error.hpp"
#include "fedlayer/metrics.hpp"
#include "fedlayer/nn.hpp"
#include "fedlayer/parallel.hpp"
#include "fedlayer/random.hpp"

namespace fedlayer {

struct FLConfig {
  int num_clients = 100;
  int num_malicious = 10;
  double sample_fraction = 0.1;
  int rounds = 100;
  TrainOptions local{};
  std::uint64_t master_seed = 0;
  unsigned workers = 1;

  void validate() const {
    if (num_clients < 1) throw Error("fl", "need at least one client");
    if (!(num_malicious > 0 && 2 * num_malicious < num_clients)) {
      throw Error("fl", "malicious count must satisfy 0 < M < N/2");
    }
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) throw Error("fl", "sample fraction must lie in (0, 1]");
    if (rounds < 0) throw Error("fl", "negative round count");
  }
};

struct RoundRecord {
  int round = 0;
  std::vector<int> sampled;
  std::vector<int> malicious_sampled;  // submissions produced by the adversary
  std::vector<int> accepted;
  std::vector<int> rejected;
  double acc = 0.0;
  double bsr = 0.0;
  bool stalled = false;  // defense rejected everything; global kept
};

struct History {
  std::vector<RoundRecord> rounds;
  Model final_model;
};

// Clean and triggered global test sets, held out before partitioning.
struct EvalSets {
  PackedSamples clean;
  PackedSamples triggered;
  int target_label = 0;
};

// Everything a run needs besides the adversary.
struct Simulation {
  FLConfig fl;
  ArchSpec arch;
  std::vector<ClientDataset> clients;  // indexed by client id
  std::vector<int> malicious_ids;      // ascending
  EvalSets eval;
  DefenseKind defense = DefenseKind::kFedAvg;
  DefenseParams defense_params;

  bool is_malicious(int id) const { return std::binary_search(malicious_ids.begin(), malicious_ids.end(), id); }
};

struct RoundContext {
  const Model& global;
  int round;
  const Simulation& sim;
  std::span<const int> sampled_malicious;
};

// A colluding adversary controlling every compromised client. act() is called
// once per round (also when none of its clients was sampled) and must return
// exactly one update per id in ctx.sampled_malicious.
class Adversary {
 public:
  virtual ~Adversary() = default;
  virtual std::string_view name() const = 0;
  virtual std::vector<Update> act(const RoundContext& ctx) = 0;
};

// Uniform sample without replacement of round(N * fraction) ids, ascending.
inline std::vector<int> sample_clients(int round, const FLConfig& cfg) {
  const int n = cfg.num_clients;
  const int k = std::clamp(static_cast<int>(std::lround(n * cfg.sample_fraction)), 1, n);
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(derive_seed(cfg.master_seed, Stream::kSampling, static_cast<std::uint64_t>(round)));
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  ids.resize(static_cast<std::size_t>(k));
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::uint64_t local_seed(const FLConfig& cfg, int round, int client_id) {
  return derive_seed(cfg.master_seed, Stream::kLocalTrain, static_cast<std::uint64_t>(round),
                     static_cast<std::uint64_t>(client_id));
}

// Benign behaviour: train the global model on the client's full local data.
inline Update benign_update(const Model& global, const ClientDataset& client, const FLConfig& cfg, int round) {
  const Model local = train_local(global, client.all, cfg.local, local_seed(cfg, round, client.client_id));
  return {client.client_id, flatten(local), client.weight};
}

inline std::pair<Model, RoundRecord> run_round(const Model& global, int round, const Simulation& sim,
                                               Adversary* adversary) {
  if (global.arch_id != sim.arch.id()) throw Error("fl", "global model does not match the configured architecture");
  RoundRecord rec;
  rec.round = round;
  rec.sampled = sample_clients(round, sim.fl);

  std::vector<int> benign;
  for (int id : rec.sampled) {
    if (adversary && sim.is_malicious(id)) {
      rec.malicious_sampled.push_back(id);
    } else {
      benign.push_back(id);
    }
  }

  std::vector<Update> updates(benign.size());
  parallel_for(benign.size(), sim.fl.workers, [&](std::size_t i) {
    updates[i] = benign_update(global, sim.clients[static_cast<std::size_t>(benign[i])], sim.fl, round);
  });

  if (adversary) {
    auto crafted = adversary->act(RoundContext{global, round, sim, rec.malicious_sampled});
    std::vector<int> got;
    for (const auto& u : crafted) got.push_back(u.client_id);
    std::sort(got.begin(), got.end());
    if (got != rec.malicious_sampled) throw Error("attack", "adversary returned updates for the wrong clients");
    for (auto& u : crafted) updates.push_back(std::move(u));
  }
  std::sort(updates.begin(), updates.end(), [](const Update& a, const Update& b) { return a.client_id < b.client_id; });

  const FlatVector prev = flatten(global);
  DefenseParams params = sim.defense_params;
  params.seed = derive_seed(sim.fl.master_seed, Stream::kDefense, static_cast<std::uint64_t>(round));
  AggregationResult agg = aggregate(sim.defense, updates, prev, params);
  rec.accepted = std::move(agg.accepted);
  rec.rejected = std::move(agg.rejected);

  Model next = global;
  if (rec.accepted.empty()) {
    rec.stalled = true;
  } else {
    next = unflatten(global.arch_id, agg.aggregate);
  }
  rec.acc = compute_acc(next, sim.eval.clean);
  rec.bsr = compute_bsr(next, sim.eval.triggered, sim.eval.target_label);
  return {std::move(next), std::move(rec)};
}

inline Model initial_model(const Simulation& sim) {
  return build_model(sim.arch, derive_seed(sim.fl.master_seed, Stream::kInit));
}

inline History run_training(const Simulation& sim, Adversary* adversary, std::optional<Model> start = std::nullopt) {
  sim.fl.validate();
  History h;
  h.final_model = start ? std::move(*start) : initial_model(sim);
  h.rounds.reserve(static_cast<std::size_t>(sim.fl.rounds));
  for (int t = 0; t < sim.fl.rounds; ++t) {
    auto [next, rec] = run_round(h.final_model, t, sim, adversary);
    h.final_model = std::move(next);
    h.rounds.push_back(std::move(rec));
  }
  return h;
}

}  // namespace fedlayer
