#pragma once

// Adversary strategies: data-poisoning baselines (BadNets, DBA), backdoor-
// critical layer identification by layer substitution, frozen fine-tuning of
// the critical layers, and the layer-smoothed update that mixes fine-tuned
// critical layers into an estimate of the benign average.

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedlayer/data.hpp"
#include "fedlayer/engine.hpp"
#include "fedlayer/error.hpp"
#include "fedlayer/metrics.hpp"
#include "fedlayer/nn.hpp"
#include "fedlayer/random.hpp"

namespace fedlayer {

struct AttackConfig {
  double lambda = 1.0;
  double tau = 0.8;
  int detection_period = 5;
  int ft_epochs = 2;
  std::optional<int> identify_epochs;  // reference-model epochs; defaults to the local epochs
  bool ft_with_clean = false;          // fine-tune on poison_train plus an equal share of clean_train
  TriggerSpec trigger;
  double poison_rate = 0.5;
  double val_frac = 0.2;
  int dba_shards = 2;

  void validate() const {
    if (!(lambda >= 0.0)) throw Error("attack", "lambda must be non-negative");
    if (!(tau > 0.0 && tau <= 1.0)) throw Error("attack", "tau must lie in (0, 1]");
    if (detection_period < 1) throw Error("attack", "detection period must be at least 1");
    if (ft_epochs < 0 || identify_epochs.value_or(0) < 0) throw Error("attack", "epoch counts must be non-negative");
    if (dba_shards < 1) throw Error("attack", "dba shard count must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Poisoned training sets

inline SampleSet concat(std::span<const Sample> a, std::span<const Sample> b) {
  SampleSet out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

// poison_train followed by an equally sized prefix of clean_train.
inline SampleSet poison_mix(const ClientDataset& client) {
  const auto k = std::min(client.poison_train.size(), client.clean_train.size());
  return concat(client.poison_train, std::span<const Sample>(client.clean_train).first(k));
}

inline Update badnets_train(const Model& global, const ClientDataset& client, const TrainOptions& hyper,
                            std::uint64_t seed) {
  if (client.poison_train.empty()) throw Error("attack", "badnets needs a non-empty poison_train");
  const SampleSet data = concat(client.clean_train, client.poison_train);
  return {client.client_id, flatten(train_local(global, data, hyper, seed)), client.weight};
}

// The client's four-way split rebuilt with its sub-trigger. Split seeds are
// shared with the full-trigger split, so the same samples get poisoned.
inline ClientDataset dba_client(const ClientDataset& client, const AttackConfig& cfg, std::uint64_t split_seed,
                                int shard_index, int shard_count) {
  const TriggerSpec shard = trigger_shard(cfg.trigger, shard_index, shard_count);
  return split_four_way(client, shard, cfg.poison_rate, cfg.val_frac, split_seed);
}

inline Update dba_train(const Model& global, const ClientDataset& client, const AttackConfig& cfg,
                        const TrainOptions& hyper, std::uint64_t split_seed, std::uint64_t seed, int shard_index,
                        int shard_count) {
  return badnets_train(global, dba_client(client, cfg, split_seed, shard_index, shard_count), hyper, seed);
}

// ---------------------------------------------------------------------------
// Critical layer identification

struct LayerScore {
  std::string layer;
  double delta_bsr = 0.0;
};

struct CriticalLayerReport {
  int round = 0;
  std::vector<LayerScore> per_layer;  // descending delta_bsr
  std::vector<std::string> selected;  // L*, in insertion order
  double baseline_bsr = 0.0;
  double achieved_bsr = 0.0;
  bool usable = true;
  bool terminated_by_threshold = false;

  std::set<std::string> selected_set() const { return {selected.begin(), selected.end()}; }
  bool is_selected(std::string_view layer) const {
    return std::find(selected.begin(), selected.end(), layer) != selected.end();
  }
};

// Layer ranking and greedy selection given the two reference models:
//   delta_bsr(l) = BSR(malicious) - BSR(malicious with layer l from benign)
// layers are sorted by delta_bsr (stable, descending) and inserted into L*
// until BSR(benign with L* from malicious) >= tau * BSR(malicious).
inline CriticalLayerReport rank_critical_layers(const Model& benign, const Model& malicious,
                                                const PackedSamples& poison_val, int target_label, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw Error("attack", "tau must lie in (0, 1]");
  CriticalLayerReport rep;
  rep.baseline_bsr = compute_bsr(malicious, poison_val, target_label);
  rep.usable = rep.baseline_bsr >= 1.5 / static_cast<double>(malicious.num_classes());

  for (const auto& name : malicious.layer_names()) {
    const Model b2m = substitute_layers(malicious, benign, {name});
    rep.per_layer.push_back({name, rep.baseline_bsr - compute_bsr(b2m, poison_val, target_label)});
  }
  std::stable_sort(rep.per_layer.begin(), rep.per_layer.end(),
                   [](const LayerScore& a, const LayerScore& b) { return a.delta_bsr > b.delta_bsr; });

  std::set<std::string> chosen;
  for (const auto& s : rep.per_layer) {
    chosen.insert(s.layer);
    rep.selected.push_back(s.layer);
    rep.achieved_bsr = compute_bsr(substitute_layers(benign, malicious, chosen), poison_val, target_label);
    if (rep.achieved_bsr >= tau * rep.baseline_bsr) {
      rep.terminated_by_threshold = true;
      break;
    }
  }
  return rep;
}

// Step-1 reference models trained from the global model.
struct ReferenceModels {
  Model benign;     // trained on clean_train
  Model malicious;  // trained on poison_train mixed 1:1 with clean_train
};

inline ReferenceModels train_reference_models(const Model& global, const ClientDataset& client, int epochs,
                                              const TrainOptions& hyper, std::uint64_t seed) {
  if (client.clean_train.empty() || client.poison_train.empty()) {
    throw Error("attack", "identification needs clean_train and poison_train");
  }
  TrainOptions opts = hyper;
  opts.epochs = epochs;
  return {train_local(global, client.clean_train, opts, derive_seed({seed, 1})),
          train_local(global, poison_mix(client), opts, derive_seed({seed, 2}))};
}

inline CriticalLayerReport identify_bc_layers(const Model& global, const ClientDataset& client,
                                              const AttackConfig& cfg, const TrainOptions& hyper,
                                              std::uint64_t seed) {
  cfg.validate();
  if (client.poison_val.empty()) throw Error("attack", "identification needs a non-empty poison_val");
  const auto refs = train_reference_models(global, client, cfg.identify_epochs.value_or(hyper.epochs), hyper, seed);
  return rank_critical_layers(refs.benign, refs.malicious, pack(client.poison_val), cfg.trigger.target_label,
                              cfg.tau);
}

// Fine-tunes only the layers in `critical`; every other parameter is carried
// over bit-for-bit.
inline Model finetune_frozen(const Model& base, const std::set<std::string>& critical, const ClientDataset& client,
                             int ft_epochs, const TrainOptions& hyper, std::uint64_t seed, bool with_clean = false) {
  if (critical.empty()) throw Error("attack", "fine-tuning needs a non-empty critical layer set");
  if (ft_epochs == 0) return base;
  const SampleSet data = with_clean ? poison_mix(client) : client.poison_train;
  TrainOptions opts = hyper;
  opts.epochs = ft_epochs;
  return train_local(base, data, opts, seed, mask_for(base, critical));
}

// ---------------------------------------------------------------------------
// Update crafting

// Per-coordinate 0/1 mask; every coordinate of a layer shares its bit.
struct SelectionVector {
  std::vector<double> bits;
};

inline SelectionVector make_selection(std::span<const LayoutEntry> layout, const std::set<std::string>& layers) {
  std::size_t total = 0;
  for (const auto& e : layout) total = std::max(total, e.offset + e.length);
  SelectionVector v{std::vector<double>(total, 0.0)};
  std::size_t found = 0;
  for (const auto& e : layout) {
    if (!layers.contains(e.layer)) continue;
    ++found;
    std::fill_n(v.bits.begin() + static_cast<std::ptrdiff_t>(e.offset), e.length, 1.0);
  }
  if (found != layers.size()) throw Error("attack", "selection names a layer missing from the layout");
  return v;
}

// Coordinate-wise mean of the flattened benign models.
inline std::vector<double> benign_average(std::span<const Model> benign_models, const std::string& arch_id) {
  if (benign_models.empty()) throw Error("attack", "need at least one benign model");
  std::vector<double> avg;
  for (const auto& m : benign_models) {
    if (m.arch_id != arch_id) throw Error("attack", "benign model architecture mismatch");
    const auto f = flatten(m);
    if (avg.empty()) avg.assign(f.size(), 0.0);
    for (std::size_t j = 0; j < avg.size(); ++j) avg[j] += f.values[j];
  }
  const double inv = 1.0 / static_cast<double>(benign_models.size());
  for (auto& x : avg) x *= inv;
  return avg;
}

// w = lambda * v . u_ft + relu(1 - lambda) * v . u_a + (1 - v) . u_a,
// with u_a the mean of the benign models.
inline Update craft_lsa_update(const Model& w_ft, std::span<const Model> benign_models, const SelectionVector& v,
                               double lambda, int client_id = 0, double weight = 0.0) {
  if (!(lambda >= 0.0)) throw Error("attack", "lambda must be non-negative");
  const FlatVector ft = flatten(w_ft);
  const auto ua = benign_average(benign_models, w_ft.arch_id);
  if (v.bits.size() != ft.size()) throw Error("attack", "selection vector length mismatch");
  const double keep = std::max(0.0, 1.0 - lambda);
  FlatVector out{ft.arch_id, ft.layout, std::vector<double>(ft.size())};
  for (std::size_t j = 0; j < out.values.size(); ++j) {
    out.values[j] = lambda * v.bits[j] * ft.values[j] + keep * v.bits[j] * ua[j] + (1.0 - v.bits[j]) * ua[j];
  }
  return {client_id, std::move(out), weight};
}

// Naive layer substitution: critical layers straight from the malicious
// model, everything else from the benign average. No smoothing, no fine-tune.
inline Update craft_substitution_update(const Model& malicious, std::span<const Model> benign_models,
                                        const SelectionVector& v, int client_id = 0, double weight = 0.0) {
  const FlatVector mal = flatten(malicious);
  const auto ua = benign_average(benign_models, malicious.arch_id);
  if (v.bits.size() != mal.size()) throw Error("attack", "selection vector length mismatch");
  FlatVector out{mal.arch_id, mal.layout, std::vector<double>(mal.size())};
  for (std::size_t j = 0; j < out.values.size(); ++j) {
    out.values[j] = v.bits[j] * mal.values[j] + (1.0 - v.bits[j]) * ua[j];
  }
  return {client_id, std::move(out), weight};
}

// ---------------------------------------------------------------------------
// Adversaries

enum class AttackKind { kNone, kBadNets, kDba, kLpa, kLsa };

inline constexpr AttackKind kAllAttacks[] = {AttackKind::kNone, AttackKind::kBadNets, AttackKind::kDba,
                                             AttackKind::kLpa, AttackKind::kLsa};

inline std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kNone: return "none";
    case AttackKind::kBadNets: return "badnets";
    case AttackKind::kDba: return "dba";
    case AttackKind::kLpa: return "lpa";
    case AttackKind::kLsa: return "lsa";
  }
  return "?";
}

inline AttackKind parse_attack(std::string_view s) {
  for (auto k : kAllAttacks) {
    if (to_string(k) == s) return k;
  }
  throw Error("attack", "unknown attack '" + std::string(s) + "'");
}

inline std::uint64_t attack_seed(const Simulation& sim, int round, int client_id, std::uint64_t salt = 0) {
  return derive_seed({sim.fl.master_seed, static_cast<std::uint64_t>(Stream::kAttack),
                      static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client_id), salt});
}

class BadNetsAdversary final : public Adversary {
 public:
  std::string_view name() const override { return "badnets"; }

  std::vector<Update> act(const RoundContext& ctx) override {
    std::vector<Update> out;
    for (int id : ctx.sampled_malicious) {
      out.push_back(badnets_train(ctx.global, ctx.sim.clients[static_cast<std::size_t>(id)], ctx.sim.fl.local,
                                  attack_seed(ctx.sim, ctx.round, id)));
    }
    return out;
  }
};

// Each compromised client poisons with one shard of the trigger; shards are
// assigned by rank among the compromised ids.
class DbaAdversary final : public Adversary {
 public:
  DbaAdversary(const Simulation& sim, const AttackConfig& cfg, std::uint64_t split_seed_base) {
    const int shards = std::min<int>(cfg.dba_shards, static_cast<int>(cfg.trigger.indices.size()));
    for (std::size_t r = 0; r < sim.malicious_ids.size(); ++r) {
      const int id = sim.malicious_ids[r];
      const auto seed = derive_seed(split_seed_base, Stream::kSplit, static_cast<std::uint64_t>(id));
      shard_clients_.push_back(
          dba_client(sim.clients[static_cast<std::size_t>(id)], cfg, seed, static_cast<int>(r) % shards, shards));
    }
  }

  std::string_view name() const override { return "dba"; }

  std::vector<Update> act(const RoundContext& ctx) override {
    std::vector<Update> out;
    for (int id : ctx.sampled_malicious) {
      const auto it = std::lower_bound(ctx.sim.malicious_ids.begin(), ctx.sim.malicious_ids.end(), id);
      const auto& client = shard_clients_[static_cast<std::size_t>(it - ctx.sim.malicious_ids.begin())];
      out.push_back(badnets_train(ctx.global, client, ctx.sim.fl.local, attack_seed(ctx.sim, ctx.round, id)));
    }
    return out;
  }

 private:
  std::vector<ClientDataset> shard_clients_;
};

struct AdversaryState {
  std::optional<CriticalLayerReport> report;
  int last_identification = 0;
  std::vector<CriticalLayerReport> log;  // every identification attempt
};

// Shared machinery of the layer-targeting adversaries: periodic
// identification by the lowest-id compromised client, and per-round benign
// models of every compromised client for the benign-average estimate.
class LayerAdversary : public Adversary {
 public:
  explicit LayerAdversary(AttackConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const AdversaryState& state() const noexcept { return state_; }
  const AttackConfig& config() const noexcept { return cfg_; }

  std::vector<Update> act(const RoundContext& ctx) override {
    const Simulation& sim = ctx.sim;
    if (sim.malicious_ids.empty()) throw Error("attack", "no compromised clients");
    const int designated = sim.malicious_ids.front();
    const ClientDataset& lead = sim.clients[static_cast<std::size_t>(designated)];
    const auto ref_seed = attack_seed(sim, ctx.round, designated, 0x1d);
    const int ref_epochs = cfg_.identify_epochs.value_or(sim.fl.local.epochs);

    std::optional<ReferenceModels> refs;
    if (!state_.report || ctx.round - state_.last_identification >= cfg_.detection_period) {
      refs = train_reference_models(ctx.global, lead, ref_epochs, sim.fl.local, ref_seed);
      auto rep = rank_critical_layers(refs->benign, refs->malicious, pack(lead.poison_val), cfg_.trigger.target_label,
                                      cfg_.tau);
      rep.round = ctx.round;
      state_.log.push_back(rep);
      state_.last_identification = ctx.round;
      if (rep.usable || !state_.report) state_.report = std::move(rep);
    }
    if (ctx.sampled_malicious.empty()) return {};

    if (!refs) refs = train_reference_models(ctx.global, lead, ref_epochs, sim.fl.local, ref_seed);
    std::vector<Model> benign_models;
    for (int id : sim.malicious_ids) {
      benign_models.push_back(train_local(ctx.global, sim.clients[static_cast<std::size_t>(id)].clean_train,
                                          sim.fl.local, attack_seed(sim, ctx.round, id, 0xbe)));
    }
    const auto critical = state_.report->selected_set();
    const SelectionVector v = make_selection(layout_of(ctx.global), critical);
    FlatVector crafted = craft(ctx, *refs, critical, v, benign_models);

    std::vector<Update> out;
    for (int id : ctx.sampled_malicious) {
      out.push_back({id, crafted, sim.clients[static_cast<std::size_t>(id)].weight});
    }
    return out;
  }

 protected:
  virtual FlatVector craft(const RoundContext& ctx, const ReferenceModels& refs, const std::set<std::string>& critical,
                           const SelectionVector& v, std::span<const Model> benign_models) = 0;

  AttackConfig cfg_;
  AdversaryState state_;
};

class LsaAdversary final : public LayerAdversary {
 public:
  using LayerAdversary::LayerAdversary;
  std::string_view name() const override { return "lsa"; }

 protected:
  FlatVector craft(const RoundContext& ctx, const ReferenceModels& refs, const std::set<std::string>& critical,
                   const SelectionVector& v, std::span<const Model> benign_models) override {
    const int designated = ctx.sim.malicious_ids.front();
    const Model base = substitute_layers(refs.benign, refs.malicious, critical);
    const Model w_ft = finetune_frozen(base, critical, ctx.sim.clients[static_cast<std::size_t>(designated)],
                                       cfg_.ft_epochs, ctx.sim.fl.local,
                                       attack_seed(ctx.sim, ctx.round, designated, 0xf7), cfg_.ft_with_clean);
    return craft_lsa_update(w_ft, benign_models, v, cfg_.lambda).params;
  }
};

// Layer-substitution baseline reported as "LPA-like".
class LpaAdversary final : public LayerAdversary {
 public:
  using LayerAdversary::LayerAdversary;
  std::string_view name() const override { return "lpa"; }

 protected:
  FlatVector craft(const RoundContext&, const ReferenceModels& refs, const std::set<std::string>&,
                   const SelectionVector& v, std::span<const Model> benign_models) override {
    return craft_substitution_update(refs.malicious, benign_models, v).params;
  }
};

}  // namespace fedlayer
