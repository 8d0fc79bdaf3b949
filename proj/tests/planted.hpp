#pragma once

// Planted-backdoor oracle: a malicious model that differs from the benign one
// only in its last layer, so the ranking must put that layer first and pick
// it alone.

#include <set>
#include <string>

#include "fedlayer/attacks.hpp"

namespace fedlayer::testutil {

struct PlantedOutcome {
  CriticalLayerReport report;
  std::string last_layer;
  bool pass = false;
};

inline PlantedOutcome planted_backdoor(const Model& global, const ClientDataset& client, const TrainOptions& hyper,
                                       int target_label, double tau, std::uint64_t seed) {
  const Model benign = train_local(global, client.clean_train, hyper, derive_seed({seed, 1}));
  PlantedOutcome out;
  out.last_layer = benign.layers.back().name;
  const Model malicious =
      finetune_frozen(benign, {out.last_layer}, client, 10, hyper, derive_seed({seed, 2}), /*with_clean=*/true);
  out.report = rank_critical_layers(benign, malicious, pack(client.poison_val), target_label, tau);
  out.pass = out.report.baseline_bsr > 0.0 && out.report.per_layer.front().layer == out.last_layer &&
             out.report.selected == std::vector<std::string>{out.last_layer};
  return out;
}

}  // namespace fedlayer::testutil
