#pragma once

// A few-second experiment used by the engine, attack and runner tests.

#include "fedlayer/experiment.hpp"

namespace fedlayer::testutil {

inline ConfigMap small_config_map() {
  return parse_config_text(R"(
seed = 3
attack.name = none
defense.name = fedavg
data.classes = 4
data.per_class = 80
data.dim = 49
data.root_size = 20
model.hidden = 12,12
fl.clients = 8
fl.malicious = 2
fl.sample_fraction = 0.5
fl.rounds = 6
train.lr = 0.1
train.epochs = 2
train.batch = 8
)");
}

inline ExperimentConfig small_config(std::string_view attack = "none", std::string_view defense = "fedavg",
                                     int rounds = 6) {
  auto m = small_config_map();
  m["attack.name"] = std::string(attack);
  m["defense.name"] = std::string(defense);
  m["fl.rounds"] = std::to_string(rounds);
  return config_from_map(m);
}

}  // namespace fedlayer::testutil
