#pragma once

#include <span>

#include "fedlayer/error.hpp"
#include "fedlayer/nn.hpp"
#include "fedlayer/sample.hpp"

namespace fedlayer {

// Fraction of triggered samples classified as `target_label`. The set is
// expected to exclude samples whose true label already was the target.
inline double compute_bsr(const Model& model, const PackedSamples& triggered, int target_label) {
  if (triggered.size() == 0) throw Error("metrics", "backdoor success rate on an empty set");
  const auto pred = predict(model, triggered.x);
  std::size_t hits = 0;
  for (int p : pred) hits += p == target_label;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline double compute_bsr(const Model& model, std::span<const Sample> triggered, int target_label) {
  if (triggered.empty()) throw Error("metrics", "backdoor success rate on an empty set");
  return compute_bsr(model, pack(triggered), target_label);
}

inline double compute_acc(const Model& model, const PackedSamples& clean) { return accuracy(model, clean); }

}  // namespace fedlayer
