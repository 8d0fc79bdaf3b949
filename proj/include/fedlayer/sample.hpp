#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "fedlayer/error.hpp"

namespace fedlayer {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// One labelled feature vector. Features live in [0, 1].
struct Sample {
  std::vector<double> features;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

using SampleSet = std::vector<Sample>;

// Row-major design matrix plus labels, the layout the dense kernels consume.
struct PackedSamples {
  Matrix x;
  std::vector<int> y;

  std::size_t size() const noexcept { return y.size(); }
};

inline PackedSamples pack(std::span<const Sample> samples) {
  PackedSamples out;
  if (samples.empty()) return out;
  const auto d = static_cast<Eigen::Index>(samples.front().features.size());
  out.x.resize(static_cast<Eigen::Index>(samples.size()), d);
  out.y.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].features.size() != static_cast<std::size_t>(d)) throw Error("data", "samples differ in dimension");
    out.x.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(samples[i].features.data(), d);
    out.y.push_back(samples[i].label);
  }
  return out;
}

}  // namespace fedlayer
