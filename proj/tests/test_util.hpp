#pragma once

// Shared helpers for the test binaries: random inputs, toy datasets and
// independent reference computations.

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "fedlayer/nn.hpp"
#include "fedlayer/random.hpp"
#include "fedlayer/sample.hpp"

namespace fedlayer::testutil {

inline Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Well separated Gaussian blobs: class c is centred on 2*c in every feature.
inline SampleSet blobs(int classes, int per_class, int dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  SampleSet out;
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Sample s;
      s.label = c;
      for (int j = 0; j < dim; ++j) s.features.push_back(2.0 * c + noise(rng));
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Mean cross-entropy from the forward pass only (the model ends in softmax).
inline double reference_loss(const Model& m, const Matrix& x, std::span<const int> y) {
  const Matrix p = forward(m, x);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) loss -= std::log(p(r, y[static_cast<std::size_t>(r)]));
  return loss / static_cast<double>(p.rows());
}

// Largest |analytic - numeric| / max(|analytic| + |numeric|, 1e-6) over all
// parameters, numeric from central differences with step h.
inline double max_gradient_relative_error(const Model& m, const Matrix& x, std::span<const int> y, double h) {
  const auto g = backward(m, x, y).grads;
  std::vector<double> analytic;
  for (const auto& l : g.layers) {
    analytic.insert(analytic.end(), l.weights.data(), l.weights.data() + l.weights.size());
    analytic.insert(analytic.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  const FlatVector base = flatten(m);
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    FlatVector plus = base;
    FlatVector minus = base;
    plus.values[i] += h;
    minus.values[i] -= h;
    const double numeric =
        (reference_loss(unflatten(m.arch_id, plus), x, y) - reference_loss(unflatten(m.arch_id, minus), x, y)) /
        (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]) + std::abs(numeric), 1e-6);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace fedlayer::testutil
