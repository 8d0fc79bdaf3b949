#pragma once

// Feed-forward dense network with layer-addressable parameters, manual
// backpropagation and plain SGD. Every parameter is a double; all operations
// return new values and never mutate their inputs.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fedlayer/error.hpp"
#include "fedlayer/random.hpp"
#include "fedlayer/sample.hpp"

namespace fedlayer {

enum class Activation { kRelu, kIdentity, kSoftmaxOutput };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kIdentity: return "identity";
    case Activation::kSoftmaxOutput: return "softmax";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "identity") return Activation::kIdentity;
  if (s == "softmax") return Activation::kSoftmaxOutput;
  throw Error("nn", "unknown activation '" + std::string(s) + "'");
}

// Architecture recipe. widths[0] is the input width, widths.back() the class
// count; every adjacent pair is one parameterized layer.
struct ArchSpec {
  std::vector<std::size_t> widths;
  Activation hidden = Activation::kRelu;
  Activation output = Activation::kSoftmaxOutput;

  std::size_t num_layers() const noexcept { return widths.empty() ? 0 : widths.size() - 1; }

  void validate() const {
    if (widths.size() < 2) throw Error("nn", "architecture needs an input and at least one layer");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] == 0) {
        throw Error("nn", i == 0 ? "input width is zero"
                                 : "layer " + std::to_string(i) + " has zero width");
      }
    }
    if (hidden == Activation::kSoftmaxOutput) throw Error("nn", "softmax is only valid on the output layer");
  }

  // "mlp:64x64x128x10:relu:softmax"
  std::string id() const {
    std::string s = "mlp:";
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (i) s += 'x';
      s += std::to_string(widths[i]);
    }
    s += ':';
    s += to_string(hidden);
    s += ':';
    s += to_string(output);
    return s;
  }

  static ArchSpec parse(std::string_view id) {
    auto fail = [&] { return Error("nn", "malformed arch id '" + std::string(id) + "'"); };
    if (!id.starts_with("mlp:")) throw fail();
    std::string_view rest = id.substr(4);
    const auto c1 = rest.find(':');
    if (c1 == std::string_view::npos) throw fail();
    const auto c2 = rest.find(':', c1 + 1);
    if (c2 == std::string_view::npos) throw fail();
    ArchSpec spec;
    std::string_view dims = rest.substr(0, c1);
    while (!dims.empty()) {
      const auto x = dims.find('x');
      const std::string_view tok = dims.substr(0, x);
      std::size_t w = 0;
      const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), w);
      if (ec != std::errc() || p != tok.data() + tok.size()) throw fail();
      spec.widths.push_back(w);
      if (x == std::string_view::npos) break;
      dims.remove_prefix(x + 1);
    }
    spec.hidden = parse_activation(rest.substr(c1 + 1, c2 - c1 - 1));
    spec.output = parse_activation(rest.substr(c2 + 1));
    spec.validate();
    return spec;
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

struct LayerBlock {
  std::string name;
  Matrix weights;  // out x in
  Vector bias;     // out
  Activation activation = Activation::kRelu;

  std::size_t in_width() const noexcept { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out_width() const noexcept { return static_cast<std::size_t>(weights.rows()); }
  std::size_t parameter_count() const noexcept {
    return static_cast<std::size_t>(weights.size() + bias.size());
  }
};

namespace detail {

template <typename A, typename B>
bool same_bits(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace detail

struct Model {
  std::string arch_id;
  std::vector<LayerBlock> layers;

  std::size_t input_width() const { return layers.front().in_width(); }
  std::size_t num_classes() const { return layers.back().out_width(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  std::vector<std::string> layer_names() const {
    std::vector<std::string> names;
    names.reserve(layers.size());
    for (const auto& l : layers) names.push_back(l.name);
    return names;
  }

  std::size_t layer_index(std::string_view name) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name == name) return i;
    }
    throw Error("nn", "unknown layer '" + std::string(name) + "'");
  }

  void validate() const {
    if (layers.empty()) throw Error("nn", "model has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.weights.rows() == 0 || l.weights.cols() == 0) {
        throw Error("nn", "layer " + std::to_string(k) + " has an empty weight matrix");
      }
      if (l.bias.size() != l.weights.rows()) {
        throw Error("nn", "layer " + std::to_string(k) + " bias length does not match output width");
      }
      if (k > 0 && layers[k - 1].out_width() != l.in_width()) {
        throw Error("nn", "layer " + std::to_string(k) + " input width does not chain");
      }
    }
  }

  // Bitwise equality of every parameter plus identical structure.
  friend bool bit_identical(const Model& a, const Model& b) {
    if (a.arch_id != b.arch_id || a.layers.size() != b.layers.size()) return false;
    for (std::size_t k = 0; k < a.layers.size(); ++k) {
      const auto& x = a.layers[k];
      const auto& y = b.layers[k];
      if (x.name != y.name || x.activation != y.activation) return false;
      if (!detail::same_bits(x.weights, y.weights) || !detail::same_bits(x.bias, y.bias)) return false;
    }
    return true;
  }
};

struct LayerGradient {
  Matrix weights;
  Vector bias;
};

struct GradientSet {
  std::vector<LayerGradient> layers;
};

// Which layers receive updates during training. Empty means all.
using LayerMask = std::vector<bool>;

inline LayerMask mask_for(const Model& model, const std::set<std::string>& trainable) {
  LayerMask mask(model.layers.size(), false);
  for (const auto& name : trainable) mask[model.layer_index(name)] = true;
  return mask;
}

// ---------------------------------------------------------------------------
// Construction

// Uniform Glorot init for weights, zero biases. Deterministic in (spec, seed).
inline Model build_model(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.arch_id = spec.id();
  Rng rng(seed);
  const std::size_t n = spec.num_layers();
  for (std::size_t k = 0; k < n; ++k) {
    const auto fan_in = spec.widths[k];
    const auto fan_out = spec.widths[k + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    LayerBlock l;
    l.name = "fc" + std::to_string(k + 1);
    l.weights.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
    for (Eigen::Index i = 0; i < l.weights.size(); ++i) l.weights.data()[i] = dist(rng);
    l.bias = Vector::Zero(static_cast<Eigen::Index>(fan_out));
    l.activation = k + 1 == n ? spec.output : spec.hidden;
    m.layers.push_back(std::move(l));
  }
  return m;
}

// Same shapes as `spec`, every parameter zero.
inline Model zero_model(const ArchSpec& spec) {
  Model m = build_model(spec, 0);
  for (auto& l : m.layers) {
    l.weights.setZero();
    l.bias.setZero();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline void softmax_rows(Matrix& z) {
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

inline void apply_activation(Matrix& z, Activation a) {
  switch (a) {
    case Activation::kRelu: z = z.cwiseMax(0.0); break;
    case Activation::kIdentity: break;
    case Activation::kSoftmaxOutput: softmax_rows(z); break;
  }
}

inline Matrix affine(const LayerBlock& l, const Matrix& in) {
  Matrix z = in * l.weights.transpose();
  z.rowwise() += l.bias.transpose();
  return z;
}

inline void check_input(const Model& model, const Matrix& inputs) {
  if (model.layers.empty()) throw Error("nn", "model has no layers");
  if (static_cast<std::size_t>(inputs.cols()) != model.input_width()) {
    throw Error("nn", "input width " + std::to_string(inputs.cols()) + " does not match model input width " +
                          std::to_string(model.input_width()));
  }
}

}  // namespace detail

// Class scores per row. Softmax-output models return probabilities.
inline Matrix forward(const Model& model, const Matrix& inputs) {
  detail::check_input(model, inputs);
  Matrix a = inputs;
  for (const auto& l : model.layers) {
    a = detail::affine(l, a);
    detail::apply_activation(a, l.activation);
  }
  return a;
}

inline std::vector<int> predict(const Model& model, const Matrix& inputs) {
  const Matrix s = forward(model, inputs);
  std::vector<int> out(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    Eigen::Index arg = 0;
    s.row(r).maxCoeff(&arg);
    out[static_cast<std::size_t>(r)] = static_cast<int>(arg);
  }
  return out;
}

struct LossAndGradients {
  double loss = 0.0;
  GradientSet grads;
};

// Mean cross-entropy of softmax(final pre-activation) against `labels`, and
// its gradient with respect to every parameter. Layers switched off in
// `trainable` get zero gradient blocks.
inline LossAndGradients backward(const Model& model, const Matrix& inputs, std::span<const int> labels,
                                 const LayerMask& trainable = {}) {
  detail::check_input(model, inputs);
  const auto n = inputs.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw Error("nn", "label count does not match batch size");
  if (n == 0) throw Error("nn", "empty batch");
  const auto classes = static_cast<int>(model.num_classes());
  for (int y : labels) {
    if (y < 0 || y >= classes) throw Error("nn", "label " + std::to_string(y) + " out of range");
  }

  const std::size_t depth = model.layers.size();
  std::vector<Matrix> acts;  // acts[k] is the input to layer k
  std::vector<Matrix> pre;   // pre-activations
  acts.reserve(depth + 1);
  pre.reserve(depth);
  acts.push_back(inputs);
  for (std::size_t k = 0; k < depth; ++k) {
    pre.push_back(detail::affine(model.layers[k], acts.back()));
    if (k + 1 < depth) {
      Matrix a = pre.back();
      detail::apply_activation(a, model.layers[k].activation);
      acts.push_back(std::move(a));
    }
  }

  Matrix delta = pre.back();
  detail::softmax_rows(delta);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    loss -= std::log(std::max(delta(r, y), 1e-300));
    delta(r, y) -= 1.0;
  }
  loss *= inv_n;
  delta *= inv_n;

  // Last layer from which gradient still has to flow.
  std::size_t first_needed = 0;
  if (!trainable.empty()) {
    while (first_needed < depth && !trainable[first_needed]) ++first_needed;
  }

  LossAndGradients out;
  out.loss = loss;
  out.grads.layers.resize(depth);
  for (std::size_t k = depth; k-- > 0;) {
    const auto& l = model.layers[k];
    auto& g = out.grads.layers[k];
    if (trainable.empty() || trainable[k]) {
      g.weights = delta.transpose() * acts[k];
      g.bias = delta.colwise().sum().transpose();
    } else {
      g.weights = Matrix::Zero(l.weights.rows(), l.weights.cols());
      g.bias = Vector::Zero(l.bias.size());
    }
    if (k == 0 || k <= first_needed) {
      for (std::size_t j = 0; j < k; ++j) {
        out.grads.layers[j].weights = Matrix::Zero(model.layers[j].weights.rows(), model.layers[j].weights.cols());
        out.grads.layers[j].bias = Vector::Zero(model.layers[j].bias.size());
      }
      break;
    }
    Matrix next = delta * l.weights;
    switch (model.layers[k - 1].activation) {
      case Activation::kRelu: next = next.cwiseProduct((pre[k - 1].array() > 0.0).cast<double>().matrix()); break;
      case Activation::kIdentity: break;
      case Activation::kSoftmaxOutput: throw Error("nn", "softmax on a hidden layer");
    }
    delta = std::move(next);
  }
  return out;
}

inline void check_congruent(const Model& model, const GradientSet& grads) {
  if (grads.layers.size() != model.layers.size()) throw Error("nn", "gradient layer count does not match model");
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& l = model.layers[k];
    const auto& g = grads.layers[k];
    if (g.weights.rows() != l.weights.rows() || g.weights.cols() != l.weights.cols() ||
        g.bias.size() != l.bias.size()) {
      throw Error("nn", "gradient shape mismatch at layer " + std::to_string(k));
    }
  }
}

inline Model sgd_step(Model model, const GradientSet& grads, double lr) {
  if (!(lr > 0.0)) throw Error("nn", "learning rate must be positive");
  check_congruent(model, grads);
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    model.layers[k].weights -= lr * grads.layers[k].weights;
    model.layers[k].bias -= lr * grads.layers[k].bias;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Local training

struct TrainOptions {
  int epochs = 2;
  double lr = 0.05;
  int batch = 32;
};

// Mini-batch SGD over `data`. The shuffle order is drawn from `seed`, so the
// result is a pure function of the arguments.
inline Model train_local(const Model& model, std::span<const Sample> data, const TrainOptions& opts,
                         std::uint64_t seed, const LayerMask& trainable = {}) {
  if (data.empty()) throw Error("train", "empty training data");
  if (opts.epochs < 0) throw Error("train", "negative epoch count");
  if (opts.batch < 1) throw Error("train", "batch size must be at least 1");
  if (!(opts.lr > 0.0)) throw Error("train", "learning rate must be positive");
  if (!trainable.empty() && trainable.size() != model.layers.size()) {
    throw Error("train", "layer mask size does not match model");
  }
  Model out = model;
  if (opts.epochs == 0) return out;

  const PackedSamples packed = pack(data);
  const auto n = packed.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  const auto bs = static_cast<std::size_t>(opts.batch);
  Matrix xb;
  std::vector<int> yb;
  for (int e = 0; e < opts.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t len = std::min(bs, n - start);
      xb.resize(static_cast<Eigen::Index>(len), packed.x.cols());
      yb.resize(len);
      for (std::size_t i = 0; i < len; ++i) {
        const auto src = order[start + i];
        xb.row(static_cast<Eigen::Index>(i)) = packed.x.row(static_cast<Eigen::Index>(src));
        yb[i] = packed.y[src];
      }
      const auto lg = backward(out, xb, yb, trainable);
      for (std::size_t k = 0; k < out.layers.size(); ++k) {
        if (!trainable.empty() && !trainable[k]) continue;
        out.layers[k].weights -= opts.lr * lg.grads.layers[k].weights;
        out.layers[k].bias -= opts.lr * lg.grads.layers[k].bias;
      }
    }
  }
  return out;
}

inline double mean_loss(const Model& model, const PackedSamples& data) {
  return backward(model, data.x, data.y).loss;
}

inline double accuracy(const Model& model, const PackedSamples& data) {
  if (data.size() == 0) throw Error("metrics", "accuracy on an empty set");
  const auto pred = predict(model, data.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.y[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Layer substitution

// Copy of `base` whose layers named in `layer_set` are taken from `donor`.
inline Model substitute_layers(const Model& base, const Model& donor, const std::set<std::string>& layer_set) {
  if (base.arch_id != donor.arch_id) {
    throw Error("nn", "cannot substitute between architectures '" + base.arch_id + "' and '" + donor.arch_id + "'");
  }
  Model out = base;
  for (const auto& name : layer_set) {
    const auto k = base.layer_index(name);
    out.layers[k] = donor.layers[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Flat parameter vectors

struct LayoutEntry {
  std::string layer;
  std::size_t offset = 0;
  std::size_t length = 0;

  friend bool operator==(const LayoutEntry&, const LayoutEntry&) = default;
};

// Whole-model parameters in layout order: per layer, row-major weights then bias.
struct FlatVector {
  std::string arch_id;
  std::vector<LayoutEntry> layout;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }

  const LayoutEntry& entry(std::string_view layer) const {
    for (const auto& e : layout) {
      if (e.layer == layer) return e;
    }
    throw Error("nn", "layout has no layer '" + std::string(layer) + "'");
  }
};

inline std::vector<LayoutEntry> layout_of(const Model& model) {
  std::vector<LayoutEntry> layout;
  std::size_t offset = 0;
  for (const auto& l : model.layers) {
    layout.push_back({l.name, offset, l.parameter_count()});
    offset += l.parameter_count();
  }
  return layout;
}

inline FlatVector flatten(const Model& model) {
  FlatVector f;
  f.arch_id = model.arch_id;
  f.layout = layout_of(model);
  f.values.reserve(model.parameter_count());
  for (const auto& l : model.layers) {
    f.values.insert(f.values.end(), l.weights.data(), l.weights.data() + l.weights.size());
    f.values.insert(f.values.end(), l.bias.data(), l.bias.data() + l.bias.size());
  }
  return f;
}

inline Model unflatten(std::string_view arch_id, std::span<const double> values) {
  Model m = zero_model(ArchSpec::parse(arch_id));
  if (values.size() != m.parameter_count()) {
    throw Error("nn", "flat length " + std::to_string(values.size()) + " does not match parameter count " +
                          std::to_string(m.parameter_count()));
  }
  const double* p = values.data();
  for (auto& l : m.layers) {
    std::copy_n(p, l.weights.size(), l.weights.data());
    p += l.weights.size();
    std::copy_n(p, l.bias.size(), l.bias.data());
    p += l.bias.size();
  }
  return m;
}

inline Model unflatten(std::string_view arch_id, const FlatVector& flat) {
  if (!flat.arch_id.empty() && flat.arch_id != arch_id) {
    throw Error("nn", "flat vector belongs to '" + flat.arch_id + "', not '" + std::string(arch_id) + "'");
  }
  return unflatten(arch_id, std::span<const double>(flat.values));
}

}  // namespace fedlayer
