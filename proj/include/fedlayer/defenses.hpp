#pragma once

// Server-side aggregation rules. Every rule takes the round's submissions,
// the previous global parameters and a DefenseParams bundle, and returns the
// next global parameters together with the accepted/rejected partition of
// client ids. Inputs are sorted by client id before any arithmetic, so the
// result does not depend on submission order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedlayer/error.hpp"
#include "fedlayer/nn.hpp"
#include "fedlayer/random.hpp"

namespace fedlayer {

// One client's submission: the full locally-updated model, flattened.
struct Update {
  int client_id = 0;
  FlatVector params;
  double declared_weight = 0.0;
};

struct AggregationResult {
  FlatVector aggregate;
  std::vector<int> accepted;
  std::vector<int> rejected;
};

struct DefenseParams {
  double trim_fraction = 0.2;
  std::optional<int> krum_f;  // default ceil(0.1 n)
  std::optional<int> krum_m;  // default max(1, n - f - 2)
  double flame_noise_sigma = 0.001;
  SampleSet fltrust_root;
  TrainOptions fltrust_train{};
  std::uint64_t seed = 0;  // FLAME noise and FLTrust reference training

  void validate() const {
    if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) throw Error("defense", "trim fraction must lie in [0, 0.5)");
    if (krum_m && *krum_m < 1) throw Error("defense", "krum_m must be at least 1");
    if (krum_f && *krum_f < 0) throw Error("defense", "krum_f must be non-negative");
    if (!(flame_noise_sigma >= 0.0)) throw Error("defense", "flame sigma must be non-negative");
  }
};

enum class DefenseKind { kFedAvg, kMedian, kTrimmedMean, kMultiKrum, kFLTrust, kFlame };

inline constexpr DefenseKind kAllDefenses[] = {DefenseKind::kFedAvg,    DefenseKind::kMedian,
                                               DefenseKind::kTrimmedMean, DefenseKind::kMultiKrum,
                                               DefenseKind::kFLTrust,   DefenseKind::kFlame};

inline std::string_view to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::kFedAvg: return "fedavg";
    case DefenseKind::kMedian: return "median";
    case DefenseKind::kTrimmedMean: return "trimmed_mean";
    case DefenseKind::kMultiKrum: return "multi_krum";
    case DefenseKind::kFLTrust: return "fltrust";
    case DefenseKind::kFlame: return "flame";
  }
  return "?";
}

inline DefenseKind parse_defense(std::string_view s) {
  for (auto k : kAllDefenses) {
    if (to_string(k) == s) return k;
  }
  throw Error("defense", "unknown defense '" + std::string(s) + "'");
}

namespace detail {

// Id-sorted view of the submissions, with length checks against `prev`.
inline std::vector<const Update*> normalized(std::span<const Update> updates, const FlatVector& prev) {
  std::vector<const Update*> out;
  out.reserve(updates.size());
  for (const auto& u : updates) {
    if (u.params.size() != prev.size()) {
      throw Error("defense", "update from client " + std::to_string(u.client_id) + " has length " +
                                 std::to_string(u.params.size()) + ", expected " + std::to_string(prev.size()));
    }
    out.push_back(&u);
  }
  std::sort(out.begin(), out.end(), [](const Update* a, const Update* b) { return a->client_id < b->client_id; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i]->client_id == out[i - 1]->client_id) {
      throw Error("defense", "duplicate submission from client " + std::to_string(out[i]->client_id));
    }
  }
  return out;
}

inline FlatVector like(const FlatVector& prev, std::vector<double> values) {
  return FlatVector{prev.arch_id, prev.layout, std::move(values)};
}

inline std::vector<int> ids_of(const std::vector<const Update*>& ups) {
  std::vector<int> ids;
  ids.reserve(ups.size());
  for (const auto* u : ups) ids.push_back(u->client_id);
  return ids;
}

inline Eigen::Map<const Vector> view(const std::vector<double>& v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

inline Vector delta(const Update& u, const FlatVector& prev) { return view(u.params.values) - view(prev.values); }

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline void require_nonempty(std::span<const Update> updates, std::string_view rule) {
  if (updates.empty()) throw Error("defense", std::string(rule) + " needs at least one update");
}

}  // namespace detail

// Weighted mean with declared weights renormalized over the present clients.
inline AggregationResult fedavg(std::span<const Update> updates, const FlatVector& prev, const DefenseParams& = {}) {
  detail::require_nonempty(updates, "fedavg");
  const auto ups = detail::normalized(updates, prev);
  double total = 0.0;
  for (const auto* u : ups) {
    if (!(u->declared_weight >= 0.0)) throw Error("defense", "negative declared weight");
    total += u->declared_weight;
  }
  if (!(total > 0.0)) throw Error("defense", "fedavg: total declared weight is zero");
  std::vector<double> agg(prev.size(), 0.0);
  for (const auto* u : ups) {
    const double w = u->declared_weight / total;
    for (std::size_t j = 0; j < agg.size(); ++j) agg[j] += w * u->params.values[j];
  }
  return {detail::like(prev, std::move(agg)), detail::ids_of(ups), {}};
}

// Coordinate-wise median; mean of the two middle values for even counts.
// Coordinate rules never exclude a client, so every id is reported accepted.
inline AggregationResult coordinate_median(std::span<const Update> updates, const FlatVector& prev,
                                           const DefenseParams& = {}) {
  detail::require_nonempty(updates, "median");
  const auto ups = detail::normalized(updates, prev);
  const std::size_t n = ups.size();
  std::vector<double> agg(prev.size());
  std::vector<double> col(n);
  for (std::size_t j = 0; j < agg.size(); ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = ups[i]->params.values[j];
    std::sort(col.begin(), col.end());
    agg[j] = n % 2 ? col[n / 2] : 0.5 * (col[n / 2 - 1] + col[n / 2]);
  }
  return {detail::like(prev, std::move(agg)), detail::ids_of(ups), {}};
}

// Drops floor(beta * n) lowest and highest values per coordinate and averages
// the rest.
inline AggregationResult trimmed_mean(std::span<const Update> updates, const FlatVector& prev,
                                      const DefenseParams& params = {}) {
  detail::require_nonempty(updates, "trimmed_mean");
  params.validate();
  const auto ups = detail::normalized(updates, prev);
  const std::size_t n = ups.size();
  const auto k = static_cast<std::size_t>(std::floor(params.trim_fraction * static_cast<double>(n)));
  if (n <= 2 * k) throw Error("defense", "trimmed_mean: trimming removes every update");
  std::vector<double> agg(prev.size());
  std::vector<double> col(n);
  const double inv = 1.0 / static_cast<double>(n - 2 * k);
  for (std::size_t j = 0; j < agg.size(); ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = ups[i]->params.values[j];
    std::sort(col.begin(), col.end());
    double s = 0.0;
    for (std::size_t i = k; i < n - k; ++i) s += col[i];
    agg[j] = s * inv;
  }
  return {detail::like(prev, std::move(agg)), detail::ids_of(ups), {}};
}

struct KrumSelection {
  std::vector<double> scores;     // per id-sorted update
  std::vector<std::size_t> chosen;  // indices into the id-sorted list, ascending score
};

inline int default_krum_f(std::size_t n) { return static_cast<int>(std::ceil(0.1 * static_cast<double>(n))); }

inline KrumSelection krum_select(const std::vector<const Update*>& ups, int f, int m) {
  const std::size_t n = ups.size();
  if (f < 0 || n < static_cast<std::size_t>(f) + 3) {
    throw Error("defense", "multi_krum needs n >= f + 3 (n=" + std::to_string(n) + ", f=" + std::to_string(f) + ")");
  }
  if (m < 1 || n < static_cast<std::size_t>(m)) throw Error("defense", "multi_krum needs 1 <= m <= n");
  Matrix dist = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double d = (detail::view(ups[a]->params.values) - detail::view(ups[b]->params.values)).squaredNorm();
      dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = d;
      dist(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = d;
    }
  }
  const std::size_t neighbours = n - static_cast<std::size_t>(f) - 2;
  KrumSelection sel;
  sel.scores.resize(n);
  std::vector<double> row;
  for (std::size_t a = 0; a < n; ++a) {
    row.clear();
    for (std::size_t b = 0; b < n; ++b) {
      if (b != a) row.push_back(dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)));
    }
    std::sort(row.begin(), row.end());
    sel.scores[a] = std::accumulate(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(neighbours), 0.0);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sel.scores[a] < sel.scores[b]; });
  sel.chosen.assign(order.begin(), order.begin() + m);
  return sel;
}

// Scores each update by the summed squared distance to its n - f - 2 nearest
// neighbours and averages the m best-scored ones.
inline AggregationResult multi_krum(std::span<const Update> updates, const FlatVector& prev,
                                    const DefenseParams& params = {}) {
  detail::require_nonempty(updates, "multi_krum");
  params.validate();
  const auto ups = detail::normalized(updates, prev);
  const std::size_t n = ups.size();
  const int f = params.krum_f.value_or(default_krum_f(n));
  const int m = params.krum_m.value_or(std::max(1, static_cast<int>(n) - f - 2));
  const auto sel = krum_select(ups, f, m);

  std::vector<bool> picked(n, false);
  for (auto i : sel.chosen) picked[i] = true;
  std::vector<double> agg(prev.size(), 0.0);
  AggregationResult res;
  for (std::size_t i = 0; i < n; ++i) {
    if (!picked[i]) {
      res.rejected.push_back(ups[i]->client_id);
      continue;
    }
    res.accepted.push_back(ups[i]->client_id);
    for (std::size_t j = 0; j < agg.size(); ++j) agg[j] += ups[i]->params.values[j];
  }
  const double inv = 1.0 / static_cast<double>(sel.chosen.size());
  for (auto& v : agg) v *= inv;
  res.aggregate = detail::like(prev, std::move(agg));
  return res;
}

inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

// Trust-weighted aggregation against a server-side reference delta:
// trust_i = max(0, cos(delta_i, ref)), every delta rescaled to |ref|, and
// next = prev + sum(trust_i * rescaled_i) / sum(trust_i).
inline AggregationResult fltrust_with_reference(std::span<const Update> updates, const FlatVector& prev,
                                                const Vector& reference_delta) {
  detail::require_nonempty(updates, "fltrust");
  const auto ups = detail::normalized(updates, prev);
  if (static_cast<std::size_t>(reference_delta.size()) != prev.size()) {
    throw Error("defense", "reference delta length does not match parameters");
  }
  const double ref_norm = reference_delta.norm();
  Vector acc = Vector::Zero(reference_delta.size());
  double trust_sum = 0.0;
  AggregationResult res;
  for (const auto* u : ups) {
    const Vector d = detail::delta(*u, prev);
    const double trust = std::max(0.0, cosine(d, reference_delta));
    if (trust > 0.0) {
      acc += trust * (ref_norm / d.norm()) * d;
      trust_sum += trust;
      res.accepted.push_back(u->client_id);
    } else {
      res.rejected.push_back(u->client_id);
    }
  }
  if (trust_sum > 0.0) {
    res.aggregate = detail::like(prev, detail::to_std(detail::view(prev.values) + acc / trust_sum));
  } else {
    res.aggregate = prev;
  }
  return res;
}

// The server trains the previous global model on its root set to obtain the
// reference delta, then aggregates as in fltrust_with_reference.
inline AggregationResult fltrust_like(std::span<const Update> updates, const FlatVector& prev,
                                      const DefenseParams& params) {
  detail::require_nonempty(updates, "fltrust");
  if (params.fltrust_root.empty()) throw Error("defense", "fltrust needs a non-empty root set");
  const Model global = unflatten(prev.arch_id, prev);
  const Model ref = train_local(global, params.fltrust_root, params.fltrust_train, params.seed);
  const FlatVector ref_flat = flatten(ref);
  const Vector ref_delta = detail::view(ref_flat.values) - detail::view(prev.values);
  return fltrust_with_reference(updates, prev, ref_delta);
}

// Single-link clustering with an adaptive cut. The merge levels of the
// single-link dendrogram are scanned from the first level at which some
// cluster holds min_size members; the dendrogram is cut at the widest gap
// between consecutive levels from there on (latest cut on ties, so all-equal
// distances keep everyone). Returns the largest cluster at that cut (indices
// into `dist`, ascending; ties go to the cluster holding the smallest index).
inline std::vector<std::size_t> majority_cluster(const Matrix& dist, std::size_t min_size) {
  const auto n = static_cast<std::size_t>(dist.rows());
  if (n == 0) return {};
  struct Edge {
    double d;
    std::size_t a, b;
  };
  std::vector<Edge> edges;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      edges.push_back({dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)), a, b});
    }
  }
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) { return x.d < y.d; });

  std::vector<std::size_t> parent(n);
  std::vector<std::size_t> size(n, 1);
  auto reset = [&] {
    std::iota(parent.begin(), parent.end(), 0);
    std::fill(size.begin(), size.end(), 1);
  };
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    auto ra = find(a);
    auto rb = find(b);
    if (ra == rb) return std::size_t{0};
    if (size[ra] < size[rb]) std::swap(ra, rb);
    parent[rb] = ra;
    size[ra] += size[rb];
    return size[ra];
  };

  // Minimum spanning tree edges in merge order.
  reset();
  std::vector<Edge> merges;
  std::size_t first = n;  // index of the merge that first reaches min_size
  std::size_t largest = 1;
  for (const auto& e : edges) {
    const auto s = unite(e.a, e.b);
    if (s == 0) continue;
    largest = std::max(largest, s);
    merges.push_back(e);
    if (first == n && largest >= min_size) first = merges.size() - 1;
  }

  std::size_t cut = merges.empty() ? 0 : merges.size() - 1;
  if (first < merges.size()) {
    double widest = -1.0;
    for (std::size_t j = first; j < merges.size(); ++j) {
      const double gap = j + 1 < merges.size() ? merges[j + 1].d - merges[j].d : 0.0;
      if (gap >= widest) {
        widest = gap;
        cut = j;
      }
    }
  }

  reset();
  for (std::size_t j = 0; j < merges.size() && j <= cut; ++j) unite(merges[j].a, merges[j].b);
  std::size_t best_root = find(0);
  for (std::size_t x = 1; x < n; ++x) {
    const auto r = find(x);
    if (size[r] > size[best_root]) best_root = r;
  }
  std::vector<std::size_t> members;
  for (std::size_t x = 0; x < n; ++x) {
    if (find(x) == best_root) members.push_back(x);
  }
  return members;
}

// Cluster-filter-clip-noise aggregation over deltas:
//   1. cosine distances between client deltas, majority_cluster with
//      min size ceil(n/2) + 1; if no such cluster exists everyone is kept
//   2. accepted deltas clipped to their median L2 norm
//   3. mean of clipped deltas plus N(0, (sigma * median_norm)^2) noise
inline AggregationResult flame_lite(std::span<const Update> updates, const FlatVector& prev,
                                    const DefenseParams& params = {}) {
  params.validate();
  if (updates.size() < 2) throw Error("defense", "flame needs at least 2 updates");
  const auto ups = detail::normalized(updates, prev);
  const std::size_t n = ups.size();
  std::vector<Vector> deltas;
  deltas.reserve(n);
  for (const auto* u : ups) deltas.push_back(detail::delta(*u, prev));

  Matrix dist = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double d = 1.0 - cosine(deltas[a], deltas[b]);
      dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = d;
      dist(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = d;
    }
  }
  const std::size_t min_size = (n + 1) / 2 + 1;
  auto members = majority_cluster(dist, min_size);
  if (members.size() < min_size) {
    members.resize(n);
    std::iota(members.begin(), members.end(), 0);
  }

  std::vector<bool> in(n, false);
  for (auto i : members) in[i] = true;
  std::vector<double> norms;
  for (auto i : members) norms.push_back(deltas[i].norm());
  std::vector<double> sorted = norms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k = sorted.size();
  const double median_norm = k % 2 ? sorted[k / 2] : 0.5 * (sorted[k / 2 - 1] + sorted[k / 2]);

  Vector acc = Vector::Zero(static_cast<Eigen::Index>(prev.size()));
  for (std::size_t idx = 0; idx < members.size(); ++idx) {
    const double nrm = norms[idx];
    const double scale = nrm > median_norm && nrm > 0.0 ? median_norm / nrm : 1.0;
    acc += scale * deltas[members[idx]];
  }
  acc /= static_cast<double>(members.size());
  if (params.flame_noise_sigma > 0.0 && median_norm > 0.0) {
    Rng rng(params.seed);
    std::normal_distribution<double> noise(0.0, params.flame_noise_sigma * median_norm);
    for (Eigen::Index j = 0; j < acc.size(); ++j) acc[j] += noise(rng);
  }

  AggregationResult res;
  res.aggregate = detail::like(prev, detail::to_std(detail::view(prev.values) + acc));
  for (std::size_t i = 0; i < n; ++i) (in[i] ? res.accepted : res.rejected).push_back(ups[i]->client_id);
  return res;
}

inline AggregationResult aggregate(DefenseKind kind, std::span<const Update> updates, const FlatVector& prev,
                                   const DefenseParams& params) {
  switch (kind) {
    case DefenseKind::kFedAvg: return fedavg(updates, prev, params);
    case DefenseKind::kMedian: return coordinate_median(updates, prev, params);
    case DefenseKind::kTrimmedMean: return trimmed_mean(updates, prev, params);
    case DefenseKind::kMultiKrum: return multi_krum(updates, prev, params);
    case DefenseKind::kFLTrust: return fltrust_like(updates, prev, params);
    case DefenseKind::kFlame: return flame_lite(updates, prev, params);
  }
  throw Error("defense", "unhandled defense");
}

}  // namespace fedlayer
