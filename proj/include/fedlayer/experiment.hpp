#pragma once

// Experiment configuration, assembly of a Simulation from it, metrics, and the
// file outputs behind the command-line subcommands.
//
// Config files are flat `key = value` lines; `#` starts a comment. Keys use
// dotted sections (data.*, model.*, fl.*, train.*, defense.*, attack.*,
// output.*). See configs/ for complete examples.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedlayer/attacks.hpp"
#include "fedlayer/checkpoint.hpp"
#include "fedlayer/data.hpp"
#include "fedlayer/defenses.hpp"
#include "fedlayer/engine.hpp"
#include "fedlayer/error.hpp"
#include "fedlayer/nn.hpp"
#include "fedlayer/random.hpp"

namespace fedlayer {

// ---------------------------------------------------------------------------
// Key-value config

using ConfigMap = std::map<std::string, std::string, std::less<>>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline ConfigMap parse_config_text(std::string_view text) {
  ConfigMap out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw Error("config", "line " + std::to_string(line_no) + ": expected key = value");
    const auto key = std::string(detail::trim(line.substr(0, eq)));
    const auto value = std::string(detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw Error("config", "line " + std::to_string(line_no) + ": empty key");
    if (!out.emplace(key, value).second) throw Error("config", "duplicate key '" + key + "'");
  }
  return out;
}

inline ConfigMap load_config_map(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("config", "cannot open '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str());
}

struct ExperimentConfig {
  // data
  int classes = 10;
  int per_class = 300;
  int dim = 64;
  double q = 0.5;
  double holdout = 0.1;
  int root_size = 100;
  DatasetOptions data_opts{};
  // model
  std::vector<std::size_t> hidden = {64, 128, 128, 64};
  // federation
  FLConfig fl{};
  // defense
  DefenseKind defense = DefenseKind::kFedAvg;
  DefenseParams defense_params{};
  // attack
  AttackKind attack = AttackKind::kNone;
  AttackConfig attack_cfg{};
  // output
  std::string output_dir = "out";
  int warmup_rounds = 10;
  std::uint64_t seed = 0;

  ArchSpec arch() const {
    ArchSpec a;
    a.widths.push_back(static_cast<std::size_t>(dim));
    a.widths.insert(a.widths.end(), hidden.begin(), hidden.end());
    a.widths.push_back(static_cast<std::size_t>(classes));
    return a;
  }
};

namespace detail {

class KeyReader {
 public:
  explicit KeyReader(const ConfigMap& m) : map_(m) {}

  const std::string* find(std::string_view key) {
    used_.insert(std::string(key));
    const auto it = map_.find(key);
    return it == map_.end() ? nullptr : &it->second;
  }

  std::string required(std::string_view key) {
    const auto* v = find(key);
    if (!v) throw Error("config", "missing required key '" + std::string(key) + "'");
    return *v;
  }

  template <typename T>
  void read(std::string_view key, T& out) {
    if (const auto* v = find(key)) out = convert<T>(key, *v);
  }

  template <typename T>
  static T convert(std::string_view key, const std::string& v) {
    auto bad = [&] { return Error("config", "bad value '" + v + "' for key '" + std::string(key) + "'"); };
    if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1") return true;
      if (v == "false" || v == "0") return false;
      throw bad();
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else {
      T x{};
      const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
      if (ec != std::errc() || p != v.data() + v.size()) throw bad();
      return x;
    }
  }

  template <typename T>
  std::vector<T> list(std::string_view key, const std::string& v) {
    std::vector<T> out;
    std::string_view rest = v;
    while (!rest.empty()) {
      const auto c = rest.find(',');
      out.push_back(convert<T>(key, std::string(trim(rest.substr(0, c)))));
      if (c == std::string_view::npos) break;
      rest.remove_prefix(c + 1);
    }
    return out;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : map_) {
      if (!used_.contains(k)) throw Error("config", "unknown key '" + k + "'");
    }
  }

 private:
  const ConfigMap& map_;
  std::set<std::string, std::less<>> used_;
};

}  // namespace detail

inline ExperimentConfig config_from_map(const ConfigMap& map) {
  detail::KeyReader r(map);
  ExperimentConfig c;
  c.seed = detail::KeyReader::convert<std::uint64_t>("seed", r.required("seed"));
  c.attack = parse_attack(r.required("attack.name"));
  c.defense = parse_defense(r.required("defense.name"));

  r.read("data.classes", c.classes);
  r.read("data.per_class", c.per_class);
  r.read("data.dim", c.dim);
  r.read("data.q", c.q);
  r.read("data.holdout", c.holdout);
  r.read("data.root_size", c.root_size);
  r.read("data.sigma", c.data_opts.sigma);
  r.read("data.mean_spread", c.data_opts.mean_spread);
  if (const auto* v = r.find("model.hidden")) c.hidden = r.list<std::size_t>("model.hidden", *v);

  r.read("fl.clients", c.fl.num_clients);
  r.read("fl.malicious", c.fl.num_malicious);
  r.read("fl.sample_fraction", c.fl.sample_fraction);
  r.read("fl.rounds", c.fl.rounds);
  r.read("fl.workers", c.fl.workers);
  r.read("train.lr", c.fl.local.lr);
  r.read("train.epochs", c.fl.local.epochs);
  r.read("train.batch", c.fl.local.batch);
  c.fl.master_seed = c.seed;

  r.read("defense.beta", c.defense_params.trim_fraction);
  if (const auto* v = r.find("defense.krum_f"); v && *v != "auto") c.defense_params.krum_f = detail::KeyReader::convert<int>("defense.krum_f", *v);
  if (const auto* v = r.find("defense.krum_m"); v && *v != "auto") c.defense_params.krum_m = detail::KeyReader::convert<int>("defense.krum_m", *v);
  r.read("defense.flame_sigma", c.defense_params.flame_noise_sigma);
  if (const auto* v = r.find("defense.root_size")) c.root_size = detail::KeyReader::convert<int>("defense.root_size", *v);

  auto& a = c.attack_cfg;
  r.read("attack.lambda", a.lambda);
  r.read("attack.tau", a.tau);
  r.read("attack.period", a.detection_period);
  r.read("attack.ft_epochs", a.ft_epochs);
  if (const auto* v = r.find("attack.identify_epochs"); v && *v != "auto") {
    a.identify_epochs = detail::KeyReader::convert<int>("attack.identify_epochs", *v);
  }
  r.read("attack.ft_with_clean", a.ft_with_clean);
  r.read("attack.poison_rate", a.poison_rate);
  r.read("attack.val_frac", a.val_frac);
  r.read("attack.dba_shards", a.dba_shards);
  int target = c.classes - 1;
  r.read("attack.target_label", target);
  a.trigger = corner_trigger(static_cast<std::size_t>(c.dim), target);
  if (const auto* v = r.find("attack.trigger")) {
    a.trigger.indices = r.list<std::size_t>("attack.trigger", *v);
    a.trigger.values.assign(a.trigger.indices.size(), 1.0);
  }

  r.read("output.dir", c.output_dir);
  r.read("analyze.warmup_rounds", c.warmup_rounds);
  r.reject_unknown();

  if (const char* env = std::getenv("FEDLAYER_OUTPUT_DIR"); env && *env) c.output_dir = env;

  c.fl.validate();
  c.defense_params.validate();
  a.validate();
  a.trigger.validate(static_cast<std::size_t>(c.dim), c.classes);
  c.arch().validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_map(load_config_map(path)); }

// ---------------------------------------------------------------------------
// Assembly

inline Simulation build_simulation(const ExperimentConfig& c) {
  Simulation sim;
  sim.fl = c.fl;
  sim.fl.master_seed = c.seed;
  sim.arch = c.arch();
  sim.defense = c.defense;
  sim.defense_params = c.defense_params;

  const SampleSet all = generate_dataset(c.classes, c.per_class, c.dim, derive_seed(c.seed, Stream::kDataset), c.data_opts);
  auto [pool, test] = hold_out(all, c.holdout, derive_seed(c.seed, Stream::kDataset, 1));
  if (c.root_size > 0) {
    if (static_cast<std::size_t>(c.root_size) >= pool.size()) throw Error("data", "root set larger than the data pool");
    Rng rng(derive_seed(c.seed, Stream::kRoot));
    std::shuffle(pool.begin(), pool.end(), rng);
    sim.defense_params.fltrust_root.assign(pool.begin(), pool.begin() + c.root_size);
    pool.erase(pool.begin(), pool.begin() + c.root_size);
  }
  sim.defense_params.fltrust_train = c.fl.local;

  sim.clients = partition_noniid(pool, PartitionConfig{c.q, c.fl.num_clients, c.classes},
                                 derive_seed(c.seed, Stream::kPartition));
  for (int id = 0; id < c.fl.num_malicious; ++id) {
    sim.malicious_ids.push_back(id);
    auto& client = sim.clients[static_cast<std::size_t>(id)];
    client = split_four_way(client, c.attack_cfg.trigger, c.attack_cfg.poison_rate, c.attack_cfg.val_frac,
                            derive_seed(c.seed, Stream::kSplit, static_cast<std::uint64_t>(id)));
  }
  sim.eval.target_label = c.attack_cfg.trigger.target_label;
  sim.eval.clean = pack(test);
  sim.eval.triggered = pack(triggered_copies(test, c.attack_cfg.trigger));
  return sim;
}

inline std::unique_ptr<Adversary> make_adversary(const ExperimentConfig& c, const Simulation& sim) {
  switch (c.attack) {
    case AttackKind::kNone: return nullptr;
    case AttackKind::kBadNets: return std::make_unique<BadNetsAdversary>();
    case AttackKind::kDba: return std::make_unique<DbaAdversary>(sim, c.attack_cfg, c.seed);
    case AttackKind::kLpa: return std::make_unique<LpaAdversary>(c.attack_cfg);
    case AttackKind::kLsa: return std::make_unique<LsaAdversary>(c.attack_cfg);
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Metrics

struct AcceptanceRates {
  std::optional<double> mar;  // empty when no malicious submission was made
  std::optional<double> bar;
  std::size_t malicious_submitted = 0;
  std::size_t malicious_accepted = 0;
  std::size_t benign_submitted = 0;
  std::size_t benign_accepted = 0;
};

// Per-submission acceptance rates over the whole history.
inline AcceptanceRates compute_mar_bar(const History& history, std::span<const int> malicious_ids) {
  if (history.rounds.empty()) throw Error("metrics", "empty history");
  std::set<int> bad(malicious_ids.begin(), malicious_ids.end());
  AcceptanceRates r;
  for (const auto& rec : history.rounds) {
    const std::set<int> acc(rec.accepted.begin(), rec.accepted.end());
    for (int id : rec.sampled) {
      const bool ok = acc.contains(id);
      if (bad.contains(id)) {
        ++r.malicious_submitted;
        r.malicious_accepted += ok;
      } else {
        ++r.benign_submitted;
        r.benign_accepted += ok;
      }
    }
  }
  if (r.malicious_submitted) r.mar = static_cast<double>(r.malicious_accepted) / static_cast<double>(r.malicious_submitted);
  if (r.benign_submitted) r.bar = static_cast<double>(r.benign_accepted) / static_cast<double>(r.benign_submitted);
  return r;
}

struct MetricsSummary {
  double acc_last10_mean = 0.0;
  double bsr_last10_mean = 0.0;
  double acc_best_round = 0.0;
  double bsr_best_round = 0.0;
  std::optional<double> mar;
  std::optional<double> bar;
};

inline MetricsSummary summarize(const History& h, std::span<const int> malicious_ids) {
  MetricsSummary s;
  if (h.rounds.empty()) return s;
  const std::size_t n = h.rounds.size();
  const std::size_t tail = std::min<std::size_t>(10, n);
  for (std::size_t i = n - tail; i < n; ++i) {
    s.acc_last10_mean += h.rounds[i].acc;
    s.bsr_last10_mean += h.rounds[i].bsr;
  }
  s.acc_last10_mean /= static_cast<double>(tail);
  s.bsr_last10_mean /= static_cast<double>(tail);
  for (const auto& r : h.rounds) {
    s.acc_best_round = std::max(s.acc_best_round, r.acc);
    s.bsr_best_round = std::max(s.bsr_best_round, r.bsr);
  }
  const auto rates = compute_mar_bar(h, malicious_ids);
  s.mar = rates.mar;
  s.bar = rates.bar;
  return s;
}

// ---------------------------------------------------------------------------
// Running

struct RunResult {
  History history;
  MetricsSummary summary;
  std::vector<CriticalLayerReport> layer_reports;
  std::vector<int> malicious_ids;  // empty for attack-free runs
};

inline RunResult run_experiment(const ExperimentConfig& c) {
  const Simulation sim = build_simulation(c);
  auto adversary = make_adversary(c, sim);
  RunResult out;
  out.history = run_training(sim, adversary.get());
  if (adversary) out.malicious_ids = sim.malicious_ids;
  out.summary = summarize(out.history, out.malicious_ids);
  if (const auto* layered = dynamic_cast<const LayerAdversary*>(adversary.get())) {
    out.layer_reports = layered->state().log;
  }
  return out;
}

inline std::string format_fixed(double v, int precision = 6) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  return std::string(buf, p);
}

inline void write_rounds_csv(std::ostream& os, const RunResult& r) {
  const std::set<int> bad(r.malicious_ids.begin(), r.malicious_ids.end());
  os << "round,acc,bsr,n_sampled,n_malicious,n_accepted_malicious,n_rejected_malicious,n_accepted_benign,"
        "n_rejected_benign,stalled\n";
  for (const auto& rec : r.history.rounds) {
    std::size_t am = 0, rm = 0, ab = 0, rb = 0;
    for (int id : rec.accepted) (bad.contains(id) ? am : ab)++;
    for (int id : rec.rejected) (bad.contains(id) ? rm : rb)++;
    os << rec.round << ',' << format_fixed(rec.acc) << ',' << format_fixed(rec.bsr) << ',' << rec.sampled.size()
       << ',' << am + rm << ',' << am << ',' << rm << ',' << ab << ',' << rb << ',' << (rec.stalled ? 1 : 0) << '\n';
  }
}

inline void write_layers_csv(std::ostream& os, std::span<const CriticalLayerReport> reports) {
  os << "round,layer,delta_bsr,selected,baseline_bsr,achieved_bsr,usable\n";
  for (const auto& rep : reports) {
    for (const auto& s : rep.per_layer) {
      os << rep.round << ',' << s.layer << ',' << format_fixed(s.delta_bsr) << ',' << (rep.is_selected(s.layer) ? 1 : 0)
         << ',' << format_fixed(rep.baseline_bsr) << ',' << format_fixed(rep.achieved_bsr) << ','
         << (rep.usable ? 1 : 0) << '\n';
    }
  }
}

inline nlohmann::ordered_json summary_json(const ExperimentConfig& c, const RunResult& r) {
  auto rate = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    if (v) return *v;
    return "n/a";
  };
  nlohmann::ordered_json j;
  j["attack"] = std::string(to_string(c.attack));
  j["defense"] = std::string(to_string(c.defense));
  j["seed"] = c.seed;
  j["rounds"] = r.history.rounds.size();
  j["acc_last10_mean"] = r.summary.acc_last10_mean;
  j["bsr_last10_mean"] = r.summary.bsr_last10_mean;
  j["acc_best_round"] = r.summary.acc_best_round;
  j["bsr_best_round"] = r.summary.bsr_best_round;
  j["mar"] = rate(r.summary.mar);
  j["bar"] = rate(r.summary.bar);
  return j;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("output", "cannot write '" + path.string() + "'");
  os << text;
}

// Writes rounds.csv, summary.json, layers.csv and final_model.ckpt into `dir`.
inline void write_run_outputs(const std::filesystem::path& dir, const ExperimentConfig& c, const RunResult& r) {
  std::filesystem::create_directories(dir);
  std::ostringstream rounds;
  write_rounds_csv(rounds, r);
  write_text(dir / "rounds.csv", rounds.str());
  std::ostringstream layers;
  write_layers_csv(layers, r.layer_reports);
  write_text(dir / "layers.csv", layers.str());
  write_text(dir / "summary.json", summary_json(c, r).dump(2) + "\n");
  save_checkpoint((dir / "final_model.ckpt").string(), r.history.final_model);
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepParam { kTau, kLambda, kPeriod };

inline SweepParam parse_sweep_param(std::string_view s) {
  if (s == "tau") return SweepParam::kTau;
  if (s == "lambda") return SweepParam::kLambda;
  if (s == "period") return SweepParam::kPeriod;
  throw Error("sweep", "unknown sweep parameter '" + std::string(s) + "' (expected tau, lambda or period)");
}

inline std::string_view to_string(SweepParam p) {
  switch (p) {
    case SweepParam::kTau: return "tau";
    case SweepParam::kLambda: return "lambda";
    case SweepParam::kPeriod: return "period";
  }
  return "?";
}

inline ExperimentConfig with_param(ExperimentConfig c, SweepParam p, double value) {
  switch (p) {
    case SweepParam::kTau: c.attack_cfg.tau = value; break;
    case SweepParam::kLambda: c.attack_cfg.lambda = value; break;
    case SweepParam::kPeriod:
      if (value != std::floor(value)) throw Error("sweep", "period values must be integers");
      c.attack_cfg.detection_period = static_cast<int>(value);
      break;
  }
  c.attack_cfg.validate();
  return c;
}

struct SweepRow {
  double value = 0.0;
  double bsr = 0.0;
  double acc = 0.0;
};

// One full run per value with the shared master seed. Points are independent
// and may run concurrently; rows come back in input order.
inline std::vector<SweepRow> sweep(const ExperimentConfig& base, SweepParam p, std::span<const double> values,
                                   unsigned workers = 1, const std::filesystem::path* out_dir = nullptr) {
  std::vector<ExperimentConfig> points;
  for (double v : values) points.push_back(with_param(base, p, v));
  std::vector<SweepRow> rows(values.size());
  parallel_for(values.size(), workers, [&](std::size_t i) {
    const RunResult r = run_experiment(points[i]);
    rows[i] = {values[i], r.summary.bsr_last10_mean, r.summary.acc_last10_mean};
    if (out_dir) {
      write_run_outputs(*out_dir / ("sweep_" + std::string(to_string(p))) / format_fixed(values[i], 4), points[i], r);
    }
  });
  return rows;
}

inline void write_sweep_csv(std::ostream& os, SweepParam p, std::span<const SweepRow> rows) {
  os << to_string(p) << ",bsr_last10_mean,acc_last10_mean\n";
  for (const auto& r : rows) os << format_fixed(r.value, 4) << ',' << format_fixed(r.bsr) << ',' << format_fixed(r.acc) << '\n';
}

// ---------------------------------------------------------------------------
// Attack x defense grid

struct MatrixCell {
  DefenseKind defense;
  AttackKind attack;
  MetricsSummary summary;
};

inline const std::vector<AttackKind>& matrix_attacks() {
  static const std::vector<AttackKind> k = {AttackKind::kDba, AttackKind::kBadNets, AttackKind::kLpa, AttackKind::kLsa};
  return k;
}

inline std::vector<MatrixCell> run_matrix(const ExperimentConfig& base, unsigned workers = 1) {
  std::vector<MatrixCell> cells;
  for (auto d : kAllDefenses) {
    for (auto a : matrix_attacks()) cells.push_back({d, a, {}});
  }
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    ExperimentConfig c = base;
    c.defense = cells[i].defense;
    c.attack = cells[i].attack;
    cells[i].summary = run_experiment(c).summary;
  });
  return cells;
}

// One row per defense, ACC/BSR column pair per attack (last-10-round means).
inline void write_matrix_csv(std::ostream& os, std::span<const MatrixCell> cells) {
  os << "defense";
  for (auto a : matrix_attacks()) os << ',' << to_string(a) << "_acc," << to_string(a) << "_bsr";
  os << '\n';
  for (auto d : kAllDefenses) {
    os << to_string(d);
    for (auto a : matrix_attacks()) {
      for (const auto& c : cells) {
        if (c.defense == d && c.attack == a) {
          os << ',' << format_fixed(c.summary.acc_last10_mean) << ',' << format_fixed(c.summary.bsr_last10_mean);
        }
      }
    }
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// One-off layer analysis

// Runs `warmup_rounds` attack-free rounds under the configured defense, then
// performs one identification on the lowest-id compromised client.
inline CriticalLayerReport analyze_layers(const ExperimentConfig& c) {
  Simulation sim = build_simulation(c);
  sim.fl.rounds = c.warmup_rounds;
  const History warm = run_training(sim, nullptr);
  const int designated = sim.malicious_ids.front();
  auto rep = identify_bc_layers(warm.final_model, sim.clients[static_cast<std::size_t>(designated)], c.attack_cfg,
                                sim.fl.local, attack_seed(sim, c.warmup_rounds, designated, 0x1d));
  rep.round = c.warmup_rounds;
  return rep;
}

}  // namespace fedlayer
