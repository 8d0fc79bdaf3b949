// fedlayer: run federated backdoor experiments from a key-value config.
//
//   fedlayer run <config>
//   fedlayer sweep <config> --param {tau|lambda|period} --values v1,v2,...
//   fedlayer analyze-layers <config>
//   fedlayer matrix <config>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedlayer/experiment.hpp"

namespace {

using namespace fedlayer;

void print_summary(const MetricsSummary& s) {
  auto rate = [](const std::optional<double>& v) { return v ? format_fixed(*v, 4) : std::string("n/a"); };
  std::cout << "acc_last10_mean " << format_fixed(s.acc_last10_mean, 4) << '\n'
            << "bsr_last10_mean " << format_fixed(s.bsr_last10_mean, 4) << '\n'
            << "acc_best_round  " << format_fixed(s.acc_best_round, 4) << '\n'
            << "bsr_best_round  " << format_fixed(s.bsr_best_round, 4) << '\n'
            << "mar             " << rate(s.mar) << '\n'
            << "bar             " << rate(s.bar) << '\n';
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  write_text(path, text);
}

int cmd_run(const std::string& config_path) {
  std::string stage = "config";
  try {
    const auto cfg = load_config(config_path);
    stage = "run";
    const auto result = run_experiment(cfg);
    stage = "output";
    write_run_outputs(cfg.output_dir, cfg, result);
    print_summary(result.summary);
    std::cout << "wrote " << cfg.output_dir << '\n';
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << stage << "/" << e.stage() << "]: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << '\n';
  }
  return 1;
}

int cmd_sweep(const std::string& config_path, const std::string& param, const std::vector<double>& values,
              unsigned workers) {
  std::string stage = "config";
  try {
    const auto cfg = load_config(config_path);
    const auto p = parse_sweep_param(param);
    stage = "sweep";
    const std::filesystem::path out(cfg.output_dir);
    const auto rows = sweep(cfg, p, values, workers, &out);
    std::ostringstream csv;
    write_sweep_csv(csv, p, rows);
    stage = "output";
    write_file(out / ("sweep_" + param + ".csv"), csv.str());
    std::cout << csv.str();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << stage << "/" << e.stage() << "]: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << '\n';
  }
  return 1;
}

int cmd_analyze(const std::string& config_path) {
  std::string stage = "config";
  try {
    const auto cfg = load_config(config_path);
    stage = "analyze";
    const auto rep = analyze_layers(cfg);
    std::ostringstream csv;
    write_layers_csv(csv, std::span(&rep, 1));
    stage = "output";
    write_file(std::filesystem::path(cfg.output_dir) / "layers.csv", csv.str());
    std::cout << csv.str();
    std::cout << "selected:";
    for (const auto& l : rep.selected) std::cout << ' ' << l;
    std::cout << (rep.usable ? "" : "  (unusable: malicious model did not learn the backdoor)") << '\n';
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << stage << "/" << e.stage() << "]: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << '\n';
  }
  return 1;
}

int cmd_matrix(const std::string& config_path, unsigned workers) {
  std::string stage = "config";
  try {
    const auto cfg = load_config(config_path);
    stage = "matrix";
    const auto cells = run_matrix(cfg, workers);
    std::ostringstream csv;
    write_matrix_csv(csv, cells);
    stage = "output";
    write_file(std::filesystem::path(cfg.output_dir) / "matrix.csv", csv.str());
    std::cout << csv.str();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error [" << stage << "/" << e.stage() << "]: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error [" << stage << "]: " << e.what() << '\n';
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated backdoor experiments: layer-critical analysis and layer-smoothed poisoning"};
  app.require_subcommand(1);

  std::string config;
  auto* run = app.add_subcommand("run", "Run one experiment and write rounds.csv, summary.json, layers.csv");
  run->add_option("config", config, "Config file")->required();

  std::string param;
  std::vector<double> values;
  unsigned workers = 1;
  auto* sw = app.add_subcommand("sweep", "Run one experiment per parameter value");
  sw->add_option("config", config, "Config file")->required();
  sw->add_option("--param", param, "tau, lambda or period")->required();
  sw->add_option("--values", values, "Comma-separated values")->delimiter(',');
  sw->add_option("--workers", workers, "Concurrent sweep points")->default_val(1);

  auto* an = app.add_subcommand("analyze-layers", "Identify backdoor-critical layers once and print the report");
  an->add_option("config", config, "Config file")->required();

  auto* mx = app.add_subcommand("matrix", "Attack x defense grid of last-10-round ACC/BSR");
  mx->add_option("config", config, "Config file")->required();
  mx->add_option("--workers", workers, "Concurrent grid cells")->default_val(1);

  CLI11_PARSE(app, argc, argv);

  if (*run) return cmd_run(config);
  if (*sw) return cmd_sweep(config, param, values, workers);
  if (*an) return cmd_analyze(config);
  if (*mx) return cmd_matrix(config, workers);
  return 1;
}
