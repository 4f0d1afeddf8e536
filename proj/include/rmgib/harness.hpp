#pragma once

// Experiment orchestration: JSON configuration, the per-seed pipeline
// (data -> perturbation -> model -> accuracy -> membership attacks),
// grid search with validation-only selection, reports and the scaling probe.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmgib/attacks.hpp"
#include "rmgib/graph.hpp"
#include "rmgib/mi_supervisor.hpp"
#include "rmgib/trainer.hpp"

namespace rmgib {

inline const std::vector<double> kBetaGrid{0.0001, 0.0003, 0.001, 0.003, 0.03, 0.1};
inline const std::vector<double> kGammaGrid{1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
inline const std::vector<std::string> kModels{"gcn", "gcn_pl", "gcn_ib", "rmgib", "rmgib_no_s", "rmgib_no_pl"};

struct DatasetSpec {
  std::string kind = "sbm";  // sbm | files
  std::string nodes_path;
  std::string edges_path;
  SbmParams sbm{{350, 350, 350, 350, 350, 350, 350}, 0.0095, 0.0004, 200, 1.5};
  std::uint64_t seed = 0;
};

struct PerturbationSpec {
  std::string kind = "none";  // none | random | heterophilic
  double rate = 0.0;
  double target_fraction = 0.0;  // > 0: injected edges touch this fraction of test nodes
};

struct ExperimentConfig {
  DatasetSpec dataset;
  double label_rate = 0.02;
  std::size_t val_count = 500;
  std::size_t test_count = 1000;
  std::string model = "rmgib";
  GibConfig gib;
  double threshold = 0.5;
  MiOptions mi;
  double pseudo_fraction = 1.0;
  double pseudo_min_confidence = 0.0;
  PerturbationSpec perturbation;
  std::vector<std::string> mia{"MIA-F", "MIA-S"};
  AttackOptions attack;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  bool grid_mode = false;  // restrict beta/gamma to the published grids

  TrainOptions train_options() const;
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
// Unknown keys are rejected; missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& cfg);
// Hex FNV-1a of the canonical JSON, excluding the seed list.
std::string config_hash(const ExperimentConfig& cfg);

Graph load_dataset(const DatasetSpec& spec);

struct SeedMetrics {
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double val_accuracy = 0.0;
  std::optional<double> target_accuracy;
  std::optional<double> mia_f;
  std::optional<double> mia_s;
  double seconds = 0.0;
};

struct Stat {
  double mean = 0.0;
  std::optional<double> std;  // sample std; absent with fewer than two values
  std::size_t n = 0;
};

Stat summarize(const std::vector<double>& values);

struct RunRecord {
  ExperimentConfig config;
  std::string config_hash;
  std::size_t node_count = 0;
  std::size_t edge_count = 0;
  std::vector<SeedMetrics> per_seed;
  double wall_seconds = 0.0;

  Stat accuracy() const;
  Stat val_accuracy() const;
  std::optional<Stat> target_accuracy() const;
  std::optional<Stat> mia_f() const;
  std::optional<Stat> mia_s() const;
};

nlohmann::ordered_json to_json(const RunRecord& r);
RunRecord record_from_json(const nlohmann::json& j);

// Root for run directories: $RMGIB_RUNS_DIR if set, else ./runs.
std::filesystem::path runs_root();

struct RunOptions {
  std::optional<std::filesystem::path> out_dir;  // persist when set
};

// Split and (optionally) perturbed graph for one seed, exactly as run_experiment builds them.
struct SeedSetup {
  Splits splits;
  Graph graph;                  // deployed graph the target trains on
  std::vector<NodeId> targets;  // targeted test nodes, empty when untargeted
};

SeedSetup prepare_seed(const ExperimentConfig& cfg, const Graph& clean, std::uint64_t seed);

// Trains (or reuses) the shadow/attack pair for `setting` and scores the dump:
// members are the train split, non-members a size-matched test holdout.
double attack_dump(const ExperimentConfig& cfg, const SeedSetup& setup, const PosteriorDump& dump,
                   MiaSetting setting, std::uint64_t seed);

RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

// Metric equality excluding wall-clock fields.
bool same_metrics(const RunRecord& a, const RunRecord& b);

struct GridResult {
  std::vector<RunRecord> records;  // Cartesian-product order
  std::size_t best = 0;            // highest mean validation accuracy; ties -> smallest config hash
};

// Keys are config JSON keys; dotted keys reach nested objects ("perturbation.rate").
using Grid = std::map<std::string, std::vector<nlohmann::json>>;

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const Grid& grid);
std::size_t select_best(const std::vector<RunRecord>& records);
GridResult run_grid(const ExperimentConfig& base, const Grid& grid, std::size_t workers,
                    const RunOptions& options = {});

// summary.csv, trends.json, label_rate.svg and beta_gamma_<model>.svg.
void emit_report(const std::vector<RunRecord>& records, const std::filesystem::path& out_dir);

struct ScalingRow {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  double seconds_per_epoch = 0.0;  // median
};

// SBM graphs at a fixed expected degree; times full-batch RM-GIB epochs.
std::vector<ScalingRow> scaling_probe(const std::vector<std::size_t>& sizes, const ExperimentConfig& base,
                                      double average_degree = 4.0, int epochs = 5);

}  // namespace rmgib
