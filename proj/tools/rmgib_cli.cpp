// rmgib command-line harness. Every ExperimentConfig key is exposed as a flag
// named after its JSON path ("perturbation.rate" -> --perturbation-rate);
// flags override values loaded with --config.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "rmgib/errors.hpp"
#include "rmgib/harness.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace rmgib;

namespace {

std::string flag_name(const std::string& pointer) {
  std::string s = pointer.substr(1);
  std::replace(s.begin(), s.end(), '/', '-');
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

json parse_scalar(const std::string& raw, const json& like) {
  if (like.is_string()) return raw;
  if (like.is_boolean()) {
    if (raw == "true" || raw == "1") return true;
    if (raw == "false" || raw == "0") return false;
    throw ValidationError("expected true/false, got '" + raw + "'");
  }
  try {
    return json::parse(raw);
  } catch (const json::parse_error&) {
    throw ValidationError("cannot parse value '" + raw + "'");
  }
}

json parse_list(const std::string& raw, const json& like) {
  const json elem = like.empty() ? json(0) : like.front();
  json out = json::array();
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_scalar(item, elem));
  }
  return out;
}

// Config flags shared by the subcommands that run experiments.
class ConfigFlags {
 public:
  void attach(CLI::App* app) {
    app->add_option("--config", config_path_, "JSON config document")->check(CLI::ExistingFile);
    app->add_option("--seed", seeds_, "seed (repeatable)");
    app->add_option("--mia", mia_, "MIA-F, MIA-S or off (repeatable)");
    const json flat = json(to_json(ExperimentConfig{})).flatten();
    for (const auto& [pointer, value] : flat.items()) {
      if (pointer.rfind("/seeds", 0) == 0 || pointer.rfind("/mia", 0) == 0) continue;
      std::string key = pointer;
      // Flattened arrays appear as /a/b/0, /a/b/1, ...; expose the array once.
      const auto last = key.find_last_of('/');
      const bool element = std::all_of(key.begin() + static_cast<std::ptrdiff_t>(last) + 1, key.end(), ::isdigit);
      if (element) {
        key = key.substr(0, last);
        if (values_.count(key)) continue;
      }
      values_[key];
      app->add_option(flag_name(key), values_[key], element ? "comma-separated list" : "");
    }
  }

  ExperimentConfig resolve() const {
    json j = config_path_.empty() ? json(to_json(ExperimentConfig{})) : json(to_json(load_config(config_path_)));
    for (const auto& [key, raw] : values_) {
      if (raw.empty()) continue;
      const json::json_pointer ptr(key);
      j[ptr] = j.at(ptr).is_array() ? parse_list(raw, j.at(ptr)) : parse_scalar(raw, j.at(ptr));
    }
    if (!seeds_.empty()) j["seeds"] = seeds_;
    if (!mia_.empty()) {
      j["mia"] = json::array();
      for (const auto& m : mia_) {
        if (m != "off") j["mia"].push_back(m);
      }
    }
    return config_from_json(j);
  }

 private:
  std::string config_path_;
  std::vector<std::uint64_t> seeds_;
  std::vector<std::string> mia_;
  std::map<std::string, std::string> values_;
};

fs::path default_dir(const std::string& prefix, const ExperimentConfig& cfg) {
  return runs_root() / (prefix + "_" + cfg.model + "_" + config_hash(cfg));
}

std::string stat_text(const std::optional<Stat>& s) {
  if (!s) return "n/a";
  char buf[64];
  if (s->std) {
    std::snprintf(buf, sizeof(buf), "%.4f +- %.4f", s->mean, *s->std);
  } else {
    std::snprintf(buf, sizeof(buf), "%.4f", s->mean);
  }
  return buf;
}

void print_record(const RunRecord& r, const fs::path& dir) {
  std::cout << "model " << r.config.model << "  config " << r.config_hash << "  nodes " << r.node_count << "  edges "
            << r.edge_count << "\n";
  std::cout << "accuracy  " << stat_text(r.accuracy()) << "\n";
  if (r.target_accuracy()) std::cout << "target    " << stat_text(r.target_accuracy()) << "\n";
  if (r.mia_f()) std::cout << "MIA-F ROC " << stat_text(r.mia_f()) << "\n";
  if (r.mia_s()) std::cout << "MIA-S ROC " << stat_text(r.mia_s()) << "\n";
  std::cout << "wrote " << dir.string() << "\n";
}

std::vector<RunRecord> collect_records(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (e.path().filename() == "record.json") files.push_back(e.path());
      }
    } else {
      files.emplace_back(in);
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    if (!in) throw std::runtime_error("cannot open " + f.string());
    out.push_back(record_from_json(json::parse(in)));
  }
  return out;
}

Grid parse_grid(const std::vector<std::string>& specs) {
  const json defaults = to_json(ExperimentConfig{});
  Grid grid;
  for (const auto& spec : specs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ValidationError("grid axis must look like key=v1,v2: " + spec);
    const std::string key = spec.substr(0, eq);
    std::string ptr = "/" + key;
    std::replace(ptr.begin(), ptr.end(), '.', '/');
    const json::json_pointer jp(ptr);
    if (!defaults.contains(jp)) throw ValidationError("grid key '" + key + "' is not a config key");
    const json values = parse_list(spec.substr(eq + 1), json::array({defaults.at(jp)}));
    grid[key] = std::vector<json>(values.begin(), values.end());
  }
  return grid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RM-GIB defense, membership-inference attacks and perturbation harness"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "validate a nodes.tsv/edges.tsv pair");
  std::string nodes_path, edges_path;
  ingest->add_option("--nodes", nodes_path)->required()->check(CLI::ExistingFile);
  ingest->add_option("--edges", edges_path)->required()->check(CLI::ExistingFile);

  ConfigFlags train_flags, attack_flags, perturb_flags, exp_flags, grid_flags, scaling_flags;
  std::string out_dir;

  auto* train = app.add_subcommand("train", "train the configured model and record accuracy (no attacks)");
  train_flags.attach(train);
  train->add_option("--out", out_dir, "run directory");

  auto* attack = app.add_subcommand("attack", "attack the posteriors persisted by an earlier train run");
  attack_flags.attach(attack);
  std::string run_dir;
  attack->add_option("--run", run_dir, "directory written by train/experiment")->required()->check(CLI::ExistingDirectory);

  auto* perturb = app.add_subcommand("perturb", "write a perturbed copy of the dataset");
  perturb_flags.attach(perturb);
  std::string out_nodes, out_edges;
  perturb->add_option("--out-nodes", out_nodes)->required();
  perturb->add_option("--out-edges", out_edges)->required();

  auto* experiment = app.add_subcommand("experiment", "full pipeline: data, perturbation, model, accuracy, attacks");
  exp_flags.attach(experiment);
  experiment->add_option("--out", out_dir, "run directory");

  auto* grid_cmd = app.add_subcommand("grid", "Cartesian grid with validation-only selection");
  grid_flags.attach(grid_cmd);
  std::vector<std::string> axes;
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  grid_cmd->add_option("--grid", axes, "axis key=v1,v2,... (repeatable)")->required();
  grid_cmd->add_option("--workers", workers, "parallel grid points");
  grid_cmd->add_option("--out", out_dir, "grid directory");

  auto* scaling = app.add_subcommand("scaling", "per-epoch time on SBM graphs at fixed average degree");
  scaling_flags.attach(scaling);
  std::vector<std::size_t> sizes{500, 1000, 2000};
  double degree = 4.0;
  int probe_epochs = 5;
  scaling->add_option("--sizes", sizes);
  scaling->add_option("--degree", degree);
  scaling->add_option("--probe-epochs", probe_epochs);

  auto* report = app.add_subcommand("report", "summary.csv, trends.json and plots from persisted records");
  std::vector<std::string> inputs;
  report->add_option("inputs", inputs, "record.json files or directories")->required();
  report->add_option("--out", out_dir, "report directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      const LoadedGraph lg = load_graph(nodes_path, edges_path);
      std::cout << "nodes " << lg.graph.node_count() << "\nedges " << lg.graph.edge_count() << "\nfeatures "
                << lg.graph.feature_dim() << "\nclasses " << lg.graph.class_count() << "\nduplicate_edges "
                << lg.duplicate_edges << "\nself_loops " << lg.self_loops << "\n";
    } else if (*train || *experiment) {
      ExperimentConfig cfg = (*train ? train_flags : exp_flags).resolve();
      if (*train) cfg.mia.clear();
      const fs::path dir = out_dir.empty() ? default_dir(*train ? "train" : "experiment", cfg) : fs::path(out_dir);
      print_record(run_experiment(cfg, {dir}), dir);
    } else if (*attack) {
      ExperimentConfig cfg = load_config(fs::path(run_dir) / "config.json");
      const ExperimentConfig flags = attack_flags.resolve();
      cfg.mia = flags.mia;
      cfg.attack = flags.attack;
      if (cfg.mia.empty()) throw ValidationError("attack: no MIA setting selected");
      const Graph clean = load_dataset(cfg.dataset);
      for (std::uint64_t seed : cfg.seeds) {
        const fs::path dump_path = fs::path(run_dir) / ("seed_" + std::to_string(seed)) / "posteriors.jsonl";
        const PosteriorDump dump = read_posterior_dump(dump_path);
        const SeedSetup setup = prepare_seed(cfg, clean, seed);
        for (const auto& name : cfg.mia) {
          const MiaSetting setting = parse_mia_setting(name);
          const double roc = attack_dump(cfg, setup, dump, setting, seed);
          write_attack_report(dump_path.parent_path() / ("attack_report_" + name + ".json"), setting, roc,
                              setup.splits.train_ids.size(), setup.splits.train_ids.size(),
                              attack_config_hash(cfg.attack, cfg.train_options()));
          std::printf("seed %llu %s ROC %.4f\n", static_cast<unsigned long long>(seed), name.c_str(), roc);
        }
      }
    } else if (*perturb) {
      const ExperimentConfig cfg = perturb_flags.resolve();
      const Graph clean = load_dataset(cfg.dataset);
      const SeedSetup setup = prepare_seed(cfg, clean, cfg.seeds.front());
      save_graph(setup.graph, out_nodes, out_edges);
      std::cout << "edges " << clean.edge_count() << " -> " << setup.graph.edge_count() << "\n";
    } else if (*grid_cmd) {
      const ExperimentConfig base = grid_flags.resolve();
      const fs::path dir = out_dir.empty() ? runs_root() / ("grid_" + config_hash(base)) : fs::path(out_dir);
      const GridResult result = run_grid(base, parse_grid(axes), workers, {dir});
      emit_report(result.records, dir / "report");
      for (std::size_t i = 0; i < result.records.size(); ++i) {
        const auto& r = result.records[i];
        std::printf("%s%-10s %s val %.4f acc %.4f\n", i == result.best ? "* " : "  ", r.config.model.c_str(),
                    r.config_hash.c_str(), r.val_accuracy().mean, r.accuracy().mean);
      }
      std::cout << "wrote " << dir.string() << "\n";
    } else if (*scaling) {
      const ExperimentConfig base = scaling_flags.resolve();
      const auto rows = scaling_probe(sizes, base, degree, probe_epochs);
      std::printf("%8s %8s %14s\n", "nodes", "edges", "sec/epoch");
      for (const auto& r : rows) std::printf("%8zu %8zu %14.6f\n", r.nodes, r.edges, r.seconds_per_epoch);
    } else if (*report) {
      const auto records = collect_records(inputs);
      emit_report(records, out_dir);
      std::cout << records.size() << " records -> " << out_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
