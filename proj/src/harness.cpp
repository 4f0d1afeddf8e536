#include "rmgib/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <utility>

#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

TrainOptions ExperimentConfig::train_options() const {
  return {gib.epochs, gib.lr, gib.weight_decay, gib.hidden, gib.layers, gib.aggregator};
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string mask_mode_name(MaskMode m) { return m == MaskMode::hard ? "hard" : "relaxed"; }

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "hard") return MaskMode::hard;
  if (s == "relaxed") return MaskMode::relaxed;
  throw ValidationError("mask_mode must be hard or relaxed");
}

void check_keys(const json& given, const ojson& known, const std::string& path) {
  if (!given.is_object()) throw ValidationError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!known.contains(key)) throw ValidationError("config: unknown key '" + full + "'");
    if (known.at(key).is_object() && key != "sbm") check_keys(value, known.at(key), full);
    if (key == "sbm") check_keys(value, known.at(key), full);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ojson to_json(const ExperimentConfig& c) {
  ojson sbm{{"block_sizes", c.dataset.sbm.block_sizes},
            {"p_in", c.dataset.sbm.p_in},
            {"p_out", c.dataset.sbm.p_out},
            {"feature_dim", c.dataset.sbm.feature_dim},
            {"feature_signal", c.dataset.sbm.feature_signal}};
  ojson j;
  j["dataset"] = ojson{{"kind", c.dataset.kind},
                       {"nodes", c.dataset.nodes_path},
                       {"edges", c.dataset.edges_path},
                       {"seed", c.dataset.seed},
                       {"sbm", sbm}};
  j["label_rate"] = c.label_rate;
  j["val_count"] = c.val_count;
  j["test_count"] = c.test_count;
  j["model"] = c.model;
  j["beta"] = c.gib.beta;
  j["gamma"] = c.gib.gamma;
  j["prior_rate"] = c.gib.prior_rate;
  j["threshold"] = c.threshold;
  j["temperature"] = c.gib.temperature;
  j["hidden_dim"] = c.gib.hidden;
  j["code_dim"] = c.gib.code_dim;
  j["embed_dim"] = c.gib.embed_dim;
  j["layers"] = c.gib.layers;
  j["aggregator"] = to_string(c.gib.aggregator);
  j["mask_mode"] = mask_mode_name(c.gib.mask_mode);
  j["epochs"] = c.gib.epochs;
  j["lr"] = c.gib.lr;
  j["weight_decay"] = c.gib.weight_decay;
  j["mi_hidden"] = c.mi.hidden;
  j["mi_embed_dim"] = c.mi.embed_dim;
  j["mi_epochs"] = c.mi.epochs;
  j["mi_lr"] = c.mi.lr;
  j["negatives_per_edge"] = c.mi.negatives_per_edge;
  j["pseudo_fraction"] = c.pseudo_fraction;
  j["pseudo_min_confidence"] = c.pseudo_min_confidence;
  j["perturbation"] = ojson{{"kind", c.perturbation.kind},
                            {"rate", c.perturbation.rate},
                            {"target_fraction", c.perturbation.target_fraction}};
  j["mia"] = c.mia;
  j["attack_hidden"] = c.attack.hidden;
  j["attack_epochs"] = c.attack.epochs;
  j["attack_lr"] = c.attack.lr;
  j["attack_sorted"] = c.attack.sorted_input;
  j["seeds"] = c.seeds;
  j["grid_mode"] = c.grid_mode;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j, to_json(c), "");
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      read(d, "kind", c.dataset.kind);
      read(d, "nodes", c.dataset.nodes_path);
      read(d, "edges", c.dataset.edges_path);
      read(d, "seed", c.dataset.seed);
      if (d.contains("sbm")) {
        const auto& s = d.at("sbm");
        read(s, "block_sizes", c.dataset.sbm.block_sizes);
        read(s, "p_in", c.dataset.sbm.p_in);
        read(s, "p_out", c.dataset.sbm.p_out);
        read(s, "feature_dim", c.dataset.sbm.feature_dim);
        read(s, "feature_signal", c.dataset.sbm.feature_signal);
      }
    }
    read(j, "label_rate", c.label_rate);
    read(j, "val_count", c.val_count);
    read(j, "test_count", c.test_count);
    read(j, "model", c.model);
    read(j, "beta", c.gib.beta);
    read(j, "gamma", c.gib.gamma);
    read(j, "prior_rate", c.gib.prior_rate);
    read(j, "threshold", c.threshold);
    read(j, "temperature", c.gib.temperature);
    read(j, "hidden_dim", c.gib.hidden);
    read(j, "code_dim", c.gib.code_dim);
    read(j, "embed_dim", c.gib.embed_dim);
    read(j, "layers", c.gib.layers);
    if (j.contains("aggregator")) c.gib.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
    if (j.contains("mask_mode")) c.gib.mask_mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
    read(j, "epochs", c.gib.epochs);
    read(j, "lr", c.gib.lr);
    read(j, "weight_decay", c.gib.weight_decay);
    read(j, "mi_hidden", c.mi.hidden);
    read(j, "mi_embed_dim", c.mi.embed_dim);
    read(j, "mi_epochs", c.mi.epochs);
    read(j, "mi_lr", c.mi.lr);
    read(j, "negatives_per_edge", c.mi.negatives_per_edge);
    read(j, "pseudo_fraction", c.pseudo_fraction);
    read(j, "pseudo_min_confidence", c.pseudo_min_confidence);
    if (j.contains("perturbation")) {
      const auto& p = j.at("perturbation");
      read(p, "kind", c.perturbation.kind);
      read(p, "rate", c.perturbation.rate);
      read(p, "target_fraction", c.perturbation.target_fraction);
    }
    read(j, "mia", c.mia);
    read(j, "attack_hidden", c.attack.hidden);
    read(j, "attack_epochs", c.attack.epochs);
    read(j, "attack_lr", c.attack.lr);
    read(j, "attack_sorted", c.attack.sorted_input);
    read(j, "seeds", c.seeds);
    read(j, "grid_mode", c.grid_mode);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.mi.threshold = c.threshold;
  validate(c);
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  return config_from_json(j);
}

void validate(const ExperimentConfig& c) {
  if (std::find(kModels.begin(), kModels.end(), c.model) == kModels.end()) {
    throw ValidationError("unknown model '" + c.model + "'");
  }
  if (c.dataset.kind != "sbm" && c.dataset.kind != "files") throw ValidationError("dataset.kind must be sbm or files");
  if (!(c.label_rate > 0.0 && c.label_rate < 1.0)) throw ValidationError("label_rate must lie in (0, 1)");
  if (c.gib.beta < 0.0 || c.gib.gamma < 0.0) throw ValidationError("beta and gamma must be nonnegative");
  if (!(c.gib.prior_rate > 0.0 && c.gib.prior_rate < 1.0)) throw ValidationError("prior_rate must lie in (0, 1)");
  if (!(c.threshold >= 0.0 && c.threshold <= 1.0)) throw ValidationError("threshold must lie in [0, 1]");
  if (!(c.gib.temperature > 0.0)) throw ValidationError("temperature must be positive");
  if (c.gib.layers < 1 || c.gib.hidden < 1 || c.gib.code_dim < 1 || c.gib.embed_dim < 1) {
    throw ValidationError("layers and widths must be positive");
  }
  if (c.gib.epochs < 1 || c.mi.epochs < 1 || c.attack.epochs < 1) throw ValidationError("epoch counts must be >= 1");
  if (c.mi.negatives_per_edge < 1) throw ValidationError("negatives_per_edge must be >= 1");
  if (!(c.pseudo_fraction >= 0.0 && c.pseudo_fraction <= 1.0)) throw ValidationError("pseudo_fraction must lie in [0, 1]");
  const auto& p = c.perturbation;
  if (p.kind != "none" && p.kind != "random" && p.kind != "heterophilic") {
    throw ValidationError("perturbation.kind must be none, random or heterophilic");
  }
  if (p.rate < 0.0) throw ValidationError("perturbation.rate must be nonnegative");
  if (!(p.target_fraction >= 0.0 && p.target_fraction <= 1.0)) throw ValidationError("target_fraction must lie in [0, 1]");
  for (const auto& m : c.mia) parse_mia_setting(m);
  if (c.seeds.empty()) throw ValidationError("at least one seed is required");
  if (c.grid_mode) {
    auto on_grid = [](double v, const std::vector<double>& grid) {
      return std::any_of(grid.begin(), grid.end(), [&](double g) { return std::abs(g - v) <= 1e-12 * g; });
    };
    if (!on_grid(c.gib.beta, kBetaGrid)) throw ValidationError("grid mode: beta not on the published grid");
    if (!on_grid(c.gib.gamma, kGammaGrid)) throw ValidationError("grid mode: gamma not on the published grid");
  }
}

std::string config_hash(const ExperimentConfig& cfg) {
  ojson j = to_json(cfg);
  j.erase("seeds");
  return hex64(fnv1a(j.dump()));
}

Graph load_dataset(const DatasetSpec& spec) {
  if (spec.kind == "files") return load_graph(spec.nodes_path, spec.edges_path).graph;
  return generate_sbm(spec.sbm, spec.seed);
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.n = values.size();
  if (values.empty()) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

namespace {

template <typename F>
std::optional<Stat> optional_stat(const std::vector<SeedMetrics>& rows, F get) {
  std::vector<double> v;
  for (const auto& r : rows) {
    if (auto x = get(r)) v.push_back(*x);
  }
  if (v.empty()) return std::nullopt;
  return summarize(v);
}

}  // namespace

Stat RunRecord::accuracy() const {
  std::vector<double> v;
  for (const auto& r : per_seed) v.push_back(r.accuracy);
  return summarize(v);
}

Stat RunRecord::val_accuracy() const {
  std::vector<double> v;
  for (const auto& r : per_seed) v.push_back(r.val_accuracy);
  return summarize(v);
}

std::optional<Stat> RunRecord::target_accuracy() const {
  return optional_stat(per_seed, [](const SeedMetrics& m) { return m.target_accuracy; });
}
std::optional<Stat> RunRecord::mia_f() const {
  return optional_stat(per_seed, [](const SeedMetrics& m) { return m.mia_f; });
}
std::optional<Stat> RunRecord::mia_s() const {
  return optional_stat(per_seed, [](const SeedMetrics& m) { return m.mia_s; });
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

ojson stat_json(const std::optional<Stat>& s) {
  if (!s) return nullptr;
  return ojson{{"mean", s->mean}, {"std", opt(s->std)}, {"n", s->n}};
}

}  // namespace

ojson to_json(const RunRecord& r) {
  ojson seeds = ojson::array();
  for (const auto& m : r.per_seed) {
    seeds.push_back({{"seed", m.seed},
                     {"accuracy", m.accuracy},
                     {"val_accuracy", m.val_accuracy},
                     {"target_accuracy", opt(m.target_accuracy)},
                     {"mia_f_roc", opt(m.mia_f)},
                     {"mia_s_roc", opt(m.mia_s)},
                     {"seconds", m.seconds}});
  }
  return ojson{{"config_hash", r.config_hash},
               {"config", to_json(r.config)},
               {"node_count", r.node_count},
               {"edge_count", r.edge_count},
               {"per_seed", seeds},
               {"summary",
                {{"accuracy", stat_json(r.accuracy())},
                 {"val_accuracy", stat_json(r.val_accuracy())},
                 {"target_accuracy", stat_json(r.target_accuracy())},
                 {"mia_f_roc", stat_json(r.mia_f())},
                 {"mia_s_roc", stat_json(r.mia_s())}}},
               {"wall_seconds", r.wall_seconds}};
}

RunRecord record_from_json(const json& j) {
  RunRecord r;
  r.config = config_from_json(j.at("config"));
  r.config_hash = j.at("config_hash").get<std::string>();
  r.node_count = j.at("node_count").get<std::size_t>();
  r.edge_count = j.at("edge_count").get<std::size_t>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
  for (const auto& s : j.at("per_seed")) {
    SeedMetrics m;
    m.seed = s.at("seed").get<std::uint64_t>();
    m.accuracy = s.at("accuracy").get<double>();
    m.val_accuracy = s.at("val_accuracy").get<double>();
    m.target_accuracy = opt_from(s, "target_accuracy");
    m.mia_f = opt_from(s, "mia_f_roc");
    m.mia_s = opt_from(s, "mia_s_roc");
    m.seconds = s.value("seconds", 0.0);
    r.per_seed.push_back(m);
  }
  return r;
}

fs::path runs_root() {
  if (const char* env = std::getenv("RMGIB_RUNS_DIR"); env && *env) return env;
  return "runs";
}

namespace {

// Shadow and attack models depend only on the deployed graph, the target's
// training set, the setting and the seed, so target models sharing those
// reuse one attacker.
class AttackCache {
 public:
  std::shared_ptr<const AttackModel> get(const std::string& key) {
    std::lock_guard lock(mu_);
    auto it = map_.find(key);
    return it == map_.end() ? nullptr : it->second;
  }
  void put(const std::string& key, std::shared_ptr<const AttackModel> m) {
    std::lock_guard lock(mu_);
    map_.emplace(key, std::move(m));
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const AttackModel>> map_;
};

AttackCache& attack_cache() {
  static AttackCache cache;
  return cache;
}

struct TrainedTarget {
  Matrix posteriors;
  double val_accuracy = 0.0;
};

TrainedTarget train_target(const ExperimentConfig& cfg, const Graph& g, const Splits& splits, std::uint64_t seed,
                           const std::optional<fs::path>& dir) {
  const TrainOptions opts = cfg.train_options();
  const std::uint64_t model_seed = derive_seed(seed, "model");
  if (cfg.model == "gcn" || cfg.model == "gcn_pl") {
    GcnModel m = baseline_gcn_train(g, splits.train_ids, splits.train_labels, splits.val_ids, opts, model_seed);
    if (cfg.model == "gcn_pl") {
      const PseudoLabelSet pl = collect_pseudo_labels(m.posteriors, splits, cfg.pseudo_fraction,
                                                      cfg.pseudo_min_confidence, derive_seed(seed, "pseudo"));
      if (dir) write_pseudo_labels(*dir / "pseudo_labels.json", pl);
      m = baseline_gcn_train(g, pl.node_ids, pl.labels, splits.val_ids, opts, derive_seed(model_seed, "stage2"));
    }
    if (dir) nn::save_checkpoint(*dir / "checkpoints" / "model.ckpt", {&m.stack.params()});
    return {m.posteriors, m.best_val_acc};
  }
  if (cfg.model == "gcn_ib") {
    IbGcnModel m = gcn_ib_train(g, splits.train_ids, splits.train_labels, splits.val_ids, opts, cfg.gib.beta,
                                cfg.gib.code_dim, model_seed);
    if (dir) nn::save_checkpoint(*dir / "checkpoints" / "model.ckpt", {&m.f_x.params(), &m.stack.params()});
    return {m.posteriors, m.best_val_acc};
  }

  GibConfig gib = cfg.gib;
  if (cfg.model == "rmgib_no_s") gib.gamma = 0.0;
  std::optional<NeighborPartition> partition;
  if (gib.gamma > 0.0) {
    MiOptions mi = cfg.mi;
    mi.threshold = cfg.threshold;
    const MIEstimator est = train_mi_estimator(g, mi, derive_seed(seed, "mi"));
    partition = partition_neighbors(g, est);
    if (dir) {
      save_partition(*dir / "partition.json", *partition, nn::params_hash({&est.f_M.params()}), g.fingerprint());
      nn::save_checkpoint(*dir / "checkpoints" / "mi_estimator.ckpt", {&est.f_M.params()});
    }
  }
  const NeighborPartition* part = partition ? &*partition : nullptr;
  GibTrainResult s1 = stage1_train(g, splits, part, gib, model_seed);
  Matrix post = gib_predict_all(s1.model, g, gib.layers);
  if (dir) {
    write_loss_curve(*dir / "loss_curve_stage1.csv", s1.curve);
    nn::save_checkpoint(*dir / "checkpoints" / "stage1.ckpt", std::as_const(s1.model).param_sets());
  }
  if (cfg.model == "rmgib_no_pl") {
    if (dir) write_loss_curve(*dir / "loss_curve.csv", s1.curve);
    return {post, s1.best_val_acc};
  }
  const PseudoLabelSet pl = collect_pseudo_labels(post, splits, cfg.pseudo_fraction, cfg.pseudo_min_confidence,
                                                  derive_seed(seed, "pseudo"));
  GibTrainResult s2 = stage2_train(g, pl, splits.val_ids, part, gib, model_seed);
  if (dir) {
    write_pseudo_labels(*dir / "pseudo_labels.json", pl);
    write_loss_curve(*dir / "loss_curve.csv", s2.curve);
    nn::save_checkpoint(*dir / "checkpoints" / "stage2.ckpt", std::as_const(s2.model).param_sets());
  }
  return {gib_predict_all(s2.model, g, gib.layers), s2.best_val_acc};
}

std::shared_ptr<const AttackModel> attacker_for(const ExperimentConfig& cfg, const Graph& g, const Splits& splits,
                                                MiaSetting setting, std::uint64_t seed) {
  const TrainOptions shadow_opts = cfg.train_options();
  const std::uint64_t atk_hash = attack_config_hash(cfg.attack, shadow_opts);
  std::string ids;
  for (NodeId v : splits.train_ids) ids += std::to_string(v) + ",";
  const std::string key =
      hex64(g.fingerprint()) + "/" + hex64(fnv1a(ids)) + "/" + to_string(setting) + "/" + std::to_string(seed) + "/" + hex64(atk_hash);
  if (auto hit = attack_cache().get(key)) return hit;
  const std::uint64_t s = derive_seed(seed, "attack/" + to_string(setting));
  const ShadowSetup setup = build_shadow_setup(g, splits.train_ids, setting, s);
  const AttackDataset data = train_shadow_and_collect(setup, shadow_opts, s);
  auto atk = std::make_shared<const AttackModel>(train_attack_model(data, cfg.attack, s));
  attack_cache().put(key, atk);
  return atk;
}

SeedMetrics run_seed(const ExperimentConfig& cfg, const Graph& clean, std::uint64_t seed,
                     const std::optional<fs::path>& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  SeedMetrics m;
  m.seed = seed;
  if (dir) fs::create_directories(*dir / "checkpoints");
  const SeedSetup setup = prepare_seed(cfg, clean, seed);
  const Splits& splits = setup.splits;

  const TrainedTarget target = train_target(cfg, setup.graph, splits, seed, dir);
  std::vector<int> test_labels;
  for (NodeId v : splits.test_ids) test_labels.push_back(clean.labels()[static_cast<std::size_t>(v)]);
  m.accuracy = accuracy(target.posteriors, splits.test_ids, test_labels);
  m.val_accuracy = target.val_accuracy;
  if (!setup.targets.empty()) {
    std::vector<int> tl;
    for (NodeId v : setup.targets) tl.push_back(clean.labels()[static_cast<std::size_t>(v)]);
    m.target_accuracy = accuracy(target.posteriors, setup.targets, tl);
  }

  if (!cfg.mia.empty()) {
    const PosteriorDump dump = make_posterior_dump(target.posteriors, splits);
    if (dir) write_posterior_dump(*dir / "posteriors.jsonl", dump);
    for (const auto& name : cfg.mia) {
      const MiaSetting setting = parse_mia_setting(name);
      const double roc = attack_dump(cfg, setup, dump, setting, seed);
      (setting == MiaSetting::full ? m.mia_f : m.mia_s) = roc;
      if (dir) {
        write_attack_report(*dir / ("attack_report_" + name + ".json"), setting, roc, splits.train_ids.size(),
                            splits.train_ids.size(), attack_config_hash(cfg.attack, cfg.train_options()));
      }
    }
  }
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

template <typename F>
auto staged(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("[") + stage + "] " + e.what());
  }
}

}  // namespace

SeedSetup prepare_seed(const ExperimentConfig& cfg, const Graph& clean, std::uint64_t seed) {
  SeedSetup s;
  s.splits = split_nodes(clean, cfg.label_rate, cfg.val_count, cfg.test_count, derive_seed(seed, "split"));
  s.graph = clean;
  const auto& p = cfg.perturbation;
  if (p.kind == "none" || p.rate == 0.0) return s;
  if (p.target_fraction > 0.0) {
    s.targets = s.splits.test_ids;
    Rng rng(derive_seed(seed, "targets"));
    std::shuffle(s.targets.begin(), s.targets.end(), rng);
    s.targets.resize(static_cast<std::size_t>(std::ceil(p.target_fraction * static_cast<double>(s.targets.size()))));
    std::sort(s.targets.begin(), s.targets.end());
  }
  const std::uint64_t ps = derive_seed(seed, "perturb");
  Perturbation pert = p.kind == "random" ? perturb_random(clean, p.rate, ps)
                                         : perturb_heterophilic(clean, p.rate, clean.labels(), ps, s.targets);
  s.graph = std::move(pert.graph);
  return s;
}

double attack_dump(const ExperimentConfig& cfg, const SeedSetup& setup, const PosteriorDump& dump,
                   MiaSetting setting, std::uint64_t seed) {
  const auto atk = attacker_for(cfg, setup.graph, setup.splits, setting, seed);
  const auto holdout = sample_holdout(setup.splits, setup.splits.train_ids.size(), derive_seed(seed, "holdout"));
  return evaluate_mia(dump, setup.splits.train_ids, holdout, *atk);
}

RunRecord run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord r;
  r.config = cfg;
  r.config_hash = config_hash(cfg);
  const Graph clean = staged("load", [&] { return load_dataset(cfg.dataset); });
  r.node_count = clean.node_count();
  r.edge_count = clean.edge_count();
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    std::ofstream(*options.out_dir / "config.json") << to_json(cfg).dump(2) << '\n';
  }
  for (std::uint64_t seed : cfg.seeds) {
    std::optional<fs::path> dir;
    if (options.out_dir) dir = *options.out_dir / ("seed_" + std::to_string(seed));
    r.per_seed.push_back(staged("seed", [&] { return run_seed(cfg, clean, seed, dir); }));
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (options.out_dir) std::ofstream(*options.out_dir / "record.json") << to_json(r).dump(2) << '\n';
  return r;
}

bool same_metrics(const RunRecord& a, const RunRecord& b) {
  if (a.config_hash != b.config_hash || a.per_seed.size() != b.per_seed.size()) return false;
  for (std::size_t i = 0; i < a.per_seed.size(); ++i) {
    const auto& x = a.per_seed[i];
    const auto& y = b.per_seed[i];
    if (x.seed != y.seed || x.accuracy != y.accuracy || x.val_accuracy != y.val_accuracy ||
        x.target_accuracy != y.target_accuracy || x.mia_f != y.mia_f || x.mia_s != y.mia_s) {
      return false;
    }
  }
  return true;
}

std::vector<ExperimentConfig> expand_grid(const ExperimentConfig& base, const Grid& grid) {
  if (grid.empty()) throw ValidationError("grid is empty");
  for (const auto& [key, values] : grid) {
    if (values.empty()) throw ValidationError("grid key '" + key + "' has no values");
  }
  const ojson base_json = to_json(base);
  std::vector<ExperimentConfig> out;
  std::vector<std::size_t> idx(grid.size(), 0);
  while (true) {
    json j = base_json;
    std::size_t k = 0;
    for (const auto& [key, values] : grid) {
      std::string ptr = "/" + key;
      std::replace(ptr.begin(), ptr.end(), '.', '/');
      const json::json_pointer jp(ptr);
      if (!j.contains(jp)) throw ValidationError("grid key '" + key + "' is not a config key");
      j[jp] = values[idx[k++]];
    }
    out.push_back(config_from_json(j));
    // Odometer over keys, last key fastest.
    std::size_t pos = grid.size();
    while (pos > 0) {
      --pos;
      auto it = std::next(grid.begin(), static_cast<std::ptrdiff_t>(pos));
      if (++idx[pos] < it->second.size()) break;
      idx[pos] = 0;
      if (pos == 0) return out;
    }
    if (grid.size() == 0) return out;
  }
}

std::size_t select_best(const std::vector<RunRecord>& records) {
  if (records.empty()) throw ValidationError("no records to select from");
  // Validation accuracy only; test metrics never enter the comparison.
  std::size_t best = 0;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const double a = records[i].val_accuracy().mean;
    const double b = records[best].val_accuracy().mean;
    if (a > b || (a == b && records[i].config_hash < records[best].config_hash)) best = i;
  }
  return best;
}

GridResult run_grid(const ExperimentConfig& base, const Grid& grid, std::size_t workers, const RunOptions& options) {
  const auto configs = expand_grid(base, grid);
  GridResult result;
  result.records.resize(configs.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr error;
  auto work = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        RunOptions o;
        if (options.out_dir) {
          o.out_dir = *options.out_dir / (std::to_string(i) + "_" + configs[i].model + "_" + config_hash(configs[i]));
        }
        result.records[i] = run_experiment(configs[i], o);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(workers, configs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  result.best = select_best(result.records);
  if (options.out_dir) {
    ojson summary{{"best_index", result.best}, {"best_config_hash", result.records[result.best].config_hash}};
    std::ofstream(*options.out_dir / "grid.json") << summary.dump(2) << '\n';
  }
  return result;
}

namespace {

std::string fmt(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(6) << v;
  return s.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

std::string perturbation_label(const ExperimentConfig& c) {
  return c.perturbation.kind == "none" || c.perturbation.rate == 0.0 ? "none" : c.perturbation.kind;
}

std::optional<double> mean_of(const std::optional<Stat>& s) {
  return s ? std::optional<double>(s->mean) : std::nullopt;
}

// Maps v in [lo, hi] to a blue-to-red fill.
std::string heat(double v, double lo, double hi) {
  const double t = hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5;
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(255 * t), 64, static_cast<int>(255 * (1 - t)));
  return buf;
}

void write_label_rate_svg(const fs::path& path, const std::map<std::string, std::vector<std::pair<double, double>>>& lines) {
  const double w = 480, h = 320, pad = 48;
  double x_lo = 1e9, x_hi = -1e9, y_lo = 1e9, y_hi = -1e9;
  for (const auto& [name, pts] : lines) {
    for (auto [x, y] : pts) {
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (x_hi <= x_lo) x_hi = x_lo + 1;
  if (y_hi <= y_lo) y_hi = y_lo + 0.01;
  auto px = [&](double x) { return pad + (x - x_lo) / (x_hi - x_lo) * (w - 2 * pad); };
  auto py = [&](double y) { return h - pad - (y - y_lo) / (y_hi - y_lo) * (h - 2 * pad); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << h - pad << "\" x2=\"" << w - pad << "\" y2=\"" << h - pad
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << h - pad
      << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\" font-size=\"12\">label rate</text>\n";
  out << "<text x=\"12\" y=\"" << h / 2 << "\" font-size=\"12\" transform=\"rotate(-90 12 " << h / 2
      << ")\" text-anchor=\"middle\">MIA-F ROC</text>\n";
  out << "<text x=\"" << pad << "\" y=\"" << h - pad + 14 << "\" font-size=\"10\">" << x_lo << "</text>\n";
  out << "<text x=\"" << w - pad << "\" y=\"" << h - pad + 14 << "\" font-size=\"10\" text-anchor=\"end\">" << x_hi
      << "</text>\n";
  out << std::setprecision(3) << "<text x=\"" << pad - 4 << "\" y=\"" << pad << "\" font-size=\"10\" text-anchor=\"end\">"
      << y_hi << "</text>\n<text x=\"" << pad - 4 << "\" y=\"" << h - pad
      << "\" font-size=\"10\" text-anchor=\"end\">" << y_lo << "</text>\n" << std::setprecision(2);
  std::size_t c = 0;
  for (const auto& [name, pts] : lines) {
    const char* color = colors[c % 6];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : pts) out << px(x) << ',' << py(y) << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << w - pad + 4 << "\" y=\"" << pad + 14 * static_cast<double>(c) << "\" font-size=\"11\" fill=\""
        << color << "\">" << name << "</text>\n";
    ++c;
  }
  out << "</svg>\n";
}

void write_heatmap_svg(const fs::path& path, const std::string& title, const std::vector<double>& betas,
                       const std::vector<double>& gammas, const std::map<std::pair<double, double>, double>& cells) {
  const double cell = 56, pad = 70;
  const double w = pad + cell * static_cast<double>(gammas.size()) + 20;
  const double h = pad + cell * static_cast<double>(betas.size()) + 20;
  double lo = 1e9, hi = -1e9;
  for (const auto& [k, v] : cells) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << pad << "\" y=\"18\" font-size=\"12\">" << title << " (rows beta, columns gamma)</text>\n";
  for (std::size_t j = 0; j < gammas.size(); ++j) {
    out << "<text x=\"" << pad + cell * (static_cast<double>(j) + 0.5) << "\" y=\"" << pad - 8
        << "\" font-size=\"10\" text-anchor=\"middle\">" << std::defaultfloat << gammas[j] << std::fixed << "</text>\n";
  }
  for (std::size_t i = 0; i < betas.size(); ++i) {
    const double y = pad + cell * static_cast<double>(i);
    out << "<text x=\"" << pad - 6 << "\" y=\"" << y + cell / 2 << "\" font-size=\"10\" text-anchor=\"end\">"
        << std::defaultfloat << betas[i] << std::fixed << "</text>\n";
    for (std::size_t j = 0; j < gammas.size(); ++j) {
      const double x = pad + cell * static_cast<double>(j);
      auto it = cells.find({betas[i], gammas[j]});
      const std::string fill = it == cells.end() ? "#dddddd" : heat(it->second, lo, hi);
      out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
          << fill << "\" stroke=\"white\"/>\n";
      if (it != cells.end()) {
        out << std::setprecision(3) << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4
            << "\" font-size=\"10\" text-anchor=\"middle\" fill=\"white\">" << it->second << "</text>\n"
            << std::setprecision(2);
      }
    }
  }
  out << "</svg>\n";
}

}  // namespace

void emit_report(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  if (records.empty()) throw ValidationError("emit_report: no records");
  fs::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "summary.csv");
    if (!csv) throw std::runtime_error("cannot write summary.csv");
    csv << "config_hash,model,perturbation,perturbation_rate,label_rate,beta,gamma,seeds,acc_mean,acc_std,"
           "val_acc_mean,target_acc_mean,mia_f_mean,mia_f_std,mia_s_mean,mia_s_std\n";
    for (const auto& r : records) {
      const auto& c = r.config;
      const Stat acc = r.accuracy();
      const auto f = r.mia_f();
      const auto s = r.mia_s();
      csv << r.config_hash << ',' << c.model << ',' << perturbation_label(c) << ',' << fmt(c.perturbation.rate) << ','
          << fmt(c.label_rate) << ',' << fmt(c.gib.beta) << ',' << fmt(c.gib.gamma) << ',' << r.per_seed.size() << ','
          << fmt(acc.mean) << ',' << fmt(acc.std) << ',' << fmt(r.val_accuracy().mean) << ','
          << fmt(mean_of(r.target_accuracy())) << ',' << fmt(mean_of(f)) << ',' << fmt(f ? f->std : std::nullopt)
          << ',' << fmt(mean_of(s)) << ',' << fmt(s ? s->std : std::nullopt) << '\n';
    }
  }

  // Label-rate sweeps: runs that differ only in label rate.
  std::map<std::string, std::vector<const RunRecord*>> by_rate_group;
  std::map<std::string, std::vector<const RunRecord*>> by_bg_group;
  for (const auto& r : records) {
    ojson j = to_json(r.config);
    j.erase("seeds");
    ojson lr = j;
    lr.erase("label_rate");
    by_rate_group[lr.dump()].push_back(&r);
    ojson bg = j;
    bg.erase("beta");
    bg.erase("gamma");
    by_bg_group[bg.dump()].push_back(&r);
  }
  ojson trends{{"label_rate", ojson::array()}, {"beta_gamma", ojson::array()}};
  std::map<std::string, std::vector<std::pair<double, double>>> lines;
  for (auto& [key, group] : by_rate_group) {
    std::set<double> rates;
    for (const auto* r : group) rates.insert(r->config.label_rate);
    if (rates.size() < 2) continue;
    std::sort(group.begin(), group.end(),
              [](const RunRecord* a, const RunRecord* b) { return a->config.label_rate < b->config.label_rate; });
    const std::string& model = group.front()->config.model;
    ojson pts = ojson::array();
    for (const auto* r : group) {
      pts.push_back({{"label_rate", r->config.label_rate},
                     {"accuracy", r->accuracy().mean},
                     {"mia_f_roc", opt(mean_of(r->mia_f()))},
                     {"mia_s_roc", opt(mean_of(r->mia_s()))}});
      if (auto f = r->mia_f()) lines[model + " (" + perturbation_label(r->config) + ")"].emplace_back(r->config.label_rate, f->mean);
    }
    ojson entry{{"model", model}, {"perturbation", perturbation_label(group.front()->config)}, {"points", pts}};
    const auto* first = group.front();
    const auto* last = group.back();
    if (first->mia_f() && last->mia_f()) {
      const double delta = last->mia_f()->mean - first->mia_f()->mean;
      entry["annotation"] = {{"from_label_rate", first->config.label_rate},
                             {"to_label_rate", last->config.label_rate},
                             {"mia_f_change", delta},
                             {"trend", delta < 0 ? "decreasing" : "non-decreasing"}};
    }
    trends["label_rate"].push_back(entry);
  }
  std::size_t heatmaps = 0;
  for (auto& [key, group] : by_bg_group) {
    std::set<double> betas;
    std::set<double> gammas;
    for (const auto* r : group) {
      betas.insert(r->config.gib.beta);
      gammas.insert(r->config.gib.gamma);
    }
    if (group.size() < 2 || (betas.size() < 2 && gammas.size() < 2)) continue;
    const std::string& model = group.front()->config.model;
    ojson pts = ojson::array();
    std::map<std::pair<double, double>, double> cells;
    for (const auto* r : group) {
      pts.push_back({{"beta", r->config.gib.beta},
                     {"gamma", r->config.gib.gamma},
                     {"accuracy", r->accuracy().mean},
                     {"mia_f_roc", opt(mean_of(r->mia_f()))}});
      cells[{r->config.gib.beta, r->config.gib.gamma}] = r->accuracy().mean;
    }
    trends["beta_gamma"].push_back({{"model", model}, {"points", pts}});
    write_heatmap_svg(out_dir / ("beta_gamma_" + model + "_" + std::to_string(heatmaps++) + ".svg"),
                      model + " test accuracy", {betas.begin(), betas.end()}, {gammas.begin(), gammas.end()}, cells);
  }
  std::ofstream(out_dir / "trends.json") << trends.dump(2) << '\n';
  if (!lines.empty()) write_label_rate_svg(out_dir / "label_rate.svg", lines);
}

std::vector<ScalingRow> scaling_probe(const std::vector<std::size_t>& sizes, const ExperimentConfig& base,
                                      double average_degree, int epochs) {
  if (base.dataset.kind != "sbm") throw ValidationError("scaling_probe needs a synthetic dataset");
  if (epochs < 1) throw ValidationError("scaling_probe: epochs must be >= 1");
  const std::size_t classes = base.dataset.sbm.block_sizes.size();
  const auto& sbm = base.dataset.sbm;
  // Keep the within/between degree split of the base config.
  const double ratio = sbm.p_out > 0.0 ? sbm.p_in / sbm.p_out : 1e9;
  std::vector<ScalingRow> rows;
  for (std::size_t n : sizes) {
    if (n < classes * 2) throw ValidationError("scaling size too small for the class count");
    SbmParams p = sbm;
    p.block_sizes.assign(classes, n / classes);
    const double block = static_cast<double>(n / classes);
    const double within = block - 1.0;
    const double between = static_cast<double>(classes - 1) * block;
    p.p_out = average_degree / (ratio * within + between);
    p.p_in = std::min(1.0, ratio * p.p_out);
    const Graph g = generate_sbm(p, base.dataset.seed);

    MiOptions mi = base.mi;
    mi.epochs = std::min(mi.epochs, 20);
    const MIEstimator est = train_mi_estimator(g, mi, 7);
    const NeighborPartition part = partition_neighbors(g, est, base.threshold);
    std::vector<NodeId> all(g.node_count());
    std::iota(all.begin(), all.end(), 0);
    const GibObjective objective(g, all, g.labels(), &part, base.gib.layers);
    GibModel model(base.gib, g.feature_dim(), g.class_count(), 11);
    nn::Adam adam({.lr = base.gib.lr, .weight_decay = base.gib.weight_decay});
    std::vector<double> times;
    for (int e = 0; e <= epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      for (auto* ps : model.param_sets()) ps->zero_grad();
      const LossTerms terms = objective.evaluate(model, base.gib, static_cast<std::uint64_t>(e));
      nn::backward(terms.total);
      for (auto* ps : model.param_sets()) adam.step(*ps);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (e > 0) times.push_back(dt);  // first epoch warms caches
    }
    std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2), times.end());
    rows.push_back({g.node_count(), g.edge_count(), times[times.size() / 2]});
  }
  return rows;
}

}  // namespace rmgib
