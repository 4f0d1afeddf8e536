// Acceptance checks, one PASS/FAIL line per criterion.
//
//   acceptance [--only N]... [--cache DIR]
//
// Experiment runs are persisted under DIR keyed by config hash and seed list,
// so criteria that compare the same model share one run. The ctest setup step
// empties DIR before a full pass.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rmgib/attacks.hpp"
#include "rmgib/harness.hpp"
#include "rmgib/info_theory.hpp"

using namespace rmgib;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// Desk-scale widths; everything else is the library default (7 x 350 SBM, 2% labels).
ExperimentConfig base_config() {
  ExperimentConfig c;
  c.gib.hidden = 64;
  c.gib.code_dim = 32;
  c.gib.embed_dim = 32;
  c.mi.hidden = 64;
  c.mi.embed_dim = 32;
  c.seeds = {1, 2, 3, 4, 5};
  c.mia = {"MIA-F"};
  return c;
}

ExperimentConfig privacy_config(const std::string& model) {
  ExperimentConfig c = base_config();
  c.model = model;
  c.mia = {"MIA-F", "MIA-S"};
  return c;
}

// GCN+IB at the largest beta of the published grid.
ExperimentConfig gcn_ib_config(double label_rate) {
  ExperimentConfig c = base_config();
  c.model = "gcn_ib";
  c.gib.beta = 0.1;
  c.label_rate = label_rate;
  return c;
}

ExperimentConfig perturbed_config(const std::string& model) {
  ExperimentConfig c = model == "gcn_ib" ? gcn_ib_config(0.02) : base_config();
  c.model = model;
  c.perturbation = {"heterophilic", 0.2, 0.0};
  c.mia = {};
  return c;
}

class RunCache {
 public:
  explicit RunCache(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  fs::path dir_for(const ExperimentConfig& cfg) const {
    std::string key = cfg.model + "_" + config_hash(cfg) + "_s";
    for (auto s : cfg.seeds) key += "-" + std::to_string(s);
    return root_ / key;
  }

  const RunRecord& get(const ExperimentConfig& cfg) {
    const fs::path dir = dir_for(cfg);
    if (auto it = memo_.find(dir.string()); it != memo_.end()) return it->second;
    RunRecord r;
    if (fs::exists(dir / "record.json")) {
      std::ifstream in(dir / "record.json");
      r = record_from_json(nlohmann::json::parse(in));
      std::printf("  [cache] %s\n", dir.filename().c_str());
    } else {
      std::printf("  [run]   %s ...", dir.filename().c_str());
      std::fflush(stdout);
      r = run_experiment(cfg, {dir});
      std::printf(" %.0f s\n", r.wall_seconds);
    }
    std::fflush(stdout);
    return memo_.emplace(dir.string(), std::move(r)).first->second;
  }

 private:
  fs::path root_;
  std::map<std::string, RunRecord> memo_;
};

double mia_f(const RunRecord& r) { return r.mia_f().value().mean; }
double mia_s(const RunRecord& r) { return r.mia_s().value().mean; }
double acc(const RunRecord& r) { return r.accuracy().mean; }

// 1. Closed-form KLs against numerical oracles.
Outcome closed_form(RunCache&) {
  Clock clock;
  Rng rng(1001);
  std::uniform_real_distribution<double> mu_d(-3, 3), s_d(0.05, 3), p_d(1e-6, 1 - 1e-6), r_d(0.01, 0.99);
  double worst_g = 0.0, worst_b = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double mu = mu_d(rng), s = s_d(rng);
    const double got = gaussian_kl(nn::Var::constant(Matrix::Constant(1, 1, mu)), nn::Var::constant(Matrix::Constant(1, 1, s))).item();
    worst_g = std::max(worst_g, std::abs(got - oracles::gaussian_kl_quadrature(mu, s)));

    std::vector<double> p(static_cast<std::size_t>(1 + i % 8));
    Matrix m(static_cast<Eigen::Index>(p.size()), 1);
    for (std::size_t k = 0; k < p.size(); ++k) m(static_cast<Eigen::Index>(k), 0) = p[k] = p_d(rng);
    const double r = r_d(rng);
    worst_b = std::max(worst_b, std::abs(bernoulli_kl(nn::Var::constant(m), r).item() - oracles::bernoulli_kl_sum(p, r)));
  }
  const double t = clock.seconds();
  return {worst_g <= 1e-6 && worst_b <= 1e-6 && t < 5.0,
          fmt("max |err| gaussian %.2e, bernoulli %.2e over 1000 instances each (tol 1e-6); %.2f s (< 5 s)", worst_g,
              worst_b, t)};
}

// 2. Finite-difference gradients of every loss on the 10-node fixture.
Outcome gradients(RunCache&) {
  Clock clock;
  const Graph g = fixtures::ten_node_graph();
  const NeighborPartition part = partition_neighbors(g, MIEstimator{nn::MLP({4, 8, 3}, "f_M", 5), 0.5});
  GibConfig cfg;
  cfg.hidden = 6;
  cfg.code_dim = 3;
  cfg.embed_dim = 3;
  cfg.beta = 0.3;
  cfg.gamma = 0.2;
  cfg.prior_rate = 0.4;
  cfg.temperature = 0.8;
  cfg.mask_mode = MaskMode::relaxed;
  GibModel model(cfg, g.feature_dim(), g.class_count(), 2);

  std::map<std::string, double> errs;
  auto check = [&](const std::string& name, const std::function<nn::Var()>& f, std::vector<nn::ParamSet*> ps) {
    errs[name] = nn::gradient_check(f, std::move(ps), 1e-5, 1000).max_rel_error;
  };
  // Stage 1 on a labeled subset, stage 2 on every node with stand-in pseudo labels.
  const std::vector<NodeId> labeled{0, 3, 5, 8};
  std::vector<int> given;
  for (NodeId v : labeled) given.push_back(g.labels()[static_cast<std::size_t>(v)]);
  std::vector<NodeId> all(10);
  std::vector<int> pseudo(10);
  for (int v = 0; v < 10; ++v) {
    all[static_cast<std::size_t>(v)] = v;
    pseudo[static_cast<std::size_t>(v)] = (v * 7) % 2;
  }
  using Stage = std::tuple<std::string, const std::vector<NodeId>*, const std::vector<int>*>;
  for (const auto& [t, ids, labels] : {Stage{"stage1", &labeled, &given}, Stage{"stage2", &all, &pseudo}}) {
    const GibObjective obj(g, *ids, *labels, &part, cfg.layers);
    const GibDraws d = obj.draws(cfg.code_dim, 6);
    check(t + " attribute KL", [&] { return obj.evaluate(model, cfg, d).l_ix; }, model.param_sets());
    check(t + " neighbor KL", [&] { return obj.evaluate(model, cfg, d).l_in; }, model.param_sets());
    check(t + " classification", [&] { return obj.evaluate(model, cfg, d).l_c; }, model.param_sets());
    check(t + " self-supervision", [&] { return obj.evaluate(model, cfg, d).l_s; }, model.param_sets());
    check(t + " total", [&] { return obj.evaluate(model, cfg, d).total; }, model.param_sets());
  }
  nn::MLP f_M({4, 6, 3}, "f_M", 2);
  std::vector<Eigen::Index> src, dst;
  directed_pairs(g, src, dst);
  const auto neg = sample_negatives(src, g.node_count(), 2, 3);
  check("MI estimator", [&] { return mi_loss(f_M, g.features(), src, dst, neg, 2); }, {&f_M.params()});
  GCNStack gcn({4, 6, 2, 2, Aggregator::gcn}, "gcn", 3);
  const GraphPropagation prop(g, 2, Aggregator::gcn);
  check("baseline GCN", [&] { return classification_loss(graph_logits(prop, nn::Var::constant(g.features()), gcn), g.labels()); },
        {&gcn.params()});

  double worst = 0.0;
  std::string worst_name;
  for (const auto& [k, v] : errs) {
    if (v >= worst) {
      worst = v;
      worst_name = k;
    }
  }
  const double t = clock.seconds();
  return {worst < 1e-4 && t < 60.0, fmt("%zu losses, max rel err %.2e (%s) (tol 1e-4); %.2f s (< 60 s)", errs.size(),
                                         worst, worst_name.c_str(), t)};
}

// 3. Information-theory identities over kernel-built joints.
Outcome info_theory(RunCache&) {
  Clock clock;
  Rng rng(3003);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  double worst_ci = 0.0, worst_dec = 0.0, worst_ineq = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const JointDistribution j = random_kernel_joint(dim(rng), dim(rng), dim(rng), rng);
    worst_ci = std::max(worst_ci, std::abs(discrete_mi(j, Variable::z, Variable::y, Variable::x)));
    const IbReport r = verify_ib_inequality(j);
    worst_dec = std::max(worst_dec, std::abs(r.i_zx - (r.i_zy + r.i_zx_given_y)));
    worst_ineq = std::max(worst_ineq, r.i_zy - r.i_zx);
  }
  const double t = clock.seconds();
  return {worst_ci <= 1e-12 && worst_dec <= 1e-9 && worst_ineq <= 1e-9 && t < 10.0,
          fmt("1000 joints: max I(z;y|x) %.1e (tol 1e-12), decomposition gap %.1e, max I(z;y)-I(z;x) %.1e (tol "
              "1e-9); %.2f s (< 10 s)",
              worst_ci, worst_dec, worst_ineq, t)};
}

// 4. ROC oracle and label-shuffled attacks.
Outcome roc(RunCache&) {
  Rng rng(4004);
  std::uniform_int_distribution<int> len(2, 10), level(0, 5), bit(0, 1);
  int trials = 0, mismatches = 0;
  while (trials < 10000) {
    const auto n = static_cast<std::size_t>(len(rng));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) / 5.0;
      y[i] = bit(rng);
    }
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    mismatches += std::abs(roc_auc(s, y) - oracles::auc_pairs(s, y)) > 1e-12;
    ++trials;
  }
  // Attack datasets whose membership bits are independent of the posteriors.
  std::bernoulli_distribution coin(0.5);
  auto draw = [&](Eigen::Index n) {
    AttackDataset d;
    std::gamma_distribution<double> gam(0.7, 1.0);
    d.posteriors.resize(n, 7);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index k = 0; k < 7; ++k) d.posteriors(i, k) = gam(rng);
      d.posteriors.row(i) /= d.posteriors.row(i).sum();
      d.membership.push_back(coin(rng) ? 1 : 0);
    }
    return d;
  };
  double worst = 0.0;
  std::string rocs;
  for (int rep = 0; rep < 5; ++rep) {
    const AttackDataset train = draw(1000);
    const AttackDataset held = draw(4000);
    const AttackModel atk = train_attack_model(train, AttackOptions{}, static_cast<std::uint64_t>(rep));
    const double r = roc_auc(attack_scores(atk, held.posteriors), held.membership);
    worst = std::max(worst, std::abs(r - 0.5));
    rocs += fmt("%s%.3f", rep ? " " : "", r);
  }
  return {mismatches == 0 && worst <= 0.05,
          fmt("%d/10000 oracle mismatches; shuffled-label ROC [%s] (0.5 +- 0.05)", mismatches, rocs.c_str())};
}

// 5. Privacy trend at 2% labels.
Outcome privacy(RunCache& cache) {
  const RunRecord& gcn = cache.get(privacy_config("gcn"));
  const RunRecord& rm = cache.get(privacy_config("rmgib"));
  const double minutes = (gcn.wall_seconds + rm.wall_seconds) / 60.0;
  const bool pass = mia_f(gcn) >= 0.65 && mia_s(gcn) >= 0.65 && mia_f(rm) <= mia_f(gcn) - 0.10 &&
                    mia_s(rm) <= mia_s(gcn) - 0.10 && acc(rm) >= acc(gcn) - 0.03 && minutes < 20.0;
  return {pass, fmt("GCN acc %.3f ROC F %.3f S %.3f (>= 0.65); RM-GIB acc %.3f (>= GCN - 0.03) ROC F %.3f S %.3f "
                    "(<= GCN - 0.10); %.1f min (< 20)",
                    acc(gcn), mia_f(gcn), mia_s(gcn), acc(rm), mia_f(rm), mia_s(rm), minutes)};
}

// 6. GCN+IB attack ROC falls as labels grow.
Outcome label_rate(RunCache& cache) {
  const RunRecord& lo = cache.get(gcn_ib_config(0.02));
  const RunRecord& hi = cache.get(gcn_ib_config(0.08));
  const double drop = mia_f(lo) - mia_f(hi);
  return {drop >= 0.05, fmt("GCN+IB (beta 0.1) MIA-F ROC %.3f at 2%% -> %.3f at 8%%, drop %.3f (>= 0.05)", mia_f(lo),
                            mia_f(hi), drop)};
}

// 7. Accuracy under heterophilic edge injection.
Outcome robustness(RunCache& cache) {
  const double rm = acc(cache.get(perturbed_config("rmgib")));
  const double gcn = acc(cache.get(perturbed_config("gcn")));
  const double ib = acc(cache.get(perturbed_config("gcn_ib")));
  return {rm >= gcn + 0.03 && rm > ib,
          fmt("heterophilic 0.2: RM-GIB %.4f, GCN %.4f (needs +0.03), GCN+IB %.4f (needs >)", rm, gcn, ib)};
}

// 8. Ablations.
Outcome ablations(RunCache& cache) {
  const RunRecord& rm = cache.get(privacy_config("rmgib"));
  ExperimentConfig no_pl = privacy_config("rmgib_no_pl");
  no_pl.mia = {"MIA-F"};
  const double roc_no_pl = mia_f(cache.get(no_pl));
  const double acc_rm = acc(cache.get(perturbed_config("rmgib")));
  const double acc_no_s = acc(cache.get(perturbed_config("rmgib_no_s")));
  ExperimentConfig few = privacy_config("rmgib");
  few.mia = {"MIA-F"};
  few.pseudo_fraction = 0.05;
  const double roc_few = mia_f(cache.get(few));
  const bool pass = mia_f(rm) <= roc_no_pl - 0.05 && acc_rm > acc_no_s && mia_f(rm) <= roc_few;
  return {pass, fmt("MIA-F ROC RM-GIB %.3f vs no-PL %.3f (lower by >= 0.05); perturbed acc RM-GIB %.4f vs no-S %.4f "
                    "(higher); ROC at 100%% pseudo labels %.3f vs 5%% %.3f (<=)",
                    mia_f(rm), roc_no_pl, acc_rm, acc_no_s, mia_f(rm), roc_few)};
}

// 9. Per-epoch time at fixed degree.
Outcome scaling(RunCache&) {
  ExperimentConfig c = base_config();
  c.model = "rmgib";
  const auto rows = scaling_probe({500, 1000, 2000}, c, 4.0, 5);
  const double r1 = rows[1].seconds_per_epoch / rows[0].seconds_per_epoch;
  const double r2 = rows[2].seconds_per_epoch / rows[1].seconds_per_epoch;
  return {r1 < 2.5 && r2 < 2.5,
          fmt("s/epoch %.4f, %.4f, %.4f at 500/1000/2000 nodes (|E| %zu/%zu/%zu); ratios %.2f, %.2f (< 2.5)",
              rows[0].seconds_per_epoch, rows[1].seconds_per_epoch, rows[2].seconds_per_epoch, rows[0].edges,
              rows[1].edges, rows[2].edges, r1, r2)};
}

// 10. Persisted configs rerun bit-identically.
Outcome reproducibility(RunCache& cache) {
  std::string detail;
  bool pass = true;
  for (const auto& [model, seeds] : {std::pair{"gcn", std::vector<std::uint64_t>{1, 2, 3, 4, 5}},
                                     std::pair{"rmgib", std::vector<std::uint64_t>{1}}}) {
    const ExperimentConfig cfg = privacy_config(model);
    const RunRecord& first = cache.get(cfg);
    ExperimentConfig again = load_config(cache.dir_for(cfg) / "config.json");
    again.seeds = seeds;
    const RunRecord rerun = run_experiment(again);
    std::size_t same = 0;
    for (const auto& m : rerun.per_seed) {
      for (const auto& o : first.per_seed) {
        if (o.seed == m.seed && o.accuracy == m.accuracy && o.val_accuracy == m.val_accuracy && o.mia_f == m.mia_f &&
            o.mia_s == m.mia_s && o.target_accuracy == m.target_accuracy) {
          ++same;
        }
      }
    }
    pass = pass && same == seeds.size() && rerun.config_hash == first.config_hash;
    detail += fmt("%s%s %zu/%zu seeds identical", detail.empty() ? "" : "; ", model, same, seeds.size());
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string cache_dir = (fs::temp_directory_path() / "rmgib_acceptance").string();
  app.add_option("--only", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--cache", cache_dir, "run cache directory");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome(RunCache&)>>> criteria{
      {"closed-form KL", closed_form},    {"gradients", gradients},   {"information theory", info_theory},
      {"ROC oracle", roc},                {"privacy trend", privacy}, {"label-rate trend", label_rate},
      {"robustness trend", robustness},   {"ablations", ablations},   {"scaling", scaling},
      {"reproducibility", reproducibility}};
  std::set<int> selected(only.begin(), only.end());
  RunCache cache(cache_dir);
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.contains(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second(cache);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s C%d %s: %s\n", o.pass ? "PASS" : "FAIL", n, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
