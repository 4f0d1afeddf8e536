#include "rmgib/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <nlohmann/json.hpp>
#include <unordered_map>
#include <unordered_set>

#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

using nn::Var;
using Index = Eigen::Index;

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("roc_auc: labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw ValidationError("roc_auc needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t k = i;
    while (k < order.size() && scores[order[k]] == scores[order[i]]) ++k;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + k);  // ranks i+1 .. k
    for (std::size_t t = i; t < k; ++t) {
      if (labels[order[t]] == 1) rank_sum += avg_rank;
    }
    i = k;
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

MiaSetting parse_mia_setting(const std::string& name) {
  if (name == "MIA-F" || name == "full") return MiaSetting::full;
  if (name == "MIA-S" || name == "sub") return MiaSetting::sub;
  throw ValidationError("unknown MIA setting '" + name + "' (expected MIA-F or MIA-S)");
}

std::string to_string(MiaSetting s) { return s == MiaSetting::full ? "MIA-F" : "MIA-S"; }

ShadowSetup build_shadow_setup(const Graph& g, std::span<const NodeId> target_train_ids, MiaSetting setting,
                               std::uint64_t seed) {
  ShadowSetup setup;
  setup.setting = setting;
  if (setting == MiaSetting::full) {
    setup.graph = g;
    setup.original_ids.resize(g.node_count());
    std::iota(setup.original_ids.begin(), setup.original_ids.end(), 0);
  } else {
    Subgraph sub = subsample_graph(g, 0.5, derive_seed(seed, "shadow-subgraph"));
    setup.graph = std::move(sub.graph);
    setup.original_ids = std::move(sub.original_ids);
  }
  const std::unordered_set<NodeId> target(target_train_ids.begin(), target_train_ids.end());
  std::vector<NodeId> pool;
  for (std::size_t i = 0; i < setup.original_ids.size(); ++i) {
    if (!target.contains(setup.original_ids[i])) pool.push_back(static_cast<NodeId>(i));
  }
  const std::size_t k = target_train_ids.size();
  if (k == 0) throw ValidationError("target training set is empty");
  if (pool.size() < 2 * k) {
    throw ValidationError("shadow graph has " + std::to_string(pool.size()) + " nodes outside the target training set; " +
                          std::to_string(2 * k) + " needed");
  }
  Rng rng(derive_seed(seed, "shadow-split"));
  std::shuffle(pool.begin(), pool.end(), rng);
  setup.in_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  setup.out_ids.assign(pool.begin() + static_cast<std::ptrdiff_t>(k), pool.begin() + static_cast<std::ptrdiff_t>(2 * k));
  std::sort(setup.in_ids.begin(), setup.in_ids.end());
  std::sort(setup.out_ids.begin(), setup.out_ids.end());
  return setup;
}

std::size_t AttackDataset::members() const {
  return static_cast<std::size_t>(std::count(membership.begin(), membership.end(), 1));
}

AttackDataset train_shadow_and_collect(const ShadowSetup& setup, const TrainOptions& options, std::uint64_t seed) {
  std::vector<int> labels;
  for (NodeId v : setup.in_ids) labels.push_back(setup.graph.labels()[static_cast<std::size_t>(v)]);
  const GcnModel shadow = baseline_gcn_train(setup.graph, setup.in_ids, labels, {}, options, derive_seed(seed, "shadow"));
  AttackDataset d;
  d.posteriors.resize(static_cast<Index>(setup.in_ids.size() + setup.out_ids.size()), shadow.posteriors.cols());
  Index r = 0;
  for (NodeId v : setup.in_ids) {
    d.posteriors.row(r++) = shadow.posteriors.row(v);
    d.membership.push_back(1);
  }
  for (NodeId v : setup.out_ids) {
    d.posteriors.row(r++) = shadow.posteriors.row(v);
    d.membership.push_back(0);
  }
  return d;
}

namespace {

Matrix attack_inputs(const Matrix& posteriors, bool sorted) {
  if (!sorted) return posteriors;
  Matrix out = posteriors;
  for (Index i = 0; i < out.rows(); ++i) {
    std::sort(out.row(i).begin(), out.row(i).end(), std::greater<>());
  }
  return out;
}

}  // namespace

AttackModel train_attack_model(const AttackDataset& d, const AttackOptions& options, std::uint64_t seed) {
  if (static_cast<std::size_t>(d.posteriors.rows()) != d.membership.size()) throw ShapeError("attack dataset misaligned");
  if (d.members() == 0 || d.non_members() == 0) throw ValidationError("attack dataset needs both classes");
  AttackModel atk{nn::MLP({d.posteriors.cols(), options.hidden, 1}, "f_A", seed), options.sorted_input};
  const Var x = Var::constant(attack_inputs(d.posteriors, options.sorted_input));
  Matrix y(static_cast<Index>(d.membership.size()), 1);
  for (std::size_t i = 0; i < d.membership.size(); ++i) y(static_cast<Index>(i), 0) = d.membership[i];
  const Var pos = Var::constant(y);
  const Var neg = Var::constant((1.0 - y.array()).matrix());
  nn::Adam adam({.lr = options.lr});
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    atk.f_A.params().zero_grad();
    // BCE on logits s: y softplus(−s) + (1 − y) softplus(s)
    const Var s = atk.f_A.forward(x);
    const Var loss = nn::mean(nn::add(nn::mul(pos, nn::softplus(nn::scale(s, -1.0))), nn::mul(neg, nn::softplus(s))));
    if (!std::isfinite(loss.item())) throw DivergenceError("attack loss is not finite", epoch);
    nn::backward(loss);
    adam.step(atk.f_A.params());
  }
  return atk;
}

std::vector<double> attack_scores(const AttackModel& atk, const Matrix& posteriors) {
  if (posteriors.cols() != atk.f_A.input_dim()) throw ShapeError("attack input width != class count");
  const Matrix s = atk.f_A.forward(attack_inputs(posteriors, atk.sorted_input));
  std::vector<double> out(static_cast<std::size_t>(s.rows()));
  for (Index i = 0; i < s.rows(); ++i) out[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-s(i, 0)));
  return out;
}

PosteriorDump make_posterior_dump(const Matrix& posteriors, const Splits& splits) {
  std::vector<std::string> tag(static_cast<std::size_t>(posteriors.rows()), "unlabeled");
  for (NodeId v : splits.train_ids) tag.at(static_cast<std::size_t>(v)) = "train";
  for (NodeId v : splits.val_ids) tag.at(static_cast<std::size_t>(v)) = "val";
  for (NodeId v : splits.test_ids) tag.at(static_cast<std::size_t>(v)) = "test";
  PosteriorDump dump;
  for (Index i = 0; i < posteriors.rows(); ++i) {
    const auto row = posteriors.row(i);
    dump.push_back({static_cast<NodeId>(i), std::vector<double>(row.begin(), row.end()), tag[static_cast<std::size_t>(i)]});
  }
  return dump;
}

void write_posterior_dump(const std::filesystem::path& path, const PosteriorDump& dump) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : dump) {
    nlohmann::ordered_json j{{"node_id", r.node_id}, {"probs", r.probs}, {"split_tag", r.split_tag}};
    out << j.dump() << '\n';
  }
}

PosteriorDump read_posterior_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open posterior dump: " + path.string());
  PosteriorDump dump;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      dump.push_back({j.at("node_id").get<NodeId>(), j.at("probs").get<std::vector<double>>(),
                      j.at("split_tag").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return dump;
}

std::vector<NodeId> sample_holdout(const Splits& splits, std::size_t count, std::uint64_t seed) {
  if (splits.test_ids.size() < count) {
    throw ValidationError("test split has " + std::to_string(splits.test_ids.size()) + " nodes; holdout needs " +
                          std::to_string(count));
  }
  std::vector<NodeId> pool = splits.test_ids;
  Rng rng(derive_seed(seed, "holdout"));
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

double evaluate_mia(const PosteriorDump& target, std::span<const NodeId> target_train_ids,
                    std::span<const NodeId> holdout_ids, const AttackModel& atk) {
  if (target_train_ids.empty() || holdout_ids.empty()) throw ValidationError("evaluate_mia: empty member or holdout side");
  const std::unordered_set<NodeId> members(target_train_ids.begin(), target_train_ids.end());
  for (NodeId v : holdout_ids) {
    if (members.contains(v)) throw ValidationError("holdout node " + std::to_string(v) + " is a training member");
  }
  std::unordered_map<NodeId, const PosteriorRecord*> by_id;
  for (const auto& r : target) by_id[r.node_id] = &r;
  const auto width = static_cast<Index>(atk.f_A.input_dim());
  Matrix x(static_cast<Index>(target_train_ids.size() + holdout_ids.size()), width);
  std::vector<int> labels;
  Index row = 0;
  auto put = [&](NodeId v, int label) {
    auto it = by_id.find(v);
    if (it == by_id.end()) throw ValidationError("posterior dump lacks node " + std::to_string(v));
    if (static_cast<Index>(it->second->probs.size()) != width) throw ShapeError("posterior width != attack input");
    for (Index c = 0; c < width; ++c) x(row, c) = it->second->probs[static_cast<std::size_t>(c)];
    ++row;
    labels.push_back(label);
  };
  for (NodeId v : target_train_ids) put(v, 1);
  for (NodeId v : holdout_ids) put(v, 0);
  const auto scores = attack_scores(atk, x);
  return roc_auc(scores, labels);
}

std::uint64_t attack_config_hash(const AttackOptions& options, const TrainOptions& shadow) {
  nlohmann::ordered_json j{{"attack_hidden", options.hidden},     {"attack_epochs", options.epochs},
                           {"attack_lr", options.lr},             {"sorted_input", options.sorted_input},
                           {"shadow_epochs", shadow.epochs},      {"shadow_lr", shadow.lr},
                           {"shadow_weight_decay", shadow.weight_decay}, {"shadow_hidden", shadow.hidden},
                           {"shadow_layers", shadow.layers},      {"shadow_aggregator", to_string(shadow.aggregator)}};
  return fnv1a(j.dump());
}

void write_attack_report(const std::filesystem::path& path, MiaSetting setting, double roc, std::size_t members,
                         std::size_t non_members, std::uint64_t attacker_config_hash) {
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(attacker_config_hash));
  nlohmann::ordered_json j{{"setting", to_string(setting)},
                           {"roc_auc", roc},
                           {"n_members", members},
                           {"n_nonmembers", non_members},
                           {"attacker_config_hash", hex}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace rmgib
