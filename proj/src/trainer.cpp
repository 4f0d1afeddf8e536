#include "rmgib/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <optional>
#include <nlohmann/json.hpp>

#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

using nn::Var;
using Index = Eigen::Index;

GibModel::GibModel(const GibConfig& cfg, Index in_dim, int classes, std::uint64_t seed)
    : f_x({in_dim, cfg.hidden, 2 * cfg.code_dim}, "f_x", seed),
      f_n({in_dim, cfg.hidden, cfg.embed_dim}, "f_n", seed),
      f_c({cfg.code_dim, cfg.hidden, classes, cfg.layers, cfg.aggregator}, "f_c", seed) {}

std::vector<nn::ParamSet*> GibModel::param_sets() { return {&f_x.params(), &f_n.params(), &f_c.params()}; }

std::vector<const nn::ParamSet*> GibModel::param_sets() const {
  return {&f_x.params(), &f_n.params(), &f_c.params()};
}

GibModel GibModel::clone() const {
  GibModel out = *this;
  out.f_x.params() = f_x.params().clone();
  out.f_n.params() = f_n.params().clone();
  out.f_c.params() = f_c.params().clone();
  return out;
}

void GibModel::assign(const GibModel& other) {
  f_x.params().assign(other.f_x.params());
  f_n.params().assign(other.f_n.params());
  f_c.params().assign(other.f_c.params());
}

LossBreakdown breakdown(const LossTerms& terms, double beta, double gamma) {
  return {terms.l_c.item(), terms.l_ix.item(), terms.l_in.item(), terms.l_s.item(), beta, gamma, terms.total.item()};
}

namespace {

std::vector<Neighborhood> neighborhoods(const Graph& g, std::span<const NodeId> nodes, int hops) {
  std::vector<Neighborhood> out;
  out.reserve(nodes.size());
  for (NodeId v : nodes) out.push_back(k_hop(g, v, hops));
  return out;
}

Matrix rows_of(const Matrix& m, std::span<const NodeId> ids) {
  Matrix out(static_cast<Index>(ids.size()), m.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Index>(i)) = m.row(ids[i]);
  return out;
}

void check_finite(const Var& v, const char* part) {
  if (!std::isfinite(v.item())) throw NumericError(std::string("non-finite loss term ") + part);
}

}  // namespace

GibObjective::GibObjective(const Graph& g, std::span<const NodeId> batch, std::span<const int> labels,
                           const NeighborPartition* partition, int hops)
    : graph_(&g),
      labels_(labels.begin(), labels.end()),
      partition_(partition),
      batch_(neighborhoods(g, batch, hops), hops) {
  if (batch.empty()) throw ValidationError("objective batch is empty");
  if (labels.size() != batch.size()) throw ValidationError("every batch node needs a label");
  for (int y : labels_) {
    if (y < 0 || y >= g.class_count()) throw ValidationError("batch label out of range");
  }
  if (partition_ && partition_->node_count != g.node_count()) throw ValidationError("partition built for another graph");
  code_features_ = rows_of(g.features(), batch_.code_nodes());
}

GibDraws GibObjective::draws(Index code_dim, std::uint64_t seed) const {
  return {standard_normal(static_cast<Index>(batch_.code_nodes().size()), code_dim, derive_seed(seed, "attribute")),
          logistic_noise(static_cast<Index>(batch_.pair_count()), derive_seed(seed, "mask"))};
}

LossTerms GibObjective::evaluate(const GibModel& model, const GibConfig& cfg, const GibDraws& draws) const {
  if (cfg.layers != static_cast<int>(batch_.plan().size())) throw ValidationError("config layers != objective hops");
  LossTerms t;
  const AttributeCode code = attribute_encode(Var::constant(code_features_), model.f_x, draws.attribute_noise);
  const Var h = model.f_n.forward(Var::constant(graph_->features()));
  const Var probs = pair_probabilities(h, batch_.pair_center(), batch_.pair_member());
  const MaskSample mask = sample_mask(probs, cfg.temperature, cfg.mask_mode, draws.mask_noise);

  t.l_c = classification_loss(local_logits(batch_, code.sample, mask.mask, model.f_c), labels_);
  t.l_ix = nn::mean(gaussian_kl(code));
  t.l_in = nn::scale(bernoulli_kl(probs, cfg.prior_rate), 1.0 / static_cast<double>(batch_.center_count()));
  if (partition_) {
    t.l_s = self_supervision_loss(pair_probabilities(h, partition_->src, partition_->dst), *partition_);
  } else {
    t.l_s = Var::scalar(0.0);
  }
  check_finite(t.l_c, "l_c");
  check_finite(t.l_ix, "l_ix");
  check_finite(t.l_in, "l_in");
  check_finite(t.l_s, "l_s");
  t.total = nn::add(nn::add(t.l_c, nn::scale(nn::add(t.l_ix, t.l_in), cfg.beta)), nn::scale(t.l_s, cfg.gamma));
  return t;
}

LossTerms GibObjective::evaluate(const GibModel& model, const GibConfig& cfg, std::uint64_t seed) const {
  return evaluate(model, cfg, draws(cfg.code_dim, seed));
}

LossBreakdown gib_loss(const Graph& g, std::span<const NodeId> batch, std::span<const int> labels,
                       const GibModel& model, const NeighborPartition* partition, const GibConfig& cfg,
                       std::uint64_t seed) {
  const GibObjective objective(g, batch, labels, partition, cfg.layers);
  return breakdown(objective.evaluate(model, cfg, seed), cfg.beta, cfg.gamma);
}

GibInference::GibInference(const Graph& g, std::span<const NodeId> nodes, int hops)
    : graph_(&g), batch_(neighborhoods(g, nodes, hops), hops) {
  code_features_ = rows_of(g.features(), batch_.code_nodes());
}

Matrix GibInference::predict(const GibModel& model) const {
  const Index d = model.f_x.output_dim() / 2;
  const Matrix mu = model.f_x.forward(code_features_).leftCols(d);
  const Matrix h = model.f_n.forward(graph_->features());
  Matrix keep(static_cast<Index>(batch_.pair_count()), 1);
  for (std::size_t p = 0; p < batch_.pair_count(); ++p) {
    const double s = h.row(batch_.pair_center()[p]).dot(h.row(batch_.pair_member()[p]));
    keep(static_cast<Index>(p), 0) = s > 0.0 ? 1.0 : 0.0;  // logistic(s) > 0.5
  }
  const Var logits = local_logits(batch_, Var::constant(mu), Var::constant(std::move(keep)), model.f_c);
  return nn::softmax(logits.value());
}

Matrix gib_predict_all(const GibModel& model, const Graph& g, int hops) {
  std::vector<NodeId> all(g.node_count());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<NodeId>(i);
  return GibInference(g, all, hops).predict(model);
}

NeighborSelection select_neighbors(const GibModel& model, const Graph& g, NodeId center, int hops) {
  const Neighborhood hood = k_hop(g, center, hops);
  const Var probs = neighbor_probs(hood, g.features(), model.f_n);
  std::vector<double> hard(hood.members.size());
  for (std::size_t i = 0; i < hard.size(); ++i) hard[i] = probs.value()(static_cast<Index>(i), 0) > 0.5 ? 1.0 : 0.0;
  NeighborSelection sel = assemble_selection(hood, hard);
  sel.probs = probs.value();
  sel.relaxed_mask = probs.value();
  return sel;
}

GibTrainResult train_gib(const Graph& g, std::span<const NodeId> ids, std::span<const int> labels,
                         std::span<const NodeId> val_ids, const NeighborPartition* partition, const GibConfig& cfg,
                         std::uint64_t seed) {
  if (cfg.beta < 0.0 || cfg.gamma < 0.0) throw ValidationError("beta and gamma must be nonnegative");
  GibTrainResult result;
  result.model = GibModel(cfg, g.feature_dim(), g.class_count(), seed);
  const GibObjective objective(g, ids, labels, cfg.gamma > 0.0 ? partition : nullptr, cfg.layers);
  std::optional<GibInference> val;
  std::vector<int> val_labels;
  if (!val_ids.empty()) {
    val.emplace(g, val_ids, cfg.layers);
    for (NodeId v : val_ids) val_labels.push_back(g.labels()[static_cast<std::size_t>(v)]);
  }
  std::vector<NodeId> val_rows(val_ids.size());
  for (std::size_t i = 0; i < val_rows.size(); ++i) val_rows[i] = static_cast<NodeId>(i);

  nn::Adam adam({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  GibModel best = result.model.clone();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (auto* p : result.model.param_sets()) p->zero_grad();
    LossTerms terms;
    try {
      terms = objective.evaluate(result.model, cfg, derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    } catch (const NumericError& e) {
      throw DivergenceError(e.what(), epoch);
    }
    nn::backward(terms.total);
    for (auto* p : result.model.param_sets()) adam.step(*p);

    LossRow row{epoch, breakdown(terms, cfg.beta, cfg.gamma), 0.0};
    if (val) row.val_acc = accuracy(val->predict(result.model), val_rows, val_labels);
    if (!val || row.val_acc >= result.best_val_acc) {
      result.best_val_acc = row.val_acc;
      result.best_epoch = epoch;
      best.assign(result.model);
    }
    result.curve.push_back(row);
  }
  if (result.best_epoch > 0) result.model.assign(best);
  return result;
}

GibTrainResult stage1_train(const Graph& g, const Splits& splits, const NeighborPartition* partition,
                            const GibConfig& cfg, std::uint64_t seed) {
  return train_gib(g, splits.train_ids, splits.train_labels, splits.val_ids, partition, cfg,
                   derive_seed(seed, "stage1"));
}

PseudoLabelSet collect_pseudo_labels(const Matrix& posteriors, const Splits& splits, double fraction,
                                     double min_confidence, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw ValidationError("pseudo-label fraction must lie in [0, 1]");
  const auto n = static_cast<std::size_t>(posteriors.rows());
  std::vector<bool> given(n, false);
  for (NodeId v : splits.train_ids) given.at(static_cast<std::size_t>(v)) = true;
  std::vector<NodeId> unlabeled;
  for (std::size_t v = 0; v < n; ++v) {
    if (!given[v]) unlabeled.push_back(static_cast<NodeId>(v));
  }
  if (fraction < 1.0) {
    Rng rng(derive_seed(seed, "pseudo"));
    std::shuffle(unlabeled.begin(), unlabeled.end(), rng);
    unlabeled.resize(static_cast<std::size_t>(std::floor(fraction * static_cast<double>(unlabeled.size()))));
  }

  std::vector<std::tuple<NodeId, int, LabelSource>> rows;
  for (std::size_t i = 0; i < splits.train_ids.size(); ++i) {
    rows.emplace_back(splits.train_ids[i], splits.train_labels[i], LabelSource::given);
  }
  for (NodeId v : unlabeled) {
    Index arg = 0;
    const double top = posteriors.row(v).maxCoeff(&arg);
    if (top < min_confidence) continue;
    rows.emplace_back(v, static_cast<int>(arg), LabelSource::pseudo);
  }
  std::sort(rows.begin(), rows.end());
  PseudoLabelSet pl;
  for (auto [v, y, s] : rows) {
    pl.node_ids.push_back(v);
    pl.labels.push_back(y);
    pl.sources.push_back(s);
  }
  return pl;
}

GibTrainResult stage2_train(const Graph& g, const PseudoLabelSet& pl, std::span<const NodeId> val_ids,
                            const NeighborPartition* partition, const GibConfig& cfg, std::uint64_t seed) {
  return train_gib(g, pl.node_ids, pl.labels, val_ids, partition, cfg, derive_seed(seed, "stage2"));
}

void write_loss_curve(const std::filesystem::path& path, std::span<const LossRow> curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,l_c,l_ix,l_in,l_s,total,val_acc\n" << std::setprecision(17);
  for (const auto& r : curve) {
    out << r.epoch << ',' << r.parts.l_c << ',' << r.parts.l_ix << ',' << r.parts.l_in << ',' << r.parts.l_s << ','
        << r.parts.total << ',' << r.val_acc << '\n';
  }
}

void write_pseudo_labels(const std::filesystem::path& path, const PseudoLabelSet& pl) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < pl.node_ids.size(); ++i) {
    doc.push_back({{"node_id", pl.node_ids[i]},
                   {"label", pl.labels[i]},
                   {"source", pl.sources[i] == LabelSource::given ? "given" : "pseudo"}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

}  // namespace rmgib
