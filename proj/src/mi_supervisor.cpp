#include "rmgib/mi_supervisor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <tuple>
#include <fstream>
#include <nlohmann/json.hpp>

#include "rmgib/bottleneck.hpp"
#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

using nn::Var;
using Index = Eigen::Index;

double mi_score(const Matrix& x_v, const Matrix& x_u, const MIEstimator& est) {
  if (x_v.rows() != 1 || x_u.rows() != 1) throw ShapeError("mi_score expects single rows");
  const Matrix hv = est.f_M.forward(x_v);
  const Matrix hu = est.f_M.forward(x_u);
  return 1.0 / (1.0 + std::exp(-hv.row(0).dot(hu.row(0))));
}

std::vector<double> mi_scores(const Graph& g, const MIEstimator& est, std::span<const Index> a,
                              std::span<const Index> b) {
  if (a.size() != b.size()) throw ShapeError("mi_scores: pair arrays differ in length");
  const Matrix h = est.f_M.forward(g.features());
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-h.row(a[i]).dot(h.row(b[i]))));
  }
  return out;
}

void directed_pairs(const Graph& g, std::vector<Index>& src, std::vector<Index>& dst) {
  src.clear();
  dst.clear();
  src.reserve(2 * g.edge_count());
  dst.reserve(2 * g.edge_count());
  for (NodeId v = 0; v < static_cast<NodeId>(g.node_count()); ++v) {
    for (NodeId u : g.neighbors(v)) {
      src.push_back(v);
      dst.push_back(u);
    }
  }
}

std::vector<Index> sample_negatives(std::span<const Index> src, std::size_t node_count, int k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("negatives_per_edge must be >= 1");
  if (node_count < 2) throw ValidationError("negative sampling needs at least two nodes");
  Rng rng(derive_seed(seed, "negatives"));
  std::uniform_int_distribution<Index> dist(0, static_cast<Index>(node_count) - 2);
  std::vector<Index> out;
  out.reserve(src.size() * static_cast<std::size_t>(k));
  for (Index v : src) {
    for (int j = 0; j < k; ++j) {
      const Index n = dist(rng);
      out.push_back(n >= v ? n + 1 : n);
    }
  }
  return out;
}

Var mi_loss(const nn::MLP& f_M, const Matrix& features, std::span<const Index> src, std::span<const Index> dst,
            std::span<const Index> negatives, int k) {
  if (k < 1) throw ValidationError("negatives_per_edge must be >= 1");
  if (src.size() != dst.size() || negatives.size() != src.size() * static_cast<std::size_t>(k)) {
    throw ShapeError("mi_loss: pair/negative arrays misaligned");
  }
  Var h = f_M.forward(Var::constant(features));
  // −ln σ(s) = softplus(−s); −ln(1 − σ(s)) = softplus(s)
  Var pos = nn::row_dot(nn::gather_rows(h, src), nn::gather_rows(h, dst));
  std::vector<Index> anchors;
  anchors.reserve(negatives.size());
  for (Index v : src) anchors.insert(anchors.end(), static_cast<std::size_t>(k), v);
  Var neg = nn::row_dot(nn::gather_rows(h, anchors), nn::gather_rows(h, negatives));
  Var total = nn::add(nn::sum(nn::softplus(nn::scale(pos, -1.0))),
                      nn::scale(nn::sum(nn::softplus(neg)), 1.0 / static_cast<double>(k)));
  return nn::scale(total, 1.0 / static_cast<double>(features.rows()));
}

MIEstimator train_mi_estimator(const Graph& g, const MiOptions& options, std::uint64_t seed) {
  if (options.negatives_per_edge < 1) throw ValidationError("negatives_per_edge must be >= 1");
  if (g.edge_count() == 0) throw ValidationError("MI estimator needs a graph with at least one edge");
  if (!(options.threshold >= 0.0 && options.threshold <= 1.0)) throw ValidationError("threshold must lie in [0, 1]");
  MIEstimator est{nn::MLP({g.feature_dim(), options.hidden, options.embed_dim}, "f_M", seed), options.threshold};
  std::vector<Index> src;
  std::vector<Index> dst;
  directed_pairs(g, src, dst);
  nn::Adam adam({.lr = options.lr});
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    est.f_M.params().zero_grad();
    const auto negatives =
        sample_negatives(src, g.node_count(), options.negatives_per_edge, derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    Var loss = mi_loss(est.f_M, g.features(), src, dst, negatives, options.negatives_per_edge);
    if (!std::isfinite(loss.item())) throw DivergenceError("MI estimator loss is not finite", epoch);
    nn::backward(loss);
    adam.step(est.f_M.params());
  }
  return est;
}

std::vector<NodeId> NeighborPartition::positives(NodeId v) const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] == v && positive[i]) out.push_back(static_cast<NodeId>(dst[i]));
  }
  return out;
}

std::vector<NodeId> NeighborPartition::negatives(NodeId v) const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] == v && !positive[i]) out.push_back(static_cast<NodeId>(dst[i]));
  }
  return out;
}

std::size_t NeighborPartition::negative_count() const {
  std::size_t n = 0;
  for (auto p : positive) n += p == 0;
  return n;
}

NeighborPartition partition_neighbors(const Graph& g, const MIEstimator& est) {
  return partition_neighbors(g, est, est.threshold);
}

NeighborPartition partition_neighbors(const Graph& g, const MIEstimator& est, double threshold) {
  NeighborPartition part;
  part.node_count = g.node_count();
  part.threshold = threshold;
  directed_pairs(g, part.src, part.dst);
  part.scores = mi_scores(g, est, part.src, part.dst);
  part.positive.resize(part.src.size());
  for (std::size_t i = 0; i < part.src.size(); ++i) part.positive[i] = part.scores[i] >= threshold ? 1 : 0;
  return part;
}

Var self_supervision_loss(const Var& probs, const NeighborPartition& partition) {
  if (static_cast<std::size_t>(probs.rows()) != partition.src.size() || probs.cols() != 1) {
    throw ShapeError("self_supervision_loss: probs must align with partition pairs");
  }
  if (partition.node_count == 0) throw ValidationError("self_supervision_loss: empty partition");
  if (partition.src.empty()) return Var::scalar(0.0);
  Matrix t(probs.rows(), 1);
  for (std::size_t i = 0; i < partition.positive.size(); ++i) t(static_cast<Index>(i), 0) = partition.positive[i];
  Var p = nn::clip(probs, kProbClamp, 1.0 - kProbClamp);
  Var q = nn::add_scalar(nn::scale(p, -1.0), 1.0);
  Var ll = nn::add(nn::mul(Var::constant(t), nn::log(p)),
                   nn::mul(Var::constant((1.0 - t.array()).matrix()), nn::log(q)));
  return nn::scale(nn::sum(ll), -1.0 / static_cast<double>(partition.node_count));
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void save_partition(const std::filesystem::path& path, const NeighborPartition& partition,
                    std::uint64_t estimator_hash, std::uint64_t graph_fingerprint) {
  nlohmann::ordered_json doc;
  doc["estimator_hash"] = hex64(estimator_hash);
  doc["graph_fingerprint"] = hex64(graph_fingerprint);
  doc["threshold"] = partition.threshold;
  doc["node_count"] = partition.node_count;
  nlohmann::ordered_json nodes = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < partition.src.size(); ++i) {
    auto& entry = nodes[std::to_string(partition.src[i])];
    if (entry.is_null()) entry = {{"pos", nlohmann::json::array()}, {"neg", nlohmann::json::array()}};
    entry[partition.positive[i] ? "pos" : "neg"].push_back(partition.dst[i]);
  }
  doc["nodes"] = std::move(nodes);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write partition cache: " + path.string());
  out << doc.dump(1) << '\n';
}

std::optional<NeighborPartition> load_partition(const std::filesystem::path& path, std::uint64_t estimator_hash,
                                                std::uint64_t graph_fingerprint) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  const auto doc = nlohmann::json::parse(in);
  if (doc.at("estimator_hash").get<std::string>() != hex64(estimator_hash) ||
      doc.at("graph_fingerprint").get<std::string>() != hex64(graph_fingerprint)) {
    return std::nullopt;
  }
  NeighborPartition part;
  part.threshold = doc.at("threshold").get<double>();
  part.node_count = doc.at("node_count").get<std::size_t>();
  // Keys are decimal ids; restore ascending src order and ascending dst within a node.
  std::vector<std::tuple<Index, Index, std::uint8_t>> rows;
  for (const auto& [key, entry] : doc.at("nodes").items()) {
    const Index v = std::stoll(key);
    for (const auto& u : entry.at("pos")) rows.emplace_back(v, u.get<Index>(), 1);
    for (const auto& u : entry.at("neg")) rows.emplace_back(v, u.get<Index>(), 0);
  }
  std::sort(rows.begin(), rows.end());
  for (auto [v, u, pos] : rows) {
    part.src.push_back(v);
    part.dst.push_back(u);
    part.positive.push_back(pos);
  }
  return part;
}

}  // namespace rmgib
