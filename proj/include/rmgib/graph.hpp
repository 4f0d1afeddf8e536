#pragma once

// Undirected attributed graphs, node splits, K-hop neighborhoods, synthetic
// generation and structural perturbations.

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "rmgib/autograd.hpp"

namespace rmgib {

using NodeId = std::int32_t;
using nn::Matrix;

// Unordered pair stored with u < v.
struct Edge {
  NodeId u = 0;
  NodeId v = 0;

  static Edge make(NodeId a, NodeId b) { return a < b ? Edge{a, b} : Edge{b, a}; }
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

class Graph {
 public:
  Graph() = default;
  // Validates all invariants; throws ValidationError on any violation
  // (bad endpoint, duplicate edge, self-loop, shape mismatch, bad label).
  Graph(std::size_t node_count, std::vector<Edge> edges, Matrix features, std::vector<int> labels,
        int class_count);

  std::size_t node_count() const { return node_count_; }
  std::size_t edge_count() const { return edges_.size(); }
  Eigen::Index feature_dim() const { return features_.cols(); }
  int class_count() const { return class_count_; }

  const std::vector<Edge>& edges() const { return edges_; }  // sorted
  const Matrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }

  std::span<const NodeId> neighbors(NodeId v) const;  // sorted ascending
  std::size_t degree(NodeId v) const { return neighbors(v).size(); }
  bool has_edge(NodeId a, NodeId b) const;
  bool valid_node(NodeId v) const { return v >= 0 && static_cast<std::size_t>(v) < node_count_; }

  Matrix dense_adjacency() const;
  // Content hash over structure, features and labels.
  std::uint64_t fingerprint() const;

 private:
  std::size_t node_count_ = 0;
  std::vector<Edge> edges_;
  Matrix features_;
  std::vector<int> labels_;
  int class_count_ = 0;
  std::vector<std::size_t> offsets_{0};
  std::vector<NodeId> adjacency_;
};

struct LoadedGraph {
  Graph graph;
  std::size_t duplicate_edges = 0;  // includes reversed duplicates
  std::size_t self_loops = 0;
};

// nodes.tsv: `node_id<TAB>label<TAB>f1,f2,...,fD`; edges.tsv: `src<TAB>dst`.
// Lines starting with '#' and blank lines are skipped.
LoadedGraph load_graph(const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path);
void save_graph(const Graph& g, const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path);

struct SbmParams {
  std::vector<std::size_t> block_sizes;
  double p_in = 0.1;
  double p_out = 0.01;
  Eigen::Index feature_dim = 16;
  double feature_signal = 1.0;
};

// Stochastic block model. Node features are signal * onehot(block) plus
// N(0, 1) noise in every coordinate; labels are block ids.
Graph generate_sbm(const SbmParams& params, std::uint64_t seed);

struct Splits {
  std::vector<NodeId> train_ids;
  std::vector<NodeId> val_ids;
  std::vector<NodeId> test_ids;
  std::vector<int> train_labels;
};

// Disjoint uniform sample; |train| = floor(label_rate * N).
Splits split_nodes(const Graph& g, double label_rate, std::size_t val_count, std::size_t test_count,
                   std::uint64_t seed);

struct Neighborhood {
  NodeId center = 0;
  std::vector<NodeId> members;  // BFS order, excludes center
  std::vector<int> hops;        // aligned with members, values in [1, K]
  // Edges of the graph among {center} ∪ members in local indices:
  // 0 is the center, i + 1 is members[i].
  std::vector<std::pair<int, int>> local_edges;

  int hop_of(NodeId node) const;  // -1 if not a member
  std::size_t local_size() const { return members.size() + 1; }
  NodeId local_node(int local) const { return local == 0 ? center : members[static_cast<std::size_t>(local - 1)]; }
};

Neighborhood k_hop(const Graph& g, NodeId center, int K);

struct Subgraph {
  Graph graph;
  std::vector<NodeId> original_ids;  // new id -> original id
};

// Induced subgraph on floor(fraction * N) uniformly sampled nodes.
Subgraph subsample_graph(const Graph& g, double node_fraction, std::uint64_t seed);

struct Perturbation {
  Graph graph;
  std::vector<Edge> flips;       // pairs toggled, in application order
  std::size_t random_fallback = 0;  // heterophilic budget spent on random flips
};

// Toggles each pair: edge -> non-edge, non-edge -> edge.
Graph apply_flips(const Graph& g, std::span<const Edge> flips);

// floor(rate * |E|) distinct uniformly random pair flips.
Perturbation perturb_random(const Graph& g, double rate, std::uint64_t seed);

// Spends floor(rate * |E|) on new edges between differently-labelled nodes,
// lowest cosine feature similarity first among a uniformly sampled candidate
// pool. If `targets` is non-empty, every injected edge touches a target node.
Perturbation perturb_heterophilic(const Graph& g, double rate, std::span<const int> labels, std::uint64_t seed,
                                  std::span<const NodeId> targets = {});

}  // namespace rmgib
