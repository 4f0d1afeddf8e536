#pragma once

// Contrastive mutual-information estimator over linked node pairs and the
// neighbor partition it induces. f_M reads raw attributes only; it never
// sees the adjacency.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rmgib/graph.hpp"
#include "rmgib/nn.hpp"

namespace rmgib {

struct MIEstimator {
  nn::MLP f_M;
  double threshold = 0.5;
};

struct MiOptions {
  Eigen::Index hidden = 256;
  Eigen::Index embed_dim = 64;
  int epochs = 200;
  double lr = 0.01;
  int negatives_per_edge = 1;
  double threshold = 0.5;
};

// logistic(f_M(x_v) · f_M(x_u)); x_v and x_u are 1 × D rows.
double mi_score(const Matrix& x_v, const Matrix& x_u, const MIEstimator& est);

// Scores for node pairs (a[i], b[i]) of g.
std::vector<double> mi_scores(const Graph& g, const MIEstimator& est, std::span<const Eigen::Index> a,
                              std::span<const Eigen::Index> b);

// Directed neighbor pairs (v, u), u ∈ N(v), grouped by v ascending.
void directed_pairs(const Graph& g, std::vector<Eigen::Index>& src, std::vector<Eigen::Index>& dst);

// k uniform negatives per pair, n != v; flattened pair-major.
std::vector<Eigen::Index> sample_negatives(std::span<const Eigen::Index> src, std::size_t node_count, int k,
                                           std::uint64_t seed);

// (1/N) Σ_(v,u) [ −ln s_vu + (1/k) Σ_n −ln(1 − s_vn) ].
nn::Var mi_loss(const nn::MLP& f_M, const Matrix& features, std::span<const Eigen::Index> src,
                std::span<const Eigen::Index> dst, std::span<const Eigen::Index> negatives, int k);

MIEstimator train_mi_estimator(const Graph& g, const MiOptions& options, std::uint64_t seed);

struct NeighborPartition {
  std::size_t node_count = 0;
  double threshold = 0.5;
  std::vector<Eigen::Index> src;  // directed pairs, grouped by src ascending
  std::vector<Eigen::Index> dst;
  std::vector<double> scores;  // empty when restored from a cache file
  std::vector<std::uint8_t> positive;

  std::vector<NodeId> positives(NodeId v) const;
  std::vector<NodeId> negatives(NodeId v) const;
  std::size_t negative_count() const;
};

// N_v^- = {u ∈ N_v : s_vu < threshold}.
NeighborPartition partition_neighbors(const Graph& g, const MIEstimator& est);
NeighborPartition partition_neighbors(const Graph& g, const MIEstimator& est, double threshold);

// probs aligned with partition pairs (P × 1):
// (1/N) Σ_v [ Σ_{u∈N_v^+} −ln p_u^v + Σ_{u∈N_v^-} −ln(1 − p_u^v) ].
nn::Var self_supervision_loss(const nn::Var& probs, const NeighborPartition& partition);

// JSON cache keyed by estimator parameter hash and graph fingerprint.
void save_partition(const std::filesystem::path& path, const NeighborPartition& partition,
                    std::uint64_t estimator_hash, std::uint64_t graph_fingerprint);
// nullopt when the file is missing or either key differs.
std::optional<NeighborPartition> load_partition(const std::filesystem::path& path, std::uint64_t estimator_hash,
                                                std::uint64_t graph_fingerprint);

}  // namespace rmgib
