#pragma once

// GNN classifier over bottlenecked codes, the classification loss, and the
// reference models (plain GCN, GCN with an attribute bottleneck only).
//
// Propagation is expressed as a list of sparse layers: layer k writes
// rows[k] outputs, out[dst] += w[widx] * in[src]. Whole-graph training uses
// one fixed layer repeated; the neighbor-bottleneck predictor uses a batched
// disjoint union of per-center subgraphs whose edge weights depend on the
// (differentiable) neighbor mask.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rmgib/bottleneck.hpp"
#include "rmgib/graph.hpp"
#include "rmgib/nn.hpp"

namespace rmgib {

enum class Aggregator { gcn, sgc, mean };

Aggregator parse_aggregator(const std::string& name);
std::string to_string(Aggregator a);

struct GCNSpec {
  Eigen::Index in_dim = 0;
  Eigen::Index hidden = 256;
  int classes = 0;
  int layers = 2;
  Aggregator aggregator = Aggregator::gcn;
};

// gcn / mean: one weight+bias per layer (in -> hidden -> ... -> classes).
// sgc: `layers` parameter-free propagations followed by one affine map.
class GCNStack {
 public:
  GCNStack() = default;
  GCNStack(GCNSpec spec, std::string tag, std::uint64_t seed);

  const GCNSpec& spec() const { return spec_; }
  int weight_layers() const;
  const nn::Var& weight(int l) const;
  const nn::Var& bias(int l) const;
  nn::ParamSet& params() { return params_; }
  const nn::ParamSet& params() const { return params_; }

 private:
  GCNSpec spec_;
  nn::ParamSet params_;
};

struct PropagationLayer {
  std::vector<Eigen::Index> dst;
  std::vector<Eigen::Index> src;
  std::vector<Eigen::Index> widx;
  Eigen::Index rows = 0;
};

// x0 rows are whatever layer 0's src indices address; returns last layer rows × C.
nn::Var run_stack(const GCNStack& stack, const nn::Var& x0, const nn::Var& weights,
                  const std::vector<PropagationLayer>& plan);

// Whole-graph propagation with self-loops: symmetric 1/sqrt(d_i d_j) for gcn/sgc,
// 1/d_i for mean, where d_i = 1 + deg(i).
class GraphPropagation {
 public:
  GraphPropagation(const Graph& g, int layers, Aggregator aggregator);

  const std::vector<PropagationLayer>& plan() const { return plan_; }
  const nn::Var& weights() const { return weights_; }

 private:
  std::vector<PropagationLayer> plan_;
  nn::Var weights_;
};

nn::Var graph_logits(const GraphPropagation& prop, const nn::Var& x, const GCNStack& stack);

// Disjoint union of the K-hop neighborhoods of a batch of centers.
//
// Each (center, member) occurrence is a "pair"; its retention mask weights
// the member's local edges: a_ij = m_i m_j with m_center = 1. Layer k only
// evaluates local nodes with hop <= K - k, so the last layer yields exactly
// one row per center, in batch order.
class LocalBatch {
 public:
  LocalBatch(std::span<const Neighborhood> hoods, int layers);

  std::size_t center_count() const { return centers_.size(); }
  std::size_t pair_count() const { return pair_center_.size(); }
  const std::vector<NodeId>& centers() const { return centers_; }
  // Global ids, one per pair, grouped by center in batch order.
  const std::vector<Eigen::Index>& pair_center() const { return pair_center_; }
  const std::vector<Eigen::Index>& pair_member() const { return pair_member_; }
  // [offsets[c], offsets[c + 1]) are the pairs of center c.
  const std::vector<std::size_t>& pair_offsets() const { return pair_offsets_; }
  // Sorted unique global ids of every center and member; rows of the code matrix.
  const std::vector<NodeId>& code_nodes() const { return code_nodes_; }
  const std::vector<PropagationLayer>& plan() const { return plan_; }

  // Entry weights for the plan given a pair_count × 1 mask (undefined => all ones).
  nn::Var entry_weights(const nn::Var& pair_mask, Aggregator aggregator) const;

 private:
  std::vector<NodeId> centers_;
  std::vector<Eigen::Index> pair_center_;
  std::vector<Eigen::Index> pair_member_;
  std::vector<std::size_t> pair_offsets_;
  std::vector<NodeId> code_nodes_;

  std::vector<Eigen::Index> local_slot_;  // 0 = fixed one, p + 1 = pair p
  std::vector<Eigen::Index> edge_i_;      // directed local edges
  std::vector<Eigen::Index> edge_j_;
  Eigen::Index local_count_ = 0;
  std::vector<PropagationLayer> plan_;
};

// codes: code_nodes().size() rows. Returns center_count × C logits.
nn::Var local_logits(const LocalBatch& batch, const nn::Var& codes, const nn::Var& pair_mask,
                     const GCNStack& stack);

// Single-center predictor over a local graph; codes row i belongs to local node i (0 = center).
nn::Var gcn_forward(const nn::Var& codes, const LocalAdjacency& adjacency, const GCNStack& stack);

// Mean negative log-likelihood of the labels under softmax(logits).
nn::Var classification_loss(const nn::Var& logits, std::span<const int> labels);
// Same for probability rows; probabilities are floored at 1e-12.
double classification_loss(const Matrix& probs, std::span<const int> labels);

double accuracy(const Matrix& probs, std::span<const NodeId> ids, std::span<const int> labels);
std::vector<int> argmax_rows(const Matrix& probs);

struct TrainOptions {
  int epochs = 200;
  double lr = 0.01;
  double weight_decay = 5e-4;
  Eigen::Index hidden = 256;
  int layers = 2;
  Aggregator aggregator = Aggregator::gcn;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double val_acc = 0.0;
};

struct GcnModel {
  GCNStack stack;
  Matrix posteriors;  // N × C
  int best_epoch = -1;
  double best_val_acc = 0.0;
  std::vector<EpochRecord> curve;
};

// Whole-graph GCN trained on (train_ids, train_labels). With a non-empty
// val_ids the checkpoint with the best validation accuracy (ground-truth
// labels of g; later epochs win ties) is kept, otherwise the last one.
GcnModel baseline_gcn_train(const Graph& g, std::span<const NodeId> train_ids, std::span<const int> train_labels,
                            std::span<const NodeId> val_ids, const TrainOptions& options, std::uint64_t seed);

struct IbGcnModel {
  nn::MLP f_x;
  GCNStack stack;
  Matrix posteriors;  // deterministic: z = mu
  int best_epoch = -1;
  double best_val_acc = 0.0;
  std::vector<EpochRecord> curve;
};

// GCN over attribute-bottleneck codes: L_C(train) + beta * mean_v KL(v) over all nodes.
IbGcnModel gcn_ib_train(const Graph& g, std::span<const NodeId> train_ids, std::span<const int> train_labels,
                        std::span<const NodeId> val_ids, const TrainOptions& options, double beta,
                        Eigen::Index code_dim, std::uint64_t seed);

}  // namespace rmgib
