#pragma once

// Full objective L_C + β(L_I^x + L_I^n) + γ L_S, the two-stage pseudo-label
// pipeline, and deterministic inference (z = μ, keep neighbors with p > 0.5).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "rmgib/bottleneck.hpp"
#include "rmgib/graph.hpp"
#include "rmgib/mi_supervisor.hpp"
#include "rmgib/nn.hpp"
#include "rmgib/predictor.hpp"

namespace rmgib {

struct GibConfig {
  Eigen::Index hidden = 256;
  Eigen::Index code_dim = 64;   // width of z_x
  Eigen::Index embed_dim = 64;  // width of the f_n embedding
  int layers = 2;               // also the hop scope K
  Aggregator aggregator = Aggregator::gcn;

  double beta = 0.001;
  double gamma = 0.01;
  double prior_rate = 0.5;
  double temperature = 1.0;
  MaskMode mask_mode = MaskMode::hard;

  int epochs = 200;
  double lr = 0.01;
  double weight_decay = 5e-4;
};

class GibModel {
 public:
  GibModel() = default;
  GibModel(const GibConfig& cfg, Eigen::Index in_dim, int classes, std::uint64_t seed);

  nn::MLP f_x;  // features -> [mu | raw sigma]
  nn::MLP f_n;  // features -> neighbor-selection embedding
  GCNStack f_c;

  std::vector<nn::ParamSet*> param_sets();
  std::vector<const nn::ParamSet*> param_sets() const;
  GibModel clone() const;
  void assign(const GibModel& other);
};

struct LossTerms {
  nn::Var l_c;
  nn::Var l_ix;
  nn::Var l_in;
  nn::Var l_s;
  nn::Var total;
};

struct LossBreakdown {
  double l_c = 0.0;
  double l_ix = 0.0;
  double l_in = 0.0;
  double l_s = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  double total = 0.0;

  double recombined() const { return l_c + beta * (l_ix + l_in) + gamma * l_s; }
};

LossBreakdown breakdown(const LossTerms& terms, double beta, double gamma);

// Frozen stochastic inputs of one objective evaluation.
struct GibDraws {
  Matrix attribute_noise;  // code_nodes × code_dim
  Matrix mask_noise;       // pairs × 1, logistic
};

// Caches the batch structure (neighborhoods, propagation plan) across epochs.
//
// L_C: mean NLL over the batch. L_I^x: mean Gaussian KL over every code the
// batch encodes (centers and their neighbors). L_I^n: summed Bernoulli KL of
// each center's neighbors, averaged over centers. L_S: over the whole
// partition, independent of the batch.
class GibObjective {
 public:
  GibObjective(const Graph& g, std::span<const NodeId> batch, std::span<const int> labels,
               const NeighborPartition* partition, int hops);

  GibDraws draws(Eigen::Index code_dim, std::uint64_t seed) const;
  LossTerms evaluate(const GibModel& model, const GibConfig& cfg, const GibDraws& draws) const;
  LossTerms evaluate(const GibModel& model, const GibConfig& cfg, std::uint64_t seed) const;

  const LocalBatch& batch() const { return batch_; }

 private:
  const Graph* graph_;
  std::vector<int> labels_;
  const NeighborPartition* partition_;
  LocalBatch batch_;
  Matrix code_features_;
};

LossBreakdown gib_loss(const Graph& g, std::span<const NodeId> batch, std::span<const int> labels,
                       const GibModel& model, const NeighborPartition* partition, const GibConfig& cfg,
                       std::uint64_t seed);

// Deterministic posteriors for a fixed node set.
class GibInference {
 public:
  GibInference(const Graph& g, std::span<const NodeId> nodes, int hops);
  Matrix predict(const GibModel& model) const;  // |nodes| × C

 private:
  const Graph* graph_;
  LocalBatch batch_;
  Matrix code_features_;
};

Matrix gib_predict_all(const GibModel& model, const Graph& g, int hops);

// Deterministic neighbor selection of one center.
NeighborSelection select_neighbors(const GibModel& model, const Graph& g, NodeId center, int hops);

struct LossRow {
  int epoch = 0;
  LossBreakdown parts;
  double val_acc = 0.0;
};

struct GibTrainResult {
  GibModel model;
  int best_epoch = -1;
  double best_val_acc = 0.0;
  std::vector<LossRow> curve;
};

// Full-batch training; keeps the best-validation checkpoint (later epochs win ties).
GibTrainResult train_gib(const Graph& g, std::span<const NodeId> ids, std::span<const int> labels,
                         std::span<const NodeId> val_ids, const NeighborPartition* partition, const GibConfig& cfg,
                         std::uint64_t seed);

GibTrainResult stage1_train(const Graph& g, const Splits& splits, const NeighborPartition* partition,
                            const GibConfig& cfg, std::uint64_t seed);

enum class LabelSource : std::uint8_t { given, pseudo };

struct PseudoLabelSet {
  std::vector<NodeId> node_ids;  // ascending
  std::vector<int> labels;
  std::vector<LabelSource> sources;
};

// V_U = every node outside the training set. `fraction` of V_U is sampled
// uniformly; nodes whose top probability is below `min_confidence` are skipped.
PseudoLabelSet collect_pseudo_labels(const Matrix& posteriors, const Splits& splits, double fraction = 1.0,
                                     double min_confidence = 0.0, std::uint64_t seed = 0);

// Re-initialized parameters, trained on V_P with the same weights as stage 1.
GibTrainResult stage2_train(const Graph& g, const PseudoLabelSet& pl, std::span<const NodeId> val_ids,
                            const NeighborPartition* partition, const GibConfig& cfg, std::uint64_t seed);

void write_loss_curve(const std::filesystem::path& path, std::span<const LossRow> curve);
void write_pseudo_labels(const std::filesystem::path& path, const PseudoLabelSet& pl);

}  // namespace rmgib
