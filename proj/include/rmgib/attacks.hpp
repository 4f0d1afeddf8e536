#pragma once

// Black-box membership inference: shadow training, attack-set assembly, the
// posterior-vector attack classifier and ROC-AUC evaluation.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rmgib/graph.hpp"
#include "rmgib/nn.hpp"
#include "rmgib/predictor.hpp"

namespace rmgib {

// Mann-Whitney AUC from average ranks; tied scores count one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

enum class MiaSetting { full, sub };

MiaSetting parse_mia_setting(const std::string& name);  // "MIA-F" / "MIA-S"
std::string to_string(MiaSetting s);

struct ShadowSetup {
  MiaSetting setting = MiaSetting::full;
  Graph graph;                       // G_S
  std::vector<NodeId> original_ids;  // shadow id -> target graph id
  std::vector<NodeId> in_ids;        // V_S^in, shadow ids
  std::vector<NodeId> out_ids;       // V_S^out, shadow ids
};

// MIA-F: the whole graph; MIA-S: induced subgraph on 50% of the nodes. V_S^in and
// V_S^out are disjoint uniform samples, each of |target_train_ids| nodes, drawn
// outside the target training set.
ShadowSetup build_shadow_setup(const Graph& g, std::span<const NodeId> target_train_ids, MiaSetting setting,
                               std::uint64_t seed);

struct AttackDataset {
  Matrix posteriors;            // rows sum to 1
  std::vector<int> membership;  // 1 = member

  std::size_t members() const;
  std::size_t non_members() const { return membership.size() - members(); }
};

// Shadow GCN (the baseline architecture) trained on V_S^in with the attacker's
// labels, without validation-based selection.
AttackDataset train_shadow_and_collect(const ShadowSetup& setup, const TrainOptions& options, std::uint64_t seed);

struct AttackOptions {
  Eigen::Index hidden = 64;
  int epochs = 300;
  double lr = 0.01;
  bool sorted_input = false;  // descending-sorted posteriors instead of class order
};

struct AttackModel {
  nn::MLP f_A;  // C -> hidden -> 1
  bool sorted_input = false;
};

AttackModel train_attack_model(const AttackDataset& d, const AttackOptions& options, std::uint64_t seed);

// Membership probability per posterior row.
std::vector<double> attack_scores(const AttackModel& atk, const Matrix& posteriors);

struct PosteriorRecord {
  NodeId node_id = 0;
  std::vector<double> probs;
  std::string split_tag;  // train, val, test or unlabeled
};

using PosteriorDump = std::vector<PosteriorRecord>;

PosteriorDump make_posterior_dump(const Matrix& posteriors, const Splits& splits);
void write_posterior_dump(const std::filesystem::path& path, const PosteriorDump& dump);  // JSON lines
PosteriorDump read_posterior_dump(const std::filesystem::path& path);

// Size-matched non-members drawn from the test split.
std::vector<NodeId> sample_holdout(const Splits& splits, std::size_t count, std::uint64_t seed);

// Reads only the dump, never the target model. Members and holdout must be
// disjoint and nonempty.
double evaluate_mia(const PosteriorDump& target, std::span<const NodeId> target_train_ids,
                    std::span<const NodeId> holdout_ids, const AttackModel& atk);

std::uint64_t attack_config_hash(const AttackOptions& options, const TrainOptions& shadow);

void write_attack_report(const std::filesystem::path& path, MiaSetting setting, double roc, std::size_t members,
                         std::size_t non_members, std::uint64_t attacker_config_hash);

}  // namespace rmgib
