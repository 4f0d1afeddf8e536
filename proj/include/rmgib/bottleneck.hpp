#pragma once

// Attribute bottleneck (Gaussian code, reparameterized) and neighbor
// bottleneck (per-neighbor Bernoulli retention with a binary-concrete
// relaxation), each with its closed-form KL to a fixed prior.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "rmgib/graph.hpp"
#include "rmgib/nn.hpp"

namespace rmgib {

inline constexpr double kSigmaFloor = 1e-6;
inline constexpr double kProbClamp = 1e-6;

// Rows are nodes. sample = mu + sigma ⊙ noise.
struct AttributeCode {
  nn::Var mu;
  nn::Var sigma;
  nn::Var sample;
  Matrix noise;
};

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed);

// f_x must emit 2·d columns: [mu | raw]; sigma = softplus(raw) + 1e-6.
AttributeCode attribute_encode(const nn::Var& x, const nn::MLP& f_x, const Matrix& noise);
AttributeCode attribute_encode(const nn::Var& x, const nn::MLP& f_x, std::uint64_t noise_seed);

// Per-row KL(N(mu, sigma²) || N(0, I)) in nats: Σ_d ½(μ² + σ² − 1 − 2 ln σ).
nn::Var gaussian_kl(const nn::Var& mu, const nn::Var& sigma);
inline nn::Var gaussian_kl(const AttributeCode& code) { return gaussian_kl(code.mu, code.sigma); }

// p = clamp(logistic(<h[a_i], h[b_i]>)) for each pair i; returns P×1.
nn::Var pair_probabilities(const nn::Var& embeddings, std::span<const Eigen::Index> a,
                           std::span<const Eigen::Index> b);

// Retention probabilities of every member of `hood` given raw features.
nn::Var neighbor_probs(const Neighborhood& hood, const Matrix& features, const nn::MLP& f_n);

enum class MaskMode { relaxed, hard };

struct MaskSample {
  nn::Var mask;     // what downstream consumes: relaxed, or hard with straight-through gradient
  nn::Var relaxed;  // binary-concrete draw in (0, 1)
  Matrix hard;      // relaxed > 0.5
};

// Logistic(0, 1) noise: log u − log(1 − u), u ~ U(0, 1).
Matrix logistic_noise(Eigen::Index rows, std::uint64_t seed);

// relaxed = logistic((logit p + noise) / temperature), p clamped to [1e-6, 1 − 1e-6].
MaskSample sample_mask(const nn::Var& probs, double temperature, MaskMode mode, const Matrix& noise);
MaskSample sample_mask(const nn::Var& probs, double temperature, MaskMode mode, std::uint64_t seed);

// Per-entry KL(Bern(p) || Bern(r)), P×1.
nn::Var bernoulli_kl_terms(const nn::Var& probs, double prior_rate);
// Σ_u KL(Bern(p_u) || Bern(r)); 0 for an empty vector.
nn::Var bernoulli_kl(const nn::Var& probs, double prior_rate);

// Local graph where index 0 is the center.
struct LocalAdjacency {
  std::size_t size = 1;
  std::vector<std::pair<int, int>> edges;  // i < j

  Matrix dense() const;
};

struct NeighborSelection {
  Matrix probs;
  Matrix relaxed_mask;
  Matrix hard_mask;
  std::vector<NodeId> selected;
  LocalAdjacency local_adjacency;  // over {center} ∪ selected, in that order
};

// Keeps members whose bit is set; drops every local edge touching a removed member.
NeighborSelection assemble_selection(const Neighborhood& hood, std::span<const double> hard_mask);

}  // namespace rmgib
