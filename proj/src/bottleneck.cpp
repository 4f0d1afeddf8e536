#include "rmgib/bottleneck.hpp"

#include <cmath>

#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

using nn::Var;

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "normal"));
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

AttributeCode attribute_encode(const Var& x, const nn::MLP& f_x, const Matrix& noise) {
  const Eigen::Index out = f_x.output_dim();
  if (out % 2 != 0) throw ShapeError("attribute encoder must emit an even number of columns");
  const Eigen::Index d = out / 2;
  if (noise.rows() != x.rows() || noise.cols() != d) throw ShapeError("attribute_encode: noise shape");

  Var h = f_x.forward(x);
  if (!h.value().allFinite()) throw NumericError("attribute encoder produced non-finite output");
  AttributeCode code;
  code.mu = nn::slice_cols(h, 0, d);
  code.sigma = nn::add_scalar(nn::softplus(nn::slice_cols(h, d, d)), kSigmaFloor);
  code.noise = noise;
  code.sample = nn::add(code.mu, nn::mul(code.sigma, Var::constant(noise)));
  return code;
}

AttributeCode attribute_encode(const Var& x, const nn::MLP& f_x, std::uint64_t noise_seed) {
  return attribute_encode(x, f_x, standard_normal(x.rows(), f_x.output_dim() / 2, noise_seed));
}

Var gaussian_kl(const Var& mu, const Var& sigma) {
  // ½(μ² + σ² − 1) − ln σ
  Var quad = nn::scale(nn::add_scalar(nn::add(nn::square(mu), nn::square(sigma)), -1.0), 0.5);
  return nn::row_sum(nn::sub(quad, nn::log(sigma)));
}

Var pair_probabilities(const Var& embeddings, std::span<const Eigen::Index> a, std::span<const Eigen::Index> b) {
  Var score = nn::row_dot(nn::gather_rows(embeddings, a), nn::gather_rows(embeddings, b));
  return nn::clip(nn::sigmoid(score), kProbClamp, 1.0 - kProbClamp);
}

Var neighbor_probs(const Neighborhood& hood, const Matrix& features, const nn::MLP& f_n) {
  Matrix x(static_cast<Eigen::Index>(hood.local_size()), features.cols());
  for (std::size_t i = 0; i < hood.local_size(); ++i) {
    const NodeId v = hood.local_node(static_cast<int>(i));
    if (v < 0 || v >= features.rows()) throw ShapeError("neighbor_probs: node outside feature matrix");
    x.row(static_cast<Eigen::Index>(i)) = features.row(v);
  }
  Var h = f_n.forward(Var::constant(std::move(x)));
  std::vector<Eigen::Index> centers(hood.members.size(), 0);
  std::vector<Eigen::Index> members(hood.members.size());
  for (std::size_t i = 0; i < members.size(); ++i) members[i] = static_cast<Eigen::Index>(i + 1);
  return pair_probabilities(h, centers, members);
}

Matrix logistic_noise(Eigen::Index rows, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "logistic"));
  // Open interval keeps both logs finite.
  std::uniform_real_distribution<double> dist(std::nextafter(0.0, 1.0), 1.0);
  Matrix m(rows, 1);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double u = dist(rng);
    m(i, 0) = std::log(u) - std::log1p(-u);
  }
  return m;
}

MaskSample sample_mask(const Var& probs, double temperature, MaskMode mode, const Matrix& noise) {
  if (!(temperature > 0.0)) throw ValidationError("sample_mask: temperature must be positive");
  if (probs.cols() != 1 || noise.rows() != probs.rows() || noise.cols() != 1) {
    throw ShapeError("sample_mask: probs and noise must be matching column vectors");
  }
  Var p = nn::clip(probs, kProbClamp, 1.0 - kProbClamp);
  Var logit = nn::sub(nn::log(p), nn::log(nn::add_scalar(nn::scale(p, -1.0), 1.0)));
  MaskSample out;
  out.relaxed = nn::sigmoid(nn::scale(nn::add(logit, Var::constant(noise)), 1.0 / temperature));
  out.hard = (out.relaxed.value().array() > 0.5).cast<double>().matrix();
  out.mask = mode == MaskMode::relaxed ? out.relaxed : nn::straight_through(out.hard, out.relaxed);
  return out;
}

MaskSample sample_mask(const Var& probs, double temperature, MaskMode mode, std::uint64_t seed) {
  return sample_mask(probs, temperature, mode, logistic_noise(probs.rows(), seed));
}

Var bernoulli_kl_terms(const Var& probs, double prior_rate) {
  if (!(prior_rate > 0.0 && prior_rate < 1.0)) throw ValidationError("prior rate must lie in (0, 1)");
  Var p = nn::clip(probs, kProbClamp, 1.0 - kProbClamp);
  Var q = nn::add_scalar(nn::scale(p, -1.0), 1.0);
  // p ln p + q ln q − p ln r − q ln(1 − r)
  Var neg_entropy = nn::add(nn::mul(p, nn::log(p)), nn::mul(q, nn::log(q)));
  Var cross = nn::add(nn::scale(p, std::log(prior_rate)), nn::scale(q, std::log1p(-prior_rate)));
  return nn::sub(neg_entropy, cross);
}

Var bernoulli_kl(const Var& probs, double prior_rate) {
  if (probs.rows() == 0) {
    if (!(prior_rate > 0.0 && prior_rate < 1.0)) throw ValidationError("prior rate must lie in (0, 1)");
    return Var::scalar(0.0);
  }
  return nn::sum(bernoulli_kl_terms(probs, prior_rate));
}

Matrix LocalAdjacency::dense() const {
  const auto n = static_cast<Eigen::Index>(size);
  Matrix a = Matrix::Zero(n, n);
  for (auto [i, j] : edges) {
    a(i, j) = 1.0;
    a(j, i) = 1.0;
  }
  return a;
}

NeighborSelection assemble_selection(const Neighborhood& hood, std::span<const double> hard_mask) {
  if (hard_mask.size() != hood.members.size()) throw ShapeError("assemble_selection: mask length != member count");
  NeighborSelection sel;
  sel.hard_mask = Matrix(static_cast<Eigen::Index>(hard_mask.size()), 1);
  std::vector<int> new_local(hood.local_size(), -1);
  new_local[0] = 0;
  for (std::size_t i = 0; i < hard_mask.size(); ++i) {
    sel.hard_mask(static_cast<Eigen::Index>(i), 0) = hard_mask[i];
    if (hard_mask[i] > 0.5) {
      sel.selected.push_back(hood.members[i]);
      new_local[i + 1] = static_cast<int>(sel.selected.size());
    }
  }
  sel.local_adjacency.size = sel.selected.size() + 1;
  for (auto [a, b] : hood.local_edges) {
    const int na = new_local[static_cast<std::size_t>(a)];
    const int nb = new_local[static_cast<std::size_t>(b)];
    if (na >= 0 && nb >= 0) sel.local_adjacency.edges.emplace_back(std::min(na, nb), std::max(na, nb));
  }
  return sel;
}

}  // namespace rmgib
