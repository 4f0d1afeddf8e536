#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "rmgib/errors.hpp"
#include "rmgib/predictor.hpp"

using namespace rmgib;
using nn::Var;

namespace {

GCNStack identity_stack(Eigen::Index c, int layers = 1) {
  GCNStack s({c, c, static_cast<int>(c), layers, Aggregator::gcn}, "f_c", 1);
  for (int l = 0; l < s.weight_layers(); ++l) {
    s.params().at("w" + std::to_string(l)).mutable_value() = Matrix::Identity(c, c);
  }
  return s;
}

// Dense reference: relu between layers of Â H W + b, Â from the aggregator rule.
Matrix dense_logits(const Matrix& adj, const Matrix& x, const GCNStack& s) {
  const Eigen::Index n = adj.rows();
  const Matrix a = adj + Matrix::Identity(n, n);
  const Eigen::VectorXd d = a.rowwise().sum();
  Matrix norm(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      norm(i, j) = s.spec().aggregator == Aggregator::mean ? a(i, j) / d(i) : a(i, j) / std::sqrt(d(i) * d(j));
  if (s.spec().aggregator == Aggregator::sgc) {
    Matrix h = x;
    for (int l = 0; l < s.spec().layers; ++l) h = norm * h;
    return (h * s.weight(0).value()).rowwise() + s.bias(0).value().row(0);
  }
  Matrix h = x;
  for (int l = 0; l < s.weight_layers(); ++l) {
    h = (norm * (h * s.weight(l).value())).rowwise() + s.bias(l).value().row(0);
    if (l + 1 < s.weight_layers()) h = h.cwiseMax(0.0);
  }
  return h;
}

Matrix random_codes(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n;
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

double test_accuracy(const Graph& g, const Splits& s, const Matrix& post) {
  std::vector<int> labels;
  for (NodeId v : s.test_ids) labels.push_back(g.labels()[static_cast<std::size_t>(v)]);
  return accuracy(post, s.test_ids, labels);
}

}  // namespace

TEST_SUITE("predictor") {
  TEST_CASE("gcn_forward: single node, zero codes and the 2-clique") {
    const GCNStack s = identity_stack(3);
    const Matrix code = (Matrix(1, 3) << 0.2, -1.0, 4.0).finished();
    CHECK((gcn_forward(Var::constant(code), LocalAdjacency{1, {}}, s).value() - code).cwiseAbs().maxCoeff() < 1e-15);

    const GCNStack deep({3, 8, 4, 2, Aggregator::gcn}, "f_c", 3);
    const Matrix post = nn::softmax(gcn_forward(Var::constant(Matrix::Zero(3, 3)), LocalAdjacency{3, {{0, 1}, {1, 2}}}, deep).value());
    CHECK((post.array() - 0.25).abs().maxCoeff() < 1e-15);

    const Matrix e = Matrix::Identity(2, 2);
    const GCNStack two = identity_stack(2);
    const Matrix logits = gcn_forward(Var::constant(e), LocalAdjacency{2, {{0, 1}}}, two).value();
    CHECK(logits(0, 0) == doctest::Approx(0.5));
    CHECK(logits(0, 1) == doctest::Approx(0.5));
    CHECK(logits.rows() == 1);

    CHECK_THROWS_AS(gcn_forward(Var::constant(Matrix::Zero(2, 4)), LocalAdjacency{2, {{0, 1}}}, two), ShapeError);
  }

  TEST_CASE("gcn_forward without neighbors reduces to an MLP on the center code") {
    const GCNStack s({4, 6, 3, 2, Aggregator::gcn}, "f_c", 9);
    const Matrix z = random_codes(1, 4, 2);
    const Matrix h = ((z * s.weight(0).value()) + s.bias(0).value()).cwiseMax(0.0);
    const Matrix expect = h * s.weight(1).value() + s.bias(1).value();
    CHECK((gcn_forward(Var::constant(z), LocalAdjacency{1, {}}, s).value() - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("whole-graph propagation matches the dense formula for every aggregator") {
    const Graph g = fixtures::ten_node_graph();
    const Matrix x = random_codes(10, 4, 5);
    for (Aggregator a : {Aggregator::gcn, Aggregator::sgc, Aggregator::mean}) {
      const GCNStack s({4, 5, 3, 2, a}, "f_c", 4);
      const GraphPropagation prop(g, 2, a);
      const Matrix got = graph_logits(prop, Var::constant(x), s).value();
      CHECK((got - dense_logits(g.dense_adjacency(), x, s)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("batched local logits equal per-center gcn_forward on the selected subgraph") {
    const Graph g = fixtures::ten_node_graph();
    const Matrix codes = random_codes(10, 4, 6);
    std::vector<Neighborhood> hoods;
    for (NodeId c : {0, 3, 9, 6}) hoods.push_back(k_hop(g, c, 2));
    const LocalBatch batch(hoods, 2);
    Matrix batch_codes(static_cast<Eigen::Index>(batch.code_nodes().size()), 4);
    for (std::size_t i = 0; i < batch.code_nodes().size(); ++i) batch_codes.row(static_cast<Eigen::Index>(i)) = codes.row(batch.code_nodes()[i]);
    Rng rng(3);
    std::bernoulli_distribution coin(0.6);
    Matrix mask(static_cast<Eigen::Index>(batch.pair_count()), 1);
    for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, 0) = coin(rng);

    for (Aggregator a : {Aggregator::gcn, Aggregator::sgc, Aggregator::mean}) {
      const GCNStack s({4, 5, 3, 2, a}, "f_c", 8);
      const Matrix got = local_logits(batch, Var::constant(batch_codes), Var::constant(mask), s).value();
      REQUIRE(got.rows() == 4);
      for (std::size_t c = 0; c < hoods.size(); ++c) {
        const auto off = batch.pair_offsets();
        std::vector<double> bits;
        for (std::size_t p = off[c]; p < off[c + 1]; ++p) bits.push_back(mask(static_cast<Eigen::Index>(p), 0));
        const NeighborSelection sel = assemble_selection(hoods[c], bits);
        Matrix local(static_cast<Eigen::Index>(sel.selected.size() + 1), 4);
        local.row(0) = codes.row(hoods[c].center);
        for (std::size_t i = 0; i < sel.selected.size(); ++i) local.row(static_cast<Eigen::Index>(i + 1)) = codes.row(sel.selected[i]);
        const Matrix ref = gcn_forward(Var::constant(local), sel.local_adjacency, s).value();
        CHECK((got.row(static_cast<Eigen::Index>(c)) - ref.row(0)).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }

  TEST_CASE("local logits with an all-ones mask match whole-graph propagation on a diameter-2 graph") {
    // Wheel: hub 0 joined to a 7-cycle. Every 2-hop ball is the whole graph.
    std::vector<std::pair<int, int>> e;
    for (int i = 1; i <= 7; ++i) {
      e.emplace_back(0, i);
      e.emplace_back(i, i % 7 + 1);
    }
    const Graph g = fixtures::make_graph(8, e, 2, 4, 3);
    const Matrix x = random_codes(8, 4, 16);
    std::vector<Neighborhood> hoods;
    for (NodeId c = 0; c < 8; ++c) hoods.push_back(k_hop(g, c, 2));
    const LocalBatch batch(hoods, 2);
    Matrix bc(static_cast<Eigen::Index>(batch.code_nodes().size()), 4);
    for (std::size_t i = 0; i < batch.code_nodes().size(); ++i) bc.row(static_cast<Eigen::Index>(i)) = x.row(batch.code_nodes()[i]);
    for (Aggregator a : {Aggregator::gcn, Aggregator::sgc, Aggregator::mean}) {
      const GCNStack s({4, 5, 3, 2, a}, "f_c", 2);
      const Matrix local = local_logits(batch, Var::constant(bc), Var(), s).value();
      const Matrix whole = graph_logits(GraphPropagation(g, 2, a), Var::constant(x), s).value();
      CHECK((local - whole).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("classification_loss examples") {
    CHECK(classification_loss(Matrix(Matrix::Constant(3, 7, 1.0 / 7)), std::vector<int>{0, 3, 6}) == doctest::Approx(std::log(7.0)));
    Matrix onehot = Matrix::Zero(2, 3);
    onehot(0, 1) = onehot(1, 2) = 1.0;
    CHECK(classification_loss(onehot, std::vector<int>{1, 2}) == doctest::Approx(0.0));
    CHECK(classification_loss(Matrix((Matrix(1, 3) << 0.5, 0.25, 0.25).finished()), std::vector<int>{1}) == doctest::Approx(std::log(4.0)));
    // Logit form agrees with the probability form.
    const Matrix logits = random_codes(4, 3, 1);
    const std::vector<int> y{0, 2, 1, 1};
    CHECK(classification_loss(Var::constant(logits), y).item() == doctest::Approx(classification_loss(nn::softmax(logits), y)));
  }

  TEST_CASE("posteriors sum to one and permute with the output columns") {
    const Graph g = fixtures::ten_node_graph();
    const Matrix x = random_codes(10, 4, 7);
    GCNStack s({4, 5, 3, 2, Aggregator::gcn}, "f_c", 2);
    const GraphPropagation prop(g, 2, Aggregator::gcn);
    const Matrix p = nn::softmax(graph_logits(prop, Var::constant(x), s).value());
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    const std::vector<int> perm{2, 0, 1};
    GCNStack q = s;
    q.params() = s.params().clone();
    for (int k = 0; k < 3; ++k) {
      q.params().at("w1").mutable_value().col(perm[static_cast<std::size_t>(k)]) = s.weight(1).value().col(k);
      q.params().at("b1").mutable_value()(0, perm[static_cast<std::size_t>(k)]) = s.bias(1).value()(0, k);
    }
    const Matrix pq = nn::softmax(graph_logits(prop, Var::constant(x), q).value());
    for (int k = 0; k < 3; ++k) CHECK((pq.col(perm[static_cast<std::size_t>(k)]) - p.col(k)).cwiseAbs().maxCoeff() < 1e-12);
    const auto a = argmax_rows(p);
    const auto b = argmax_rows(pq);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == perm[static_cast<std::size_t>(a[i])]);
  }

  TEST_CASE("predictor gradients pass finite-difference checks") {
    const Graph g = fixtures::ten_node_graph();
    std::vector<Neighborhood> hoods;
    for (NodeId c : {1, 4, 8}) hoods.push_back(k_hop(g, c, 2));
    const LocalBatch batch(hoods, 2);
    const std::vector<int> y{0, 1, 0};
    for (Aggregator a : {Aggregator::gcn, Aggregator::sgc, Aggregator::mean}) {
      GCNStack s({4, 5, 2, 2, a}, "f_c", 3);
      nn::ParamSet in("in");
      in.add("codes", random_codes(static_cast<Eigen::Index>(batch.code_nodes().size()), 4, 4));
      in.add("mask", Matrix::Constant(static_cast<Eigen::Index>(batch.pair_count()), 1, 0.7) + 0.2 * random_codes(static_cast<Eigen::Index>(batch.pair_count()), 1, 5));
      auto loss = [&] { return classification_loss(local_logits(batch, in.at("codes"), in.at("mask"), s), y); };
      CHECK(nn::gradient_check(loss, {&s.params(), &in}).max_rel_error < 1e-6);
    }
  }

  TEST_CASE("baseline GCN: separable fixture, signal-free fixture, divergence") {
    const Graph sep = generate_sbm({{80, 80, 80}, 0.08, 0.004, 12, 3.0}, 2);
    const Splits s = split_nodes(sep, 0.05, 60, 120, 1);
    const TrainOptions opts{100, 0.01, 5e-4, 32, 2, Aggregator::gcn};
    const GcnModel m = baseline_gcn_train(sep, s.train_ids, s.train_labels, s.val_ids, opts, 1);
    CHECK(test_accuracy(sep, s, m.posteriors) > 0.9);
    CHECK((m.posteriors.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
    CHECK(m.best_epoch >= 1);
    CHECK(m.curve.size() == 100);

    const Graph flat = generate_sbm({{100, 100, 100, 100}, 0.02, 0.02, 8, 0.0}, 3);
    const Splits f = split_nodes(flat, 0.1, 40, 300, 2);
    const double acc = test_accuracy(flat, f, baseline_gcn_train(flat, f.train_ids, f.train_labels, {}, opts, 1).posteriors);
    CHECK(std::abs(acc - 0.25) <= 3 * std::sqrt(0.25 * 0.75 / 300));

    TrainOptions wild = opts;
    wild.lr = 1e300;
    CHECK_THROWS_AS(baseline_gcn_train(sep, s.train_ids, s.train_labels, {}, wild, 1), DivergenceError);
    CHECK_THROWS(baseline_gcn_train(sep, {}, {}, {}, opts, 1));
  }

  TEST_CASE("GCN+IB with beta = 0 optimizes exactly the classification loss") {
    const Graph g = generate_sbm({{30, 30}, 0.1, 0.01, 6, 1.0}, 4);
    const Splits s = split_nodes(g, 0.1, 10, 20, 1);
    const TrainOptions opts{1, 0.01, 5e-4, 8, 2, Aggregator::gcn};
    const std::uint64_t seed = 5;
    // Same initialization and first-epoch draw as the trainer.
    nn::MLP f_x({g.feature_dim(), 8, 2 * 4}, "f_x", seed);
    GCNStack stack({4, 8, g.class_count(), 2, Aggregator::gcn}, "f_c", seed);
    const AttributeCode code = attribute_encode(Var::constant(g.features()), f_x, derive_seed(seed, std::uint64_t{1}));
    std::vector<Eigen::Index> rows(s.train_ids.begin(), s.train_ids.end());
    const Var logits = graph_logits(GraphPropagation(g, 2, Aggregator::gcn), code.sample, stack);
    const double l_c = classification_loss(nn::gather_rows(logits, rows), s.train_labels).item();
    const double kl = nn::mean(gaussian_kl(code)).item();
    CHECK(gcn_ib_train(g, s.train_ids, s.train_labels, {}, opts, 0.0, 4, seed).curve[0].loss == doctest::Approx(l_c).epsilon(1e-12));
    CHECK(gcn_ib_train(g, s.train_ids, s.train_labels, {}, opts, 0.5, 4, seed).curve[0].loss ==
          doctest::Approx(l_c + 0.5 * kl).epsilon(1e-12));
  }
}
