#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rmgib/bottleneck.hpp"
#include "rmgib/errors.hpp"

using namespace rmgib;
using nn::Var;

namespace {

Matrix col(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

}  // namespace

TEST_SUITE("bottleneck") {
  TEST_CASE("attribute_encode: softplus sigma, reparameterization, determinism") {
    nn::MLP f({3, 4}, "f_x", 1);
    f.params().at("w0").mutable_value().setZero();
    const Var x = Var::constant(Matrix::Ones(2, 3));
    const AttributeCode c = attribute_encode(x, f, 5);
    CHECK(c.sigma.value()(0, 0) == doctest::Approx(std::log(2.0) + 1e-6).epsilon(1e-15));
    CHECK(c.mu.cols() == 2);
    const Matrix expect = c.mu.value().array() + c.sigma.value().array() * c.noise.array();
    CHECK((c.sample.value() - expect).cwiseAbs().maxCoeff() == 0.0);

    nn::MLP g({3, 8, 6}, "f_x", 2);
    const AttributeCode zero = attribute_encode(x, g, Matrix(Matrix::Zero(2, 3)));
    CHECK((zero.sample.value() - zero.mu.value()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(attribute_encode(x, g, 9).noise == attribute_encode(x, g, 9).noise);
    CHECK(attribute_encode(x, g, 9).noise != attribute_encode(x, g, 10).noise);
    CHECK((attribute_encode(x, g, 9).sigma.value().array() > 0).all());

    nn::MLP odd({3, 5}, "f_x", 1);
    CHECK_THROWS_AS(attribute_encode(x, odd, 1), ShapeError);
    nn::MLP blow({3, 4}, "f_x", 1);
    blow.params().at("b0").mutable_value()(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(attribute_encode(x, blow, 1), NumericError);
  }

  TEST_CASE("gaussian_kl: closed-form examples") {
    auto kl = [](double mu, double s) {
      return gaussian_kl(Var::constant(Matrix::Constant(1, 1, mu)), Var::constant(Matrix::Constant(1, 1, s))).item();
    };
    CHECK(kl(0, 1) == 0.0);
    CHECK(kl(1, 1) == doctest::Approx(0.5));
    CHECK(kl(0, 2) == doctest::Approx(0.80685).epsilon(1e-5));
  }

  TEST_CASE("gaussian_kl matches quadrature and is nonnegative") {
    Rng rng(77);
    std::uniform_real_distribution<double> mu_d(-3, 3), s_d(0.05, 3);
    for (int i = 0; i < 200; ++i) {
      const Eigen::Index d = 1 + i % 4;
      Matrix mu(1, d), s(1, d);
      double oracle = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) {
        mu(0, k) = mu_d(rng);
        s(0, k) = s_d(rng);
        oracle += oracles::gaussian_kl_quadrature(mu(0, k), s(0, k));
      }
      const double got = gaussian_kl(Var::constant(mu), Var::constant(s)).item();
      CHECK(got == doctest::Approx(oracle).epsilon(1e-6));
      CHECK(got >= 0.0);
    }
  }

  TEST_CASE("neighbor_probs: orthogonal, zero and ln 3 embeddings") {
    // Members 1, 2 of a star; features are the embeddings when f_n is identity.
    const Graph g = fixtures::make_graph(3, {{0, 1}, {0, 2}}, 1, 2);
    nn::MLP f({2, 2}, "f_n", 1);
    f.params().at("w0").mutable_value() = Matrix::Identity(2, 2);
    Matrix x(3, 2);
    const double r = std::sqrt(std::log(3.0));
    x << r, 0, 0, 1, r, 0;
    const Neighborhood hood = k_hop(g, 0, 1);
    const Matrix p = neighbor_probs(hood, x, f).value();
    for (Eigen::Index i = 0; i < 2; ++i) {
      const NodeId m = hood.members[static_cast<std::size_t>(i)];
      CHECK(p(i, 0) == doctest::Approx(m == 1 ? 0.5 : 0.75).epsilon(1e-12));
    }
    f.params().at("w0").mutable_value().setZero();
    CHECK((neighbor_probs(hood, x, f).value().array() == 0.5).all());
    CHECK_THROWS(neighbor_probs(hood, Matrix::Zero(3, 5), f));
    const Graph iso = fixtures::make_graph(2, {}, 1, 2);
    CHECK(neighbor_probs(k_hop(iso, 0, 1), Matrix::Zero(2, 2), f).rows() == 0);
  }

  TEST_CASE("sample_mask: clamping, Monte Carlo mean, determinism, temperature") {
    const Var one = Var::constant(Matrix::Ones(1000, 1));
    const MaskSample s = sample_mask(one, 1.0, MaskMode::hard, 3);
    CHECK(s.hard.sum() >= 999.0);

    const Var half = Var::constant(Matrix::Constant(100000, 1, 0.5));
    const double mean = sample_mask(half, 1.0, MaskMode::hard, 4).hard.mean();
    CHECK(std::abs(mean - 0.5) <= 0.01);

    const Var p = Var::constant(col({0.1, 0.4, 0.9}));
    CHECK(sample_mask(p, 1.0, MaskMode::relaxed, 8).relaxed.value() == sample_mask(p, 1.0, MaskMode::relaxed, 8).relaxed.value());
    const MaskSample r = sample_mask(p, 0.7, MaskMode::relaxed, 8);
    CHECK((r.relaxed.value().array() > 0).all());
    CHECK((r.relaxed.value().array() < 1).all());
    CHECK(r.mask.value() == r.relaxed.value());
    const MaskSample h = sample_mask(p, 0.7, MaskMode::hard, 8);
    CHECK(h.mask.value() == h.hard);
    CHECK(h.hard == (h.relaxed.value().array() > 0.5).cast<double>().matrix());
    CHECK_THROWS_AS(sample_mask(p, 0.0, MaskMode::hard, 1), ValidationError);
  }

  TEST_CASE("hard-sample frequency converges to p within 3 sigma") {
    for (double pv : {0.05, 0.3, 0.62, 0.9}) {
      const int n = 20000;
      const double freq = sample_mask(Var::constant(Matrix::Constant(n, 1, pv)), 1.0, MaskMode::hard, 11).hard.mean();
      CHECK(std::abs(freq - pv) <= 3 * std::sqrt(pv * (1 - pv) / n));
    }
  }

  TEST_CASE("relaxed-mask expectation is monotone in p") {
    double prev = 0.0;
    for (double pv = 0.05; pv < 1.0; pv += 0.1) {
      const double m = sample_mask(Var::constant(Matrix::Constant(20000, 1, pv)), 1.0, MaskMode::relaxed, 12).relaxed.value().mean();
      CHECK(m > prev);
      prev = m;
    }
  }

  TEST_CASE("bernoulli_kl: examples and summation oracle") {
    CHECK(bernoulli_kl(Var::constant(col({0.3, 0.3})), 0.3).item() == doctest::Approx(0.0));
    CHECK(bernoulli_kl(Var::constant(col({0.8})), 0.5).item() == doctest::Approx(0.19274).epsilon(1e-5));
    CHECK(bernoulli_kl(Var::constant(Matrix(0, 1)), 0.5).item() == 0.0);
    Rng rng(5);
    std::uniform_real_distribution<double> u(1e-6, 1 - 1e-6);
    for (int i = 0; i < 300; ++i) {
      std::vector<double> p(static_cast<std::size_t>(1 + i % 6));
      for (double& x : p) x = u(rng);
      const double r = std::clamp(u(rng), 0.01, 0.99);
      Matrix m(static_cast<Eigen::Index>(p.size()), 1);
      for (std::size_t k = 0; k < p.size(); ++k) m(static_cast<Eigen::Index>(k), 0) = p[k];
      const double got = bernoulli_kl(Var::constant(m), r).item();
      CHECK(got == doctest::Approx(oracles::bernoulli_kl_sum(p, r)).epsilon(1e-9));
      CHECK(got > 0.0);
    }
  }

  TEST_CASE("assemble_selection: full, empty and cut masks") {
    const Graph path = fixtures::path_graph(3);
    const Neighborhood hood = k_hop(path, 0, 2);
    const std::vector<double> ones(2, 1.0), zeros(2, 0.0), drop1{0.0, 1.0};
    const NeighborSelection all = assemble_selection(hood, ones);
    CHECK(all.selected == hood.members);
    CHECK(all.local_adjacency.edges.size() == hood.local_edges.size());
    const NeighborSelection none = assemble_selection(hood, zeros);
    CHECK(none.selected.empty());
    CHECK(none.local_adjacency.dense().rows() == 1);
    CHECK(none.local_adjacency.dense()(0, 0) == 0.0);
    const NeighborSelection cut = assemble_selection(hood, drop1);
    CHECK(cut.selected == std::vector<NodeId>{2});
    CHECK(cut.local_adjacency.size == 2);
    CHECK(cut.local_adjacency.edges.empty());
    CHECK_THROWS(assemble_selection(hood, std::vector<double>{1.0}));
  }

  TEST_CASE("bottleneck gradients pass finite-difference checks") {
    nn::ParamSet p("t");
    p.add("mu", Matrix::Random(3, 4));
    p.add("raw", Matrix::Random(3, 4));
    p.add("logit", Matrix::Random(5, 1));
    auto kl_x = [&] { return nn::sum(gaussian_kl(p.at("mu"), nn::add_scalar(nn::softplus(p.at("raw")), kSigmaFloor))); };
    CHECK(nn::gradient_check(kl_x, {&p}).max_rel_error < 1e-6);
    auto kl_n = [&] { return bernoulli_kl(nn::sigmoid(p.at("logit")), 0.3); };
    CHECK(nn::gradient_check(kl_n, {&p}).max_rel_error < 1e-6);
    const Matrix noise = logistic_noise(5, 4);
    const Matrix weights = Matrix::Random(5, 1);
    auto relaxed = [&] {
      const MaskSample s = sample_mask(nn::sigmoid(p.at("logit")), 0.8, MaskMode::relaxed, noise);
      return nn::sum(nn::mul(s.mask, Var::constant(weights)));
    };
    CHECK(nn::gradient_check(relaxed, {&p}).max_rel_error < 1e-6);
  }
}
