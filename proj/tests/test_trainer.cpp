#include <doctest.h>

#include <fstream>
#include <map>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "rmgib/errors.hpp"
#include "rmgib/trainer.hpp"

using namespace rmgib;

namespace {

GibConfig small_config() {
  GibConfig c;
  c.hidden = 32;
  c.code_dim = 16;
  c.embed_dim = 16;
  c.epochs = 60;
  c.beta = 0.001;
  c.gamma = 0.01;
  return c;
}

Graph sbm(double signal, std::uint64_t seed = 3) { return generate_sbm({{50, 50, 50}, 0.1, 0.005, 16, signal}, seed); }

NeighborPartition fixed_partition(const Graph& g) {
  MiOptions o;
  o.hidden = 16;
  o.embed_dim = 8;
  o.epochs = 30;
  return partition_neighbors(g, train_mi_estimator(g, o, 9));
}

std::vector<NodeId> iota_ids(std::size_t n) {
  std::vector<NodeId> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<NodeId>(i);
  return out;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("gib_loss: degenerate weights, recombination, nonnegative parts") {
    const Graph g = fixtures::ten_node_graph();
    const NeighborPartition part = partition_neighbors(g, MIEstimator{nn::MLP({4, 8, 3}, "f_M", 5), 0.5});
    GibConfig cfg = small_config();
    const GibModel model(cfg, g.feature_dim(), g.class_count(), 1);
    const std::vector<NodeId> batch{0, 2, 5, 7};
    std::vector<int> labels;
    for (NodeId v : batch) labels.push_back(g.labels()[static_cast<std::size_t>(v)]);

    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    const LossBreakdown zero = gib_loss(g, batch, labels, model, &part, cfg, 4);
    CHECK(zero.total == zero.l_c);

    for (double beta : {0.001, 0.3, 2.0}) {
      for (double gamma : {0.0, 0.01, 1.5}) {
        cfg.beta = beta;
        cfg.gamma = gamma;
        const LossBreakdown b = gib_loss(g, batch, labels, model, &part, cfg, 4);
        CHECK(b.total == doctest::Approx(b.recombined()).epsilon(1e-15));
        CHECK(b.l_c == zero.l_c);  // same draws, same seed
        CHECK(b.l_c >= 0.0);
        CHECK(b.l_ix >= 0.0);
        CHECK(b.l_in >= 0.0);
        CHECK(b.l_s >= 0.0);
      }
    }
    CHECK_THROWS_AS(gib_loss(g, batch, std::vector<int>{0, 1}, model, &part, cfg, 4), ValidationError);
    CHECK_THROWS_AS(gib_loss(g, batch, std::vector<int>{0, 1, 0, 7}, model, &part, cfg, 4), ValidationError);
  }

  TEST_CASE("gib_loss names the non-finite part") {
    const Graph g = fixtures::ten_node_graph();
    GibConfig cfg = small_config();
    GibModel model(cfg, g.feature_dim(), g.class_count(), 1);
    model.f_c.params().at("b1").mutable_value()(0, 0) = std::numeric_limits<double>::quiet_NaN();
    try {
      gib_loss(g, std::vector<NodeId>{0, 1}, std::vector<int>{0, 1}, model, nullptr, cfg, 1);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("l_c") != std::string::npos);
    }
  }

  TEST_CASE("total objective gradient passes a finite-difference check on the 10-node fixture") {
    const Graph g = fixtures::ten_node_graph();
    const NeighborPartition part = partition_neighbors(g, MIEstimator{nn::MLP({4, 8, 3}, "f_M", 5), 0.5});
    GibConfig cfg;
    cfg.hidden = 6;
    cfg.code_dim = 3;
    cfg.embed_dim = 3;
    cfg.beta = 0.3;
    cfg.gamma = 0.2;
    cfg.prior_rate = 0.4;
    cfg.temperature = 0.8;
    cfg.mask_mode = MaskMode::relaxed;  // the hard mask is straight-through, not differentiable
    GibModel model(cfg, g.feature_dim(), g.class_count(), 2);
    const std::vector<NodeId> batch = iota_ids(10);
    const GibObjective objective(g, batch, g.labels(), &part, cfg.layers);
    const GibDraws draws = objective.draws(cfg.code_dim, 6);
    const auto res = nn::gradient_check([&] { return objective.evaluate(model, cfg, draws).total; }, model.param_sets(),
                                        1e-5, 1000);
    MESSAGE("worst tensor " << res.worst_tensor << " error " << res.max_rel_error);
    CHECK(res.max_rel_error < 1e-4);
  }

  TEST_CASE("stage 1: beats the majority rate, deterministic, gamma = 0 ignores the partition") {
    const Graph g = sbm(2.0);
    const Splits s = split_nodes(g, 0.1, 30, 60, 1);
    const NeighborPartition part = fixed_partition(g);
    const GibConfig cfg = small_config();
    const GibTrainResult a = stage1_train(g, s, &part, cfg, 5);
    CHECK(a.best_val_acc > 0.5);  // majority class is 1/3
    CHECK(a.curve.size() == 60);
    CHECK(a.best_epoch >= 1);
    const GibTrainResult b = stage1_train(g, s, &part, cfg, 5);
    CHECK(nn::params_hash(std::as_const(a.model).param_sets()) == nn::params_hash(std::as_const(b.model).param_sets()));

    GibConfig no_s = cfg;
    no_s.gamma = 0.0;
    no_s.epochs = 10;
    const GibTrainResult with = stage1_train(g, s, &part, no_s, 5);
    const GibTrainResult without = stage1_train(g, s, nullptr, no_s, 5);
    CHECK(nn::params_hash(std::as_const(with.model).param_sets()) ==
          nn::params_hash(std::as_const(without.model).param_sets()));
    for (const auto& row : with.curve) CHECK(row.parts.l_s == 0.0);
  }

  TEST_CASE("collect_pseudo_labels: given labels kept, empty V_U, fraction and confidence filters") {
    const Graph g = fixtures::ten_node_graph();
    Splits s;
    s.train_ids = {1, 4, 8};
    s.train_labels = {1, 1, 0};  // deliberately not the ground truth of node 8
    Matrix post = Matrix::Constant(10, 2, 0.5);
    for (Eigen::Index v = 0; v < 10; ++v) post(v, 0) = v < 5 ? 0.9 : 0.2;
    post.col(1) = (1.0 - post.col(0).array()).matrix();
    const PseudoLabelSet pl = collect_pseudo_labels(post, s);
    CHECK(pl.node_ids == iota_ids(10));
    std::map<NodeId, int> got;
    for (std::size_t i = 0; i < pl.node_ids.size(); ++i) got[pl.node_ids[i]] = pl.labels[i];
    CHECK(got[1] == 1);  // posterior says 0; given label wins
    CHECK(got[4] == 1);
    CHECK(got[8] == 0);
    CHECK(got[0] == 0);
    CHECK(got[9] == 1);
    for (std::size_t i = 0; i < pl.node_ids.size(); ++i) {
      const bool given = pl.node_ids[i] == 1 || pl.node_ids[i] == 4 || pl.node_ids[i] == 8;
      CHECK((pl.sources[i] == LabelSource::given) == given);
    }

    Splits all = s;
    all.train_ids = iota_ids(10);
    all.train_labels = g.labels();
    const PseudoLabelSet only = collect_pseudo_labels(post, all);
    CHECK(only.node_ids == all.train_ids);
    CHECK(only.labels == all.train_labels);

    CHECK(collect_pseudo_labels(post, s, 0.0).node_ids == std::vector<NodeId>{1, 4, 8});
    CHECK(collect_pseudo_labels(post, s, 0.5, 0.0, 3).node_ids.size() == 3 + 3);
    CHECK(collect_pseudo_labels(post, s, 0.5, 0.0, 3).node_ids == collect_pseudo_labels(post, s, 0.5, 0.0, 3).node_ids);
    post.row(0) << 0.55, 0.45;
    CHECK(collect_pseudo_labels(post, s, 1.0, 0.6).node_ids.size() == 9);
    CHECK_THROWS(collect_pseudo_labels(post, s, 1.5));
  }

  TEST_CASE("pseudo labels on a separable SBM are accurate") {
    const Graph g = sbm(3.0);
    const Splits s = split_nodes(g, 0.1, 30, 60, 1);
    const NeighborPartition part = fixed_partition(g);
    const GibConfig cfg = small_config();
    const GibTrainResult st1 = stage1_train(g, s, &part, cfg, 5);
    const PseudoLabelSet pl = collect_pseudo_labels(gib_predict_all(st1.model, g, cfg.layers), s);
    std::size_t right = 0, total = 0;
    for (std::size_t i = 0; i < pl.node_ids.size(); ++i) {
      if (pl.sources[i] != LabelSource::pseudo) continue;
      ++total;
      right += pl.labels[i] == g.labels()[static_cast<std::size_t>(pl.node_ids[i])];
    }
    CHECK(total == g.node_count() - s.train_ids.size());
    const double acc = static_cast<double>(right) / static_cast<double>(total);
    MESSAGE("pseudo-label accuracy " << acc);
    CHECK(acc > 0.9);
  }

  TEST_CASE("stage 2: V_P = V_L is plain training on the given labels; deterministic") {
    const Graph g = sbm(2.0);
    const Splits s = split_nodes(g, 0.1, 30, 60, 1);
    const NeighborPartition part = fixed_partition(g);
    GibConfig cfg = small_config();
    cfg.epochs = 15;
    const PseudoLabelSet given_only = collect_pseudo_labels(Matrix::Constant(150, 3, 1.0 / 3), s, 0.0);
    const GibTrainResult a = stage2_train(g, given_only, s.val_ids, &part, cfg, 7);
    const GibTrainResult ref = train_gib(g, s.train_ids, s.train_labels, s.val_ids, &part, cfg, derive_seed(7, "stage2"));
    REQUIRE(a.curve.size() == ref.curve.size());
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].parts.total == ref.curve[i].parts.total);
    const GibTrainResult again = stage2_train(g, given_only, s.val_ids, &part, cfg, 7);
    CHECK(nn::params_hash(std::as_const(a.model).param_sets()) ==
          nn::params_hash(std::as_const(again.model).param_sets()));

    // With beta = gamma = 0 every logged objective is the classification loss alone.
    cfg.beta = 0.0;
    cfg.gamma = 0.0;
    const GibTrainResult plain = stage2_train(g, given_only, s.val_ids, &part, cfg, 7);
    for (const auto& row : plain.curve) {
      CHECK(row.parts.total == row.parts.l_c);
      CHECK(row.parts.l_s == 0.0);
    }
  }

  TEST_CASE("loss curve and pseudo-label files") {
    const auto dir = fixtures::temp_dir("trainer_io");
    std::vector<LossRow> rows(2);
    rows[0] = {1, {1.0, 2.0, 3.0, 4.0, 0.1, 0.2, 1.0 + 0.1 * 5.0 + 0.2 * 4.0}, 0.5};
    rows[1] = {2, {0.5, 1.0, 1.0, 1.0, 0.1, 0.2, 0.5 + 0.2 + 0.2}, 0.75};
    write_loss_curve(dir / "loss_curve.csv", rows);
    std::ifstream in(dir / "loss_curve.csv");
    std::string header, first;
    std::getline(in, header);
    std::getline(in, first);
    CHECK(header == "epoch,l_c,l_ix,l_in,l_s,total,val_acc");
    CHECK(first.rfind("1,1,2,3,4,", 0) == 0);

    PseudoLabelSet pl{{0, 3}, {1, 0}, {LabelSource::given, LabelSource::pseudo}};
    write_pseudo_labels(dir / "pl.json", pl);
    const auto doc = nlohmann::json::parse(std::ifstream(dir / "pl.json"));
    CHECK(doc.size() == 2);
    CHECK(doc[1]["source"] == "pseudo");
    CHECK(doc[0]["label"] == 1);
    std::filesystem::remove_all(dir);
  }
}
