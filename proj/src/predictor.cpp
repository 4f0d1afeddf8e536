#include "rmgib/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

using nn::Var;
using Index = Eigen::Index;

Aggregator parse_aggregator(const std::string& name) {
  if (name == "gcn") return Aggregator::gcn;
  if (name == "sgc") return Aggregator::sgc;
  if (name == "mean") return Aggregator::mean;
  throw ValidationError("unknown aggregator '" + name + "' (expected gcn, sgc or mean)");
}

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::gcn: return "gcn";
    case Aggregator::sgc: return "sgc";
    case Aggregator::mean: return "mean";
  }
  return "gcn";
}

GCNStack::GCNStack(GCNSpec spec, std::string tag, std::uint64_t seed) : spec_(spec), params_(std::move(tag)) {
  if (spec_.layers < 1) throw ValidationError("GCNStack needs at least one layer");
  if (spec_.in_dim < 1 || spec_.classes < 1 || spec_.hidden < 1) throw ValidationError("GCNStack: bad dimensions");
  Rng rng(derive_seed(seed, params_.tag()));
  if (spec_.aggregator == Aggregator::sgc) {
    params_.add("w0", nn::uniform_init(spec_.in_dim, spec_.classes, rng));
    params_.add("b0", Matrix::Zero(1, spec_.classes));
    return;
  }
  for (int l = 0; l < spec_.layers; ++l) {
    const Index in = l == 0 ? spec_.in_dim : spec_.hidden;
    const Index out = l + 1 == spec_.layers ? spec_.classes : spec_.hidden;
    params_.add("w" + std::to_string(l), nn::uniform_init(in, out, rng));
    params_.add("b" + std::to_string(l), Matrix::Zero(1, out));
  }
}

int GCNStack::weight_layers() const { return spec_.aggregator == Aggregator::sgc ? 1 : spec_.layers; }
const Var& GCNStack::weight(int l) const { return params_.at("w" + std::to_string(l)); }
const Var& GCNStack::bias(int l) const { return params_.at("b" + std::to_string(l)); }

Var run_stack(const GCNStack& stack, const Var& x0, const Var& weights, const std::vector<PropagationLayer>& plan) {
  if (static_cast<int>(plan.size()) != stack.spec().layers) throw ShapeError("propagation plan depth != stack depth");
  if (x0.cols() != stack.spec().in_dim) throw ShapeError("predictor input width mismatch");
  auto propagate = [&](const PropagationLayer& layer, const Var& h) {
    return nn::spmm(nn::gather_rows(weights, layer.widx), h, layer.dst, layer.src, layer.rows);
  };
  Var h = x0;
  if (stack.spec().aggregator == Aggregator::sgc) {
    for (const auto& layer : plan) h = propagate(layer, h);
    return nn::add_row(nn::matmul(h, stack.weight(0)), stack.bias(0));
  }
  for (std::size_t l = 0; l < plan.size(); ++l) {
    h = nn::add_row(propagate(plan[l], nn::matmul(h, stack.weight(static_cast<int>(l)))),
                    stack.bias(static_cast<int>(l)));
    if (l + 1 < plan.size()) h = nn::relu(h);
  }
  return h;
}

GraphPropagation::GraphPropagation(const Graph& g, int layers, Aggregator aggregator) {
  const auto n = static_cast<Index>(g.node_count());
  std::vector<double> w;
  PropagationLayer layer;
  layer.rows = n;
  auto deg = [&](NodeId v) { return 1.0 + static_cast<double>(g.degree(v)); };
  for (NodeId i = 0; i < static_cast<NodeId>(n); ++i) {
    layer.dst.push_back(i);
    layer.src.push_back(i);
    layer.widx.push_back(static_cast<Index>(w.size()));
    w.push_back(1.0 / deg(i));
    for (NodeId j : g.neighbors(i)) {
      layer.dst.push_back(i);
      layer.src.push_back(j);
      layer.widx.push_back(static_cast<Index>(w.size()));
      w.push_back(aggregator == Aggregator::mean ? 1.0 / deg(i) : 1.0 / std::sqrt(deg(i) * deg(j)));
    }
  }
  weights_ = Var::constant(Eigen::Map<const Matrix>(w.data(), static_cast<Index>(w.size()), 1));
  plan_.assign(static_cast<std::size_t>(layers), layer);
}

Var graph_logits(const GraphPropagation& prop, const Var& x, const GCNStack& stack) {
  return run_stack(stack, x, prop.weights(), prop.plan());
}

LocalBatch::LocalBatch(std::span<const Neighborhood> hoods, int layers) {
  if (layers < 1) throw ValidationError("LocalBatch: layers must be >= 1");
  std::vector<NodeId> global;
  std::vector<int> hop;
  pair_offsets_.push_back(0);
  for (const auto& hood : hoods) {
    if (hood.hops.size() != hood.members.size()) throw ShapeError("neighborhood hops misaligned");
    const auto base = static_cast<Index>(global.size());
    centers_.push_back(hood.center);
    global.push_back(hood.center);
    hop.push_back(0);
    local_slot_.push_back(0);
    for (std::size_t i = 0; i < hood.members.size(); ++i) {
      local_slot_.push_back(static_cast<Index>(pair_center_.size()) + 1);
      pair_center_.push_back(hood.center);
      pair_member_.push_back(hood.members[i]);
      global.push_back(hood.members[i]);
      hop.push_back(hood.hops[i]);
    }
    for (auto [a, b] : hood.local_edges) {
      edge_i_.push_back(base + a);
      edge_j_.push_back(base + b);
      edge_i_.push_back(base + b);
      edge_j_.push_back(base + a);
    }
    pair_offsets_.push_back(pair_center_.size());
  }
  local_count_ = static_cast<Index>(global.size());

  code_nodes_ = global;
  std::sort(code_nodes_.begin(), code_nodes_.end());
  code_nodes_.erase(std::unique(code_nodes_.begin(), code_nodes_.end()), code_nodes_.end());
  auto code_row = [&](NodeId v) {
    return static_cast<Index>(std::lower_bound(code_nodes_.begin(), code_nodes_.end(), v) - code_nodes_.begin());
  };

  // row[k][l]: row of local node l in layer k's output (-1 if not computed).
  std::vector<std::vector<Index>> row(static_cast<std::size_t>(layers) + 1,
                                      std::vector<Index>(static_cast<std::size_t>(local_count_), -1));
  for (Index l = 0; l < local_count_; ++l) row[0][static_cast<std::size_t>(l)] = code_row(global[static_cast<std::size_t>(l)]);
  plan_.resize(static_cast<std::size_t>(layers));
  for (int k = 1; k <= layers; ++k) {
    auto& cur = row[static_cast<std::size_t>(k)];
    const auto& prev = row[static_cast<std::size_t>(k - 1)];
    auto& layer = plan_[static_cast<std::size_t>(k - 1)];
    for (Index l = 0; l < local_count_; ++l) {
      if (hop[static_cast<std::size_t>(l)] <= layers - k) cur[static_cast<std::size_t>(l)] = layer.rows++;
    }
    for (Index l = 0; l < local_count_; ++l) {
      const Index r = cur[static_cast<std::size_t>(l)];
      if (r < 0) continue;
      layer.dst.push_back(r);
      layer.src.push_back(prev[static_cast<std::size_t>(l)]);
      layer.widx.push_back(l);
    }
    for (std::size_t e = 0; e < edge_i_.size(); ++e) {
      const Index r = cur[static_cast<std::size_t>(edge_i_[e])];
      if (r < 0) continue;
      const Index s = prev[static_cast<std::size_t>(edge_j_[e])];
      if (s < 0) throw ShapeError("LocalBatch: neighbor hop inconsistent with BFS order");
      layer.dst.push_back(r);
      layer.src.push_back(s);
      layer.widx.push_back(local_count_ + static_cast<Index>(e));
    }
  }
}

Var LocalBatch::entry_weights(const Var& pair_mask, Aggregator aggregator) const {
  const auto pairs = static_cast<Index>(pair_count());
  Var slots;
  if (pair_mask.defined()) {
    if (pair_mask.rows() != pairs || pair_mask.cols() != 1) throw ShapeError("pair mask must be pair_count x 1");
    slots = nn::vstack(Var::constant(Matrix::Ones(1, 1)), pair_mask);
  } else {
    slots = Var::constant(Matrix::Ones(pairs + 1, 1));
  }
  Var m = nn::gather_rows(slots, local_slot_);
  Var a = nn::mul(nn::gather_rows(m, edge_i_), nn::gather_rows(m, edge_j_));
  Var deg = nn::add_scalar(nn::segment_sum(a, edge_i_, local_count_), 1.0);
  Var inv = nn::pow(deg, -1.0);
  Var w_edge;
  if (aggregator == Aggregator::mean) {
    w_edge = nn::mul(a, nn::gather_rows(inv, edge_i_));
  } else {
    Var dis = nn::pow(deg, -0.5);
    w_edge = nn::mul(a, nn::mul(nn::gather_rows(dis, edge_i_), nn::gather_rows(dis, edge_j_)));
  }
  return nn::vstack(inv, w_edge);
}

Var local_logits(const LocalBatch& batch, const Var& codes, const Var& pair_mask, const GCNStack& stack) {
  if (codes.rows() != static_cast<Index>(batch.code_nodes().size())) throw ShapeError("codes must cover code_nodes");
  if (static_cast<int>(batch.plan().size()) != stack.spec().layers) throw ShapeError("batch depth != stack depth");
  return run_stack(stack, codes, batch.entry_weights(pair_mask, stack.spec().aggregator), batch.plan());
}

Var gcn_forward(const Var& codes, const LocalAdjacency& adjacency, const GCNStack& stack) {
  const auto m = static_cast<int>(adjacency.size);
  if (codes.rows() != m) throw ShapeError("gcn_forward: codes rows != local graph size");
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(m));
  Neighborhood hood;
  hood.center = 0;
  for (auto [a, b] : adjacency.edges) {
    if (a < 0 || b < 0 || a >= m || b >= m || a == b) throw ShapeError("gcn_forward: bad local edge");
    adj[static_cast<std::size_t>(a)].push_back(b);
    adj[static_cast<std::size_t>(b)].push_back(a);
    hood.local_edges.emplace_back(a, b);
  }
  // Unreachable nodes sit beyond the receptive field.
  std::vector<int> dist(static_cast<std::size_t>(m), stack.spec().layers + 1);
  dist[0] = 0;
  std::deque<int> queue{0};
  std::vector<bool> seen(static_cast<std::size_t>(m), false);
  seen[0] = true;
  while (!queue.empty()) {
    const int v = queue.front();
    queue.pop_front();
    for (int u : adj[static_cast<std::size_t>(v)]) {
      if (seen[static_cast<std::size_t>(u)]) continue;
      seen[static_cast<std::size_t>(u)] = true;
      dist[static_cast<std::size_t>(u)] = dist[static_cast<std::size_t>(v)] + 1;
      queue.push_back(u);
    }
  }
  for (int i = 1; i < m; ++i) {
    hood.members.push_back(i);
    hood.hops.push_back(dist[static_cast<std::size_t>(i)]);
  }
  const LocalBatch batch(std::span<const Neighborhood>(&hood, 1), stack.spec().layers);
  return local_logits(batch, codes, Var(), stack);
}

Var classification_loss(const Var& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) throw ShapeError("classification_loss: label count");
  return nn::nll(nn::log_softmax(logits), labels);
}

double classification_loss(const Matrix& probs, std::span<const int> labels) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) throw ShapeError("classification_loss: label count");
  if (labels.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= probs.cols()) throw ValidationError("classification_loss: label out of range");
    total -= std::log(std::max(probs(static_cast<Index>(i), labels[i]), 1e-12));
  }
  return total / static_cast<double>(labels.size());
}

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Index i = 0; i < probs.rows(); ++i) {
    Index arg = 0;
    probs.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

double accuracy(const Matrix& probs, std::span<const NodeId> ids, std::span<const int> labels) {
  if (ids.size() != labels.size()) throw ShapeError("accuracy: ids/labels length mismatch");
  if (ids.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Index arg = 0;
    probs.row(ids[i]).maxCoeff(&arg);
    hit += static_cast<int>(arg) == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(ids.size());
}

namespace {

std::vector<Index> to_index(std::span<const NodeId> ids) { return {ids.begin(), ids.end()}; }

std::vector<int> labels_of(const Graph& g, std::span<const NodeId> ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (NodeId v : ids) out.push_back(g.labels()[static_cast<std::size_t>(v)]);
  return out;
}

void check_train_inputs(const Graph& g, std::span<const NodeId> ids, std::span<const int> labels) {
  if (ids.empty()) throw ValidationError("training set is empty");
  if (ids.size() != labels.size()) throw ShapeError("train ids and labels differ in length");
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!g.valid_node(ids[i])) throw ValidationError("train id out of range");
    if (labels[i] < 0 || labels[i] >= g.class_count()) throw ValidationError("train label out of range");
  }
}

}  // namespace

GcnModel baseline_gcn_train(const Graph& g, std::span<const NodeId> train_ids, std::span<const int> train_labels,
                            std::span<const NodeId> val_ids, const TrainOptions& options, std::uint64_t seed) {
  check_train_inputs(g, train_ids, train_labels);
  GcnModel model;
  model.stack = GCNStack({g.feature_dim(), options.hidden, g.class_count(), options.layers, options.aggregator}, "gcn",
                         seed);
  const GraphPropagation prop(g, options.layers, options.aggregator);
  const Var x = Var::constant(g.features());
  const auto rows = to_index(train_ids);
  const auto val_labels = labels_of(g, val_ids);
  nn::Adam adam({.lr = options.lr, .weight_decay = options.weight_decay});
  nn::ParamSet best = model.stack.params().clone();
  Matrix best_logits;

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    model.stack.params().zero_grad();
    Var loss = classification_loss(nn::gather_rows(graph_logits(prop, x, model.stack), rows), train_labels);
    if (!std::isfinite(loss.item())) throw DivergenceError("GCN loss is not finite", epoch);
    nn::backward(loss);
    adam.step(model.stack.params());

    EpochRecord rec{epoch, loss.item(), 0.0};
    Matrix logits = graph_logits(prop, x, model.stack).value();
    if (!val_ids.empty()) rec.val_acc = accuracy(logits, val_ids, val_labels);
    if (val_ids.empty() || rec.val_acc >= model.best_val_acc) {
      model.best_val_acc = rec.val_acc;
      model.best_epoch = epoch;
      best.assign(model.stack.params());
      best_logits = std::move(logits);
    }
    model.curve.push_back(rec);
  }
  if (model.best_epoch < 0) {
    best_logits = graph_logits(prop, x, model.stack).value();
  } else {
    model.stack.params().assign(best);
  }
  model.posteriors = nn::softmax(best_logits);
  return model;
}

IbGcnModel gcn_ib_train(const Graph& g, std::span<const NodeId> train_ids, std::span<const int> train_labels,
                        std::span<const NodeId> val_ids, const TrainOptions& options, double beta, Index code_dim,
                        std::uint64_t seed) {
  check_train_inputs(g, train_ids, train_labels);
  if (beta < 0.0) throw ValidationError("beta must be nonnegative");
  IbGcnModel model;
  model.f_x = nn::MLP({g.feature_dim(), options.hidden, 2 * code_dim}, "f_x", seed);
  model.stack = GCNStack({code_dim, options.hidden, g.class_count(), options.layers, options.aggregator}, "f_c", seed);
  const GraphPropagation prop(g, options.layers, options.aggregator);
  const Var x = Var::constant(g.features());
  const auto rows = to_index(train_ids);
  const auto val_labels = labels_of(g, val_ids);
  const Matrix zero_noise = Matrix::Zero(x.rows(), code_dim);
  nn::Adam adam({.lr = options.lr, .weight_decay = options.weight_decay});
  nn::ParamSet best_fx = model.f_x.params().clone();
  nn::ParamSet best_fc = model.stack.params().clone();
  Matrix best_logits;

  auto deterministic_logits = [&] {
    return graph_logits(prop, attribute_encode(x, model.f_x, zero_noise).sample, model.stack).value();
  };

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    model.f_x.params().zero_grad();
    model.stack.params().zero_grad();
    const AttributeCode code = attribute_encode(x, model.f_x, derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    Var l_c = classification_loss(nn::gather_rows(graph_logits(prop, code.sample, model.stack), rows), train_labels);
    Var loss = nn::add(l_c, nn::scale(nn::mean(gaussian_kl(code)), beta));
    if (!std::isfinite(loss.item())) throw DivergenceError("GCN+IB loss is not finite", epoch);
    nn::backward(loss);
    adam.step(model.f_x.params());
    adam.step(model.stack.params());

    EpochRecord rec{epoch, loss.item(), 0.0};
    Matrix logits = deterministic_logits();
    if (!val_ids.empty()) rec.val_acc = accuracy(logits, val_ids, val_labels);
    if (val_ids.empty() || rec.val_acc >= model.best_val_acc) {
      model.best_val_acc = rec.val_acc;
      model.best_epoch = epoch;
      best_fx.assign(model.f_x.params());
      best_fc.assign(model.stack.params());
      best_logits = std::move(logits);
    }
    model.curve.push_back(rec);
  }
  if (model.best_epoch < 0) {
    best_logits = deterministic_logits();
  } else {
    model.f_x.params().assign(best_fx);
    model.stack.params().assign(best_fc);
  }
  model.posteriors = nn::softmax(best_logits);
  return model;
}

}  // namespace rmgib
