#include "rmgib/graph.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>

#include "rmgib/errors.hpp"
#include "rmgib/random.hpp"

namespace rmgib {

Graph::Graph(std::size_t node_count, std::vector<Edge> edges, Matrix features, std::vector<int> labels,
             int class_count)
    : node_count_(node_count),
      edges_(std::move(edges)),
      features_(std::move(features)),
      labels_(std::move(labels)),
      class_count_(class_count) {
  if (static_cast<std::size_t>(features_.rows()) != node_count_) {
    throw ValidationError("feature rows (" + std::to_string(features_.rows()) + ") != node count (" +
                          std::to_string(node_count_) + ")");
  }
  if (labels_.size() != node_count_) throw ValidationError("label count != node count");
  if (class_count_ <= 0 && node_count_ > 0) throw ValidationError("class count must be positive");
  for (int y : labels_) {
    if (y < 0 || y >= class_count_) throw ValidationError("label " + std::to_string(y) + " outside [0, C)");
  }
  for (auto& e : edges_) {
    if (!valid_node(e.u) || !valid_node(e.v)) {
      throw ValidationError("edge (" + std::to_string(e.u) + "," + std::to_string(e.v) + ") has invalid endpoint");
    }
    if (e.u == e.v) throw ValidationError("self-loop on node " + std::to_string(e.u));
    e = Edge::make(e.u, e.v);
  }
  std::sort(edges_.begin(), edges_.end());
  if (std::adjacent_find(edges_.begin(), edges_.end()) != edges_.end()) {
    throw ValidationError("duplicate edge");
  }

  std::vector<std::size_t> deg(node_count_, 0);
  for (const auto& e : edges_) {
    ++deg[static_cast<std::size_t>(e.u)];
    ++deg[static_cast<std::size_t>(e.v)];
  }
  offsets_.assign(node_count_ + 1, 0);
  for (std::size_t i = 0; i < node_count_; ++i) offsets_[i + 1] = offsets_[i] + deg[i];
  adjacency_.resize(offsets_.back());
  std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
  for (const auto& e : edges_) {
    adjacency_[fill[static_cast<std::size_t>(e.u)]++] = e.v;
    adjacency_[fill[static_cast<std::size_t>(e.v)]++] = e.u;
  }
  for (std::size_t i = 0; i < node_count_; ++i) {
    std::sort(adjacency_.begin() + static_cast<std::ptrdiff_t>(offsets_[i]),
              adjacency_.begin() + static_cast<std::ptrdiff_t>(offsets_[i + 1]));
  }
}

std::span<const NodeId> Graph::neighbors(NodeId v) const {
  if (!valid_node(v)) throw ValidationError("invalid node id " + std::to_string(v));
  const auto i = static_cast<std::size_t>(v);
  return {adjacency_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
}

bool Graph::has_edge(NodeId a, NodeId b) const {
  if (!valid_node(a) || !valid_node(b) || a == b) return false;
  const auto nb = neighbors(a);
  return std::binary_search(nb.begin(), nb.end(), b);
}

Matrix Graph::dense_adjacency() const {
  const auto n = static_cast<Eigen::Index>(node_count_);
  Matrix a = Matrix::Zero(n, n);
  for (const auto& e : edges_) {
    a(e.u, e.v) = 1.0;
    a(e.v, e.u) = 1.0;
  }
  return a;
}

std::uint64_t Graph::fingerprint() const {
  std::uint64_t h = fnv1a(std::string_view(reinterpret_cast<const char*>(&node_count_), sizeof(node_count_)));
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(edges_.data()), edges_.size() * sizeof(Edge)), h);
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(features_.data()),
                             static_cast<std::size_t>(features_.size()) * sizeof(double)),
            h);
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(labels_.data()), labels_.size() * sizeof(int)), h);
  return h;
}

// ---------------------------------------------------------------------------
// TSV ingestion

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

template <typename T>
T parse_number(std::string_view tok, const std::string& file, std::size_t line, const char* what) {
  tok = trim(tok);
  T value{};
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, value);
  if (ec != std::errc() || ptr != end || tok.empty()) {
    throw ParseError(file, line, std::string("invalid ") + what + " '" + std::string(tok) + "'");
  }
  return value;
}

bool skip_line(std::string_view line) {
  line = trim(line);
  return line.empty() || line.front() == '#';
}

}  // namespace

LoadedGraph load_graph(const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path) {
  const std::string nodes_file = nodes_path.string();
  const std::string edges_file = edges_path.string();
  std::ifstream nodes_in(nodes_path);
  if (!nodes_in) throw std::runtime_error("cannot open " + nodes_file);

  struct Row {
    int label;
    std::vector<double> features;
  };
  std::vector<std::pair<NodeId, Row>> rows;
  std::string line;
  std::size_t lineno = 0;
  Eigen::Index dim = -1;
  while (std::getline(nodes_in, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    const auto fields = split(trim(line), '\t');
    if (fields.size() != 3) {
      throw ParseError(nodes_file, lineno, "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    Row row;
    const auto id = parse_number<NodeId>(fields[0], nodes_file, lineno, "node id");
    row.label = parse_number<int>(fields[1], nodes_file, lineno, "label");
    for (auto tok : split(fields[2], ',')) {
      row.features.push_back(parse_number<double>(tok, nodes_file, lineno, "feature"));
    }
    if (dim < 0) dim = static_cast<Eigen::Index>(row.features.size());
    if (static_cast<Eigen::Index>(row.features.size()) != dim) {
      throw ParseError(nodes_file, lineno, "feature count differs from first node");
    }
    rows.emplace_back(id, std::move(row));
  }

  const std::size_t n = rows.size();
  std::vector<int> labels(n, -1);
  Matrix features(static_cast<Eigen::Index>(n), std::max<Eigen::Index>(dim, 0));
  std::vector<bool> seen(n, false);
  int class_count = 0;
  for (auto& [id, row] : rows) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw ValidationError("node ids must be contiguous 0..N-1; found " + std::to_string(id));
    }
    if (seen[static_cast<std::size_t>(id)]) throw ValidationError("duplicate node id " + std::to_string(id));
    seen[static_cast<std::size_t>(id)] = true;
    if (row.label < 0) throw ValidationError("negative label on node " + std::to_string(id));
    labels[static_cast<std::size_t>(id)] = row.label;
    class_count = std::max(class_count, row.label + 1);
    for (Eigen::Index j = 0; j < dim; ++j) features(id, j) = row.features[static_cast<std::size_t>(j)];
  }

  std::ifstream edges_in(edges_path);
  if (!edges_in) throw std::runtime_error("cannot open " + edges_file);
  LoadedGraph out;
  std::set<Edge> unique;
  lineno = 0;
  while (std::getline(edges_in, line)) {
    ++lineno;
    if (skip_line(line)) continue;
    const auto fields = split(trim(line), '\t');
    if (fields.size() != 2) {
      throw ParseError(edges_file, lineno, "expected 2 tab-separated fields, got " + std::to_string(fields.size()));
    }
    const auto a = parse_number<NodeId>(fields[0], edges_file, lineno, "source id");
    const auto b = parse_number<NodeId>(fields[1], edges_file, lineno, "destination id");
    if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= n || static_cast<std::size_t>(b) >= n) {
      throw ValidationError(edges_file + ":" + std::to_string(lineno) + ": dangling edge endpoint (" +
                            std::to_string(a) + "," + std::to_string(b) + ")");
    }
    if (a == b) {
      ++out.self_loops;
      continue;
    }
    if (!unique.insert(Edge::make(a, b)).second) ++out.duplicate_edges;
  }
  out.graph = Graph(n, std::vector<Edge>(unique.begin(), unique.end()), std::move(features), std::move(labels),
                    class_count);
  return out;
}

void save_graph(const Graph& g, const std::filesystem::path& nodes_path, const std::filesystem::path& edges_path) {
  std::ofstream nodes(nodes_path);
  if (!nodes) throw std::runtime_error("cannot write " + nodes_path.string());
  nodes << std::setprecision(17);
  for (std::size_t i = 0; i < g.node_count(); ++i) {
    nodes << i << '\t' << g.labels()[i] << '\t';
    for (Eigen::Index j = 0; j < g.feature_dim(); ++j) {
      if (j) nodes << ',';
      nodes << g.features()(static_cast<Eigen::Index>(i), j);
    }
    nodes << '\n';
  }
  std::ofstream edges(edges_path);
  if (!edges) throw std::runtime_error("cannot write " + edges_path.string());
  for (const auto& e : g.edges()) edges << e.u << '\t' << e.v << '\n';
}

// ---------------------------------------------------------------------------
// Generation and sampling

Graph generate_sbm(const SbmParams& params, std::uint64_t seed) {
  if (params.block_sizes.empty()) throw ValidationError("SBM needs at least one block");
  for (auto b : params.block_sizes) {
    if (b == 0) throw ValidationError("SBM block of size zero");
  }
  if (!(0.0 <= params.p_out && params.p_out <= params.p_in && params.p_in <= 1.0)) {
    throw ValidationError("SBM requires 0 <= p_out <= p_in <= 1");
  }
  const int classes = static_cast<int>(params.block_sizes.size());
  if (params.feature_dim < classes) throw ValidationError("feature_dim must be >= number of blocks");

  std::vector<int> labels;
  for (int c = 0; c < classes; ++c) labels.insert(labels.end(), params.block_sizes[static_cast<std::size_t>(c)], c);
  const std::size_t n = labels.size();

  Rng edge_rng = make_rng(seed, "sbm/edges");
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double p = labels[i] == labels[j] ? params.p_in : params.p_out;
      if (unif(edge_rng) < p) edges.push_back({static_cast<NodeId>(i), static_cast<NodeId>(j)});
    }
  }

  Rng feat_rng = make_rng(seed, "sbm/features");
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x(static_cast<Eigen::Index>(n), params.feature_dim);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = normal(feat_rng);
    x(i, labels[static_cast<std::size_t>(i)]) += params.feature_signal;
  }
  return Graph(n, std::move(edges), std::move(x), std::move(labels), classes);
}

Splits split_nodes(const Graph& g, double label_rate, std::size_t val_count, std::size_t test_count,
                   std::uint64_t seed) {
  if (!(label_rate >= 0.0 && label_rate <= 1.0)) throw ValidationError("label_rate must be in [0, 1]");
  const std::size_t n = g.node_count();
  const auto n_train = static_cast<std::size_t>(std::floor(label_rate * static_cast<double>(n)));
  if (n_train == 0) throw ValidationError("label rate yields an empty training set");
  if (n_train + val_count + test_count > n) {
    throw ValidationError("split sizes " + std::to_string(n_train) + "+" + std::to_string(val_count) + "+" +
                          std::to_string(test_count) + " exceed node count " + std::to_string(n));
  }
  std::vector<NodeId> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "split");
  std::shuffle(order.begin(), order.end(), rng);

  Splits s;
  auto take = [&](std::size_t from, std::size_t count) {
    std::vector<NodeId> ids(order.begin() + static_cast<std::ptrdiff_t>(from),
                            order.begin() + static_cast<std::ptrdiff_t>(from + count));
    std::sort(ids.begin(), ids.end());
    return ids;
  };
  s.train_ids = take(0, n_train);
  s.val_ids = take(n_train, val_count);
  s.test_ids = take(n_train + val_count, test_count);
  for (auto id : s.train_ids) s.train_labels.push_back(g.labels()[static_cast<std::size_t>(id)]);
  return s;
}

int Neighborhood::hop_of(NodeId node) const {
  for (std::size_t i = 0; i < members.size(); ++i) {
    if (members[i] == node) return hops[i];
  }
  return -1;
}

Neighborhood k_hop(const Graph& g, NodeId center, int K) {
  if (!g.valid_node(center)) throw ValidationError("k_hop: invalid node id " + std::to_string(center));
  if (K < 1) throw ValidationError("k_hop: K must be >= 1");
  Neighborhood nb;
  nb.center = center;
  std::queue<std::pair<NodeId, int>> frontier;
  frontier.push({center, 0});
  std::unordered_set<NodeId> seen{center};
  while (!frontier.empty()) {
    auto [v, h] = frontier.front();
    frontier.pop();
    if (h == K) continue;
    for (NodeId u : g.neighbors(v)) {
      if (seen.insert(u).second) {
        nb.members.push_back(u);
        nb.hops.push_back(h + 1);
        frontier.push({u, h + 1});
      }
    }
  }
  std::unordered_map<NodeId, int> local;
  local.emplace(center, 0);
  for (std::size_t i = 0; i < nb.members.size(); ++i) local.emplace(nb.members[i], static_cast<int>(i) + 1);
  for (std::size_t li = 0; li < nb.local_size(); ++li) {
    const NodeId v = nb.local_node(static_cast<int>(li));
    for (NodeId u : g.neighbors(v)) {
      auto it = local.find(u);
      if (it != local.end() && it->second > static_cast<int>(li)) nb.local_edges.emplace_back(static_cast<int>(li), it->second);
    }
  }
  return nb;
}

Subgraph subsample_graph(const Graph& g, double node_fraction, std::uint64_t seed) {
  if (!(node_fraction > 0.0 && node_fraction <= 1.0)) throw ValidationError("node_fraction must be in (0, 1]");
  const std::size_t n = g.node_count();
  const auto keep = static_cast<std::size_t>(std::floor(node_fraction * static_cast<double>(n)));
  if (keep == 0) throw ValidationError("subsample_graph: empty sample");
  std::vector<NodeId> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "subsample");
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(keep);
  std::sort(order.begin(), order.end());

  std::vector<NodeId> new_id(n, -1);
  for (std::size_t i = 0; i < keep; ++i) new_id[static_cast<std::size_t>(order[i])] = static_cast<NodeId>(i);
  std::vector<Edge> edges;
  for (const auto& e : g.edges()) {
    const NodeId a = new_id[static_cast<std::size_t>(e.u)];
    const NodeId b = new_id[static_cast<std::size_t>(e.v)];
    if (a >= 0 && b >= 0) edges.push_back(Edge::make(a, b));
  }
  Matrix x(static_cast<Eigen::Index>(keep), g.feature_dim());
  std::vector<int> labels(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    x.row(static_cast<Eigen::Index>(i)) = g.features().row(order[i]);
    labels[i] = g.labels()[static_cast<std::size_t>(order[i])];
  }
  return {Graph(keep, std::move(edges), std::move(x), std::move(labels), g.class_count()), std::move(order)};
}

// ---------------------------------------------------------------------------
// Perturbations

Graph apply_flips(const Graph& g, std::span<const Edge> flips) {
  std::set<Edge> edges(g.edges().begin(), g.edges().end());
  for (auto f : flips) {
    f = Edge::make(f.u, f.v);
    if (!g.valid_node(f.u) || !g.valid_node(f.v) || f.u == f.v) throw ValidationError("invalid flip pair");
    if (!edges.erase(f)) edges.insert(f);
  }
  return Graph(g.node_count(), std::vector<Edge>(edges.begin(), edges.end()), g.features(), g.labels(),
               g.class_count());
}

namespace {

std::size_t edge_budget(const Graph& g, double rate) {
  if (!(rate >= 0.0)) throw ValidationError("perturbation rate must be >= 0");
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(g.edge_count())));
}

std::uint64_t pair_count(std::size_t n) { return n < 2 ? 0 : static_cast<std::uint64_t>(n) * (n - 1) / 2; }

// Distinct uniformly random unordered pairs not in `exclude`.
std::vector<Edge> sample_pairs(const Graph& g, std::size_t count, Rng& rng, const std::set<Edge>& exclude) {
  const std::size_t n = g.node_count();
  const std::uint64_t total = pair_count(n);
  if (count + exclude.size() > total) throw ValidationError("perturbation budget exceeds flippable pairs");
  std::vector<Edge> out;
  if (count * 2 > total - exclude.size()) {
    std::vector<Edge> all;
    for (NodeId a = 0; static_cast<std::size_t>(a) < n; ++a) {
      for (NodeId b = a + 1; static_cast<std::size_t>(b) < n; ++b) {
        if (!exclude.count({a, b})) all.push_back({a, b});
      }
    }
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(count);
    return all;
  }
  std::set<Edge> chosen;
  std::uniform_int_distribution<NodeId> pick(0, static_cast<NodeId>(n - 1));
  while (out.size() < count) {
    const NodeId a = pick(rng);
    const NodeId b = pick(rng);
    if (a == b) continue;
    const Edge e = Edge::make(a, b);
    if (exclude.count(e) || !chosen.insert(e).second) continue;
    out.push_back(e);
  }
  return out;
}

double cosine(const Matrix& x, NodeId a, NodeId b) {
  const double na = x.row(a).norm();
  const double nb = x.row(b).norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return x.row(a).dot(x.row(b)) / (na * nb);
}

}  // namespace

Perturbation perturb_random(const Graph& g, double rate, std::uint64_t seed) {
  const std::size_t budget = edge_budget(g, rate);
  Rng rng = make_rng(seed, "perturb/random");
  Perturbation out;
  out.flips = sample_pairs(g, budget, rng, {});
  out.graph = apply_flips(g, out.flips);
  return out;
}

Perturbation perturb_heterophilic(const Graph& g, double rate, std::span<const int> labels, std::uint64_t seed,
                                  std::span<const NodeId> targets) {
  if (labels.size() != g.node_count()) throw ValidationError("perturb_heterophilic: label count != node count");
  const std::size_t budget = edge_budget(g, rate);
  Perturbation out;
  if (budget == 0) {
    out.graph = g;
    return out;
  }
  constexpr std::size_t kPoolFactor = 10;
  constexpr std::uint64_t kExhaustiveLimit = 2'000'000;
  Rng rng = make_rng(seed, "perturb/heterophilic");
  const std::size_t n = g.node_count();

  std::vector<NodeId> sources;
  if (targets.empty()) {
    sources.resize(n);
    std::iota(sources.begin(), sources.end(), 0);
  } else {
    sources.assign(targets.begin(), targets.end());
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
  }
  auto eligible = [&](NodeId a, NodeId b) {
    return a != b && labels[static_cast<std::size_t>(a)] != labels[static_cast<std::size_t>(b)] && !g.has_edge(a, b);
  };

  const std::size_t pool_target = kPoolFactor * budget;
  std::vector<Edge> pool;
  if (static_cast<std::uint64_t>(sources.size()) * n <= kExhaustiveLimit) {
    std::set<Edge> all;
    for (NodeId a : sources) {
      for (NodeId b = 0; static_cast<std::size_t>(b) < n; ++b) {
        if (eligible(a, b)) all.insert(Edge::make(a, b));
      }
    }
    pool.assign(all.begin(), all.end());
    std::shuffle(pool.begin(), pool.end(), rng);
    if (pool.size() > pool_target) pool.resize(pool_target);
  } else {
    std::set<Edge> chosen;
    std::uniform_int_distribution<std::size_t> pick_src(0, sources.size() - 1);
    std::uniform_int_distribution<NodeId> pick_dst(0, static_cast<NodeId>(n - 1));
    const std::size_t max_attempts = 100 * pool_target + 10'000;
    for (std::size_t attempt = 0; attempt < max_attempts && pool.size() < pool_target; ++attempt) {
      const NodeId a = sources[pick_src(rng)];
      const NodeId b = pick_dst(rng);
      if (!eligible(a, b)) continue;
      const Edge e = Edge::make(a, b);
      if (chosen.insert(e).second) pool.push_back(e);
    }
  }

  const Matrix& x = g.features();
  std::vector<std::pair<double, Edge>> scored;
  scored.reserve(pool.size());
  for (const auto& e : pool) scored.emplace_back(cosine(x, e.u, e.v), e);
  std::sort(scored.begin(), scored.end());
  for (std::size_t i = 0; i < scored.size() && out.flips.size() < budget; ++i) out.flips.push_back(scored[i].second);

  if (out.flips.size() < budget) {
    out.random_fallback = budget - out.flips.size();
    std::set<Edge> exclude(out.flips.begin(), out.flips.end());
    auto extra = sample_pairs(g, out.random_fallback, rng, exclude);
    out.flips.insert(out.flips.end(), extra.begin(), extra.end());
  }
  out.graph = apply_flips(g, out.flips);
  return out;
}

}  // namespace rmgib
