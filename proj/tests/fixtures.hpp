#pragma once

// Small graphs and helpers shared by the unit tests.

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "rmgib/graph.hpp"
#include "rmgib/nn.hpp"
#include "rmgib/random.hpp"

namespace fixtures {

using rmgib::Edge;
using rmgib::Graph;
using rmgib::Matrix;
using rmgib::NodeId;

inline Graph make_graph(std::size_t n, const std::vector<std::pair<int, int>>& pairs, int classes = 2,
                        Eigen::Index dim = 3, std::uint64_t seed = 1) {
  std::vector<Edge> edges;
  for (auto [a, b] : pairs) edges.push_back(Edge::make(a, b));
  rmgib::Rng rng(seed);
  std::normal_distribution<double> normal;
  Matrix x(static_cast<Eigen::Index>(n), dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  return Graph(n, edges, x, labels, classes);
}

inline Graph path_graph(std::size_t n) {
  std::vector<std::pair<int, int>> e;
  for (std::size_t i = 0; i + 1 < n; ++i) e.emplace_back(static_cast<int>(i), static_cast<int>(i + 1));
  return make_graph(n, e);
}

// Ten nodes, two classes, a cycle with chords and one pendant.
inline Graph ten_node_graph() {
  return make_graph(10, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {5, 6}, {6, 7}, {7, 8}, {8, 0}, {0, 4}, {2, 6}, {8, 9}},
                    2, 4, 7);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rmgib_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
