#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// A Var is a handle to a node in a dynamically built expression graph. Leaf
// nodes created with requires_grad=true act as parameters; every op records a
// closure that pushes the node's gradient into its parents. backward() walks
// the graph in reverse topological order from a 1x1 loss.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace rmgib::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  static Var constant(Matrix value) { return Var(std::move(value), false); }
  static Var scalar(double v);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Zero-sized until a backward pass reaches this node.
  const Matrix& grad() const { return node_->grad; }
  void zero_grad();

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf with requires_grad.
void backward(const Var& loss);

// ---- elementwise and linear algebra --------------------------------------
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);     // a (n×m) + row (1×m) broadcast
Var mul_col(const Var& a, const Var& col);     // a (n×m) ⊙ col (n×1) broadcast
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var softplus(const Var& a);
Var sigmoid(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var pow(const Var& a, double exponent);
// Gradient passes only where lo <= a <= hi.
Var clip(const Var& a, double lo, double hi);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---- reductions -----------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);  // n×m -> n×1

// ---- structural -----------------------------------------------------------
Var gather_rows(const Var& a, std::span<const Index> rows);
// out (n_out × m): out[seg[i]] += a[i]
Var segment_sum(const Var& a, std::span<const Index> seg, Index n_out);
Var row_dot(const Var& a, const Var& b);  // n×m, n×m -> n×1
// Sparse weighted aggregation: out[dst[e]] += w[e] * x[src[e]].
Var spmm(const Var& w, const Var& x, std::span<const Index> dst, std::span<const Index> src,
         Index n_out);
Var slice_cols(const Var& a, Index start, Index count);
Var vstack(const Var& a, const Var& b);
// Forward value is `hard`; the gradient flows unchanged into `relaxed`.
Var straight_through(Matrix hard, const Var& relaxed);

// ---- losses ---------------------------------------------------------------
Var log_softmax(const Var& logits);
// Mean over rows of -logp[i, labels[i]].
Var nll(const Var& log_probs, std::span<const int> labels);

// Row-wise softmax of a plain matrix.
Matrix softmax(const Matrix& logits);

}  // namespace rmgib::nn
