#include "rmgib/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

#include "rmgib/errors.hpp"

namespace rmgib::nn {

Matrix& Node::ensure_grad() {
  if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
  return grad;
}

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m));
}

void Var::zero_grad() {
  if (node_) node_->grad.setZero(node_->value.rows(), node_->value.cols());
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar Var");
  return node_->value(0, 0);
}

namespace {

using BackwardFn = std::function<void(Node&)>;

Var make(Matrix value, std::initializer_list<const Var*> parents, BackwardFn fn) {
  Var out(std::move(value));
  bool any = false;
  for (const Var* p : parents) any = any || p->requires_grad();
  if (any) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const Var* p : parents) node.parents.push_back(p->node());
    node.backward = std::move(fn);
  }
  return out;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

// Accumulates into a parent's gradient only when it participates.
template <typename Expr>
void accumulate(Node* parent, const Expr& expr) {
  if (parent->requires_grad) parent->ensure_grad() += expr;
}

}  // namespace

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward() needs a 1x1 loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes start from zero; leaves keep accumulating across calls.
  for (Node* n : order) {
    if (n->backward) n->grad.setZero(n->value.rows(), n->value.cols());
  }
  loss.node()->ensure_grad()(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()));
  }
  Matrix v = a.value() * b.value();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make(std::move(v), {&a, &b}, [pa, pb](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().noalias() += self.grad * pb->value.transpose();
    if (pb->requires_grad) pb->ensure_grad().noalias() += pa->value.transpose() * self.grad;
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make(a.value() + b.value(), {&a, &b}, [pa, pb](Node& self) {
    accumulate(pa, self.grad);
    accumulate(pb, self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make(a.value() - b.value(), {&a, &b}, [pa, pb](Node& self) {
    accumulate(pa, self.grad);
    accumulate(pb, -self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make(a.value().cwiseProduct(b.value()), {&a, &b}, [pa, pb](Node& self) {
    accumulate(pa, self.grad.cwiseProduct(pb->value));
    accumulate(pb, self.grad.cwiseProduct(pa->value));
  });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Matrix v = a.value().rowwise() + row.value().row(0);
  Node* pa = a.node().get();
  Node* pr = row.node().get();
  return make(std::move(v), {&a, &row}, [pa, pr](Node& self) {
    accumulate(pa, self.grad);
    accumulate(pr, self.grad.colwise().sum());
  });
}

Var mul_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw ShapeError("mul_col: column shape mismatch");
  Matrix v = a.value().array().colwise() * col.value().col(0).array();
  Node* pa = a.node().get();
  Node* pc = col.node().get();
  return make(std::move(v), {&a, &col}, [pa, pc](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad().array() += self.grad.array().colwise() * pc->value.col(0).array();
    }
    if (pc->requires_grad) {
      pc->ensure_grad().col(0) += self.grad.cwiseProduct(pa->value).rowwise().sum();
    }
  });
}

Var scale(const Var& a, double s) {
  Node* pa = a.node().get();
  return make(a.value() * s, {&a}, [pa, s](Node& self) { accumulate(pa, self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  Node* pa = a.node().get();
  return make(a.value().array() + s, {&a}, [pa](Node& self) { accumulate(pa, self.grad); });
}

Var relu(const Var& a) {
  Node* pa = a.node().get();
  return make(a.value().cwiseMax(0.0), {&a}, [pa](Node& self) {
    accumulate(pa, (pa->value.array() > 0.0).select(self.grad.array(), 0.0).matrix());
  });
}

namespace {
double softplus_scalar(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var softplus(const Var& a) {
  Node* pa = a.node().get();
  return make(a.value().unaryExpr(&softplus_scalar), {&a}, [pa](Node& self) {
    accumulate(pa, self.grad.cwiseProduct(pa->value.unaryExpr(&sigmoid_scalar)));
  });
}

Var sigmoid(const Var& a) {
  Node* pa = a.node().get();
  return make(a.value().unaryExpr(&sigmoid_scalar), {&a}, [pa](Node& self) {
    const auto& s = self.value.array();
    accumulate(pa, (self.grad.array() * s * (1.0 - s)).matrix());
  });
}

Var log(const Var& a) {
  Node* pa = a.node().get();
  return make(a.value().array().log().matrix(), {&a}, [pa](Node& self) {
    accumulate(pa, self.grad.cwiseQuotient(pa->value));
  });
}

Var square(const Var& a) {
  Node* pa = a.node().get();
  return make(a.value().array().square().matrix(), {&a}, [pa](Node& self) {
    accumulate(pa, 2.0 * self.grad.cwiseProduct(pa->value));
  });
}

Var pow(const Var& a, double exponent) {
  Node* pa = a.node().get();
  return make(a.value().array().pow(exponent).matrix(), {&a}, [pa, exponent](Node& self) {
    accumulate(pa, (self.grad.array() * exponent * pa->value.array().pow(exponent - 1.0)).matrix());
  });
}

Var clip(const Var& a, double lo, double hi) {
  Node* pa = a.node().get();
  return make(a.value().cwiseMax(lo).cwiseMin(hi), {&a}, [pa, lo, hi](Node& self) {
    const auto inside = (pa->value.array() >= lo) && (pa->value.array() <= hi);
    accumulate(pa, inside.select(self.grad.array(), 0.0).matrix());
  });
}

Var sum(const Var& a) {
  Node* pa = a.node().get();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return make(std::move(v), {&a}, [pa](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().array() += self.grad(0, 0);
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of empty Var");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Node* pa = a.node().get();
  Matrix v = a.value().rowwise().sum();
  return make(std::move(v), {&a}, [pa](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().colwise() += self.grad.col(0);
  });
}

Var gather_rows(const Var& a, std::span<const Index> rows) {
  Matrix v(static_cast<Index>(rows.size()), a.cols());
  for (Index i = 0; i < v.rows(); ++i) {
    const Index r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= a.rows()) throw ShapeError("gather_rows: index out of range");
    v.row(i) = a.value().row(r);
  }
  Node* pa = a.node().get();
  std::vector<Index> idx(rows.begin(), rows.end());
  return make(std::move(v), {&a}, [pa, idx = std::move(idx)](Node& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

Var segment_sum(const Var& a, std::span<const Index> seg, Index n_out) {
  if (static_cast<Index>(seg.size()) != a.rows()) throw ShapeError("segment_sum: segment ids length");
  Matrix v = Matrix::Zero(n_out, a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const Index s = seg[static_cast<std::size_t>(i)];
    if (s < 0 || s >= n_out) throw ShapeError("segment_sum: segment out of range");
    v.row(s) += a.value().row(i);
  }
  Node* pa = a.node().get();
  std::vector<Index> idx(seg.begin(), seg.end());
  return make(std::move(v), {&a}, [pa, idx = std::move(idx)](Node& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(static_cast<Index>(i)) += self.grad.row(idx[i]);
  });
}

Var row_dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_dot");
  Matrix v = a.value().cwiseProduct(b.value()).rowwise().sum();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make(std::move(v), {&a, &b}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad().array() += pb->value.array().colwise() * self.grad.col(0).array();
    }
    if (pb->requires_grad) {
      pb->ensure_grad().array() += pa->value.array().colwise() * self.grad.col(0).array();
    }
  });
}

Var spmm(const Var& w, const Var& x, std::span<const Index> dst, std::span<const Index> src,
         Index n_out) {
  const auto n_entries = static_cast<Index>(dst.size());
  if (w.cols() != 1 || w.rows() != n_entries || static_cast<Index>(src.size()) != n_entries) {
    throw ShapeError("spmm: weight/index length mismatch");
  }
  Matrix v = Matrix::Zero(n_out, x.cols());
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (Index e = 0; e < n_entries; ++e) {
    const Index d = dst[static_cast<std::size_t>(e)];
    const Index s = src[static_cast<std::size_t>(e)];
    if (d < 0 || d >= n_out || s < 0 || s >= x.rows()) throw ShapeError("spmm: index out of range");
    v.row(d) += wv(e, 0) * xv.row(s);
  }
  Node* pw = w.node().get();
  Node* px = x.node().get();
  std::vector<Index> d_idx(dst.begin(), dst.end());
  std::vector<Index> s_idx(src.begin(), src.end());
  return make(std::move(v), {&w, &x},
              [pw, px, d_idx = std::move(d_idx), s_idx = std::move(s_idx)](Node& self) {
                const auto n = d_idx.size();
                if (px->requires_grad) {
                  auto& gx = px->ensure_grad();
                  for (std::size_t e = 0; e < n; ++e) {
                    gx.row(s_idx[e]) += pw->value(static_cast<Index>(e), 0) * self.grad.row(d_idx[e]);
                  }
                }
                if (pw->requires_grad) {
                  auto& gw = pw->ensure_grad();
                  for (std::size_t e = 0; e < n; ++e) {
                    gw(static_cast<Index>(e), 0) += self.grad.row(d_idx[e]).dot(px->value.row(s_idx[e]));
                  }
                }
              });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Node* pa = a.node().get();
  Matrix v = a.value().middleCols(start, count);
  return make(std::move(v), {&a}, [pa, start, count](Node& self) {
    if (pa->requires_grad) pa->ensure_grad().middleCols(start, count) += self.grad;
  });
}

Var vstack(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw ShapeError("vstack: column mismatch");
  Matrix v(a.rows() + b.rows(), a.cols());
  v.topRows(a.rows()) = a.value();
  v.bottomRows(b.rows()) = b.value();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  const Index ra = a.rows();
  const Index rb = b.rows();
  return make(std::move(v), {&a, &b}, [pa, pb, ra, rb](Node& self) {
    accumulate(pa, self.grad.topRows(ra));
    accumulate(pb, self.grad.bottomRows(rb));
  });
}

Var straight_through(Matrix hard, const Var& relaxed) {
  if (hard.rows() != relaxed.rows() || hard.cols() != relaxed.cols()) {
    throw ShapeError("straight_through: shape mismatch");
  }
  Node* pr = relaxed.node().get();
  return make(std::move(hard), {&relaxed}, [pr](Node& self) { accumulate(pr, self.grad); });
}

Var log_softmax(const Var& logits) {
  const auto& z = logits.value();
  Matrix v(z.rows(), z.cols());
  for (Index i = 0; i < z.rows(); ++i) {
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    v.row(i) = z.row(i).array() - lse;
  }
  Node* pz = logits.node().get();
  return make(std::move(v), {&logits}, [pz](Node& self) {
    if (!pz->requires_grad) return;
    const Matrix p = self.value.array().exp();
    const Matrix gsum = self.grad.rowwise().sum();
    pz->ensure_grad() += self.grad - (p.array().colwise() * gsum.col(0).array()).matrix();
  });
}

Var nll(const Var& log_probs, std::span<const int> labels) {
  const Index n = log_probs.rows();
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("nll: label count mismatch");
  if (n == 0) throw ShapeError("nll: empty batch");
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= log_probs.cols()) throw ShapeError("nll: label out of range");
    total -= log_probs.value()(i, y);
  }
  Matrix v(1, 1);
  v(0, 0) = total / static_cast<double>(n);
  Node* pl = log_probs.node().get();
  std::vector<int> y(labels.begin(), labels.end());
  return make(std::move(v), {&log_probs}, [pl, y = std::move(y)](Node& self) {
    if (!pl->requires_grad) return;
    auto& g = pl->ensure_grad();
    const double s = self.grad(0, 0) / static_cast<double>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) g(static_cast<Index>(i), y[i]) -= s;
  });
}

Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace rmgib::nn
