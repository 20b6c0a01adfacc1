#include "iwivig/autograd.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace iwivig::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var Var::constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::leaf(Matrix value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

Matrix Var::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Matrix::Zero(node_->value.rows(), node_->value.cols());
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.shared());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("backward: root must be a scalar; pass an explicit seed otherwise");
  }
  backward(root, Matrix::Ones(1, 1));
}

void backward(const Var& root, const Matrix& seed) {
  if (!root.requires_grad()) return;
  require_same_shape(root.value(), seed, "backward");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.contains(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(seed);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
  // Intermediate gradients are not needed once propagated.
  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  Matrix out;
  out.noalias() = a.value() * b.value();
  return make_op(std::move(out), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& w = parent(n, 1);
    if (x.requires_grad) {
      Matrix g;
      g.noalias() = n.grad * w.value.transpose();
      x.accumulate(g);
    }
    if (w.requires_grad) {
      Matrix g;
      g.noalias() = x.value.transpose() * n.grad;
      w.accumulate(g);
    }
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_op(a.value() + b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_op(a.value() - b.value(), {a, b}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& x = parent(n, 0);
    Node& y = parent(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double factor) {
  return make_op(a.value() * factor, {a}, [factor](Node& n) { parent(n, 0).accumulate(n.grad * factor); });
}

Var add_scalar(const Var& a, double c) {
  return make_op(a.value().array() + c, {a}, [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_row: expected a 1x" + std::to_string(a.cols()) + " row");
  }
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make_op(std::move(out), {a, row}, [](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad);
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.colwise().sum());
  });
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var gelu(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return gelu_scalar(x); });
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(n.grad.cwiseProduct(x.value.unaryExpr([](double v) { return gelu_grad_scalar(v); })));
  });
}

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(n.grad.cwiseProduct(x.value.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; })));
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return sigmoid_scalar(x); });
  Matrix s = out;
  return make_op(std::move(out), {a}, [s = std::move(s)](Node& n) {
    parent(n, 0).accumulate(n.grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

Var logit(const Var& a) {
  Matrix out = a.value().unaryExpr([](double p) { return std::log(p) - std::log1p(-p); });
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(n.grad.cwiseQuotient(x.value.unaryExpr([](double p) { return p * (1.0 - p); })));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return make_op(std::move(out), {a}, [lo, hi](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(n.grad.cwiseProduct(x.value.unaryExpr([lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; })));
  });
}

Var concat_cols(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row counts differ");
  Matrix out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  const auto ca = a.cols();
  const auto cb = b.cols();
  return make_op(std::move(out), {a, b}, [ca, cb](Node& n) {
    if (parent(n, 0).requires_grad) parent(n, 0).accumulate(n.grad.leftCols(ca));
    if (parent(n, 1).requires_grad) parent(n, 1).accumulate(n.grad.rightCols(cb));
  });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows: row index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_op(std::move(out), {a}, [idx = std::move(idx)](Node& n) {
    Node& x = parent(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    x.accumulate(g);
  });
}

namespace {

// Maps output (row, sub-block) to input row for space_to_depth.
template <typename Fn>
void for_each_s2d(int batch, int side, Fn&& fn) {
  const int half = side / 2;
  for (int b = 0; b < batch; ++b) {
    for (int r = 0; r < half; ++r) {
      for (int c = 0; c < half; ++c) {
        const int out_row = (b * half + r) * half + c;
        for (int s = 0; s < 4; ++s) {
          const int in_row = (b * side + 2 * r + s / 2) * side + 2 * c + s % 2;
          fn(out_row, s, in_row);
        }
      }
    }
  }
}

}  // namespace

Var space_to_depth(const Var& a, int batch, int side) {
  if (side % 2 != 0) throw std::invalid_argument("space_to_depth: odd grid side " + std::to_string(side));
  if (a.rows() != static_cast<Eigen::Index>(batch) * side * side) {
    throw std::invalid_argument("space_to_depth: row count does not match batch*side*side");
  }
  const auto ch = a.cols();
  const int half = side / 2;
  Matrix out(static_cast<Eigen::Index>(batch) * half * half, 4 * ch);
  for_each_s2d(batch, side, [&](int o, int s, int i) { out.block(o, s * ch, 1, ch) = a.value().row(i); });
  return make_op(std::move(out), {a}, [batch, side, ch](Node& n) {
    Node& x = parent(n, 0);
    Matrix g(x.value.rows(), ch);
    for_each_s2d(batch, side, [&](int o, int s, int i) { g.row(i) = n.grad.block(o, s * ch, 1, ch); });
    x.accumulate(g);
  });
}

Var segment_mean(const Var& a, int segments) {
  if (segments <= 0 || a.rows() % segments != 0) {
    throw std::invalid_argument("segment_mean: rows not divisible into equal segments");
  }
  const auto len = a.rows() / segments;
  Matrix out(segments, a.cols());
  for (int s = 0; s < segments; ++s) out.row(s) = a.value().middleRows(s * len, len).colwise().mean();
  return make_op(std::move(out), {a}, [segments, len](Node& n) {
    Node& x = parent(n, 0);
    Matrix g(x.value.rows(), x.value.cols());
    for (int s = 0; s < segments; ++s) {
      g.middleRows(s * len, len).rowwise() = n.grad.row(s) / static_cast<double>(len);
    }
    x.accumulate(g);
  });
}

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op(std::move(out), {a}, [](Node& n) {
    Node& x = parent(n, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / count);
}

Var softmax_cross_entropy(const Var& logits, std::span<const int> labels) {
  const auto n = logits.rows();
  const auto c = logits.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: label count does not match batch");
  }
  Matrix probs(n, c);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    const double mx = logits.value().row(i).maxCoeff();
    auto shifted = (logits.value().row(i).array() - mx).eval();
    const double lse = std::log(shifted.exp().sum());
    probs.row(i) = (shifted - lse).exp().matrix();
    loss -= shifted(labels[i]) - lse;
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op(std::move(out), {logits}, [probs = std::move(probs), lab = std::move(lab)](Node& node) {
    Matrix g = probs;
    for (std::size_t i = 0; i < lab.size(); ++i) g(static_cast<Eigen::Index>(i), lab[i]) -= 1.0;
    g *= node.grad(0, 0) / static_cast<double>(lab.size());
    parent(node, 0).accumulate(g);
  });
}

Var mse(const Var& pred, std::span<const double> target) {
  if (pred.cols() != 1 || static_cast<std::size_t>(pred.rows()) != target.size()) {
    throw std::invalid_argument("mse: prediction must be (n x 1) matching the target length");
  }
  Matrix diff(pred.rows(), 1);
  for (Eigen::Index i = 0; i < pred.rows(); ++i) diff(i, 0) = pred.value()(i, 0) - target[i];
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / static_cast<double>(pred.rows());
  return make_op(std::move(out), {pred}, [diff = std::move(diff)](Node& n) {
    parent(n, 0).accumulate(diff * (2.0 * n.grad(0, 0) / static_cast<double>(diff.rows())));
  });
}

}  // namespace iwivig::ag
