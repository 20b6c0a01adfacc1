#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every op records a closure that maps the output gradient back
// onto its parents; backward() replays those closures in reverse
// topological order.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace iwivig {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace ag {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void accumulate(const Matrix& g);
  bool has_grad() const { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Matrix value);
  static Var leaf(Matrix value, bool requires_grad = true);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Gradient of the last backward pass; zeros of the value shape if none flowed.
  Matrix grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording within its scope (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds an op node. Parents and the closure are dropped when no parent
// requires a gradient or recording is disabled.
Var make_op(Matrix value, std::vector<Var> parents, std::function<void(Node&)> backward);

void backward(const Var& root);
void backward(const Var& root, const Matrix& seed);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double c);
// a (n x c) + row (1 x c) broadcast over rows.
Var add_row(const Var& a, const Var& row);

Var gelu(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var logit(const Var& a);
// Gradient passes only where lo <= x <= hi.
Var clamp(const Var& a, double lo, double hi);

Var concat_cols(const Var& a, const Var& b);
Var gather_rows(const Var& a, std::span<const int> rows);

// Rows are ordered (image, row, col) over `batch` square grids of side
// `side`; output groups each 2x2 block into one row of 4x the columns,
// sub-positions ordered (0,0), (0,1), (1,0), (1,1).
Var space_to_depth(const Var& a, int batch, int side);

// Mean over `segments` equal, consecutive row blocks -> (segments x cols).
Var segment_mean(const Var& a, int segments);

Var sum(const Var& a);
Var mean(const Var& a);

// Mean softmax cross-entropy of (n x classes) logits against integer labels.
Var softmax_cross_entropy(const Var& logits, std::span<const int> labels);
// Mean squared error of an (n x 1) prediction.
Var mse(const Var& pred, std::span<const double> target);

double gelu_scalar(double x);
double gelu_grad_scalar(double x);
double sigmoid_scalar(double x);

}  // namespace ag
}  // namespace iwivig
