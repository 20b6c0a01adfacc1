#include "iwivig/layers.hpp"

#include "iwivig/errors.hpp"

#include <cmath>

namespace iwivig {

ag::Var ParameterStore::add(const std::string& name, Matrix init, bool trainable, bool decay) {
  if (index_.contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  ag::Var v = ag::Var::leaf(std::move(init), trainable);
  index_.emplace(name, params_.size());
  params_.push_back({name, v, trainable, decay && trainable});
  return v;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += static_cast<std::size_t>(p.var.value().size());
  }
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& init_rng) {
  if (in <= 0 || out <= 0) throw ConfigError("linear layer '" + name + "' needs positive dimensions");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = init_rng.uniform(-bound, bound);
  weight_ = store.add(name + ".weight", std::move(w), true, true);
  bias_ = store.add(name + ".bias", Matrix::Zero(1, out), true, false);
}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::add_row(ag::matmul(x, weight_), bias_); }

BatchNorm::BatchNorm(ParameterStore& store, const std::string& name, int dim) {
  gamma_ = store.add(name + ".gamma", Matrix::Ones(1, dim), true, false);
  beta_ = store.add(name + ".beta", Matrix::Zero(1, dim), true, false);
  running_mean_ = store.add(name + ".running_mean", Matrix::Zero(1, dim), false, false);
  running_var_ = store.add(name + ".running_var", Matrix::Ones(1, dim), false, false);
}

ag::Var BatchNorm::operator()(const ag::Var& x, bool training) const {
  const auto n = x.rows();
  const Matrix& in = x.value();
  const auto g = gamma_.value().row(0).array();
  const auto b = beta_.value().row(0).array();

  if (!training) {
    const Eigen::Array<double, 1, Eigen::Dynamic> inv_std =
        (running_var_.value().row(0).array() + kEps).rsqrt();
    Matrix xhat = (in.rowwise() - running_mean_.value().row(0)).array().rowwise() * inv_std;
    Matrix out = (xhat.array().rowwise() * g).rowwise() + b;
    return ag::make_op(std::move(out), {x, gamma_, beta_},
                       [inv_std, xhat = std::move(xhat)](ag::Node& node) {
                         ag::Node& xn = *node.parents[0];
                         ag::Node& gn = *node.parents[1];
                         ag::Node& bn = *node.parents[2];
                         if (xn.requires_grad) {
                           xn.accumulate(
                               (node.grad.array().rowwise() * (gn.value.row(0).array() * inv_std)).matrix());
                         }
                         if (gn.requires_grad) gn.accumulate(node.grad.cwiseProduct(xhat).colwise().sum());
                         if (bn.requires_grad) bn.accumulate(node.grad.colwise().sum());
                       });
  }

  if (n < 2) throw ConfigError("batch normalization in training mode needs at least 2 rows");
  const Eigen::Array<double, 1, Eigen::Dynamic> mu = in.colwise().mean().array();
  Matrix centered = in.rowwise() - mu.matrix();
  const Eigen::Array<double, 1, Eigen::Dynamic> var = centered.array().square().colwise().mean();
  const Eigen::Array<double, 1, Eigen::Dynamic> inv_std = (var + kEps).rsqrt();
  Matrix xhat = centered.array().rowwise() * inv_std;
  Matrix out = (xhat.array().rowwise() * g).rowwise() + b;

  ag::Var rm = running_mean_;
  ag::Var rv = running_var_;
  const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
  rm.mutable_value() = (1.0 - kMomentum) * rm.value() + kMomentum * mu.matrix();
  rv.mutable_value() = (1.0 - kMomentum) * rv.value() + kMomentum * (var * unbias).matrix();

  return ag::make_op(std::move(out), {x, gamma_, beta_},
                     [inv_std, xhat = std::move(xhat)](ag::Node& node) {
                       ag::Node& xn = *node.parents[0];
                       ag::Node& gn = *node.parents[1];
                       ag::Node& bn = *node.parents[2];
                       const double count = static_cast<double>(node.grad.rows());
                       if (xn.requires_grad) {
                         Matrix dxhat = node.grad.array().rowwise() * gn.value.row(0).array();
                         const Eigen::Array<double, 1, Eigen::Dynamic> sum_d = dxhat.colwise().sum().array();
                         const Eigen::Array<double, 1, Eigen::Dynamic> sum_dx =
                             dxhat.cwiseProduct(xhat).colwise().sum().array();
                         Matrix dx = ((dxhat.array() * count).rowwise() - sum_d - xhat.array().rowwise() * sum_dx)
                                         .rowwise() *
                                     (inv_std / count);
                         xn.accumulate(dx);
                       }
                       if (gn.requires_grad) gn.accumulate(node.grad.cwiseProduct(xhat).colwise().sum());
                       if (bn.requires_grad) bn.accumulate(node.grad.colwise().sum());
                     });
}

LinearNorm::LinearNorm(ParameterStore& store, const std::string& name, int in, int out, NormKind norm,
                       Rng& init_rng)
    : linear_(store, name, in, out, init_rng) {
  if (norm == NormKind::Batch) norm_.emplace(store, name + ".bn", out);
}

ag::Var LinearNorm::operator()(const ag::Var& x, bool training) const {
  ag::Var y = linear_(x);
  return norm_ ? (*norm_)(y, training) : y;
}

}  // namespace iwivig
