#pragma once

#include "iwivig/autograd.hpp"
#include "iwivig/graph.hpp"
#include "iwivig/rng.hpp"

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace iwivig {

enum class NormKind { Batch, None };

struct Parameter {
  std::string name;
  ag::Var var;
  bool trainable = true;  // false for running statistics
  bool decay = true;      // decoupled weight decay applies
};

// Owns every tensor of a model in registration order; that order is the
// checkpoint layout.
class ParameterStore {
 public:
  ag::Var add(const std::string& name, Matrix init, bool trainable, bool decay);

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  const Parameter* find(const std::string& name) const;
  std::size_t trainable_count() const;
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Per-forward state. `rng` is owned by the caller of a single forward pass
// and must not be shared between concurrent passes.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  GraphTrace* trace = nullptr;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, Rng& init_rng);

  ag::Var operator()(const ag::Var& x) const;
  int in_features() const { return static_cast<int>(weight_.rows()); }
  int out_features() const { return static_cast<int>(weight_.cols()); }
  const ag::Var& weight() const { return weight_; }
  const ag::Var& bias() const { return bias_; }

 private:
  ag::Var weight_;  // in x out
  ag::Var bias_;    // 1 x out
};

// Batch normalization over rows. Training mode normalizes with batch
// statistics and updates the running estimates; evaluation mode is the
// per-row affine map given by the running estimates.
class BatchNorm {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm() = default;
  BatchNorm(ParameterStore& store, const std::string& name, int dim);

  ag::Var operator()(const ag::Var& x, bool training) const;
  const ag::Var& gamma() const { return gamma_; }
  const ag::Var& beta() const { return beta_; }
  const ag::Var& running_mean() const { return running_mean_; }
  const ag::Var& running_var() const { return running_var_; }

 private:
  ag::Var gamma_;
  ag::Var beta_;
  ag::Var running_mean_;
  ag::Var running_var_;
};

// Linear layer optionally followed by batch normalization.
class LinearNorm {
 public:
  LinearNorm() = default;
  LinearNorm(ParameterStore& store, const std::string& name, int in, int out, NormKind norm, Rng& init_rng);

  ag::Var operator()(const ag::Var& x, bool training) const;
  const Linear& linear() const { return linear_; }
  const std::optional<BatchNorm>& norm() const { return norm_; }

 private:
  Linear linear_;
  std::optional<BatchNorm> norm_;
};

}  // namespace iwivig
