#pragma once

#include "iwivig/backbone.hpp"
#include "iwivig/bottleneck.hpp"
#include "iwivig/config.hpp"
#include "iwivig/image.hpp"

#include <memory>
#include <vector>

namespace iwivig {

struct Prediction {
  Task task = Task::Classification;
  std::vector<double> logits;  // classification
  double value = 0.0;          // regression

  std::vector<double> probabilities() const;
  int predicted_class() const;
};

struct LossBreakdown {
  double task_loss = 0.0;
  double info_loss = 0.0;
  double total = 0.0;
};

struct Targets {
  std::vector<int> labels;     // classification
  std::vector<double> values;  // regression
};

struct LossTerms {
  ag::Var task;
  ag::Var info;
  ag::Var total;

  LossBreakdown breakdown() const { return {task.scalar(), info.scalar(), total.scalar()}; }
};

// Cross-entropy (classification) or mean squared error (regression) plus
// the information regularizer with unit weight.
LossTerms total_loss(const ag::Var& output, const Targets& targets, const ag::Var& info_loss, Task task);
LossBreakdown total_loss(const Prediction& pred, const Targets& target, double info_loss);

// Global mean pooling over each image's nodes, then Linear -> GELU -> Linear.
class Head {
 public:
  Head() = default;
  Head(ParameterStore& store, int dim, int out_dim, Rng& rng);

  ag::Var operator()(const ag::Var& node_embeddings, int batch) const;

 private:
  Linear fc1_;
  Linear fc2_;
};

struct ForwardResult {
  BackboneOutput backbone;
  BottleneckOutput bottleneck;
  ag::Var output;  // batch x output_dim

  Prediction prediction(int b, Task task) const;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  ForwardResult forward(const std::vector<const Image*>& images, ForwardContext& ctx, const EdgeGate& gate = {}) const;
  ForwardResult forward_pixels(const ag::Var& pixels, int batch, ForwardContext& ctx,
                               const EdgeGate& gate = {}) const;
  // Bottleneck and head on a precomputed stage-4 grid; backbone output is left empty.
  ForwardResult forward_from_stage4(const GridBatch& stage4, ForwardContext& ctx, const EdgeGate& gate = {}) const;

  // Evaluation-mode prediction of a single image.
  Prediction predict(const Image& image) const;

  std::vector<Matrix> state() const;
  void load_state(const std::vector<Matrix>& state);

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  Backbone backbone_;
  Bottleneck bottleneck_;
  Head head_;
};

}  // namespace iwivig
