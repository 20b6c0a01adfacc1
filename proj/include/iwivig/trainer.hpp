#pragma once

#include "iwivig/config.hpp"
#include "iwivig/dataset.hpp"
#include "iwivig/model.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace iwivig {

// Decoupled weight decay Adam. Parameters flagged `decay = false` (biases,
// normalization) skip the decay term.
class AdamW {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamW(ParameterStore& store, double weight_decay);

  void step(double lr);
  long long steps() const { return t_; }

 private:
  ParameterStore* store_;
  double weight_decay_;
  long long t_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

// Learning rate of `epoch` (0-based): base at epoch 0, annealed to zero at the last epoch.
double cosine_lr(double base_lr, int epoch, int epochs);

struct EvalMetrics {
  Task task = Task::Classification;
  std::size_t count = 0;
  double loss = 0.0;  // mean task loss
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double r2 = 0.0;
  double kendall_tau = 0.0;

  // Accuracy for classification, R^2 for regression.
  double primary() const { return task == Task::Classification ? accuracy : r2; }
  nlohmann::json to_json() const;
  static EvalMetrics from_json(const nlohmann::json& j);
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double task_loss = 0.0;  // means over training steps
  double info_loss = 0.0;
  double total_loss = 0.0;
  std::optional<EvalMetrics> val;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  int epoch = -1;  // epoch whose weights are stored; -1 for an untrained model
  std::optional<EvalMetrics> metrics;
  std::vector<EpochRecord> history;
  std::string rng_state;
  std::vector<std::string> names;
  std::vector<Matrix> tensors;
};

Checkpoint make_checkpoint(const Model& model, const TrainConfig& train);

// Writes <prefix>.bin (raw tensors) and <prefix>.json (sidecar).
void save_checkpoint(const Checkpoint& ckpt, const std::string& prefix);
// Accepts the prefix, the .json sidecar path, or the .bin path.
Checkpoint load_checkpoint(const std::string& path);
std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt);

std::vector<Prediction> predict_batch(const Model& model, const std::vector<const Image*>& images,
                                      int batch_size = 16);
EvalMetrics evaluate(const Model& model, const Dataset& data, int batch_size = 16);

struct TrainHooks {
  // Pre-batch augmentation; empty by default.
  std::function<void(std::vector<Image>& batch, Rng& rng)> augment;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Seeded epoch loop with cosine-annealed AdamW. Keeps the parameters of the
// best validation evaluation (primary metric, then lower validation loss),
// loads them back into `model`, and returns them.
Checkpoint train(Model& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                 const TrainHooks& hooks = {});

}  // namespace iwivig
