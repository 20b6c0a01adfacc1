#pragma once

#include "iwivig/layers.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <string>

namespace iwivig {

enum class Task { Classification, Regression };

std::string to_string(Task task);
Task task_from_string(const std::string& s);

enum class LossReduction { Mean, Sum };

struct BottleneckConfig {
  double r = 0.7;            // edge-weight prior of the information regularizer
  double temperature = 1.0;  // binary-concrete temperature
  double gin_eps = 0.0;      // GIN self-weight, fixed
  int layers = 4;
  int k = 5;
  LossReduction reduction = LossReduction::Mean;
  bool symmetrize = false;  // average p over (u,v)/(v,u); off by default

  void validate() const;
};

struct ModelConfig {
  int input_side = 128;
  int in_channels = 3;
  std::array<int, 4> stage_dims{16, 32, 64, 96};
  int ffn_ratio = 4;
  int window_side = 4;
  int local_k = 9;
  int global_k = 5;
  std::array<int, 4> blocks_per_stage{1, 1, 2, 2};
  Task task = Task::Classification;
  int num_classes = 2;
  NormKind norm = NormKind::Batch;
  std::uint64_t init_seed = 0;
  BottleneckConfig bottleneck{.r = 0.7, .temperature = 1.0, .gin_eps = 0.0, .layers = 2, .k = 5};

  int output_dim() const { return task == Task::Classification ? num_classes : 1; }
  // Node-grid side after the stem and after each downsample.
  int stage_side(int stage) const { return input_side / (4 << stage); }
  void validate() const;

  // Desk-scale defaults (input 128, dims 16/32/64/96, blocks 1/1/2/2).
  static ModelConfig desk();
  // Architecture table values (input 256, dims 48/96/240/384, blocks 2/2/4/4).
  static ModelConfig paper();
};

struct TrainConfig {
  int epochs = 50;
  double lr = 5e-4;
  double weight_decay = 0.03;
  int batch_size = 16;
  std::uint64_t seed = 0;
  int eval_every = 10;
  std::string schedule = "cosine";

  void validate() const;
};

void to_json(nlohmann::json& j, const BottleneckConfig& c);
void from_json(const nlohmann::json& j, BottleneckConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

// {"model": {...}, "train": {...}}; missing keys keep their defaults,
// unknown keys are rejected.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json run_config_json(const RunConfig& cfg);

}  // namespace iwivig
