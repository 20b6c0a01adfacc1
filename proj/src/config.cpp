#include "iwivig/config.hpp"

#include "iwivig/errors.hpp"

#include <fstream>
#include <set>

namespace iwivig {

using nlohmann::json;

std::string to_string(Task task) { return task == Task::Classification ? "classification" : "regression"; }

Task task_from_string(const std::string& s) {
  if (s == "classification") return Task::Classification;
  if (s == "regression") return Task::Regression;
  throw ConfigError("unknown task '" + s + "' (expected classification or regression)");
}

void BottleneckConfig::validate() const {
  if (!(r > 0.0 && r < 1.0)) throw ConfigError("bottleneck.r must lie in (0, 1), got " + std::to_string(r));
  if (!(temperature > 0.0)) throw ConfigError("bottleneck.temperature must be positive");
  if (layers <= 0) throw ConfigError("bottleneck.layers must be positive");
  if (k <= 0) throw ConfigError("bottleneck.k must be positive");
}

void ModelConfig::validate() const {
  if (input_side <= 0 || input_side % 64 != 0) {
    throw ConfigError("input_side must be a positive multiple of 64, got " + std::to_string(input_side));
  }
  if (in_channels <= 0) throw ConfigError("in_channels must be positive");
  for (int s = 0; s < 4; ++s) {
    if (stage_dims[s] <= 0) throw ConfigError("stage_dims[" + std::to_string(s) + "] must be positive");
    if (blocks_per_stage[s] <= 0) throw ConfigError("blocks_per_stage[" + std::to_string(s) + "] must be positive");
  }
  if (stage_dims[0] % 2 != 0) throw ConfigError("stage_dims[0] must be even (stem hidden width is half of it)");
  if (ffn_ratio <= 0) throw ConfigError("ffn_ratio must be positive");
  if (window_side <= 0) throw ConfigError("window_side must be positive");
  for (int s = 0; s < 3; ++s) {
    if (stage_side(s) % window_side != 0) {
      throw ConfigError("stage " + std::to_string(s + 1) + " grid side " + std::to_string(stage_side(s)) +
                        " is not divisible by window_side " + std::to_string(window_side));
    }
  }
  if (local_k <= 0 || global_k <= 0) throw ConfigError("k values must be positive");
  if (task == Task::Classification && num_classes < 2) throw ConfigError("classification needs num_classes >= 2");
  bottleneck.validate();
  if (bottleneck.k != global_k) throw ConfigError("bottleneck.k must equal global_k");
  if (bottleneck.layers != blocks_per_stage[3]) {
    throw ConfigError("bottleneck.layers must equal blocks_per_stage[3]");
  }
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.input_side = 256;
  c.stage_dims = {48, 96, 240, 384};
  c.blocks_per_stage = {2, 2, 4, 4};
  c.bottleneck.layers = 4;
  return c;
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("train.epochs must be positive");
  if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be nonnegative");
  if (eval_every <= 0) throw ConfigError("train.eval_every must be positive");
  if (schedule != "cosine") throw ConfigError("train.schedule must be 'cosine'");
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      j.at(key).get_to(out);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("invalid value for '") + key + "': " + e.what());
    }
  }
}

}  // namespace

void to_json(json& j, const BottleneckConfig& c) {
  j = json{{"r", c.r},
           {"temperature", c.temperature},
           {"gin_eps", c.gin_eps},
           {"layers", c.layers},
           {"k", c.k},
           {"reduction", c.reduction == LossReduction::Mean ? "mean" : "sum"},
           {"symmetrize", c.symmetrize}};
}

void from_json(const json& j, BottleneckConfig& c) {
  reject_unknown(j, {"r", "temperature", "gin_eps", "layers", "k", "reduction", "symmetrize"}, "bottleneck");
  read_opt(j, "r", c.r);
  read_opt(j, "temperature", c.temperature);
  read_opt(j, "gin_eps", c.gin_eps);
  read_opt(j, "layers", c.layers);
  read_opt(j, "k", c.k);
  read_opt(j, "symmetrize", c.symmetrize);
  if (j.contains("reduction")) {
    const auto s = j.at("reduction").get<std::string>();
    if (s == "mean") {
      c.reduction = LossReduction::Mean;
    } else if (s == "sum") {
      c.reduction = LossReduction::Sum;
    } else {
      throw ConfigError("bottleneck.reduction must be 'mean' or 'sum'");
    }
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"input_side", c.input_side},
           {"in_channels", c.in_channels},
           {"stage_dims", c.stage_dims},
           {"ffn_ratio", c.ffn_ratio},
           {"window_side", c.window_side},
           {"local_k", c.local_k},
           {"global_k", c.global_k},
           {"blocks_per_stage", c.blocks_per_stage},
           {"task", to_string(c.task)},
           {"num_classes", c.num_classes},
           {"norm", c.norm == NormKind::Batch ? "batch" : "none"},
           {"init_seed", c.init_seed},
           {"bottleneck", c.bottleneck}};
}

void from_json(const json& j, ModelConfig& c) {
  reject_unknown(j,
                 {"input_side", "in_channels", "stage_dims", "ffn_ratio", "window_side", "local_k", "global_k",
                  "blocks_per_stage", "task", "num_classes", "norm", "init_seed", "bottleneck", "preset"},
                 "model");
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "paper") {
      c = ModelConfig::paper();
    } else if (p == "desk") {
      c = ModelConfig::desk();
    } else {
      throw ConfigError("unknown model preset '" + p + "'");
    }
  }
  read_opt(j, "input_side", c.input_side);
  read_opt(j, "in_channels", c.in_channels);
  read_opt(j, "stage_dims", c.stage_dims);
  read_opt(j, "ffn_ratio", c.ffn_ratio);
  read_opt(j, "window_side", c.window_side);
  read_opt(j, "local_k", c.local_k);
  read_opt(j, "global_k", c.global_k);
  read_opt(j, "blocks_per_stage", c.blocks_per_stage);
  read_opt(j, "num_classes", c.num_classes);
  read_opt(j, "init_seed", c.init_seed);
  if (j.contains("task")) c.task = task_from_string(j.at("task").get<std::string>());
  if (j.contains("norm")) {
    const auto s = j.at("norm").get<std::string>();
    if (s == "batch") {
      c.norm = NormKind::Batch;
    } else if (s == "none") {
      c.norm = NormKind::None;
    } else {
      throw ConfigError("model.norm must be 'batch' or 'none'");
    }
  }
  if (j.contains("bottleneck")) {
    BottleneckConfig b = c.bottleneck;
    from_json(j.at("bottleneck"), b);
    c.bottleneck = b;
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"epochs", c.epochs},         {"lr", c.lr},     {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size}, {"seed", c.seed}, {"eval_every", c.eval_every},
           {"schedule", c.schedule}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j, {"epochs", "lr", "weight_decay", "batch_size", "seed", "eval_every", "schedule"}, "train");
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "lr", c.lr);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "seed", c.seed);
  read_opt(j, "eval_every", c.eval_every);
  read_opt(j, "schedule", c.schedule);
}

RunConfig parse_run_config(const json& j) {
  reject_unknown(j, {"model", "train"}, "config");
  RunConfig cfg;
  try {
    if (j.contains("model")) from_json(j.at("model"), cfg.model);
    if (j.contains("train")) from_json(j.at("train"), cfg.train);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json run_config_json(const RunConfig& cfg) { return json{{"model", cfg.model}, {"train", cfg.train}}; }

}  // namespace iwivig
