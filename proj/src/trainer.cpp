#include "iwivig/trainer.hpp"

#include "iwivig/errors.hpp"
#include "iwivig/stats.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace iwivig {

namespace fs = std::filesystem;
using nlohmann::json;

AdamW::AdamW(ParameterStore& store, double weight_decay) : store_(&store), weight_decay_(weight_decay) {
  for (const auto& p : store.all()) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  auto& params = store_->all();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    if (!p.trainable) continue;
    const Matrix g = p.var.grad();
    m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g;
    v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g.cwiseProduct(g);
    Matrix& w = p.var.mutable_value();
    if (p.decay) w *= 1.0 - lr * weight_decay_;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + kEps);
  }
}

double cosine_lr(double base_lr, int epoch, int epochs) {
  if (epochs <= 1) return base_lr;
  const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

json EvalMetrics::to_json() const {
  json j{{"task", iwivig::to_string(task)}, {"count", count}, {"loss", loss}};
  if (task == Task::Classification) {
    j["accuracy"] = accuracy;
    j["macro_f1"] = macro_f1;
  } else {
    j["r2"] = r2;
    j["kendall_tau"] = kendall_tau;
  }
  return j;
}

EvalMetrics EvalMetrics::from_json(const json& j) {
  EvalMetrics m;
  m.task = task_from_string(j.at("task").get<std::string>());
  m.count = j.at("count").get<std::size_t>();
  m.loss = j.at("loss").get<double>();
  m.accuracy = j.value("accuracy", 0.0);
  m.macro_f1 = j.value("macro_f1", 0.0);
  m.r2 = j.value("r2", 0.0);
  m.kendall_tau = j.value("kendall_tau", 0.0);
  return m;
}

Checkpoint make_checkpoint(const Model& model, const TrainConfig& train) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  for (const auto& p : model.parameters().all()) c.names.push_back(p.name);
  c.tensors = model.state();
  return c;
}

namespace {

constexpr char kMagic[4] = {'I', 'W', 'V', 'G'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint blob is truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

json record_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"lr", r.lr},
         {"task_loss", r.task_loss},
         {"info_loss", r.info_loss},
         {"total_loss", r.total_loss}};
  if (r.val) j["val"] = r.val->to_json();
  return j;
}

EpochRecord record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.lr = j.at("lr").get<double>();
  r.task_loss = j.at("task_loss").get<double>();
  r.info_loss = j.at("info_loss").get<double>();
  r.total_loss = j.at("total_loss").get<double>();
  if (j.contains("val")) r.val = EvalMetrics::from_json(j.at("val"));
  return r;
}

std::string strip_suffix(const std::string& path) {
  for (const char* ext : {".json", ".bin"}) {
    const std::string e(ext);
    if (path.size() > e.size() && path.compare(path.size() - e.size(), e.size(), e) == 0) {
      return path.substr(0, path.size() - e.size());
    }
  }
  return path;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& prefix_in) {
  if (ckpt.names.size() != ckpt.tensors.size()) throw DataError("checkpoint names and tensors differ in count");
  const std::string prefix = strip_suffix(prefix_in);
  const fs::path parent = fs::path(prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);

  std::string blob(kMagic, 4);
  put(blob, kCheckpointVersion);
  put(blob, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    put(blob, static_cast<std::uint32_t>(ckpt.names[i].size()));
    blob += ckpt.names[i];
    const Matrix& t = ckpt.tensors[i];
    put(blob, static_cast<std::uint64_t>(t.rows()));
    put(blob, static_cast<std::uint64_t>(t.cols()));
    blob.append(reinterpret_cast<const char*>(t.data()), static_cast<std::size_t>(t.size()) * sizeof(double));
  }
  {
    std::ofstream out(prefix + ".bin", std::ios::binary);
    if (!out) throw DataError("cannot write '" + prefix + ".bin'");
    out << blob;
  }

  json history = json::array();
  for (const auto& r : ckpt.history) history.push_back(record_json(r));
  json doc{{"format_version", kCheckpointVersion},
           {"model", ckpt.model},
           {"train", ckpt.train},
           {"epoch", ckpt.epoch},
           {"metrics", ckpt.metrics ? ckpt.metrics->to_json() : json(nullptr)},
           {"history", history},
           {"rng_state", ckpt.rng_state},
           {"blob", fs::path(prefix + ".bin").filename().string()},
           {"blob_fnv1a", hex64(fnv1a(blob))}};
  std::ofstream out(prefix + ".json", std::ios::binary);
  if (!out) throw DataError("cannot write '" + prefix + ".json'");
  out << doc.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string prefix = strip_suffix(path);
  Checkpoint c;
  json doc;
  try {
    doc = json::parse(read_file(prefix + ".json"));
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint sidecar '" + prefix + ".json': " + e.what());
  }
  try {
    if (doc.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
      throw DataError("unsupported checkpoint format version in '" + prefix + ".json'");
    }
    c.model = doc.at("model").get<ModelConfig>();
    c.train = doc.at("train").get<TrainConfig>();
    c.epoch = doc.at("epoch").get<int>();
    if (!doc.at("metrics").is_null()) c.metrics = EvalMetrics::from_json(doc.at("metrics"));
    for (const auto& r : doc.at("history")) c.history.push_back(record_from_json(r));
    c.rng_state = doc.at("rng_state").get<std::string>();
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint sidecar '" + prefix + ".json': " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("checkpoint '" + prefix + ".json' holds an invalid config: " + e.what());
  }

  const fs::path blob_path = fs::path(prefix).parent_path() / doc.at("blob").get<std::string>();
  const std::string blob = read_file(blob_path.string());
  if (hex64(fnv1a(blob)) != doc.at("blob_fnv1a").get<std::string>()) {
    throw DataError("checkpoint blob '" + blob_path.string() + "' does not match its sidecar hash");
  }
  if (blob.size() < 4 || std::memcmp(blob.data(), kMagic, 4) != 0) throw DataError("not a checkpoint blob");
  std::size_t pos = 4;
  if (take<std::uint32_t>(blob, pos) != kCheckpointVersion) throw DataError("unsupported checkpoint blob version");
  const auto count = take<std::uint32_t>(blob, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(blob, pos);
    if (pos + len > blob.size()) throw DataError("checkpoint blob is truncated");
    c.names.emplace_back(blob.data() + pos, len);
    pos += len;
    const auto rows = take<std::uint64_t>(blob, pos);
    const auto cols = take<std::uint64_t>(blob, pos);
    const std::size_t bytes = rows * cols * sizeof(double);
    if (pos + bytes > blob.size()) throw DataError("checkpoint blob is truncated");
    Matrix t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::memcpy(t.data(), blob.data() + pos, bytes);
    pos += bytes;
    c.tensors.push_back(std::move(t));
  }
  if (pos != blob.size()) throw DataError("checkpoint blob has trailing bytes");
  return c;
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt) {
  auto model = std::make_unique<Model>(ckpt.model);
  const auto& params = model->parameters().all();
  if (params.size() != ckpt.names.size()) {
    throw DataError("checkpoint has " + std::to_string(ckpt.names.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != ckpt.names[i]) {
      throw DataError("checkpoint tensor '" + ckpt.names[i] + "' found where '" + params[i].name + "' was expected");
    }
  }
  model->load_state(ckpt.tensors);
  return model;
}

std::vector<Prediction> predict_batch(const Model& model, const std::vector<const Image*>& images, int batch_size) {
  ag::NoGradGuard guard;
  std::vector<Prediction> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Image*> chunk(images.begin() + static_cast<long>(start), images.begin() + static_cast<long>(end));
    ForwardContext ctx;
    ForwardResult r = model.forward(chunk, ctx);
    for (std::size_t b = 0; b < chunk.size(); ++b) out.push_back(r.prediction(static_cast<int>(b), model.config().task));
  }
  return out;
}

EvalMetrics evaluate(const Model& model, const Dataset& data, int batch_size) {
  if (data.samples.empty()) throw DataError("cannot evaluate on an empty split");
  std::vector<const Image*> images;
  for (const auto& s : data.samples) images.push_back(&s.image);
  const std::vector<Prediction> preds = predict_batch(model, images, batch_size);

  EvalMetrics m;
  m.task = model.config().task;
  m.count = preds.size();
  double loss = 0.0;
  if (m.task == Task::Classification) {
    std::vector<int> predicted, truth;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      predicted.push_back(preds[i].predicted_class());
      truth.push_back(data.samples[i].label);
      loss += total_loss(preds[i], Targets{{data.samples[i].label}, {}}, 0.0).task_loss;
    }
    m.accuracy = stats::accuracy(predicted, truth);
    m.macro_f1 = stats::macro_f1(predicted, truth, model.config().num_classes);
  } else {
    std::vector<double> predicted, truth;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      predicted.push_back(preds[i].value);
      truth.push_back(data.samples[i].target);
      loss += total_loss(preds[i], Targets{{}, {data.samples[i].target}}, 0.0).task_loss;
    }
    m.r2 = stats::r_squared(predicted, truth);
    m.kendall_tau = stats::kendall_tau_b(predicted, truth);
  }
  m.loss = loss / static_cast<double>(preds.size());
  return m;
}

Checkpoint train(Model& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                 const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.samples.empty()) throw DataError("training split is empty");
  const Task task = model.config().task;
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  Rng noise_rng(derive_seed(cfg.seed, 2));
  Rng augment_rng(derive_seed(cfg.seed, 3));
  AdamW opt(model.parameters(), cfg.weight_decay);

  Checkpoint best = make_checkpoint(model, cfg);
  double best_score = -std::numeric_limits<double>::infinity();
  double best_loss = std::numeric_limits<double>::infinity();
  std::vector<EpochRecord> history;
  std::vector<std::size_t> order(train_set.samples.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Image*> images;
      std::vector<Image> augmented;
      Targets targets;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train_set.samples[order[i]];
        images.push_back(&s.image);
        targets.labels.push_back(s.label);
        targets.values.push_back(s.target);
      }
      if (hooks.augment) {
        for (const Image* img : images) augmented.push_back(*img);
        hooks.augment(augmented, augment_rng);
        for (std::size_t i = 0; i < augmented.size(); ++i) images[i] = &augmented[i];
      }

      model.parameters().zero_grad();
      const std::string where = "epoch " + std::to_string(epoch) + ", step " + std::to_string(steps);
      ForwardContext ctx{.training = true, .rng = &noise_rng, .trace = nullptr};
      LossTerms loss;
      try {
        ForwardResult r = model.forward(images, ctx);
        loss = total_loss(r.output, targets, r.bottleneck.info_loss, task);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at " + where);
      }
      const LossBreakdown b = loss.breakdown();
      if (!std::isfinite(b.total)) throw NumericError("non-finite loss at " + where);
      ag::backward(loss.total);
      opt.step(lr);
      rec.task_loss += b.task_loss;
      rec.info_loss += b.info_loss;
      rec.total_loss += b.total;
      ++steps;
    }
    rec.task_loss /= steps;
    rec.info_loss /= steps;
    rec.total_loss /= steps;

    const bool do_eval = !val_set.samples.empty() &&
                         ((epoch + 1) % std::max(1, cfg.eval_every) == 0 || epoch + 1 == cfg.epochs);
    if (do_eval) {
      rec.val = evaluate(model, val_set, cfg.batch_size);
      // Ties on the primary metric go to the lower validation loss.
      const double score = rec.val->primary();
      if (score > best_score || (score == best_score && rec.val->loss < best_loss)) {
        best_score = score;
        best_loss = rec.val->loss;
        best.tensors = model.state();
        best.epoch = epoch;
        best.metrics = rec.val;
      }
    }
    history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }

  if (best.epoch < 0) {
    best.tensors = model.state();
    best.epoch = cfg.epochs - 1;
  }
  best.history = std::move(history);
  best.rng_state = noise_rng.state();
  model.load_state(best.tensors);
  return best;
}

}  // namespace iwivig
