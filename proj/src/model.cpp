#include "iwivig/model.hpp"

#include "iwivig/errors.hpp"

#include <algorithm>
#include <cmath>

namespace iwivig {

std::vector<double> Prediction::probabilities() const {
  if (task != Task::Classification) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    p[c] = std::exp(logits[c] - mx);
    z += p[c];
  }
  for (double& v : p) v /= z;
  return p;
}

int Prediction::predicted_class() const {
  if (task != Task::Classification) return -1;
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

LossTerms total_loss(const ag::Var& output, const Targets& targets, const ag::Var& info_loss, Task task) {
  LossTerms t;
  if (task == Task::Classification) {
    for (int label : targets.labels) {
      if (label < 0 || label >= output.cols()) {
        throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(output.cols()) + ")");
      }
    }
    t.task = ag::softmax_cross_entropy(output, targets.labels);
  } else {
    t.task = ag::mse(output, targets.values);
  }
  t.info = info_loss;
  t.total = ag::add(t.task, info_loss);
  return t;
}

LossBreakdown total_loss(const Prediction& pred, const Targets& target, double info_loss) {
  ag::NoGradGuard guard;
  Matrix out;
  if (pred.task == Task::Classification) {
    out.resize(1, static_cast<Eigen::Index>(pred.logits.size()));
    for (std::size_t c = 0; c < pred.logits.size(); ++c) out(0, static_cast<Eigen::Index>(c)) = pred.logits[c];
  } else {
    out.resize(1, 1);
    out(0, 0) = pred.value;
  }
  Matrix info(1, 1);
  info(0, 0) = info_loss;
  return total_loss(ag::Var::constant(std::move(out)), target, ag::Var::constant(std::move(info)), pred.task)
      .breakdown();
}

Head::Head(ParameterStore& store, int dim, int out_dim, Rng& rng)
    : fc1_(store, "head.fc1", dim, dim, rng), fc2_(store, "head.fc2", dim, out_dim, rng) {}

ag::Var Head::operator()(const ag::Var& node_embeddings, int batch) const {
  return fc2_(ag::gelu(fc1_(ag::segment_mean(node_embeddings, batch))));
}

Prediction ForwardResult::prediction(int b, Task task) const {
  Prediction p;
  p.task = task;
  const auto row = output.value().row(b);
  if (task == Task::Classification) {
    p.logits.assign(row.data(), row.data() + row.size());
  } else {
    p.value = row(0);
  }
  return p;
}

namespace {

ModelConfig validated(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(validated(cfg)) {
  Rng rng(derive_seed(cfg_.init_seed, 0x1417));
  backbone_ = Backbone(store_, cfg_, rng);
  bottleneck_ = Bottleneck(store_, cfg_, rng);
  head_ = Head(store_, cfg_.stage_dims[3], cfg_.output_dim(), rng);
}

ForwardResult Model::forward(const std::vector<const Image*>& images, ForwardContext& ctx, const EdgeGate& gate) const {
  for (const Image* img : images) {
    if (img->height != cfg_.input_side || img->width != cfg_.input_side || img->channels() != cfg_.in_channels) {
      throw ConfigError("image of size " + std::to_string(img->height) + "x" + std::to_string(img->width) + "x" +
                        std::to_string(img->channels()) + " is incompatible with input_side " +
                        std::to_string(cfg_.input_side));
    }
  }
  ag::Var pixels = ag::Var::constant(images_to_rows(images));
  return forward_pixels(pixels, static_cast<int>(images.size()), ctx, gate);
}

ForwardResult Model::forward_pixels(const ag::Var& pixels, int batch, ForwardContext& ctx, const EdgeGate& gate) const {
  BackboneOutput bb = backbone_.forward(pixels, batch, ctx);
  ForwardResult r = forward_from_stage4(bb.stage4, ctx, gate);
  r.backbone = std::move(bb);
  return r;
}

ForwardResult Model::forward_from_stage4(const GridBatch& stage4, ForwardContext& ctx, const EdgeGate& gate) const {
  ForwardResult r;
  r.bottleneck = bottleneck_.forward(stage4, ctx, gate);
  r.output = head_(r.bottleneck.embeddings, stage4.batch);
  if (!r.output.value().allFinite()) throw NumericError("model produced non-finite outputs");
  return r;
}

Prediction Model::predict(const Image& image) const {
  ag::NoGradGuard guard;
  ForwardContext ctx;
  return forward({&image}, ctx).prediction(0, cfg_.task);
}

std::vector<Matrix> Model::state() const {
  std::vector<Matrix> s;
  s.reserve(store_.all().size());
  for (const auto& p : store_.all()) s.push_back(p.var.value());
  return s;
}

void Model::load_state(const std::vector<Matrix>& state) {
  auto& params = store_.all();
  if (state.size() != params.size()) {
    throw DataError("state has " + std::to_string(state.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& cur = params[i].var.value();
    if (state[i].rows() != cur.rows() || state[i].cols() != cur.cols()) {
      throw DataError("shape mismatch for parameter '" + params[i].name + "'");
    }
    params[i].var.mutable_value() = state[i];
  }
}

}  // namespace iwivig
