#include "iwivig/bottleneck.hpp"

#include "iwivig/errors.hpp"

#include <cmath>
#include <map>
#include <string>
#include <utility>

namespace iwivig {

namespace {

double bernoulli_kl(double p, double r) { return p * std::log(p / r) + (1.0 - p) * std::log((1.0 - p) / (1.0 - r)); }

void check_probability_range(double r) {
  if (!(r > 0.0 && r < 1.0)) throw ConfigError("info_loss: r must lie in (0, 1), got " + std::to_string(r));
}

}  // namespace

ag::Var info_loss(const ag::Var& p, double r, LossReduction reduction) {
  check_probability_range(r);
  if (p.cols() != 1 || p.rows() == 0) throw ConfigError("info_loss: expected a non-empty (E x 1) probability column");
  const double norm = reduction == LossReduction::Mean ? 1.0 / static_cast<double>(p.rows()) : 1.0;
  double total = 0.0;
  for (Eigen::Index e = 0; e < p.rows(); ++e) total += bernoulli_kl(p.value()(e, 0), r);
  Matrix out(1, 1);
  out(0, 0) = total * norm;
  const double logit_r = std::log(r) - std::log1p(-r);
  return ag::make_op(std::move(out), {p}, [norm, logit_r](ag::Node& node) {
    ag::Node& pn = *node.parents[0];
    Matrix g = pn.value.unaryExpr([logit_r](double v) { return std::log(v) - std::log1p(-v) - logit_r; });
    pn.accumulate(g * (norm * node.grad(0, 0)));
  });
}

double info_loss(const std::vector<double>& p, double r, LossReduction reduction) {
  Matrix m(static_cast<Eigen::Index>(p.size()), 1);
  for (std::size_t e = 0; e < p.size(); ++e) m(static_cast<Eigen::Index>(e), 0) = p[e];
  ag::NoGradGuard guard;
  return info_loss(ag::Var::constant(std::move(m)), r, reduction).scalar();
}

ag::Var sample_edge_weights(const ag::Var& p, double temperature, SampleMode mode, Rng* rng) {
  if (mode == SampleMode::Evaluation) return p;
  if (rng == nullptr) throw ConfigError("sample_edge_weights: training mode needs a random generator");
  if (!(temperature > 0.0)) throw ConfigError("sample_edge_weights: temperature must be positive");
  Matrix noise(p.rows(), p.cols());
  for (Eigen::Index e = 0; e < noise.size(); ++e) {
    const double u = rng->uniform_open();
    noise.data()[e] = std::log(u) - std::log1p(-u);
  }
  ag::Var logits = ag::add(ag::logit(p), ag::Var::constant(std::move(noise)));
  return ag::sigmoid(ag::scale(logits, 1.0 / temperature));
}

SampledWeights sample_edge_weights(const EdgeProbabilities& p, const BottleneckConfig& cfg, SampleMode mode,
                                   Rng* rng) {
  Matrix m(static_cast<Eigen::Index>(p.p.size()), 1);
  for (std::size_t e = 0; e < p.p.size(); ++e) m(static_cast<Eigen::Index>(e), 0) = p.p[e];
  ag::NoGradGuard guard;
  ag::Var a = sample_edge_weights(ag::Var::constant(std::move(m)), cfg.temperature, mode, rng);
  SampledWeights out;
  out.mode = mode;
  out.alpha.assign(a.value().data(), a.value().data() + a.value().size());
  return out;
}

ag::Var gin_aggregate(const ag::Var& x, const EdgeList& edges, const ag::Var& alpha, double eps) {
  if (alpha.rows() != static_cast<Eigen::Index>(edges.size()) || alpha.cols() != 1) {
    throw ConfigError("gin_aggregate: alpha must be (E x 1) aligned with the edges");
  }
  const Matrix& v = x.value();
  Matrix out = v * (1.0 + eps);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const int j = edges.src[e];
    const int i = edges.dst[e];
    if (i < 0 || j < 0 || i >= v.rows() || j >= v.rows()) throw ConfigError("gin_aggregate: edge index out of range");
    out.row(i) += alpha.value()(static_cast<Eigen::Index>(e), 0) * v.row(j);
  }
  return ag::make_op(std::move(out), {x, alpha}, [src = edges.src, dst = edges.dst, eps](ag::Node& node) {
    ag::Node& xn = *node.parents[0];
    ag::Node& an = *node.parents[1];
    if (xn.requires_grad) {
      Matrix g = node.grad * (1.0 + eps);
      for (std::size_t e = 0; e < src.size(); ++e) {
        g.row(src[e]) += an.value(static_cast<Eigen::Index>(e), 0) * node.grad.row(dst[e]);
      }
      xn.accumulate(g);
    }
    if (an.requires_grad) {
      Matrix g(static_cast<Eigen::Index>(src.size()), 1);
      for (std::size_t e = 0; e < src.size(); ++e) {
        g(static_cast<Eigen::Index>(e), 0) = node.grad.row(dst[e]).dot(xn.value.row(src[e]));
      }
      an.accumulate(g);
    }
  });
}

EdgeScorer::EdgeScorer(ParameterStore& store, const std::string& name, int dim, Rng& rng)
    : hidden_(store, name + ".hidden", 2 * dim, dim, rng), out_(store, name + ".out", dim, 1, rng) {}

ag::Var EdgeScorer::operator()(const ag::Var& h, const EdgeList& edges) const {
  ag::Var pair = ag::concat_cols(ag::gather_rows(h, edges.src), ag::gather_rows(h, edges.dst));
  ag::Var z = out_(ag::gelu(hidden_(pair)));
  return ag::clamp(ag::sigmoid(z), kProbFloor, kProbCeil);
}

EdgeProbabilities edge_probability(const Matrix& node_embeddings, const EdgeList& edges, const EdgeScorer& scorer) {
  ag::NoGradGuard guard;
  ag::Var p = scorer(ag::Var::constant(node_embeddings), edges);
  EdgeProbabilities out;
  out.edges = edges;
  out.p.assign(p.value().data(), p.value().data() + p.value().size());
  return out;
}

GinLayer::GinLayer(ParameterStore& store, const std::string& name, int dim, int ffn_ratio, NormKind norm, Rng& rng)
    : transform_(store, name + ".transform", dim, dim, norm, rng),
      mlp1_(store, name + ".gin.mlp1", dim, dim, norm, rng),
      mlp2_(store, name + ".gin.mlp2", dim, dim, rng),
      ffn_up_(store, name + ".ffn.up", dim, dim * ffn_ratio, norm, rng),
      ffn_down_(store, name + ".ffn.down", dim * ffn_ratio, dim, norm, rng) {}

ag::Var GinLayer::operator()(const ag::Var& x, const EdgeList& edges, const ag::Var& alpha, double eps,
                             bool training) const {
  ag::Var t = transform_(x, training);
  ag::Var m = gin_aggregate(t, edges, alpha, eps);
  ag::Var u = mlp2_(ag::gelu(mlp1_(m, training)));
  ag::Var y = ag::add(u, x);
  ag::Var f = ag::gelu(ffn_up_(y, training));
  return ag::add(ffn_down_(f, training), y);
}

EdgeList batched_global_knn(const Matrix& features, int batch, int nodes_per_image, int k) {
  EdgeList all;
  for (int b = 0; b < batch; ++b) {
    const Matrix local = features.middleRows(static_cast<Eigen::Index>(b) * nodes_per_image, nodes_per_image);
    all.append(global_knn(local, k), b * nodes_per_image);
  }
  return all;
}

EdgeProbabilities BottleneckOutput::image_probabilities(int b) const {
  EdgeProbabilities out;
  const int offset = b * nodes_per_image;
  const std::size_t begin = static_cast<std::size_t>(b) * edges_per_image;
  for (std::size_t e = begin; e < begin + static_cast<std::size_t>(edges_per_image); ++e) {
    out.edges.push_back(edges.src[e] - offset, edges.dst[e] - offset);
    out.p.push_back(p.value()(static_cast<Eigen::Index>(e), 0));
  }
  return out;
}

Bottleneck::Bottleneck(ParameterStore& store, const ModelConfig& cfg, Rng& rng) : cfg_(cfg.bottleneck) {
  const int dim = cfg.stage_dims[3];
  scorer_ = EdgeScorer(store, "bottleneck.edge_scorer", dim, rng);
  for (int l = 0; l < cfg_.layers; ++l) {
    layers_.emplace_back(store, "bottleneck.layer" + std::to_string(l), dim, cfg.ffn_ratio, cfg.norm, rng);
  }
}

namespace {

// Index of the reverse edge (v -> u) for every edge (u -> v), or the edge
// itself when the reverse is absent.
std::vector<int> reverse_edge_index(const EdgeList& edges) {
  std::map<std::pair<int, int>, int> lookup;
  for (std::size_t e = 0; e < edges.size(); ++e) lookup[{edges.src[e], edges.dst[e]}] = static_cast<int>(e);
  std::vector<int> rev(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) {
    auto it = lookup.find({edges.dst[e], edges.src[e]});
    rev[e] = it == lookup.end() ? static_cast<int>(e) : it->second;
  }
  return rev;
}

}  // namespace

BottleneckOutput Bottleneck::forward(const GridBatch& stage4, ForwardContext& ctx, const EdgeGate& gate) const {
  BottleneckOutput out;
  out.batch = stage4.batch;
  out.nodes_per_image = stage4.nodes_per_image();
  auto build = [&] {
    return batched_global_knn(stage4.features.value(), stage4.batch, stage4.nodes_per_image(), cfg_.k);
  };
  out.edges = ctx.trace ? ctx.trace->next(build) : build();
  out.edges_per_image = static_cast<int>(out.edges.size()) / std::max(1, out.batch);

  ag::Var p = scorer_(stage4.features, out.edges);
  if (cfg_.symmetrize) {
    const auto rev = reverse_edge_index(out.edges);
    p = ag::scale(ag::add(p, ag::gather_rows(p, rev)), 0.5);
  }
  out.p = p;

  const SampleMode mode = ctx.training ? SampleMode::Training : SampleMode::Evaluation;
  ag::Var alpha = sample_edge_weights(p, cfg_.temperature, mode, ctx.rng);
  if (gate) {
    Matrix mask = gate(out.edges, p.value(), out.batch, out.nodes_per_image);
    if (mask.rows() != alpha.rows() || mask.cols() != 1) throw ConfigError("edge gate returned a mask of wrong shape");
    alpha = ag::mul(alpha, ag::Var::constant(std::move(mask)));
  }
  out.alpha = alpha;

  ag::Var x = stage4.features;
  for (const auto& layer : layers_) x = layer(x, out.edges, alpha, cfg_.gin_eps, ctx.training);
  out.embeddings = x;

  ag::Var info = info_loss(p, cfg_.r, cfg_.reduction);
  if (cfg_.reduction == LossReduction::Sum) info = ag::scale(info, 1.0 / std::max(1, out.batch));
  out.info_loss = info;
  return out;
}

}  // namespace iwivig
