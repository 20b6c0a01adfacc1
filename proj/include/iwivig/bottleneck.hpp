#pragma once

#include "iwivig/backbone.hpp"
#include "iwivig/config.hpp"
#include "iwivig/graph.hpp"
#include "iwivig/layers.hpp"

#include <functional>
#include <vector>

namespace iwivig {

// Lower/upper clamp applied to every edge probability.
inline constexpr double kProbFloor = 1e-6;
inline constexpr double kProbCeil = 1.0 - 1e-6;

struct EdgeProbabilities {
  EdgeList edges;
  std::vector<double> p;
};

enum class SampleMode { Training, Evaluation };

struct SampledWeights {
  std::vector<double> alpha;
  SampleMode mode = SampleMode::Evaluation;
};

// Mean (or sum) over edges of the Bernoulli KL divergence KL(p || r).
ag::Var info_loss(const ag::Var& p, double r, LossReduction reduction = LossReduction::Mean);
double info_loss(const std::vector<double>& p, double r, LossReduction reduction = LossReduction::Mean);

// Training: binary-concrete relaxation
//   alpha = sigmoid((logit(u) + logit(p)) / temperature),  u ~ U(0, 1)
// Evaluation: alpha = p.
ag::Var sample_edge_weights(const ag::Var& p, double temperature, SampleMode mode, Rng* rng);
SampledWeights sample_edge_weights(const EdgeProbabilities& p, const BottleneckConfig& cfg, SampleMode mode,
                                   Rng* rng);

// m_i = (1 + eps) x_i + sum_{(j -> i)} alpha_ji x_j. `alpha` is (E x 1).
ag::Var gin_aggregate(const ag::Var& x, const EdgeList& edges, const ag::Var& alpha, double eps);

// p_uv = clamp(sigmoid(MLP(concat(h_u, h_v)))), MLP 2D -> D -> 1.
class EdgeScorer {
 public:
  EdgeScorer() = default;
  EdgeScorer(ParameterStore& store, const std::string& name, int dim, Rng& rng);

  // (E x 1) probabilities for the given edges over node rows of `h`.
  ag::Var operator()(const ag::Var& h, const EdgeList& edges) const;

 private:
  Linear hidden_;
  Linear out_;
};

EdgeProbabilities edge_probability(const Matrix& node_embeddings, const EdgeList& edges, const EdgeScorer& scorer);

// Linear transform -> GIN update (2-layer MLP) -> residual -> FFN -> residual.
class GinLayer {
 public:
  GinLayer() = default;
  GinLayer(ParameterStore& store, const std::string& name, int dim, int ffn_ratio, NormKind norm, Rng& rng);

  ag::Var operator()(const ag::Var& x, const EdgeList& edges, const ag::Var& alpha, double eps, bool training) const;

 private:
  LinearNorm transform_;
  LinearNorm mlp1_;
  Linear mlp2_;
  LinearNorm ffn_up_;
  LinearNorm ffn_down_;
};

// Hook applied to alpha after sampling; receives the per-batch edge list
// and probabilities, returns a (E x 1) multiplicative mask.
using EdgeGate = std::function<Matrix(const EdgeList& edges, const Matrix& p, int batch, int nodes_per_image)>;

struct BottleneckOutput {
  ag::Var embeddings;  // (batch * M) x D
  EdgeList edges;      // rows offset per image
  ag::Var p;           // (E x 1)
  ag::Var alpha;       // (E x 1)
  ag::Var info_loss;   // scalar
  int batch = 0;
  int nodes_per_image = 0;
  int edges_per_image = 0;

  // Probabilities of image `b` with indices local to that image.
  EdgeProbabilities image_probabilities(int b) const;
};

class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(ParameterStore& store, const ModelConfig& cfg, Rng& rng);

  BottleneckOutput forward(const GridBatch& stage4, ForwardContext& ctx, const EdgeGate& gate = {}) const;
  const EdgeScorer& scorer() const { return scorer_; }
  const std::vector<GinLayer>& layers() const { return layers_; }

 private:
  BottleneckConfig cfg_;
  EdgeScorer scorer_;
  std::vector<GinLayer> layers_;
};

// k-NN graph per image over the stage-4 nodes, rows offset per image.
EdgeList batched_global_knn(const Matrix& features, int batch, int nodes_per_image, int k);

}  // namespace iwivig
