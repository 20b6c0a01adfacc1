#pragma once

#include "iwivig/config.hpp"
#include "iwivig/graph.hpp"
#include "iwivig/image.hpp"
#include "iwivig/layers.hpp"

#include <vector>

namespace iwivig {

// A batch of square node grids stacked row-wise: rows are ordered
// (image, row, col).
struct GridBatch {
  ag::Var features;
  int batch = 0;
  int side = 0;
  int px_per_node = 0;  // pixel side of each node's patch

  int nodes_per_image() const { return side * side; }
  int dim() const { return static_cast<int>(features.cols()); }
  // Copies image `b` out as a NodeGrid with its patch rectangles.
  NodeGrid grid(int b) const;
};

// Square images of equal size stacked as rows (image, y, x) x channels.
Matrix images_to_rows(const std::vector<const Image*>& images);

// Elementwise max over incoming neighbours of (x_j - x_i); zero row for
// nodes without incoming edges.
ag::Var max_relative_aggregate(const ag::Var& x, const EdgeList& edges);

// proj(concat(x_i, max_j (x_j - x_i))).
ag::Var max_relative_conv(const ag::Var& x, const EdgeList& edges, const Linear& proj);

// Windowed k-NN graph of every image in the batch, rows offset per image.
EdgeList batched_windowed_knn(const Matrix& features, int batch, int side, int window_side, int k);

// fc_in -> max-relative graph conv -> GELU -> fc_out -> residual, then
// FFN (expand by E, GELU, contract) -> residual. The graph is rebuilt from
// the block input at the start of every call.
class GrapherBlock {
 public:
  GrapherBlock() = default;
  GrapherBlock(ParameterStore& store, const std::string& name, int dim, int ffn_ratio, NormKind norm, Rng& rng);

  GridBatch operator()(const GridBatch& in, int window_side, int k, ForwardContext& ctx) const;
  // Forward on a caller-provided graph.
  ag::Var forward_with_edges(const ag::Var& x, const EdgeList& edges, bool training) const;

 private:
  LinearNorm fc_in_;
  LinearNorm graph_proj_;  // 2D -> D
  LinearNorm fc_out_;
  LinearNorm ffn_up_;
  LinearNorm ffn_down_;
};

// One kernel-2/stride-2 convolution: each output node sees exactly its
// 2x2 input block.
class Downsample {
 public:
  Downsample() = default;
  Downsample(ParameterStore& store, const std::string& name, int in_dim, int out_dim, NormKind norm, Rng& rng);

  GridBatch operator()(const GridBatch& in, bool training) const;

 private:
  LinearNorm conv_;
};

// Two kernel-2/stride-2 convolutions, each followed by GELU: nodes own
// disjoint 4x4 pixel patches.
class Stem {
 public:
  Stem() = default;
  Stem(ParameterStore& store, int in_channels, int dim, NormKind norm, Rng& rng);

  GridBatch operator()(const ag::Var& pixels, int batch, int side, bool training) const;

 private:
  LinearNorm conv1_;
  LinearNorm conv2_;
};

struct BackboneOutput {
  GridBatch stage4;               // pre-bottleneck grid of side input_side / 32
  std::vector<GridBatch> stages;  // stem output, then the outputs of stages 1-3 (before downsampling)
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(ParameterStore& store, const ModelConfig& cfg, Rng& rng);

  BackboneOutput forward(const ag::Var& pixels, int batch, ForwardContext& ctx) const;
  const Stem& stem() const { return stem_; }

 private:
  ModelConfig cfg_;
  Stem stem_;
  std::vector<std::vector<GrapherBlock>> stages_;
  std::vector<Downsample> downsamples_;
};

}  // namespace iwivig
