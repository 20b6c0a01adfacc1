#include "iwivig/backbone.hpp"

#include "iwivig/errors.hpp"

#include <limits>
#include <string>

namespace iwivig {

NodeGrid GridBatch::grid(int b) const {
  NodeGrid g;
  g.height = side;
  g.width = side;
  g.dim = dim();
  g.features = features.value().middleRows(static_cast<Eigen::Index>(b) * nodes_per_image(), nodes_per_image());
  g.patch_px = grid_patch_rects(side, side, px_per_node);
  return g;
}

Matrix images_to_rows(const std::vector<const Image*>& images) {
  if (images.empty()) throw ConfigError("images_to_rows: empty batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  const int c = images.front()->channels();
  if (h != w) throw ConfigError("images must be square, got " + std::to_string(h) + "x" + std::to_string(w));
  Matrix rows(static_cast<Eigen::Index>(images.size()) * h * w, c);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != h || img.width != w || img.channels() != c) {
      throw ConfigError("images_to_rows: batch images differ in size");
    }
    rows.middleRows(static_cast<Eigen::Index>(b) * h * w, static_cast<Eigen::Index>(h) * w) = img.data;
  }
  return rows;
}

ag::Var max_relative_aggregate(const ag::Var& x, const EdgeList& edges) {
  const auto n = x.rows();
  const auto d = x.cols();
  const Matrix& v = x.value();
  Matrix out = Matrix::Constant(n, d, -std::numeric_limits<double>::infinity());
  // argmax source per (node, feature); -1 when the node has no neighbour.
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> arg =
      Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(n, d, -1);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const int j = edges.src[e];
    const int i = edges.dst[e];
    if (i < 0 || j < 0 || i >= n || j >= n) throw ConfigError("max_relative_aggregate: edge index out of range");
    for (Eigen::Index f = 0; f < d; ++f) {
      const double rel = v(j, f) - v(i, f);
      // Strict comparison keeps the first maximizer in edge order.
      if (rel > out(i, f)) {
        out(i, f) = rel;
        arg(i, f) = j;
      }
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index f = 0; f < d; ++f) {
      if (arg(i, f) < 0) out(i, f) = 0.0;
    }
  }
  return ag::make_op(std::move(out), {x}, [arg = std::move(arg)](ag::Node& node) {
    ag::Node& xn = *node.parents[0];
    Matrix g = Matrix::Zero(xn.value.rows(), xn.value.cols());
    for (Eigen::Index i = 0; i < arg.rows(); ++i) {
      for (Eigen::Index f = 0; f < arg.cols(); ++f) {
        const int j = arg(i, f);
        if (j < 0) continue;
        g(j, f) += node.grad(i, f);
        g(i, f) -= node.grad(i, f);
      }
    }
    xn.accumulate(g);
  });
}

ag::Var max_relative_conv(const ag::Var& x, const EdgeList& edges, const Linear& proj) {
  return proj(ag::concat_cols(x, max_relative_aggregate(x, edges)));
}

EdgeList batched_windowed_knn(const Matrix& features, int batch, int side, int window_side, int k) {
  const int per = side * side;
  if (features.rows() != static_cast<Eigen::Index>(batch) * per) {
    throw ConfigError("batched_windowed_knn: feature rows do not match batch*side*side");
  }
  const WindowPartition part = partition_windows(side, side, window_side);
  EdgeList all;
  for (int b = 0; b < batch; ++b) {
    const Matrix local = features.middleRows(static_cast<Eigen::Index>(b) * per, per);
    all.append(windowed_knn(local, part, k), b * per);
  }
  return all;
}

GrapherBlock::GrapherBlock(ParameterStore& store, const std::string& name, int dim, int ffn_ratio, NormKind norm,
                           Rng& rng)
    : fc_in_(store, name + ".fc_in", dim, dim, norm, rng),
      graph_proj_(store, name + ".graph_conv", 2 * dim, dim, norm, rng),
      fc_out_(store, name + ".fc_out", dim, dim, norm, rng),
      ffn_up_(store, name + ".ffn.up", dim, dim * ffn_ratio, norm, rng),
      ffn_down_(store, name + ".ffn.down", dim * ffn_ratio, dim, norm, rng) {}

ag::Var GrapherBlock::forward_with_edges(const ag::Var& x, const EdgeList& edges, bool training) const {
  ag::Var h = fc_in_(x, training);
  ag::Var agg = ag::concat_cols(h, max_relative_aggregate(h, edges));
  ag::Var g = ag::gelu(graph_proj_(agg, training));
  ag::Var y = ag::add(fc_out_(g, training), x);
  ag::Var f = ag::gelu(ffn_up_(y, training));
  return ag::add(ffn_down_(f, training), y);
}

GridBatch GrapherBlock::operator()(const GridBatch& in, int window_side, int k, ForwardContext& ctx) const {
  auto build = [&] { return batched_windowed_knn(in.features.value(), in.batch, in.side, window_side, k); };
  GridBatch out = in;
  if (ctx.trace) {
    out.features = forward_with_edges(in.features, ctx.trace->next(build), ctx.training);
  } else {
    out.features = forward_with_edges(in.features, build(), ctx.training);
  }
  return out;
}

Downsample::Downsample(ParameterStore& store, const std::string& name, int in_dim, int out_dim, NormKind norm,
                       Rng& rng)
    : conv_(store, name + ".conv", 4 * in_dim, out_dim, norm, rng) {}

GridBatch Downsample::operator()(const GridBatch& in, bool training) const {
  if (in.side % 2 != 0) throw ConfigError("downsample: odd grid side " + std::to_string(in.side));
  GridBatch out;
  out.batch = in.batch;
  out.side = in.side / 2;
  out.px_per_node = in.px_per_node * 2;
  out.features = conv_(ag::space_to_depth(in.features, in.batch, in.side), training);
  return out;
}

Stem::Stem(ParameterStore& store, int in_channels, int dim, NormKind norm, Rng& rng)
    : conv1_(store, "stem.conv1", 4 * in_channels, dim / 2, norm, rng),
      conv2_(store, "stem.conv2", 4 * (dim / 2), dim, norm, rng) {}

GridBatch Stem::operator()(const ag::Var& pixels, int batch, int side, bool training) const {
  if (side % 4 != 0) throw ConfigError("stem: image side " + std::to_string(side) + " is not divisible by 4");
  ag::Var h = ag::gelu(conv1_(ag::space_to_depth(pixels, batch, side), training));
  GridBatch out;
  out.batch = batch;
  out.side = side / 4;
  out.px_per_node = 4;
  out.features = ag::gelu(conv2_(ag::space_to_depth(h, batch, side / 2), training));
  return out;
}

Backbone::Backbone(ParameterStore& store, const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  stem_ = Stem(store, cfg.in_channels, cfg.stage_dims[0], cfg.norm, rng);
  for (int s = 0; s < 3; ++s) {
    std::vector<GrapherBlock> blocks;
    for (int b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      blocks.emplace_back(store, "stage" + std::to_string(s + 1) + ".block" + std::to_string(b), cfg.stage_dims[s],
                          cfg.ffn_ratio, cfg.norm, rng);
    }
    stages_.push_back(std::move(blocks));
    downsamples_.emplace_back(store, "downsample" + std::to_string(s + 1), cfg.stage_dims[s], cfg.stage_dims[s + 1],
                              cfg.norm, rng);
  }
}

BackboneOutput Backbone::forward(const ag::Var& pixels, int batch, ForwardContext& ctx) const {
  if (pixels.rows() != static_cast<Eigen::Index>(batch) * cfg_.input_side * cfg_.input_side ||
      pixels.cols() != cfg_.in_channels) {
    throw ConfigError("backbone: input is not a batch of " + std::to_string(cfg_.input_side) + "x" +
                      std::to_string(cfg_.input_side) + "x" + std::to_string(cfg_.in_channels) + " images");
  }
  BackboneOutput out;
  GridBatch g = stem_(pixels, batch, cfg_.input_side, ctx.training);
  out.stages.push_back(g);
  for (int s = 0; s < 3; ++s) {
    for (const auto& block : stages_[s]) g = block(g, cfg_.window_side, cfg_.local_k, ctx);
    out.stages.push_back(g);
    g = downsamples_[s](g, ctx.training);
  }
  out.stage4 = g;
  return out;
}

}  // namespace iwivig
