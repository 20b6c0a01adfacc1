#include "iwivig/graph.hpp"

#include "iwivig/errors.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace iwivig {

std::vector<PixelRect> grid_patch_rects(int height, int width, int px_per_node) {
  std::vector<PixelRect> rects;
  rects.reserve(static_cast<std::size_t>(height) * width);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      rects.push_back({r * px_per_node, c * px_per_node, (r + 1) * px_per_node, (c + 1) * px_per_node});
    }
  }
  return rects;
}

void EdgeList::append(const EdgeList& other, int offset) {
  src.reserve(src.size() + other.size());
  dst.reserve(dst.size() + other.size());
  for (std::size_t e = 0; e < other.size(); ++e) push_back(other.src[e] + offset, other.dst[e] + offset);
  if (!other.weight.empty()) weight.insert(weight.end(), other.weight.begin(), other.weight.end());
}

WindowPartition partition_windows(int height, int width, int window_side) {
  if (window_side <= 0) throw ConfigError("window_side must be positive, got " + std::to_string(window_side));
  if (height <= 0 || height % window_side != 0) {
    throw ConfigError("grid height " + std::to_string(height) + " is not divisible by window_side " +
                      std::to_string(window_side));
  }
  if (width <= 0 || width % window_side != 0) {
    throw ConfigError("grid width " + std::to_string(width) + " is not divisible by window_side " +
                      std::to_string(window_side));
  }
  WindowPartition part;
  part.window_side = window_side;
  for (int wr = 0; wr < height / window_side; ++wr) {
    for (int wc = 0; wc < width / window_side; ++wc) {
      std::vector<int> nodes;
      nodes.reserve(static_cast<std::size_t>(window_side) * window_side);
      for (int r = 0; r < window_side; ++r) {
        for (int c = 0; c < window_side; ++c) {
          nodes.push_back((wr * window_side + r) * width + wc * window_side + c);
        }
      }
      part.windows.push_back(std::move(nodes));
    }
  }
  return part;
}

WindowPartition partition_windows(const NodeGrid& grid, int window_side) {
  return partition_windows(grid.height, grid.width, window_side);
}

EdgeList knn_edges(const Matrix& features, int k) {
  const auto n = static_cast<int>(features.rows());
  if (n < 2) throw ConfigError("knn_edges: need at least 2 nodes, got " + std::to_string(n));
  if (k <= 0) throw ConfigError("knn_edges: k must be positive, got " + std::to_string(k));
  if (!features.allFinite()) throw NumericError("knn_edges: non-finite node features");
  const int kk = std::min(k, n - 1);

  EdgeList edges;
  edges.src.reserve(static_cast<std::size_t>(n) * kk);
  edges.dst.reserve(static_cast<std::size_t>(n) * kk);
  std::vector<std::pair<double, int>> cand(static_cast<std::size_t>(n - 1));
  for (int i = 0; i < n; ++i) {
    std::size_t m = 0;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      cand[m++] = {(features.row(j) - features.row(i)).squaredNorm(), j};
    }
    std::partial_sort(cand.begin(), cand.begin() + kk, cand.end());
    for (int t = 0; t < kk; ++t) edges.push_back(cand[t].second, i);
  }
  return edges;
}

EdgeList windowed_knn(const Matrix& features, const WindowPartition& partition, int k) {
  EdgeList edges;
  Matrix local;
  for (const auto& window : partition.windows) {
    local.resize(static_cast<Eigen::Index>(window.size()), features.cols());
    for (std::size_t t = 0; t < window.size(); ++t) {
      if (window[t] < 0 || window[t] >= features.rows()) {
        throw ConfigError("windowed_knn: partition references node " + std::to_string(window[t]) +
                          " outside the grid");
      }
      local.row(static_cast<Eigen::Index>(t)) = features.row(window[t]);
    }
    const EdgeList w = knn_edges(local, k);
    for (std::size_t e = 0; e < w.size(); ++e) edges.push_back(window[w.src[e]], window[w.dst[e]]);
  }
  return edges;
}

EdgeList windowed_knn(const NodeGrid& grid, const WindowPartition& partition, int k) {
  return windowed_knn(grid.features, partition, k);
}

EdgeList global_knn(const Matrix& window_embeddings, int k) { return knn_edges(window_embeddings, k); }

}  // namespace iwivig
