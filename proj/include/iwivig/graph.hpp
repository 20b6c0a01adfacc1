#pragma once

#include "iwivig/autograd.hpp"

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace iwivig {

// Half-open pixel rectangle [row0, row1) x [col0, col1).
struct PixelRect {
  int row0 = 0;
  int col0 = 0;
  int row1 = 0;
  int col1 = 0;

  int height() const { return row1 - row0; }
  int width() const { return col1 - col0; }
  bool contains(int r, int c) const { return r >= row0 && r < row1 && c >= col0 && c < col1; }
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

// Grid of node features, one row of `features` per node in row-major
// (row, col) order, each node owning one pixel rectangle of the source image.
struct NodeGrid {
  int height = 0;
  int width = 0;
  int dim = 0;
  Matrix features;
  std::vector<PixelRect> patch_px;

  int num_nodes() const { return height * width; }
};

// Rectangles for a height x width node grid over an image whose nodes each
// cover px_per_node x px_per_node pixels.
std::vector<PixelRect> grid_patch_rects(int height, int width, int px_per_node);

// Directed edges src -> dst: src is aggregated into dst.
struct EdgeList {
  std::vector<int> src;
  std::vector<int> dst;
  std::vector<double> weight;  // empty or one entry per edge

  std::size_t size() const { return src.size(); }
  bool empty() const { return src.empty(); }
  void push_back(int s, int d) {
    src.push_back(s);
    dst.push_back(d);
  }
  void append(const EdgeList& other, int offset);
  friend bool operator==(const EdgeList&, const EdgeList&) = default;
};

struct WindowPartition {
  int window_side = 0;
  std::vector<std::vector<int>> windows;  // node indices, row-major inside each window
};

// Windows are enumerated row-major over the window grid.
WindowPartition partition_windows(int height, int width, int window_side);
WindowPartition partition_windows(const NodeGrid& grid, int window_side);

// k-nearest neighbours by squared Euclidean distance, emitting j -> i for
// the k closest j != i (ties to the smaller index). k is clamped to N - 1.
// Edges are grouped by destination in ascending order, each group sorted by
// increasing distance.
EdgeList knn_edges(const Matrix& features, int k);

// knn_edges applied inside each window independently; no edge crosses a
// window boundary.
EdgeList windowed_knn(const Matrix& features, const WindowPartition& partition, int k);
EdgeList windowed_knn(const NodeGrid& grid, const WindowPartition& partition, int k);

// Graph over final-stage node embeddings (one node per image region).
EdgeList global_knn(const Matrix& window_embeddings, int k);

// Edge lists computed during a forward pass. In record mode each call
// stores the graph it built; in replay mode the stored graphs are returned
// in the same order, which freezes the topology for attribution methods.
class GraphTrace {
 public:
  enum class Mode { Record, Replay };

  explicit GraphTrace(Mode mode = Mode::Record) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void start_replay() {
    mode_ = Mode::Replay;
    cursor_ = 0;
  }
  // Returns the recorded graph in replay mode, otherwise builds and stores it.
  template <typename Build>
  const EdgeList& next(Build&& build) {
    if (mode_ == Mode::Replay) {
      if (cursor_ >= graphs_.size()) throw std::logic_error("GraphTrace: replay ran past recorded graphs");
      return graphs_[cursor_++];
    }
    graphs_.push_back(build());
    return graphs_.back();
  }
  const std::vector<EdgeList>& graphs() const { return graphs_; }

 private:
  Mode mode_;
  std::size_t cursor_ = 0;
  std::vector<EdgeList> graphs_;
};

}  // namespace iwivig
