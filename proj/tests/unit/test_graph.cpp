#include "oracles.hpp"

#include "iwivig/errors.hpp"
#include "iwivig/graph.hpp"

#include <doctest.h>

#include <set>

using namespace iwivig;

TEST_CASE("knn_edges matches the brute-force sort oracle, ties included") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(63));
    const int dim = 1 + static_cast<int>(rng.below(4));
    const int k = 1 + static_cast<int>(rng.below(10));
    Matrix x(n, dim);
    // Small integer coordinates force many distance ties.
    const bool ties = trial % 2 == 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < dim; ++j) x(i, j) = ties ? static_cast<double>(rng.below(3)) : rng.normal();
    const EdgeList got = knn_edges(x, k);
    const EdgeList want = oracle::knn(oracle::to_mat(x), k);
    REQUIRE(got.src == want.src);
    REQUIRE(got.dst == want.dst);
  }
}

TEST_CASE("knn_edges emits min(k, N-1) incoming edges per node, never self loops") {
  Rng rng(2);
  const Matrix x = oracle::random_matrix(rng, 6, 3);
  const EdgeList e = knn_edges(x, 9);
  CHECK(e.size() == 6 * 5);
  for (std::size_t i = 0; i < e.size(); ++i) CHECK(e.src[i] != e.dst[i]);
}

TEST_CASE("knn_edges rejects bad input") {
  CHECK_THROWS_AS(knn_edges(Matrix::Zero(1, 2), 1), ConfigError);
  CHECK_THROWS_AS(knn_edges(Matrix::Zero(4, 2), 0), ConfigError);
  Matrix x = Matrix::Zero(4, 2);
  x(1, 1) = std::nan("");
  CHECK_THROWS_AS(knn_edges(x, 2), NumericError);
}

TEST_CASE("partition_windows tiles the grid row-major") {
  const WindowPartition p = partition_windows(8, 8, 4);
  REQUIRE(p.windows.size() == 4);
  CHECK(p.windows[0] == std::vector<int>{0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27});
  CHECK(p.windows[1].front() == 4);
  CHECK(p.windows[2].front() == 32);
  std::set<int> all;
  for (const auto& w : p.windows) all.insert(w.begin(), w.end());
  CHECK(all.size() == 64);
  CHECK_THROWS_AS(partition_windows(6, 8, 4), ConfigError);
}

TEST_CASE("windowed_knn never crosses a window boundary") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int side = 4 * (1 + static_cast<int>(rng.below(3)));
    const int w = (trial % 2 == 0) ? 2 : 4;
    const Matrix x = oracle::random_matrix(rng, side * side, 3);
    const EdgeList e = windowed_knn(x, partition_windows(side, side, w), 5);
    for (std::size_t i = 0; i < e.size(); ++i) {
      const int s = e.src[i], d = e.dst[i];
      CHECK((s / side) / w == (d / side) / w);
      CHECK((s % side) / w == (d % side) / w);
    }
  }
}

TEST_CASE("windowed_knn equals per-window knn mapped back to grid indices") {
  Rng rng(8);
  const int side = 8;
  const Matrix x = oracle::random_matrix(rng, side * side, 2);
  const WindowPartition part = partition_windows(side, side, 4);
  const EdgeList e = windowed_knn(x, part, 3);
  std::set<std::pair<int, int>> got, want;
  for (std::size_t i = 0; i < e.size(); ++i) got.insert({e.src[i], e.dst[i]});
  for (const auto& win : part.windows) {
    oracle::Mat local;
    for (int id : win) local.push_back(oracle::to_mat(x.row(id))[0]);
    const EdgeList l = oracle::knn(local, 3);
    for (std::size_t i = 0; i < l.size(); ++i) want.insert({win[l.src[i]], win[l.dst[i]]});
  }
  CHECK(got == want);
}

TEST_CASE("single-window partition reduces to knn_edges") {
  Rng rng(9);
  const Matrix x = oracle::random_matrix(rng, 16, 4);
  CHECK(windowed_knn(x, partition_windows(4, 4, 4), 5) == knn_edges(x, 5));
}

TEST_CASE("global_knn over 16 nodes with k=5 yields 80 edges") {
  Rng rng(3);
  CHECK(global_knn(oracle::random_matrix(rng, 16, 8), 5).size() == 80);
}

TEST_CASE("grid_patch_rects tile the image without overlap") {
  const auto rects = grid_patch_rects(4, 4, 32);
  std::vector<int> cover(128 * 128, 0);
  for (const auto& r : rects)
    for (int y = r.row0; y < r.row1; ++y)
      for (int x = r.col0; x < r.col1; ++x) ++cover[y * 128 + x];
  CHECK(std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; }));
  CHECK(rects[5] == PixelRect{32, 32, 64, 64});
}

TEST_CASE("GraphTrace replays recorded graphs") {
  GraphTrace trace;
  int builds = 0;
  auto build = [&] {
    ++builds;
    EdgeList e;
    e.push_back(builds, 0);
    return e;
  };
  trace.next(build);
  trace.next(build);
  trace.start_replay();
  CHECK(trace.next(build).src[0] == 1);
  CHECK(trace.next(build).src[0] == 2);
  CHECK(builds == 2);
  CHECK_THROWS(trace.next(build));
}
