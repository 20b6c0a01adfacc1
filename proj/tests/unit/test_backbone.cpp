#include "oracles.hpp"

#include "iwivig/backbone.hpp"
#include "iwivig/errors.hpp"
#include "iwivig/model.hpp"

#include <doctest.h>

#include <set>

using namespace iwivig;

namespace {

const Matrix& param(const ParameterStore& store, const std::string& name) {
  const Parameter* p = store.find(name);
  REQUIRE_MESSAGE(p != nullptr, name);
  return p->var.value();
}

oracle::Vec row_vec(const Matrix& m) { return oracle::to_mat(m)[0]; }

oracle::Vec dense(const ParameterStore& s, const std::string& name, const oracle::Vec& x) {
  return oracle::affine(x, oracle::to_mat(param(s, name + ".weight")), row_vec(param(s, name + ".bias")));
}

EdgeList random_graph(Rng& rng, int n) {
  EdgeList e;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && rng.uniform() < 0.4) e.push_back(j, i);
  return e;
}

}  // namespace

TEST_CASE("max_relative_conv hand example") {
  Matrix x(2, 2);
  x << 0, 0, 1, 2;
  EdgeList e;
  e.push_back(1, 0);
  const ag::Var agg = ag::concat_cols(ag::Var::constant(x), max_relative_aggregate(ag::Var::constant(x), e));
  CHECK(agg.value().row(0) == Eigen::RowVector4d(0, 0, 1, 2));
  // Node 1 has no incoming edge: relative part is zero.
  CHECK(agg.value().row(1) == Eigen::RowVector4d(1, 2, 0, 0));
}

TEST_CASE("max_relative_conv with identical neighbours has a zero relative part") {
  Matrix x = Matrix::Constant(3, 2, 0.25);
  EdgeList e;
  e.push_back(1, 0);
  e.push_back(2, 0);
  const ag::Var agg = max_relative_aggregate(ag::Var::constant(x), e);
  CHECK(agg.value().isZero());
}

TEST_CASE("max_relative_conv matches the scalar oracle on random graphs") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(7));
    const int d = 1 + static_cast<int>(rng.below(4));
    ParameterStore store;
    Linear proj(store, "proj", 2 * d, 3, rng);
    const Matrix x = oracle::random_matrix(rng, n, d);
    const EdgeList e = random_graph(rng, n);
    const Matrix got = max_relative_conv(ag::Var::constant(x), e, proj).value();
    const oracle::Mat rel = oracle::max_relative(oracle::to_mat(x), e);
    for (int i = 0; i < n; ++i) {
      const oracle::Vec want = dense(store, "proj", rel[i]);
      for (int o = 0; o < 3; ++o) CHECK(got(i, o) == doctest::Approx(want[o]).epsilon(1e-12));
    }
  }
}

TEST_CASE("max_relative_conv gradient matches finite differences away from ties") {
  Rng rng(22);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 3 + static_cast<int>(rng.below(6));
    ParameterStore store;
    Linear proj(store, "proj", 6, 2, rng);
    const Matrix x0 = oracle::random_matrix(rng, n, 3);
    const EdgeList e = random_graph(rng, n);
    const Matrix w = oracle::random_matrix(rng, n, 2);
    ag::Var x = ag::Var::leaf(x0);
    ag::backward(ag::sum(ag::mul(max_relative_conv(x, e, proj), ag::Var::constant(w))));
    auto f = [&](const Matrix& v) {
      ag::NoGradGuard g;
      return ag::sum(ag::mul(max_relative_conv(ag::Var::constant(v), e, proj), ag::Var::constant(w))).scalar();
    };
    CHECK(oracle::rel_error(x.grad(), oracle::numeric_gradient(f, x0)) < 1e-4);
  }
}

TEST_CASE("grapher block equals a straight-line scalar re-implementation") {
  Rng rng(23);
  ParameterStore store;
  const int d = 4, side = 8, w = 4, k = 9;
  GrapherBlock block(store, "g", d, 4, NormKind::None, rng);
  const Matrix x = oracle::random_matrix(rng, side * side, d);
  GridBatch in{ag::Var::constant(x), 1, side, 4};
  ForwardContext ctx;
  const Matrix got = block(in, w, k, ctx).features.value();

  // Graph from the block input, window by window.
  const oracle::Mat xs = oracle::to_mat(x);
  EdgeList edges;
  for (const auto& win : partition_windows(side, side, w).windows) {
    oracle::Mat local;
    for (int id : win) local.push_back(xs[id]);
    const EdgeList l = oracle::knn(local, k);
    for (std::size_t i = 0; i < l.size(); ++i) edges.push_back(win[l.src[i]], win[l.dst[i]]);
  }
  oracle::Mat h;
  for (const auto& row : xs) h.push_back(dense(store, "g.fc_in", row));
  const oracle::Mat rel = oracle::max_relative(h, edges);
  double worst = 0.0;
  for (int i = 0; i < side * side; ++i) {
    const oracle::Vec g = oracle::apply(dense(store, "g.graph_conv", rel[i]), oracle::gelu);
    const oracle::Vec y = oracle::plus(dense(store, "g.fc_out", g), xs[i]);
    const oracle::Vec f = oracle::apply(dense(store, "g.ffn.up", y), oracle::gelu);
    const oracle::Vec out = oracle::plus(dense(store, "g.ffn.down", f), y);
    for (int c = 0; c < d; ++c) worst = std::max(worst, std::abs(out[c] - got(i, c)));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("grapher block gradient matches finite differences on a fixed graph") {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    ParameterStore store;
    GrapherBlock block(store, "g", 3, 2, NormKind::None, rng);
    const Matrix x0 = oracle::random_matrix(rng, 16, 3);
    const EdgeList e = windowed_knn(x0, partition_windows(4, 4, 2), 2);
    const Matrix w = oracle::random_matrix(rng, 16, 3);
    ag::Var x = ag::Var::leaf(x0);
    ag::backward(ag::sum(ag::mul(block.forward_with_edges(x, e, false), ag::Var::constant(w))));
    auto f = [&](const Matrix& v) {
      ag::NoGradGuard g;
      return ag::sum(ag::mul(block.forward_with_edges(ag::Var::constant(v), e, false), ag::Var::constant(w)))
          .scalar();
    };
    CHECK(oracle::rel_error(x.grad(), oracle::numeric_gradient(f, x0)) < 1e-4);
  }
}

TEST_CASE("grapher block with zero non-residual weights is the identity") {
  Rng rng(25);
  ParameterStore store;
  GrapherBlock block(store, "g", 4, 4, NormKind::Batch, rng);
  for (auto& p : store.all()) {
    const bool is_weight = p.name.ends_with(".weight") || p.name.ends_with(".gamma");
    if (is_weight && (p.name.find("fc_out") != std::string::npos || p.name.find("ffn.down") != std::string::npos)) {
      p.var.mutable_value().setZero();
    }
  }
  const Matrix x = oracle::random_matrix(rng, 64, 4);
  ForwardContext ctx;
  const Matrix y = block(GridBatch{ag::Var::constant(x), 1, 8, 4}, 4, 9, ctx).features.value();
  CHECK((y - x).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("stem maps a zero image to zero features and 4x4 patches") {
  Rng rng(26);
  ParameterStore store;
  Stem stem(store, 3, 16, NormKind::Batch, rng);
  const GridBatch g = stem(ag::Var::constant(Matrix::Zero(128 * 128, 3)), 1, 128, false);
  CHECK(g.side == 32);
  CHECK(g.dim() == 16);
  CHECK(g.px_per_node == 4);
  CHECK(g.features.value().isZero());
  const NodeGrid grid = g.grid(0);
  CHECK(grid.patch_px[33] == PixelRect{4, 4, 8, 8});
}

TEST_CASE("downsample halves the side, maps dims, and preserves constant grids") {
  Rng rng(27);
  ParameterStore store;
  Downsample ds(store, "ds", 48, 96, NormKind::Batch, rng);
  Matrix x(32 * 32, 48);
  for (int c = 0; c < 48; ++c) x.col(c).setConstant(rng.normal());
  const GridBatch out = ds(GridBatch{ag::Var::constant(x), 1, 32, 4}, false);
  CHECK(out.side == 16);
  CHECK(out.dim() == 96);
  CHECK(out.px_per_node == 8);
  for (int i = 1; i < out.features.rows(); ++i) CHECK(out.features.value().row(i) == out.features.value().row(0));
  // Each output patch is the union of its four input patches.
  const NodeGrid g = out.grid(0);
  CHECK(g.patch_px[17] == PixelRect{8, 8, 16, 16});
  CHECK_THROWS_AS(ds(GridBatch{ag::Var::constant(Matrix::Zero(9, 48)), 1, 3, 4}, false), ConfigError);
}

TEST_CASE("desk backbone shapes and batching independence") {
  ModelConfig cfg = ModelConfig::desk();
  Model model(cfg);
  Rng rng(28);
  Image a(128, 128, 3), b(128, 128, 3);
  a.data = oracle::random_matrix(rng, 128 * 128, 3, 0, 1);
  b.data = oracle::random_matrix(rng, 128 * 128, 3, 0, 1);
  ForwardContext ctx;
  const ForwardResult both = model.forward({&a, &b}, ctx);
  const ForwardResult one = model.forward({&b}, ctx);
  CHECK(both.backbone.stage4.side == 4);
  CHECK(both.backbone.stage4.dim() == 96);
  CHECK(both.bottleneck.edges.size() == 160);
  // Evaluation mode: no cross-image coupling.
  CHECK((both.output.value().row(1) - one.output.value().row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("invalid configurations are rejected") {
  ModelConfig cfg;
  cfg.input_side = 96;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.stage_dims[2] = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.bottleneck.r = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
