#include "oracles.hpp"

#include "iwivig/errors.hpp"
#include "iwivig/metrics.hpp"
#include "iwivig/stats.hpp"

#include <doctest.h>

using namespace iwivig;

namespace {

// score = sum_i w_i x_i + c
class LinearScore : public ScoreFunction {
 public:
  LinearScore(Matrix w, double c = 0.0) : w_(std::move(w)), c_(c) {}
  std::vector<double> score_batch(const std::vector<Image>& xs) const override {
    std::vector<double> out;
    for (const auto& x : xs) out.push_back(x.data.cwiseProduct(w_).sum() + c_);
    return out;
  }
  std::vector<Matrix> gradient_batch(const std::vector<Image>& xs, std::vector<double>* scores) const override {
    if (scores) *scores = score_batch(xs);
    return std::vector<Matrix>(xs.size(), w_);
  }

 private:
  Matrix w_;
  double c_;
};

// score = sum_i sin(x_i) * x_{i+1}; smooth and non-linear.
class SmoothScore : public ScoreFunction {
 public:
  std::vector<double> score_batch(const std::vector<Image>& xs) const override {
    std::vector<double> out;
    for (const auto& x : xs) {
      const double* v = x.data.data();
      double s = 0.0;
      for (Eigen::Index i = 0; i + 1 < x.data.size(); ++i) s += std::sin(v[i]) * v[i + 1];
      out.push_back(s);
    }
    return out;
  }
  std::vector<Matrix> gradient_batch(const std::vector<Image>& xs, std::vector<double>* scores) const override {
    if (scores) *scores = score_batch(xs);
    std::vector<Matrix> out;
    for (const auto& x : xs) {
      Matrix g = Matrix::Zero(x.data.rows(), x.data.cols());
      const double* v = x.data.data();
      for (Eigen::Index i = 0; i + 1 < x.data.size(); ++i) {
        g.data()[i] += std::cos(v[i]) * v[i + 1];
        g.data()[i + 1] += std::sin(v[i]);
      }
      out.push_back(g);
    }
    return out;
  }
};

Image random_image(Rng& rng, int side, int channels) {
  Image x(side, side, channels);
  x.data = oracle::random_matrix(rng, side * side, channels, 0, 1);
  return x;
}

}  // namespace

TEST_CASE("pq_sparsity identities") {
  CHECK(pq_sparsity(std::vector<double>(37, 0.3)) == 0.0);
  CHECK(pq_sparsity(std::vector<double>{0, 0, 1, 0}) == 0.5);
  CHECK(pq_sparsity(std::vector<double>{0, -2, 0, 0}) == 0.5);
  CHECK_THROWS_AS(pq_sparsity(std::vector<double>(4, 0.0)), NumericError);
  CHECK_THROWS_AS(pq_sparsity(std::vector<double>{1, 2}, 2.0, 1.0), ConfigError);
}

TEST_CASE("pq_sparsity is scale and permutation invariant, and grows when mass concentrates") {
  Rng rng(71);
  for (int t = 0; t < 100; ++t) {
    const int d = 2 + static_cast<int>(rng.below(50));
    std::vector<double> w(d);
    for (double& v : w) v = rng.normal();
    const double base = pq_sparsity(w);
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    const double c = (t % 2 ? -1.0 : 1.0) * std::exp(rng.uniform(-5, 5));
    std::vector<double> scaled = w;
    for (double& v : scaled) v *= c;
    CHECK(pq_sparsity(scaled) == doctest::Approx(base).epsilon(1e-12));
    std::vector<double> shuffled = w;
    for (std::size_t i = shuffled.size(); i > 1; --i) std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    CHECK(pq_sparsity(shuffled) == doctest::Approx(base).epsilon(1e-12));
    // Move part of a smaller entry onto the largest one.
    std::vector<double> a(d);
    for (int i = 0; i < d; ++i) a[i] = std::abs(w[i]);
    const auto big = std::max_element(a.begin(), a.end()) - a.begin();
    const auto small = (big + 1) % d;
    const double moved = a[small] * rng.uniform();
    std::vector<double> conc = a;
    conc[small] -= moved;
    conc[big] += moved;
    CHECK(pq_sparsity(conc) >= pq_sparsity(a) - 1e-12);
  }
}

TEST_CASE("integrated gradients on linear scores is exact for any step count") {
  Rng rng(72);
  const Image x = random_image(rng, 8, 3);
  const Matrix w = oracle::random_matrix(rng, 64, 3);
  const LinearScore f(w, 0.4);
  for (int steps : {8, 9, 50}) {
    const AttributionMap a = integrated_gradients(f, x, steps, 0.2);
    const Matrix want = (x.data.array() - 0.2).matrix().cwiseProduct(w);
    CHECK((a.data - want).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(integrated_gradients(f, x, 8, x).data.isZero());
  CHECK_THROWS_AS(integrated_gradients(f, x, 7, 0.0), ConfigError);
}

TEST_CASE("integrated gradients completeness on a smooth score") {
  Rng rng(73);
  const Image x = random_image(rng, 4, 1);
  const SmoothScore f;
  const AttributionMap a = integrated_gradients(f, x, 128, 0.0);
  const double gap = f.score(x) - f.score(Image(4, 4, 1, 0.0));
  CHECK(std::abs(a.data.sum() - gap) <= 0.01 * std::abs(gap));
}

TEST_CASE("occlusion: pixel-sum toy, own-content baseline, constant model") {
  Image x(2, 2, 1);
  x.data << 0.1, 0.7, 0.3, 0.9;
  const LinearScore sum(Matrix::Ones(4, 1));
  OcclusionOptions opt{1, 1, 0.0};
  const AttributionMap a = occlusion_attribution(sum, x, opt);
  CHECK((a.data - x.data).cwiseAbs().maxCoeff() < 1e-15);

  Image flat(16, 16, 3, 0.5);
  Rng rng(74);
  const LinearScore lin(oracle::random_matrix(rng, 256, 3));
  CHECK(occlusion_attribution(lin, flat, OcclusionOptions{5, 3, 0.5}).data.isZero());
  const LinearScore constant(Matrix::Zero(256, 3), 2.0);
  CHECK(occlusion_attribution(constant, random_image(rng, 16, 3), OcclusionOptions{5, 3, 0.0}).data.isZero());
}

TEST_CASE("occlusion averages over covering windows and warns on gaps") {
  Rng rng(75);
  const Image x = random_image(rng, 12, 1);
  const LinearScore sum(Matrix::Ones(144, 1));
  // For a pixel-sum score every window removes the sum of its pixels; each
  // pixel receives the mean over the windows covering it.
  const OcclusionOptions opt{4, 2, 0.0};
  const AttributionMap a = occlusion_attribution(sum, x, opt);
  for (int y = 0; y < 12; ++y)
    for (int xx = 0; xx < 12; ++xx) {
      double total = 0.0;
      int cover = 0;
      for (int y0 = 0; y0 + 4 <= 12; y0 += 2)
        for (int x0 = 0; x0 + 4 <= 12; x0 += 2) {
          if (y < y0 || y >= y0 + 4 || xx < x0 || xx >= x0 + 4) continue;
          double s = 0.0;
          for (int r = y0; r < y0 + 4; ++r)
            for (int c = x0; c < x0 + 4; ++c) s += x.at(r, c, 0);
          total += s;
          ++cover;
        }
      CHECK(a.at(y, xx, 0) == doctest::Approx(total / cover).epsilon(1e-12));
    }
  std::vector<std::string> diag;
  const AttributionMap gaps = occlusion_attribution(sum, x, OcclusionOptions{2, 5, 0.0}, &diag);
  CHECK(diag.size() == 1);
  CHECK(gaps.at(0, 3, 0) == 0.0);
}

TEST_CASE("infidelity oracles") {
  // Two pixels, score x1 + 2 x2, phi = (1, 2), single-pixel removal: exact.
  Image x(1, 2, 1);
  x.data << 0.4, 0.9;
  Matrix w(2, 1);
  w << 1, 2;
  const LinearScore f(w);
  Image phi(1, 2, 1);
  phi.data = w;
  Rng rng(76);
  CHECK(infidelity(f, x, phi, 50, Perturbation{Perturbation::Kind::SquareRemoval, 1, 0.0, 0.1}, rng) < 1e-28);

  // Constant model with zero attribution: zero.
  const LinearScore c(Matrix::Zero(2, 1), 1.0);
  const Perturbation one_px{Perturbation::Kind::SquareRemoval, 1, 0.0, 0.1};
  CHECK(infidelity(c, x, Image(1, 2, 1, 0.0), 10, one_px, rng) == 0.0);
  // Constant model, phi = 1, the patch covers the whole 2x2 image: (sum x)^2.
  Image sq(2, 2, 1);
  sq.data << 0.1, 0.2, 0.3, 0.4;
  const LinearScore c4(Matrix::Zero(4, 1), 1.0);
  CHECK(infidelity(c4, sq, Image(2, 2, 1, 1.0), 5, Perturbation{Perturbation::Kind::SquareRemoval, 2, 0.0, 0.1},
                   rng) == doctest::Approx(1.0));

  // Linear model, exact gradient, vanishing Gaussian noise.
  const Image big = random_image(rng, 8, 3);
  const Matrix wl = oracle::random_matrix(rng, 64, 3);
  Image grad(8, 8, 3);
  grad.data = wl;
  for (double sd : {1e-1, 1e-3}) {
    CHECK(infidelity(LinearScore(wl), big, grad, 20, Perturbation{Perturbation::Kind::Gaussian, 16, 0.0, sd}, rng) <
          1e-6);
  }
  CHECK_THROWS_AS(infidelity(f, x, phi, 0, one_px, rng), ConfigError);
}

TEST_CASE("infidelity estimator variance shrinks like 1/num_samples") {
  Rng rng(77);
  const Image x = random_image(rng, 16, 1);
  const SmoothScore f;
  const Image phi = random_image(rng, 16, 1);
  const Perturbation pert{Perturbation::Kind::SquareRemoval, 4, 0.0, 0.1};
  auto spread = [&](int n) {
    std::vector<double> est;
    for (int rep = 0; rep < 200; ++rep) est.push_back(infidelity(f, x, phi, n, pert, rng));
    const double sd = stats::stddev(est);
    return sd * sd;
  };
  const double v1 = spread(2);
  const double v8 = spread(16);
  CHECK(v1 / v8 == doctest::Approx(8.0).epsilon(0.5));
}

TEST_CASE("insertion fractions and masks") {
  const auto t = insertion_fractions(21);
  CHECK(t.front() == 0.0);
  CHECK(t.back() == 1.0);
  CHECK(t[1] == doctest::Approx(0.05));
  EdgeList e;
  Matrix p(6, 1);
  for (int i = 0; i < 6; ++i) e.push_back(i % 3, (i + 1) % 3 + 3 * (i / 3));
  p << 0.9, 0.1, 0.5, 0.2, 0.8, 0.3;
  // Two images of three edges each.
  const Matrix d = insertion_mask(e, p, 2, InsertionOrder::Descending, 1.0 / 3.0);
  const Matrix a = insertion_mask(e, p, 2, InsertionOrder::Ascending, 1.0 / 3.0);
  CHECK(d.col(0).transpose() == Eigen::RowVectorXd((Eigen::RowVectorXd(6) << 1, 0, 0, 0, 1, 0).finished()));
  CHECK(a.col(0).transpose() == Eigen::RowVectorXd((Eigen::RowVectorXd(6) << 0, 1, 0, 1, 0, 0).finished()));
  CHECK(insertion_mask(e, p, 2, InsertionOrder::Descending, 0.0).isZero());
  CHECK(insertion_mask(e, p, 2, InsertionOrder::Ascending, 1.0) == Matrix::Ones(6, 1));
}

TEST_CASE("random inclusion probability equals brute-force combinatorics") {
  for (int total : {10, 20, 80})
    for (int kept : {1, 4, 7})
      for (int marked : {0, 1, 2, 3}) {
        const double want = 1.0 - oracle::binomial(total - marked, kept) / oracle::binomial(total, kept);
        CHECK(random_inclusion_probability(total, kept, marked) == doctest::Approx(want).epsilon(1e-12));
      }
  CHECK(random_inclusion_probability(80, 4, 2) == doctest::Approx(0.0981).epsilon(1e-3));
}

TEST_CASE("planted edge recall: first ranked vs last ranked") {
  Explanation e;
  e.prediction = Prediction{Task::Classification, {0, 0}, 0.0};
  const auto rects = grid_patch_rects(4, 4, 32);
  for (int id = 0; id < 16; ++id) e.nodes.push_back({id, id / 4, id % 4, rects[id]});
  Rng rng(78);
  e.edges = knn_edges(oracle::random_matrix(rng, 16, 2), 5);
  for (std::size_t i = 0; i < e.edges.size(); ++i) e.edges.weight.push_back(0.5);
  const int s = e.edges.src[7], d = e.edges.dst[7];
  e.edges.weight[7] = 0.99;
  CHECK(planted_edge_recall(e, {s, d}, 5));
  CHECK(planted_edge_recall(e, {d, s}, 5));
  e.edges.weight[7] = 0.01;
  for (std::size_t i = 0; i < e.edges.size(); ++i)
    if ((e.edges.src[i] == d && e.edges.dst[i] == s)) e.edges.weight[i] = 0.01;
  CHECK_FALSE(planted_edge_recall(e, {s, d}, 5));
}

TEST_CASE("insertion curves on a model agree at both ends") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.stage_dims = {8, 16, 16, 16};
  Model model(cfg);
  Dataset data;
  for (int i = 0; i < 5; ++i) {
    PlantedSample s = make_planted_sample(128, 4, 900 + i);
    data.samples.push_back({"s" + std::to_string(i), std::move(s.image), s.label, 0.0, s.marker_nodes});
  }
  const InsertionResult r = insertion_curves(model, data, 11, 2);
  CHECK(r.descending.scores.front() == r.ascending.scores.front());
  CHECK(r.descending.scores.back() == r.ascending.scores.back());
  double full = 0.0;
  for (const auto& s : data.samples) full += model.predict(s.image).probabilities()[s.label];
  CHECK(r.descending.scores.back() == doctest::Approx(full / 5.0).epsilon(1e-12));
  const double lo = *std::min_element(r.descending.scores.begin(), r.descending.scores.end());
  const double hi = *std::max_element(r.descending.scores.begin(), r.descending.scores.end());
  CHECK(r.descending.auc >= lo - 1e-12);
  CHECK(r.descending.auc <= hi + 1e-12);
  CHECK(r.descending.auc == doctest::Approx(stats::trapezoid(r.descending.fractions, r.descending.scores)));
}

TEST_CASE("model score gradient matches finite differences on the frozen graph") {
  ModelConfig cfg = ModelConfig::desk();
  cfg.stage_dims = {8, 16, 16, 16};
  Model model(cfg);
  const PlantedSample s = make_planted_sample(128, 4, 77);
  const ModelScore f(model, s.image, s.label, 4);
  double score = 0.0;
  const Matrix g = f.gradient(s.image, &score);
  CHECK(score == doctest::Approx(model.predict(s.image).probabilities()[s.label]).epsilon(1e-12));
  Rng rng(79);
  for (int t = 0; t < 10; ++t) {
    const int row = static_cast<int>(rng.below(128 * 128));
    const int c = static_cast<int>(rng.below(3));
    const double h = 1e-5;
    Image up = s.image, dn = s.image;
    up.data(row, c) += h;
    dn.data(row, c) -= h;
    const double fd = (f.score(up) - f.score(dn)) / (2 * h);
    CHECK(std::abs(fd - g(row, c)) <= 1e-4 * std::max(1e-6, g.cwiseAbs().maxCoeff()));
  }
}
