#include "oracles.hpp"

#include "iwivig/errors.hpp"
#include "iwivig/explanations.hpp"
#include "iwivig/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace iwivig;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg = ModelConfig::desk();
  cfg.stage_dims = {8, 16, 16, 16};
  return cfg;
}

Dataset planted(int n, std::uint64_t seed) {
  Dataset d;
  for (int i = 0; i < n; ++i) {
    PlantedSample s = make_planted_sample(128, 4, derive_seed(seed, i));
    d.samples.push_back({"s" + std::to_string(i), std::move(s.image), s.label, static_cast<double>(s.label),
                         s.marker_nodes});
  }
  return d;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("iwivig_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("total_loss examples") {
  // Uniform 4-class prediction: log 4, plus info 0.1.
  Prediction uniform{Task::Classification, {0, 0, 0, 0}, 0.0};
  const LossBreakdown b = total_loss(uniform, Targets{{2}, {}}, 0.1);
  CHECK(b.task_loss == doctest::Approx(std::log(4.0)));
  CHECK(std::abs(b.total - 1.486) < 1e-3);
  CHECK(b.total == b.task_loss + b.info_loss);
  Prediction confident{Task::Classification, {60, 0}, 0.0};
  CHECK(total_loss(confident, Targets{{0}, {}}, 0.0).total < 1e-20);
  Prediction reg{Task::Regression, {}, 0.75};
  CHECK(total_loss(reg, Targets{{}, {0.75}}, info_loss({0.7, 0.7}, 0.7)).total == 0.0);
  CHECK_THROWS_AS(total_loss(uniform, Targets{{4}, {}}, 0.0), DataError);
}

TEST_CASE("softmax probabilities sum to one") {
  Rng rng(61);
  for (int t = 0; t < 20; ++t) {
    Prediction p{Task::Classification, {}, 0.0};
    for (int c = 0; c < 5; ++c) p.logits.push_back(rng.normal() * 30);
    const auto probs = p.probabilities();
    double s = 0.0;
    for (double v : probs) s += v;
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("head pooling is permutation invariant and identity-like for equal nodes") {
  Rng rng(62);
  ParameterStore store;
  Head head(store, 6, 3, rng);
  const Matrix x = oracle::random_matrix(rng, 16, 6);
  Matrix perm = x;
  perm.row(0).swap(perm.row(9));
  perm.row(3).swap(perm.row(15));
  const Matrix a = head(ag::Var::constant(x), 1).value();
  const Matrix b = head(ag::Var::constant(perm), 1).value();
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-14);
  Matrix same(4, 6);
  for (int i = 0; i < 4; ++i) same.row(i) = x.row(0);
  CHECK((head(ag::Var::constant(same), 1).value() - head(ag::Var::constant(Matrix(x.row(0))), 1).value())
            .cwiseAbs()
            .maxCoeff() < 1e-14);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(5e-4, 0, 50) == 5e-4);
  CHECK(cosine_lr(5e-4, 49, 50) <= 1e-6 * 5e-4);
  CHECK(cosine_lr(5e-4, 25, 51) == doctest::Approx(2.5e-4));
  CHECK(cosine_lr(1e-3, 0, 1) == 1e-3);
  for (int e = 1; e < 50; ++e) CHECK(cosine_lr(1.0, e, 50) <= cosine_lr(1.0, e - 1, 50));
}

TEST_CASE("AdamW excludes biases and normalization parameters from weight decay") {
  ParameterStore store;
  ag::Var w = store.add("w.weight", Matrix::Constant(2, 2, 1.0), true, true);
  ag::Var b = store.add("w.bias", Matrix::Constant(1, 2, 1.0), true, false);
  ag::Var g = store.add("bn.gamma", Matrix::Constant(1, 2, 1.0), true, false);
  ag::Var rm = store.add("bn.running_mean", Matrix::Constant(1, 2, 1.0), false, false);
  AdamW opt(store, 0.5);
  // No gradients flowed: the only change comes from decoupled decay.
  opt.step(0.1);
  CHECK(w.value()(0, 0) == doctest::Approx(1.0 - 0.1 * 0.5));
  CHECK(b.value()(0, 0) == 1.0);
  CHECK(g.value()(0, 0) == 1.0);
  CHECK(rm.value()(0, 0) == 1.0);
}

TEST_CASE("AdamW first step moves each parameter by lr against its gradient sign") {
  ParameterStore store;
  ag::Var x = store.add("x.weight", Matrix::Constant(1, 2, 0.0), true, false);
  ag::backward(ag::sum(ag::mul(x, ag::Var::constant((Matrix(1, 2) << 3.0, -0.5).finished()))));
  AdamW opt(store, 0.0);
  opt.step(0.01);
  CHECK(x.value()(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(x.value()(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("predict_with_explanation: edge count, clamp bounds, repeatability") {
  Model model(ModelConfig::desk());
  const PlantedSample s = make_planted_sample(128, 4, 7);
  const auto [pred, expl] = predict_with_explanation(model, s.image, "x");
  CHECK(expl.edges.size() == 16 * 5);
  CHECK(expl.nodes.size() == 16);
  for (double p : expl.edges.weight) {
    CHECK(p >= kProbFloor);
    CHECK(p <= kProbCeil);
  }
  const auto again = predict_with_explanation(model, s.image, "x");
  CHECK(again.second.edges.weight == expl.edges.weight);
  CHECK(again.first.logits == pred.logits);
  CHECK(pred.logits == model.predict(s.image).logits);
  CHECK_THROWS_AS(predict_with_explanation(model, Image(64, 64, 3), "bad"), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig cfg = tiny_config();
  cfg.init_seed = 4;
  Model model(cfg);
  const Dataset data = planted(6, 3);
  const EvalMetrics before = evaluate(model, data);
  const fs::path dir = temp_dir("ckpt");
  Checkpoint ckpt = make_checkpoint(model, TrainConfig{});
  ckpt.metrics = before;
  save_checkpoint(ckpt, (dir / "m").string());
  for (const std::string path : {"m", "m.json", "m.bin"}) {
    const Checkpoint loaded = load_checkpoint((dir / path).string());
    CHECK(loaded.names == ckpt.names);
    CHECK(loaded.tensors == ckpt.tensors);
    const auto restored = model_from_checkpoint(loaded);
    const EvalMetrics after = evaluate(*restored, data);
    CHECK(after.loss == before.loss);
    CHECK(after.accuracy == before.accuracy);
    CHECK(loaded.metrics->loss == before.loss);
  }
}

TEST_CASE("corrupted checkpoints are rejected") {
  Model model(tiny_config());
  const fs::path dir = temp_dir("corrupt");
  save_checkpoint(make_checkpoint(model, TrainConfig{}), (dir / "m").string());
  {
    std::fstream f(dir / "m.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint((dir / "m").string()), DataError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing").string()), DataError);
}

TEST_CASE("training is seeded, keeps the best validation state, and lowers the loss") {
  const Dataset train_set = planted(24, 10);
  const Dataset val_set = planted(8, 11);
  TrainConfig tc;
  tc.epochs = 4;
  tc.lr = 2e-3;
  tc.batch_size = 8;
  tc.eval_every = 2;
  std::vector<EpochRecord> log;
  Model a(tiny_config()), b(tiny_config());
  const Checkpoint ca = train(a, train_set, val_set, tc, TrainHooks{{}, [&](const EpochRecord& r) { log.push_back(r); }});
  const Checkpoint cb = train(b, train_set, val_set, tc);
  CHECK(ca.tensors == cb.tensors);
  CHECK(ca.metrics->accuracy == cb.metrics->accuracy);
  CHECK(ca.rng_state == cb.rng_state);
  REQUIRE(log.size() == 4);
  CHECK(log[0].lr == tc.lr);
  CHECK(log[3].lr == 0.0);
  CHECK(log[3].total_loss < log[0].total_loss);
  CHECK(log[1].val.has_value());
  CHECK_FALSE(log[0].val.has_value());
  // Evaluated at epochs 1 and 3; higher accuracy wins, then lower validation loss.
  const EvalMetrics& v1 = *log[1].val;
  const EvalMetrics& v3 = *log[3].val;
  const bool later = v3.accuracy > v1.accuracy || (v3.accuracy == v1.accuracy && v3.loss < v1.loss);
  const int best = later ? 3 : 1;
  CHECK(ca.epoch == best);
  CHECK(evaluate(a, val_set).accuracy == ca.metrics->accuracy);
}

TEST_CASE("a non-finite loss aborts naming the step") {
  const Dataset data = planted(8, 12);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  TrainHooks hooks;
  hooks.augment = [](std::vector<Image>& batch, Rng&) { batch[0].data(0, 0) = std::nan(""); };
  Model model(tiny_config());
  try {
    train(model, data, data, tc, hooks);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("epoch 0, step 0") != std::string::npos);
  }
}

TEST_CASE("untrained model evaluates near chance") {
  Model model(ModelConfig::desk());
  const Dataset data = planted(40, 13);
  const EvalMetrics m = evaluate(model, data);
  CHECK(m.count == 40);
  CHECK(m.accuracy >= 0.2);
  CHECK(m.accuracy <= 0.8);
}
