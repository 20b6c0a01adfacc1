#include "iwivig/metrics.hpp"

#include "iwivig/errors.hpp"
#include "iwivig/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace iwivig {

using nlohmann::json;

double ScoreFunction::score(const Image& x) const { return score_batch({x}).at(0); }

Matrix ScoreFunction::gradient(const Image& x, double* score) const {
  std::vector<double> s;
  std::vector<Matrix> g = gradient_batch({x}, &s);
  if (score) *score = s.at(0);
  return std::move(g.at(0));
}

ModelScore::ModelScore(const Model& model, const Image& reference, int target_class, int batch_size)
    : model_(&model), target_(target_class), batch_size_(std::max(1, batch_size)) {
  ag::NoGradGuard guard;
  ForwardContext ctx{.training = false, .rng = nullptr, .trace = &trace_};
  ForwardResult r = model.forward({&reference}, ctx);
  if (model.config().task == Task::Classification) {
    if (target_ < 0) target_ = r.prediction(0, Task::Classification).predicted_class();
    if (target_ >= model.config().num_classes) {
      throw ConfigError("target class " + std::to_string(target_) + " outside [0, " +
                        std::to_string(model.config().num_classes) + ")");
    }
  }
}

GraphTrace ModelScore::tiled_trace(int copies) const {
  GraphTrace t;
  for (const EdgeList& g : trace_.graphs()) {
    // k-NN graphs give every node an incoming edge, so the largest
    // destination fixes the node count.
    const int nodes = g.empty() ? 0 : *std::max_element(g.dst.begin(), g.dst.end()) + 1;
    EdgeList tiled;
    for (int c = 0; c < copies; ++c) tiled.append(g, c * nodes);
    t.next([&] { return tiled; });
  }
  t.start_replay();
  return t;
}

std::vector<double> ModelScore::chunk_scores(const Matrix& output) const {
  std::vector<double> s(static_cast<std::size_t>(output.rows()));
  for (Eigen::Index b = 0; b < output.rows(); ++b) {
    if (model_->config().task == Task::Classification) {
      const double mx = output.row(b).maxCoeff();
      const double z = (output.row(b).array() - mx).exp().sum();
      s[static_cast<std::size_t>(b)] = std::exp(output(b, target_) - mx) / z;
    } else {
      s[static_cast<std::size_t>(b)] = output(b, 0);
    }
  }
  return s;
}

namespace {

void check_image(const Model& model, const Image& img) {
  const ModelConfig& cfg = model.config();
  if (img.height != cfg.input_side || img.width != cfg.input_side || img.channels() != cfg.in_channels) {
    throw ConfigError("image is incompatible with the model input size " + std::to_string(cfg.input_side));
  }
}

}  // namespace

std::vector<double> ModelScore::score_batch(const std::vector<Image>& xs) const {
  ag::NoGradGuard guard;
  std::vector<double> out;
  out.reserve(xs.size());
  for (std::size_t start = 0; start < xs.size(); start += static_cast<std::size_t>(batch_size_)) {
    const std::size_t end = std::min(xs.size(), start + static_cast<std::size_t>(batch_size_));
    std::vector<const Image*> chunk;
    for (std::size_t i = start; i < end; ++i) {
      check_image(*model_, xs[i]);
      chunk.push_back(&xs[i]);
    }
    GraphTrace trace = tiled_trace(static_cast<int>(chunk.size()));
    ForwardContext ctx{.training = false, .rng = nullptr, .trace = &trace};
    ForwardResult r = model_->forward_pixels(ag::Var::constant(images_to_rows(chunk)), static_cast<int>(chunk.size()), ctx);
    for (double s : chunk_scores(r.output.value())) out.push_back(s);
  }
  return out;
}

std::vector<Matrix> ModelScore::gradient_batch(const std::vector<Image>& xs, std::vector<double>* scores) const {
  std::vector<Matrix> grads;
  grads.reserve(xs.size());
  if (scores) scores->clear();
  const int classes = model_->config().output_dim();
  for (std::size_t start = 0; start < xs.size(); start += static_cast<std::size_t>(batch_size_)) {
    const std::size_t end = std::min(xs.size(), start + static_cast<std::size_t>(batch_size_));
    std::vector<const Image*> chunk;
    for (std::size_t i = start; i < end; ++i) {
      check_image(*model_, xs[i]);
      chunk.push_back(&xs[i]);
    }
    const int n = static_cast<int>(chunk.size());
    GraphTrace trace = tiled_trace(n);
    ForwardContext ctx{.training = false, .rng = nullptr, .trace = &trace};
    ag::Var pixels = ag::Var::leaf(images_to_rows(chunk), true);
    ForwardResult r = model_->forward_pixels(pixels, n, ctx);
    const Matrix& out = r.output.value();
    const std::vector<double> s = chunk_scores(out);
    Matrix seed(n, classes);
    if (model_->config().task == Task::Classification) {
      for (int b = 0; b < n; ++b) {
        const double mx = out.row(b).maxCoeff();
        const Eigen::RowVectorXd p = (out.row(b).array() - mx).exp().matrix();
        const Eigen::RowVectorXd prob = p / p.sum();
        for (int c = 0; c < classes; ++c) seed(b, c) = prob(target_) * ((c == target_ ? 1.0 : 0.0) - prob(c));
      }
    } else {
      seed.setOnes();
    }
    ag::backward(r.output, seed);
    const Matrix g = pixels.grad();
    const Eigen::Index rows = g.rows() / n;
    for (int b = 0; b < n; ++b) grads.push_back(g.middleRows(b * rows, rows));
    if (scores) scores->insert(scores->end(), s.begin(), s.end());
  }
  return grads;
}

namespace {

std::vector<int> window_starts(int side, int patch, int stride) {
  std::vector<int> starts;
  for (int s = 0; s + patch <= side; s += stride) starts.push_back(s);
  if (starts.back() + patch < side) starts.push_back(side - patch);
  return starts;
}

}  // namespace

AttributionMap occlusion_attribution(const ScoreFunction& f, const Image& x, const OcclusionOptions& opt,
                                     std::vector<std::string>* diagnostics) {
  if (opt.patch_px < 1 || opt.stride_px < 1) throw ConfigError("occlusion patch and stride must be positive");
  if (opt.patch_px > x.height || opt.patch_px > x.width) {
    throw ConfigError("occlusion patch of " + std::to_string(opt.patch_px) + " px exceeds the image");
  }
  if (opt.stride_px > opt.patch_px && diagnostics) {
    diagnostics->push_back("warning: occlusion stride " + std::to_string(opt.stride_px) + " exceeds patch " +
                           std::to_string(opt.patch_px) + "; uncovered pixels get zero attribution");
  }
  const std::vector<int> ys = window_starts(x.height, opt.patch_px, opt.stride_px);
  const std::vector<int> xs = window_starts(x.width, opt.patch_px, opt.stride_px);
  std::vector<Image> occluded;
  for (int y0 : ys) {
    for (int x0 : xs) {
      Image o = x;
      for (int y = y0; y < y0 + opt.patch_px; ++y) {
        for (int xx = x0; xx < x0 + opt.patch_px; ++xx) {
          for (int c = 0; c < x.channels(); ++c) o.at(y, xx, c) = opt.baseline;
        }
      }
      occluded.push_back(std::move(o));
    }
  }
  const double base = f.score(x);
  const std::vector<double> scores = f.score_batch(occluded);

  Matrix sum = Matrix::Zero(x.height, x.width);
  Matrix count = Matrix::Zero(x.height, x.width);
  std::size_t w = 0;
  for (int y0 : ys) {
    for (int x0 : xs) {
      const double diff = base - scores[w++];
      sum.block(y0, x0, opt.patch_px, opt.patch_px).array() += diff;
      count.block(y0, x0, opt.patch_px, opt.patch_px).array() += 1.0;
    }
  }
  AttributionMap map(x.height, x.width, x.channels());
  for (int y = 0; y < x.height; ++y) {
    for (int xx = 0; xx < x.width; ++xx) {
      const double v = count(y, xx) > 0 ? sum(y, xx) / count(y, xx) : 0.0;
      for (int c = 0; c < x.channels(); ++c) map.at(y, xx, c) = v;
    }
  }
  return map;
}

AttributionMap integrated_gradients(const ScoreFunction& f, const Image& x, int steps, const Image& baseline) {
  if (steps < 8) throw ConfigError("integrated gradients needs at least 8 steps, got " + std::to_string(steps));
  if (baseline.height != x.height || baseline.width != x.width || baseline.channels() != x.channels()) {
    throw ConfigError("integrated gradients baseline shape differs from the image");
  }
  const Matrix delta = x.data - baseline.data;
  std::vector<Image> path;
  path.reserve(static_cast<std::size_t>(steps));
  for (int s = 1; s <= steps; ++s) {
    Image p = baseline;
    p.data += (static_cast<double>(s) / steps) * delta;
    path.push_back(std::move(p));
  }
  const std::vector<Matrix> grads = f.gradient_batch(path, nullptr);
  Matrix mean = Matrix::Zero(x.data.rows(), x.data.cols());
  for (const Matrix& g : grads) {
    if (!g.allFinite()) throw NumericError("integrated gradients met a non-finite gradient on the path");
    mean += g;
  }
  mean /= static_cast<double>(steps);
  AttributionMap map = x;
  map.data = delta.cwiseProduct(mean);
  return map;
}

AttributionMap integrated_gradients(const ScoreFunction& f, const Image& x, int steps, double baseline) {
  return integrated_gradients(f, x, steps, Image(x.height, x.width, x.channels(), baseline));
}

std::string to_string(Perturbation::Kind kind) {
  return kind == Perturbation::Kind::SquareRemoval ? "square_removal" : "gaussian";
}

double infidelity(const ScoreFunction& f, const Image& x, const AttributionMap& attribution, int num_samples,
                  const Perturbation& perturbation, Rng& rng) {
  if (num_samples < 1) throw ConfigError("infidelity needs num_samples >= 1");
  if (attribution.height != x.height || attribution.width != x.width ||
      attribution.channels() != x.channels()) {
    throw ConfigError("attribution shape differs from the image");
  }
  const bool square = perturbation.kind == Perturbation::Kind::SquareRemoval;
  const int ps = perturbation.patch_px;
  if (square && (ps < 1 || ps > x.height || ps > x.width)) {
    throw ConfigError("perturbation patch of " + std::to_string(ps) + " px does not fit the image");
  }
  std::vector<Image> perturbed;
  std::vector<double> dots;
  for (int s = 0; s < num_samples; ++s) {
    Image xp = x;
    if (square) {
      const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.height - ps + 1)));
      const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(x.width - ps + 1)));
      for (int y = y0; y < y0 + ps; ++y) {
        for (int xx = x0; xx < x0 + ps; ++xx) {
          for (int c = 0; c < x.channels(); ++c) xp.at(y, xx, c) = perturbation.baseline;
        }
      }
    } else {
      for (Eigen::Index i = 0; i < xp.data.size(); ++i) xp.data.data()[i] -= perturbation.noise_sd * rng.normal();
    }
    dots.push_back((x.data - xp.data).cwiseProduct(attribution.data).sum());
    perturbed.push_back(std::move(xp));
  }
  const double fx = f.score(x);
  const std::vector<double> fp = f.score_batch(perturbed);
  double total = 0.0;
  for (int s = 0; s < num_samples; ++s) {
    const double gap = dots[s] - (fx - fp[s]);
    total += gap * gap;
  }
  return total / num_samples;
}

double pq_sparsity(const Matrix& w, double p, double q) {
  if (!(p > 0.0 && p < q)) throw ConfigError("pq_sparsity needs 0 < p < q");
  if (w.size() == 0) throw ConfigError("pq_sparsity of an empty vector");
  const double mx = w.cwiseAbs().maxCoeff();
  if (!(mx > 0.0)) throw NumericError("pq_sparsity is undefined for an all-zero attribution");
  if (!std::isfinite(mx)) throw NumericError("pq_sparsity of a non-finite attribution");
  // Power means of |w| / max|w|, so uniform vectors give exactly zero.
  const auto a = (w.cwiseAbs() / mx).array();
  const double d = static_cast<double>(w.size());
  const double mp = std::pow(a.pow(p).sum() / d, 1.0 / p);
  const double mq = std::pow(a.pow(q).sum() / d, 1.0 / q);
  return 1.0 - mp / mq;
}

double pq_sparsity(const std::vector<double>& w, double p, double q) {
  Matrix m(1, static_cast<Eigen::Index>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = w[i];
  return pq_sparsity(m, p, q);
}

std::vector<double> insertion_fractions(int steps) {
  if (steps < 2) throw ConfigError("insertion curve needs at least 2 steps");
  std::vector<double> f(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) f[i] = static_cast<double>(i) / (steps - 1);
  return f;
}

Matrix insertion_mask(const EdgeList& edges, const Matrix& p, int batch, InsertionOrder order, double fraction) {
  const std::size_t total = edges.size();
  const std::size_t per_image = batch > 0 ? total / static_cast<std::size_t>(batch) : 0;
  Matrix mask = Matrix::Zero(static_cast<Eigen::Index>(total), 1);
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(per_image)));
  for (int b = 0; b < batch; ++b) {
    const std::size_t begin = static_cast<std::size_t>(b) * per_image;
    EdgeList local;
    for (std::size_t e = begin; e < begin + per_image; ++e) {
      local.push_back(edges.src[e], edges.dst[e]);
      local.weight.push_back(p(static_cast<Eigen::Index>(e), 0));
    }
    std::vector<std::size_t> rank = edge_ranking(local);
    if (order == InsertionOrder::Ascending) std::reverse(rank.begin(), rank.end());
    for (std::size_t i = 0; i < keep && i < rank.size(); ++i) mask(static_cast<Eigen::Index>(begin + rank[i]), 0) = 1.0;
  }
  return mask;
}

InsertionResult insertion_curves(const Model& model, const Dataset& data, int steps, int batch_size) {
  if (data.samples.empty()) throw DataError("insertion curve over an empty dataset");
  const std::vector<double> fractions = insertion_fractions(steps);
  const Task task = model.config().task;
  const std::size_t n = data.samples.size();
  InsertionResult res;
  for (auto& per : res.per_image) per.assign(n, std::vector<double>(fractions.size(), 0.0));

  ag::NoGradGuard guard;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    std::vector<const Image*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&data.samples[i].image);
    ForwardContext ctx;
    ForwardResult full = model.forward(chunk, ctx);
    for (int o = 0; o < 2; ++o) {
      const InsertionOrder order = o == 0 ? InsertionOrder::Descending : InsertionOrder::Ascending;
      for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
        const double t = fractions[fi];
        EdgeGate gate = [order, t](const EdgeList& edges, const Matrix& p, int batch, int) {
          return insertion_mask(edges, p, batch, order, t);
        };
        ForwardResult r = model.forward_from_stage4(full.backbone.stage4, ctx, gate);
        for (std::size_t i = start; i < end; ++i) {
          const Prediction pred = r.prediction(static_cast<int>(i - start), task);
          res.per_image[o][i][fi] =
              task == Task::Classification ? pred.probabilities().at(data.samples[i].label) : pred.value;
        }
      }
    }
  }

  for (int o = 0; o < 2; ++o) {
    InsertionCurve& c = o == 0 ? res.descending : res.ascending;
    c.fractions = fractions;
    for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = res.per_image[o][i][fi];
      if (task == Task::Classification) {
        c.scores.push_back(stats::mean(col));
      } else {
        std::vector<double> truth(n);
        for (std::size_t i = 0; i < n; ++i) truth[i] = data.samples[i].target;
        c.scores.push_back(stats::r_squared(col, truth));
      }
    }
    c.auc = stats::trapezoid(c.fractions, c.scores);
  }
  return res;
}

InsertionCurve insertion_curve(const Model& model, const Dataset& data, InsertionOrder order, int steps) {
  InsertionResult r = insertion_curves(model, data, steps);
  return order == InsertionOrder::Descending ? r.descending : r.ascending;
}

bool planted_edge_recall(const Explanation& expl, const std::array<int, 2>& truth, double percentile) {
  if (!expl.node(truth[0]) || !expl.node(truth[1])) throw ConfigError("planted nodes are not in the explanation");
  const Explanation sub = top_percentile_subgraph(expl, percentile);
  for (std::size_t e = 0; e < sub.edges.size(); ++e) {
    const int s = sub.edges.src[e], d = sub.edges.dst[e];
    if ((s == truth[0] && d == truth[1]) || (s == truth[1] && d == truth[0])) return true;
  }
  return false;
}

double random_inclusion_probability(int total, int kept, int marked) {
  if (total < 1 || kept < 0 || kept > total || marked < 0 || marked > total) {
    throw ConfigError("random_inclusion_probability: invalid counts");
  }
  double none = 1.0;
  for (int i = 0; i < kept; ++i) none *= static_cast<double>(total - marked - i) / static_cast<double>(total - i);
  return 1.0 - std::max(0.0, none);
}

namespace {

int kept_edges(std::size_t total, double percentile) {
  const double exact = static_cast<double>(total) * percentile / 100.0;
  return static_cast<int>(std::max<std::size_t>(1, std::min(total, static_cast<std::size_t>(std::ceil(exact - 1e-9)))));
}

json curve_json(const InsertionCurve& c) { return {{"fractions", c.fractions}, {"scores", c.scores}, {"auc", c.auc}}; }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string csv_num(const std::optional<double>& v) {
  if (!v) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", *v);
  return buf;
}

template <typename Get>
std::optional<double> mean_of(const std::vector<ImageMetrics>& images, Get get) {
  std::vector<double> v;
  for (const auto& m : images) {
    if (auto x = get(m)) v.push_back(static_cast<double>(*x));
  }
  if (v.empty()) return std::nullopt;
  return stats::mean(v);
}

}  // namespace

MetricsReport compute_metrics(const Model& model, const Dataset& data, const MetricsOptions& options) {
  MetricsReport rep;
  rep.task = model.config().task;
  rep.options = options;
  const std::size_t n = data.samples.size();
  const InsertionResult ins = insertion_curves(model, data, options.insertion_steps, options.batch_size);
  rep.insertion_desc = ins.descending;
  rep.insertion_asc = ins.ascending;

  // Explanations from one batched evaluation-mode pass.
  {
    ag::NoGradGuard guard;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(options.batch_size));
      std::vector<const Image*> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(&data.samples[i].image);
      ForwardContext ctx;
      ForwardResult r = model.forward(chunk, ctx);
      const int side = r.backbone.stage4.side;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = data.samples[i];
        const Explanation e = explanation_from_forward(r, static_cast<int>(i - start), side,
                                                       model.config().input_side / side, s.id, rep.task);
        ImageMetrics m;
        m.image_id = s.id;
        m.label = s.label;
        m.target = s.target;
        m.prediction = e.prediction;
        if (rep.task == Task::Classification) {
          m.insertion_auc_desc = stats::trapezoid(ins.descending.fractions, ins.per_image[0][i]);
          m.insertion_auc_asc = stats::trapezoid(ins.ascending.fractions, ins.per_image[1][i]);
        }
        if (s.marker_nodes) {
          const auto& t = *s.marker_nodes;
          m.planted_hit = planted_edge_recall(e, t, options.percentile) ? 1 : 0;
          int marked = 0;
          for (std::size_t k = 0; k < e.edges.size(); ++k) {
            const int a = e.edges.src[k], b = e.edges.dst[k];
            marked += (a == t[0] && b == t[1]) || (a == t[1] && b == t[0]);
          }
          const int total = static_cast<int>(e.edges.size());
          m.planted_baseline = random_inclusion_probability(total, kept_edges(e.edges.size(), options.percentile), marked);
        }
        rep.images.push_back(std::move(m));
      }
    }
  }

  if (options.attributions) {
    const std::size_t limit =
        options.max_attribution_images < 0 ? n : std::min(n, static_cast<std::size_t>(options.max_attribution_images));
    for (std::size_t i = 0; i < limit; ++i) {
      const Sample& s = data.samples[i];
      ImageMetrics& m = rep.images[i];
      const int target = rep.task == Task::Classification ? s.label : -1;
      const ModelScore f(model, s.image, target, options.batch_size);
      const std::uint64_t seed = derive_seed(options.seed, i);
      {
        const AttributionMap ig = integrated_gradients(f, s.image, options.ig_steps, 0.0);
        Rng rng(derive_seed(seed, 0));
        m.ig_infidelity = infidelity(f, s.image, ig, options.infidelity_samples, options.perturbation, rng);
        if (ig.data.cwiseAbs().maxCoeff() > 0.0) m.ig_pq = pq_sparsity(ig.data);
      }
      {
        const AttributionMap occ = occlusion_attribution(f, s.image, options.occlusion);
        Rng rng(derive_seed(seed, 1));
        m.occlusion_infidelity = infidelity(f, s.image, occ, options.infidelity_samples, options.perturbation, rng);
        if (occ.data.cwiseAbs().maxCoeff() > 0.0) m.occlusion_pq = pq_sparsity(occ.data);
      }
    }
    if (limit > 0) {
      rep.integrated_gradients = AttributionSummary{
          mean_of(rep.images, [](const ImageMetrics& m) { return m.ig_infidelity; }).value_or(0.0),
          mean_of(rep.images, [](const ImageMetrics& m) { return m.ig_pq; }).value_or(0.0), static_cast<int>(limit)};
      rep.occlusion = AttributionSummary{
          mean_of(rep.images, [](const ImageMetrics& m) { return m.occlusion_infidelity; }).value_or(0.0),
          mean_of(rep.images, [](const ImageMetrics& m) { return m.occlusion_pq; }).value_or(0.0),
          static_cast<int>(limit)};
    }
  }
  rep.planted_recall = mean_of(rep.images, [](const ImageMetrics& m) { return m.planted_hit; });
  rep.planted_baseline = mean_of(rep.images, [](const ImageMetrics& m) { return m.planted_baseline; });
  return rep;
}

json MetricsReport::to_json() const {
  json settings{{"insertion_steps", options.insertion_steps},
                {"insertion_score", task == Task::Classification ? "mean_true_class_probability" : "r2"},
                {"attributions", options.attributions},
                {"max_attribution_images", options.max_attribution_images},
                {"ig_steps", options.ig_steps},
                {"ig_baseline", 0.0},
                {"occlusion_patch_px", options.occlusion.patch_px},
                {"occlusion_stride_px", options.occlusion.stride_px},
                {"occlusion_baseline", options.occlusion.baseline},
                {"perturbation", to_string(options.perturbation.kind)},
                {"perturbation_patch_px", options.perturbation.patch_px},
                {"perturbation_baseline", options.perturbation.baseline},
                {"perturbation_noise_sd", options.perturbation.noise_sd},
                {"infidelity_samples", options.infidelity_samples},
                {"pq_orders", {1, 2}},
                {"graph_during_attribution", "frozen_at_input"},
                {"percentile", options.percentile},
                {"seed", options.seed}};
  json attribution = json::object();
  auto summary = [](const std::optional<AttributionSummary>& s) {
    return s ? json{{"infidelity", s->infidelity}, {"pq_sparsity", s->pq_sparsity}, {"images", s->images}}
             : json(nullptr);
  };
  attribution["integrated_gradients"] = summary(integrated_gradients);
  attribution["occlusion"] = summary(occlusion);
  json imgs = json::array();
  for (const auto& m : images) {
    json j{{"image_id", m.image_id},
           {"insertion_auc_desc", opt_json(m.insertion_auc_desc)},
           {"insertion_auc_asc", opt_json(m.insertion_auc_asc)},
           {"ig_infidelity", opt_json(m.ig_infidelity)},
           {"ig_pq", opt_json(m.ig_pq)},
           {"occlusion_infidelity", opt_json(m.occlusion_infidelity)},
           {"occlusion_pq", opt_json(m.occlusion_pq)},
           {"planted_hit", m.planted_hit ? json(*m.planted_hit) : json(nullptr)},
           {"planted_baseline", opt_json(m.planted_baseline)}};
    if (task == Task::Classification) {
      j["label"] = m.label;
      j["predicted"] = m.prediction.predicted_class();
    } else {
      j["target"] = m.target;
      j["predicted"] = m.prediction.value;
    }
    imgs.push_back(j);
  }
  return json{{"task", iwivig::to_string(task)},
              {"settings", settings},
              {"insertion",
               {{"descending", curve_json(insertion_desc)},
                {"ascending", curve_json(insertion_asc)},
                {"auc_gap", insertion_desc.auc - insertion_asc.auc}}},
              {"attribution", attribution},
              {"planted", {{"recall", opt_json(planted_recall)}, {"random_baseline", opt_json(planted_baseline)}}},
              {"images", imgs}};
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out << "image_id,truth,predicted,insertion_auc_desc,insertion_auc_asc,ig_infidelity,ig_pq,"
         "occlusion_infidelity,occlusion_pq,planted_hit,planted_baseline\n";
  const bool cls = task == Task::Classification;
  for (const auto& m : images) {
    out << m.image_id << ',' << (cls ? csv_num(m.label) : csv_num(m.target)) << ','
        << (cls ? csv_num(m.prediction.predicted_class()) : csv_num(m.prediction.value)) << ','
        << csv_num(m.insertion_auc_desc) << ',' << csv_num(m.insertion_auc_asc) << ',' << csv_num(m.ig_infidelity)
        << ',' << csv_num(m.ig_pq) << ',' << csv_num(m.occlusion_infidelity) << ',' << csv_num(m.occlusion_pq) << ','
        << (m.planted_hit ? std::to_string(*m.planted_hit) : "") << ',' << csv_num(m.planted_baseline) << '\n';
  }
  auto opt_field = [](const std::optional<AttributionSummary>& s, bool infid) -> std::optional<double> {
    if (!s) return std::nullopt;
    return infid ? s->infidelity : s->pq_sparsity;
  };
  out << "summary,,," << csv_num(insertion_desc.auc) << ',' << csv_num(insertion_asc.auc) << ','
      << csv_num(opt_field(integrated_gradients, true)) << ',' << csv_num(opt_field(integrated_gradients, false)) << ','
      << csv_num(opt_field(occlusion, true)) << ',' << csv_num(opt_field(occlusion, false)) << ','
      << csv_num(planted_recall) << ',' << csv_num(planted_baseline) << '\n';
  return out.str();
}

Image render_insertion_plot(const InsertionCurve& descending, const InsertionCurve& ascending, int width, int height) {
  Image img(height, width, 3, 1.0);
  const int left = 30, right = width - 10, top = 10, bottom = height - 25;
  double lo = 0.0, hi = 1.0;
  for (const auto* c : {&descending, &ascending}) {
    for (double s : c->scores) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  auto px = [&](double t, double s) {
    const int x = left + static_cast<int>(std::lround(t * (right - left)));
    const int y = bottom - static_cast<int>(std::lround((s - lo) / (hi - lo) * (bottom - top)));
    return std::pair<int, int>{y, x};
  };
  const Rgb black{0.0, 0.0, 0.0};
  draw_line(img, bottom, left, bottom, right, black, 1.0);
  draw_line(img, top, left, bottom, left, black, 1.0);
  const std::array<Rgb, 2> colors{Rgb{0.12, 0.47, 0.71}, Rgb{1.0, 0.5, 0.05}};
  const std::array<const InsertionCurve*, 2> curves{&descending, &ascending};
  for (int k = 0; k < 2; ++k) {
    const InsertionCurve& c = *curves[k];
    for (std::size_t i = 1; i < c.scores.size(); ++i) {
      const auto [y0, x0] = px(c.fractions[i - 1], c.scores[i - 1]);
      const auto [y1, x1] = px(c.fractions[i], c.scores[i]);
      draw_line(img, y0, x0, y1, x1, colors[k], 1.0);
      draw_line(img, y0 + 1, x0, y1 + 1, x1, colors[k], 1.0);
    }
  }
  return img;
}

}  // namespace iwivig
