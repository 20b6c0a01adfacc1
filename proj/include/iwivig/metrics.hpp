#pragma once

#include "iwivig/dataset.hpp"
#include "iwivig/explanations.hpp"
#include "iwivig/model.hpp"
#include "iwivig/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace iwivig {

// Saliency per pixel and channel, shaped like the input image.
using AttributionMap = Image;

// Scalar model score of an image and its pixel gradient.
class ScoreFunction {
 public:
  virtual ~ScoreFunction() = default;
  virtual double score(const Image& x) const;
  virtual std::vector<double> score_batch(const std::vector<Image>& xs) const = 0;
  // d score / d x, shaped like x.data; optionally also returns the score.
  virtual Matrix gradient(const Image& x, double* score = nullptr) const;
  virtual std::vector<Matrix> gradient_batch(const std::vector<Image>& xs, std::vector<double>* scores) const = 0;
};

// True-class probability (classification) or predicted value (regression),
// evaluated in evaluation mode. Every k-NN graph is the one built for
// `reference`, so the score is a smooth function of the pixels along any
// attribution path.
class ModelScore : public ScoreFunction {
 public:
  // target_class < 0 picks the class predicted for `reference`.
  ModelScore(const Model& model, const Image& reference, int target_class = -1, int batch_size = 16);

  int target_class() const { return target_; }
  std::vector<double> score_batch(const std::vector<Image>& xs) const override;
  std::vector<Matrix> gradient_batch(const std::vector<Image>& xs, std::vector<double>* scores) const override;

 private:
  std::vector<double> chunk_scores(const Matrix& output) const;
  GraphTrace tiled_trace(int copies) const;

  const Model* model_;
  int target_ = 0;
  int batch_size_;
  GraphTrace trace_;
};

struct OcclusionOptions {
  int patch_px = 17;
  int stride_px = 8;
  double baseline = 0.0;
};

// Slides a baseline-filled square over the image; every covered pixel
// accumulates (score(x) - score(occluded)) / cover-count. A last window
// flush with the far border is added when the stride does not land there.
// Stride > patch leaves gaps (zero attribution) and adds a diagnostic.
AttributionMap occlusion_attribution(const ScoreFunction& f, const Image& x, const OcclusionOptions& opt = {},
                                     std::vector<std::string>* diagnostics = nullptr);

// (x - x0) * mean_{s=1..steps} grad f(x0 + s/steps (x - x0)).
AttributionMap integrated_gradients(const ScoreFunction& f, const Image& x, int steps, const Image& baseline);
AttributionMap integrated_gradients(const ScoreFunction& f, const Image& x, int steps, double baseline = 0.0);

struct Perturbation {
  enum class Kind { SquareRemoval, Gaussian };
  Kind kind = Kind::SquareRemoval;
  int patch_px = 16;      // square side for SquareRemoval
  double baseline = 0.0;  // replacement value for SquareRemoval
  double noise_sd = 0.1;  // per-entry standard deviation for Gaussian
};

std::string to_string(Perturbation::Kind kind);

// Monte-Carlo mean of (I . phi - (f(x) - f(x - I)))^2, where x - I is the
// perturbed image.
double infidelity(const ScoreFunction& f, const Image& x, const AttributionMap& attribution, int num_samples,
                  const Perturbation& perturbation, Rng& rng);

// 1 - d^(1/q - 1/p) ||w||_p / ||w||_q over |w|.
double pq_sparsity(const Matrix& w, double p = 1.0, double q = 2.0);
double pq_sparsity(const std::vector<double>& w, double p = 1.0, double q = 2.0);

enum class InsertionOrder { Descending, Ascending };

struct InsertionCurve {
  std::vector<double> fractions;
  std::vector<double> scores;
  double auc = 0.0;
};

// Evenly spaced fractions in [0, 1] including both ends.
std::vector<double> insertion_fractions(int steps);

// Mask keeping, per image, the round(t * |E_image|) edges ranked first in
// `order` by p; every other edge gets alpha = 0.
Matrix insertion_mask(const EdgeList& edges, const Matrix& p, int batch, InsertionOrder order, double fraction);

struct InsertionResult {
  InsertionCurve descending;
  InsertionCurve ascending;
  // Per-image true-class probability (classification) or prediction
  // (regression) at each fraction: [order][image][fraction].
  std::array<std::vector<std::vector<double>>, 2> per_image;
};

// Score is the mean true-class probability (classification) or R^2
// (regression) over the dataset.
InsertionResult insertion_curves(const Model& model, const Dataset& data, int steps = 21, int batch_size = 16);
InsertionCurve insertion_curve(const Model& model, const Dataset& data, InsertionOrder order, int steps = 21);

// 1 iff the top-percentile subgraph holds an edge between the two nodes, in either direction.
bool planted_edge_recall(const Explanation& expl, const std::array<int, 2>& truth, double percentile);

// Probability that drawing `kept` of `total` edges uniformly without
// replacement includes at least one of `marked` edges.
double random_inclusion_probability(int total, int kept, int marked);

struct ImageMetrics {
  std::string image_id;
  int label = 0;
  double target = 0.0;
  Prediction prediction;
  std::optional<double> insertion_auc_desc;  // per-image true-class probability curve
  std::optional<double> insertion_auc_asc;
  std::optional<double> ig_infidelity;
  std::optional<double> ig_pq;
  std::optional<double> occlusion_infidelity;
  std::optional<double> occlusion_pq;
  std::optional<int> planted_hit;
  std::optional<double> planted_baseline;  // exact random-inclusion probability for this graph
};

struct AttributionSummary {
  double infidelity = 0.0;
  double pq_sparsity = 0.0;
  int images = 0;
};

struct MetricsOptions {
  int insertion_steps = 21;
  bool attributions = true;
  int max_attribution_images = -1;  // -1: all
  int ig_steps = 32;
  OcclusionOptions occlusion;
  Perturbation perturbation;
  int infidelity_samples = 16;
  double percentile = 5.0;
  std::uint64_t seed = 0;
  int batch_size = 16;
};

struct MetricsReport {
  Task task = Task::Classification;
  InsertionCurve insertion_desc;
  InsertionCurve insertion_asc;
  std::optional<AttributionSummary> integrated_gradients;
  std::optional<AttributionSummary> occlusion;
  std::optional<double> planted_recall;
  std::optional<double> planted_baseline;  // mean exact per-image baseline
  std::vector<ImageMetrics> images;
  MetricsOptions options;

  nlohmann::json to_json() const;
  // One row per image plus a final "summary" row.
  std::string to_csv() const;
};

MetricsReport compute_metrics(const Model& model, const Dataset& data, const MetricsOptions& options = {});

// Line plot of both insertion curves (descending blue, ascending orange).
Image render_insertion_plot(const InsertionCurve& descending, const InsertionCurve& ascending, int width = 320,
                            int height = 240);

}  // namespace iwivig
