#include "iwivig/explanations.hpp"

#include "iwivig/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace iwivig {

using nlohmann::json;

const ExplanationNode* Explanation::node(int id) const {
  for (const auto& n : nodes) {
    if (n.id == id) return &n;
  }
  return nullptr;
}

Explanation explanation_from_forward(const ForwardResult& result, int b, int grid_side, int px_per_node,
                                     const std::string& image_id, Task task) {
  Explanation e;
  e.image_id = image_id;
  e.prediction = result.prediction(b, task);
  const auto rects = grid_patch_rects(grid_side, grid_side, px_per_node);
  for (int id = 0; id < grid_side * grid_side; ++id) e.nodes.push_back({id, id / grid_side, id % grid_side, rects[id]});
  const EdgeProbabilities ep = result.bottleneck.image_probabilities(b);
  e.edges = ep.edges;
  e.edges.weight = ep.p;
  return e;
}

std::pair<Prediction, Explanation> predict_with_explanation(const Model& model, const Image& image,
                                                            const std::string& image_id) {
  ag::NoGradGuard guard;
  ForwardContext ctx;
  ForwardResult r = model.forward({&image}, ctx);
  const ModelConfig& cfg = model.config();
  const int side = r.backbone.stage4.side;
  Explanation e = explanation_from_forward(r, 0, side, cfg.input_side / side, image_id, cfg.task);
  return {e.prediction, std::move(e)};
}

std::vector<std::size_t> edge_ranking(const EdgeList& edges) {
  if (edges.weight.size() != edges.size()) throw ConfigError("edge ranking needs one weight per edge");
  std::vector<std::size_t> order(edges.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (edges.weight[a] != edges.weight[b]) return edges.weight[a] > edges.weight[b];
    if (edges.src[a] != edges.src[b]) return edges.src[a] < edges.src[b];
    return edges.dst[a] < edges.dst[b];
  });
  return order;
}

namespace {

EdgeList select_edges(const EdgeList& edges, const std::vector<std::size_t>& idx) {
  EdgeList out;
  for (std::size_t i : idx) {
    out.push_back(edges.src[i], edges.dst[i]);
    out.weight.push_back(edges.weight[i]);
  }
  return out;
}

}  // namespace

EdgeList rank_edges(const Explanation& expl) { return select_edges(expl.edges, edge_ranking(expl.edges)); }

Explanation top_percentile_subgraph(const Explanation& expl, double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0)) {
    throw ConfigError("percentile must lie in (0, 100], got " + std::to_string(percentile));
  }
  if (expl.edges.empty()) throw ConfigError("cannot take a subgraph of an explanation without edges");
  const double exact = static_cast<double>(expl.edges.size()) * percentile / 100.0;
  const auto keep = std::min(expl.edges.size(), static_cast<std::size_t>(std::ceil(exact - 1e-9)));
  std::vector<std::size_t> order = edge_ranking(expl.edges);
  order.resize(std::max<std::size_t>(1, keep));

  Explanation out;
  out.image_id = expl.image_id;
  out.prediction = expl.prediction;
  out.edges = select_edges(expl.edges, order);
  std::set<int> used(out.edges.src.begin(), out.edges.src.end());
  used.insert(out.edges.dst.begin(), out.edges.dst.end());
  for (const auto& n : expl.nodes) {
    if (used.count(n.id)) out.nodes.push_back(n);
  }
  return out;
}

double round6(double x) {
  const double r = std::round(x * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;  // no negative zero
}

json explanation_to_json(const Explanation& expl) {
  json pred{{"task", to_string(expl.prediction.task)}};
  if (expl.prediction.task == Task::Classification) {
    // Derived fields come from the rounded logits so a re-export is byte-identical.
    Prediction rounded = expl.prediction;
    for (double& v : rounded.logits) v = round6(v);
    json probs = json::array();
    for (double v : rounded.probabilities()) probs.push_back(round6(v));
    pred["logits"] = rounded.logits;
    pred["probabilities"] = probs;
    pred["class"] = rounded.predicted_class();
  } else {
    pred["value"] = round6(expl.prediction.value);
  }
  json nodes = json::array();
  for (const auto& n : expl.nodes) {
    nodes.push_back({{"id", n.id},
                     {"row", n.row},
                     {"col", n.col},
                     {"px_rect", {{"row0", n.px.row0}, {"col0", n.px.col0}, {"row1", n.px.row1}, {"col1", n.px.col1}}}});
  }
  json edges = json::array();
  for (std::size_t e = 0; e < expl.edges.size(); ++e) {
    edges.push_back({{"src", expl.edges.src[e]}, {"dst", expl.edges.dst[e]}, {"p", round6(expl.edges.weight[e])}});
  }
  return json{{"image_id", expl.image_id}, {"prediction", pred}, {"nodes", nodes}, {"edges", edges}};
}

Explanation explanation_from_json(const json& j) {
  Explanation e;
  try {
    e.image_id = j.at("image_id").get<std::string>();
    const json& pred = j.at("prediction");
    e.prediction.task = task_from_string(pred.at("task").get<std::string>());
    if (e.prediction.task == Task::Classification) {
      e.prediction.logits = pred.at("logits").get<std::vector<double>>();
    } else {
      e.prediction.value = pred.at("value").get<double>();
    }
    for (const auto& n : j.at("nodes")) {
      const json& r = n.at("px_rect");
      e.nodes.push_back({n.at("id").get<int>(), n.at("row").get<int>(), n.at("col").get<int>(),
                         PixelRect{r.at("row0").get<int>(), r.at("col0").get<int>(), r.at("row1").get<int>(),
                                   r.at("col1").get<int>()}});
    }
    for (const auto& ed : j.at("edges")) {
      e.edges.push_back(ed.at("src").get<int>(), ed.at("dst").get<int>());
      e.edges.weight.push_back(ed.at("p").get<double>());
    }
  } catch (const json::exception& ex) {
    throw DataError(std::string("malformed explanation: ") + ex.what());
  }
  return e;
}

void export_json(const Explanation& expl, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << explanation_to_json(expl).dump(2) << '\n';
  if (!out) throw DataError("failed writing '" + path + "'");
}

Explanation import_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw DataError("malformed explanation '" + path + "': " + ex.what());
  }
  return explanation_from_json(j);
}

Image render_overlay_image(const Image& image, const Explanation& expl, const OverlayStyle& style) {
  for (const auto& n : expl.nodes) {
    if (n.px.row0 < 0 || n.px.col0 < 0 || n.px.row1 > image.height || n.px.col1 > image.width) {
      throw ConfigError("explanation node " + std::to_string(n.id) + " lies outside the image");
    }
  }
  Image out = image;
  if (out.channels() == 1) {
    Matrix rgb(out.data.rows(), 3);
    for (int c = 0; c < 3; ++c) rgb.col(c) = out.data.col(0);
    out.data = rgb;
  } else if (out.channels() != 3) {
    throw ConfigError("overlay needs a 1- or 3-channel image");
  }

  // Undirected pairs with the larger p of both directions.
  std::map<std::pair<int, int>, double> pairs;
  for (std::size_t e = 0; e < expl.edges.size(); ++e) {
    const int a = std::min(expl.edges.src[e], expl.edges.dst[e]);
    const int b = std::max(expl.edges.src[e], expl.edges.dst[e]);
    double& p = pairs[{a, b}];
    p = std::max(p, expl.edges.weight[e]);
  }
  double max_p = 0.0;
  for (const auto& [k, p] : pairs) max_p = std::max(max_p, p);

  std::vector<std::pair<double, std::pair<int, int>>> segments;
  for (const auto& [k, p] : pairs) segments.push_back({p, k});
  std::stable_sort(segments.begin(), segments.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

  auto center = [&](int id) {
    const ExplanationNode* n = expl.node(id);
    if (!n) throw ConfigError("edge endpoint " + std::to_string(id) + " has no node entry");
    return std::pair<int, int>{(n->px.row0 + n->px.row1) / 2, (n->px.col0 + n->px.col1) / 2};
  };
  for (const auto& [p, k] : segments) {
    const auto [y0, x0] = center(k.first);
    const auto [y1, x1] = center(k.second);
    draw_line(out, y0, x0, y1, x1, style.edge_color, max_p > 0.0 ? p / max_p : 0.0);
  }
  for (const auto& n : expl.nodes) {
    const auto [cy, cx] = center(n.id);
    fill_rect(out, std::max(0, cy - style.node_radius), std::max(0, cx - style.node_radius),
              std::min(out.height, cy + style.node_radius + 1), std::min(out.width, cx + style.node_radius + 1),
              style.node_color);
  }
  return out;
}

void render_overlay(const Image& image, const Explanation& expl, const std::string& path, const OverlayStyle& style) {
  write_png(path, render_overlay_image(image, expl, style));
}

}  // namespace iwivig
