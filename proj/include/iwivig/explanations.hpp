#pragma once

#include "iwivig/graph.hpp"
#include "iwivig/image.hpp"
#include "iwivig/model.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <utility>
#include <vector>

namespace iwivig {

struct ExplanationNode {
  int id = 0;  // stage-4 node index within the image, row * side + col
  int row = 0;
  int col = 0;
  PixelRect px;
};

// Edge probabilities of one image's stage-4 graph, with each node's pixel
// patch. `edges.weight` holds p.
struct Explanation {
  std::string image_id;
  Prediction prediction;
  std::vector<ExplanationNode> nodes;
  EdgeList edges;

  const ExplanationNode* node(int id) const;
};

// Builds image `b`'s explanation from a forward pass.
Explanation explanation_from_forward(const ForwardResult& result, int b, int grid_side, int px_per_node,
                                     const std::string& image_id, Task task);

// One evaluation-mode forward pass; no extra backward pass.
std::pair<Prediction, Explanation> predict_with_explanation(const Model& model, const Image& image,
                                                            const std::string& image_id = "");

// Edge order by p descending, ties by (src, dst) ascending.
std::vector<std::size_t> edge_ranking(const EdgeList& edges);
EdgeList rank_edges(const Explanation& expl);

// Keeps the ceil(|E| * percentile / 100) highest-ranked edges, in rank
// order, and only the nodes they touch.
Explanation top_percentile_subgraph(const Explanation& expl, double percentile);

// Canonical JSON: sorted keys, reals rounded to 6 decimals.
nlohmann::json explanation_to_json(const Explanation& expl);
Explanation explanation_from_json(const nlohmann::json& j);
void export_json(const Explanation& expl, const std::string& path);
Explanation import_json(const std::string& path);

double round6(double x);

struct OverlayStyle {
  Rgb edge_color{1.0, 0.85, 0.1};
  Rgb node_color{0.1, 1.0, 0.3};
  int node_radius = 2;  // marker is a (2r+1)-px square
};

// Draws one segment per undirected node pair (max p of the two directions)
// between patch centers, opacity p / max p, plus a marker at each node.
Image render_overlay_image(const Image& image, const Explanation& expl, const OverlayStyle& style = {});
void render_overlay(const Image& image, const Explanation& expl, const std::string& path,
                    const OverlayStyle& style = {});

}  // namespace iwivig
