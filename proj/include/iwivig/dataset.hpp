#pragma once

#include "iwivig/config.hpp"
#include "iwivig/graph.hpp"
#include "iwivig/image.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace iwivig {

struct Sample {
  std::string id;
  Image image;
  int label = 0;      // classification
  double target = 0;  // regression
  std::optional<std::array<int, 2>> marker_nodes;  // stage-4 node ids of the planted pair
};

struct Dataset {
  Task task = Task::Classification;
  int num_classes = 2;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

struct ManifestRecord {
  std::string image;  // path relative to the manifest directory
  int label = 0;
  double target = 0.0;
  std::optional<std::array<int, 2>> marker_nodes;
  std::vector<PixelRect> marker_px;
};

struct ManifestSplit {
  std::string name;
  std::vector<ManifestRecord> records;
};

struct DatasetManifest {
  int version = 1;
  Task task = Task::Classification;
  int num_classes = 2;
  int input_side = 0;
  std::vector<ManifestSplit> splits;

  const ManifestSplit& split(const std::string& name) const;
  // Throws DataError if any image path appears in two splits.
  void validate_disjoint() const;
};

inline constexpr int kManifestVersion = 1;

DatasetManifest read_manifest(const std::string& path);
// Single-line JSON document.
void write_manifest(const DatasetManifest& manifest, const std::string& path);

struct PlantedSample {
  Image image;
  int label = 0;
  std::array<int, 2> marker_nodes{};
  std::array<PixelRect, 2> marker_px{};
};

inline constexpr int kMarkerSide = 16;

// Background and marker variation of the planted images.
struct PlantedStyle {
  double base_lo = 0.35;  // background gray level range
  double base_hi = 0.65;
  double tint = 0.03;      // per-channel offset bound
  double wave_amp_lo = 0.02;
  double wave_amp_hi = 0.07;
  double pixel_noise = 0.05;   // uniform per-pixel noise bound
  double color_jitter = 0.05;  // per-channel marker color offset bound
  int marker_grid = 1;          // marker corners snap to multiples of this many px
};

// Textured background with two 16-px markers inside two distinct stage-3
// window blocks, each red or blue; label 1 iff the colors match. Each
// marker sits fully inside one stage-4 patch of its block.
PlantedSample make_planted_sample(int input_side, int window_side, std::uint64_t seed,
                                  const PlantedStyle& style = {});

// Writes images/<index>.png plus manifest.json under out_dir with a
// 60/20/20 train/val/test split. Deterministic in `seed`.
DatasetManifest generate_planted_dataset(int n, int input_side, std::uint64_t seed, const std::string& out_dir,
                                         int window_side = 4, const PlantedStyle& style = {});

// Reads a PNG, resizes it to input_side x input_side, and min-max normalizes it.
Image load_image(const std::string& path, int input_side);

// Loads one split: reads each image, resizes to input_side, and applies
// per-image min-max normalization.
Dataset load_folder_dataset(const std::string& manifest_path, const std::string& split, int input_side);

}  // namespace iwivig
