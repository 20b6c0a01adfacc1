#include "iwivig/dataset.hpp"

#include "iwivig/errors.hpp"
#include "iwivig/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

namespace iwivig {

namespace fs = std::filesystem;
using nlohmann::json;

const ManifestSplit& DatasetManifest::split(const std::string& name) const {
  for (const auto& s : splits) {
    if (s.name == name) return s;
  }
  throw DataError("manifest has no split named '" + name + "'");
}

void DatasetManifest::validate_disjoint() const {
  std::set<std::string> seen;
  for (const auto& s : splits) {
    for (const auto& r : s.records) {
      if (!seen.insert(r.image).second) {
        throw DataError("image '" + r.image + "' appears in more than one split");
      }
    }
  }
}

namespace {

json rect_json(const PixelRect& r) { return json::array({r.row0, r.col0, r.row1, r.col1}); }

PixelRect rect_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw DataError("pixel rectangle must be [row0, col0, row1, col1]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace

void write_manifest(const DatasetManifest& m, const std::string& path) {
  json splits = json::array();
  for (const auto& s : m.splits) {
    json records = json::array();
    for (const auto& r : s.records) {
      json jr{{"image", r.image}};
      if (m.task == Task::Classification) {
        jr["label"] = r.label;
      } else {
        jr["target"] = r.target;
      }
      if (r.marker_nodes) jr["marker_nodes"] = *r.marker_nodes;
      if (!r.marker_px.empty()) {
        json px = json::array();
        for (const auto& rect : r.marker_px) px.push_back(rect_json(rect));
        jr["marker_px"] = px;
      }
      records.push_back(jr);
    }
    splits.push_back(json{{"name", s.name}, {"records", records}});
  }
  json doc{{"version", m.version},
           {"task", to_string(m.task)},
           {"num_classes", m.num_classes},
           {"input_side", m.input_side},
           {"splits", splits}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest '" + path + "'");
  out << doc.dump() << '\n';
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path + "'");
  DatasetManifest m;
  try {
    json doc;
    in >> doc;
    m.version = doc.at("version").get<int>();
    if (m.version != kManifestVersion) {
      throw DataError("unsupported manifest version " + std::to_string(m.version));
    }
    m.task = task_from_string(doc.at("task").get<std::string>());
    m.num_classes = doc.value("num_classes", m.task == Task::Classification ? 2 : 1);
    m.input_side = doc.value("input_side", 0);
    for (const auto& js : doc.at("splits")) {
      ManifestSplit s;
      s.name = js.at("name").get<std::string>();
      for (const auto& jr : js.at("records")) {
        ManifestRecord r;
        r.image = jr.at("image").get<std::string>();
        if (m.task == Task::Classification) {
          if (!jr.contains("label") || !jr.at("label").is_number_integer()) {
            throw DataError("record '" + r.image + "' lacks an integer label for a classification task");
          }
          r.label = jr.at("label").get<int>();
          if (r.label < 0 || r.label >= m.num_classes) {
            throw DataError("record '" + r.image + "' has label " + std::to_string(r.label) + " outside [0, " +
                            std::to_string(m.num_classes) + ")");
          }
        } else {
          if (!jr.contains("target") || !jr.at("target").is_number()) {
            throw DataError("record '" + r.image + "' lacks a numeric target for a regression task");
          }
          r.target = jr.at("target").get<double>();
        }
        if (jr.contains("marker_nodes")) r.marker_nodes = jr.at("marker_nodes").get<std::array<int, 2>>();
        if (jr.contains("marker_px")) {
          for (const auto& jp : jr.at("marker_px")) r.marker_px.push_back(rect_from_json(jp));
        }
        s.records.push_back(std::move(r));
      }
      m.splits.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest '" + path + "': " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("malformed manifest '" + path + "': " + e.what());
  }
  m.validate_disjoint();
  return m;
}

PlantedSample make_planted_sample(int input_side, int window_side, std::uint64_t seed, const PlantedStyle& style) {
  if (input_side <= 0 || input_side % 64 != 0) {
    throw ConfigError("input_side must be a positive multiple of 64, got " + std::to_string(input_side));
  }
  Rng rng(seed);
  PlantedSample s;
  Image& img = s.image;
  img = Image(input_side, input_side, 3);

  // Low-frequency gray texture with a faint tint plus pixel noise.
  const double base = rng.uniform(style.base_lo, style.base_hi);
  std::array<double, 3> tint{rng.uniform(-style.tint, style.tint), rng.uniform(-style.tint, style.tint),
                            rng.uniform(-style.tint, style.tint)};
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::array<Wave, 4> waves{};
  for (auto& w : waves) {
    w.fy = rng.uniform(-6.0, 6.0) / input_side;
    w.fx = rng.uniform(-6.0, 6.0) / input_side;
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    w.amp = rng.uniform(style.wave_amp_lo, style.wave_amp_hi);
  }
  for (int y = 0; y < input_side; ++y) {
    for (int x = 0; x < input_side; ++x) {
      double v = base;
      for (const auto& w : waves) v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fy * y + w.fx * x) + w.phase);
      const double noise = rng.uniform(-style.pixel_noise, style.pixel_noise);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(v + tint[c] + noise, 0.0, 1.0);
    }
  }

  // Stage-3 window blocks are window_side * 16 px; stage-4 patches 32 px.
  const int block_px = window_side * 16;
  const int blocks_per_side = input_side / block_px;
  const int patches_per_block = block_px / 32;
  const int grid4 = input_side / 32;
  const int num_blocks = blocks_per_side * blocks_per_side;
  if (num_blocks < 2) throw ConfigError("planted dataset needs at least two stage-3 window blocks");
  if (style.marker_grid < 1 || (32 - kMarkerSide) % style.marker_grid != 0) {
    throw ConfigError("marker_grid must be a positive divisor of " + std::to_string(32 - kMarkerSide));
  }

  const int first = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_blocks)));
  int second = static_cast<int>(rng.below(static_cast<std::uint64_t>(num_blocks - 1)));
  if (second >= first) ++second;
  const std::array<int, 2> blocks{first, second};
  const std::array<Rgb, 2> palette{Rgb{0.85, 0.15, 0.15}, Rgb{0.15, 0.15, 0.85}};
  std::array<int, 2> colors{};
  for (int m = 0; m < 2; ++m) {
    const int br = blocks[m] / blocks_per_side;
    const int bc = blocks[m] % blocks_per_side;
    const int pr = br * patches_per_block + static_cast<int>(rng.below(static_cast<std::uint64_t>(patches_per_block)));
    const int pc = bc * patches_per_block + static_cast<int>(rng.below(static_cast<std::uint64_t>(patches_per_block)));
    const auto offsets = static_cast<std::uint64_t>((32 - kMarkerSide) / style.marker_grid + 1);
    const int oy = pr * 32 + style.marker_grid * static_cast<int>(rng.below(offsets));
    const int ox = pc * 32 + style.marker_grid * static_cast<int>(rng.below(offsets));
    colors[m] = static_cast<int>(rng.below(2));
    Rgb color = palette[colors[m]];
    for (double& c : color) c = std::clamp(c + rng.uniform(-style.color_jitter, style.color_jitter), 0.0, 1.0);
    fill_rect(img, oy, ox, oy + kMarkerSide, ox + kMarkerSide, color);
    s.marker_nodes[m] = pr * grid4 + pc;
    s.marker_px[m] = {oy, ox, oy + kMarkerSide, ox + kMarkerSide};
  }
  s.label = colors[0] == colors[1] ? 1 : 0;
  return s;
}

DatasetManifest generate_planted_dataset(int n, int input_side, std::uint64_t seed, const std::string& out_dir,
                                         int window_side, const PlantedStyle& style) {
  if (n < 10) throw ConfigError("planted dataset needs n >= 10 so every split is non-empty, got " + std::to_string(n));
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw DataError("cannot create '" + (root / "images").string() + "': " + ec.message());

  const int n_train = n * 6 / 10;
  const int n_val = n * 2 / 10;
  DatasetManifest m;
  m.version = kManifestVersion;
  m.task = Task::Classification;
  m.num_classes = 2;
  m.input_side = input_side;
  m.splits = {{"train", {}}, {"val", {}}, {"test", {}}};
  for (int i = 0; i < n; ++i) {
    const PlantedSample s = make_planted_sample(input_side, window_side, derive_seed(seed, static_cast<std::uint64_t>(i)), style);
    char name[32];
    std::snprintf(name, sizeof(name), "images/%05d.png", i);
    write_png((root / name).string(), s.image);
    ManifestRecord r;
    r.image = name;
    r.label = s.label;
    r.marker_nodes = s.marker_nodes;
    r.marker_px = {s.marker_px[0], s.marker_px[1]};
    const int split = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
    m.splits[split].records.push_back(std::move(r));
  }
  write_manifest(m, (root / "manifest.json").string());
  return m;
}

Image load_image(const std::string& path, int input_side) {
  return minmax_normalize(resize(read_png(path), input_side, input_side));
}

Dataset load_folder_dataset(const std::string& manifest_path, const std::string& split, int input_side) {
  const DatasetManifest m = read_manifest(manifest_path);
  const fs::path dir = fs::path(manifest_path).parent_path();
  Dataset ds;
  ds.task = m.task;
  ds.num_classes = m.num_classes;
  for (const auto& r : m.split(split).records) {
    const fs::path p = dir / r.image;
    if (!fs::exists(p)) throw DataError("record '" + r.image + "': file '" + p.string() + "' does not exist");
    Sample s;
    s.id = r.image;
    try {
      s.image = load_image(p.string(), input_side);
    } catch (const DataError& e) {
      throw DataError("record '" + r.image + "': " + e.what());
    }
    s.label = r.label;
    s.target = r.target;
    s.marker_nodes = r.marker_nodes;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace iwivig
