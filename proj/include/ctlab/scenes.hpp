// SPDX-License-Identifier: Apache-2.0
//
// Synthetic open-scene detection benchmark: labeled / unlabeled / test pools of
// filled shapes with unknown-category contamination and a background shift
// between the labeled pool and the other two. Also the weak / strong
// augmentation pair used by the unsupervised branch.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctlab/boxes.hpp"
#include "ctlab/image.hpp"

namespace ctlab {

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross, kStar, kRing };

ShapeKind shape_from_name(const std::string& name);

/// Known categories take ids [0, n); unknown ones take [n, n + |unknown|).
struct CategoryVocabulary {
  std::vector<std::string> known;
  std::vector<std::string> unknown;

  int n() const { return static_cast<int>(known.size()); }
  int total() const { return static_cast<int>(known.size() + unknown.size()); }
  bool is_known(int id) const { return id >= 0 && id < n(); }
  const std::string& name(int id) const;
  int id(const std::string& name) const;
  void validate() const;
};

enum class PoolTag { kLabeled, kUnlabeled, kTest };

const char* pool_name(PoolTag tag);

struct DatasetConfig {
  int image_size = 64;
  int n_labeled = 200;
  int n_unlabeled = 2000;
  int n_test = 300;
  CategoryVocabulary vocabulary{{"circle", "square", "triangle"}, {"cross", "star", "ring"}};
  /// Probability that an unlabeled (or test) scene contains >= 1 unknown object.
  double unknown_rate = 0.5;
  int min_known_objects = 1;
  int max_known_objects = 3;
  int min_unknown_objects = 1;
  int max_unknown_objects = 2;
  int min_object_size = 8;
  int max_object_size = 24;
  double labeled_brightness = 0.35;
  /// Added to the background level of the unlabeled and test pools.
  double brightness_offset = 0.15;
  double labeled_noise = 0.03;
  /// Multiplies the sensor noise amplitude of the unlabeled and test pools.
  double noise_scale = 2.0;
  double scene_brightness_jitter = 0.05;
  /// Minimum luminance gap between an object and the background.
  double min_contrast = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetConfig from_json(const nlohmann::json& j);
};

/// One synthetic image. `annotations` is what the pool exposes to a consumer:
/// every object for labeled scenes (they only hold known categories), nothing
/// for unlabeled scenes, known objects only for test scenes. `objects` keeps
/// every drawn object, unknown ones included, for diagnostics.
struct Scene {
  Image image;
  std::vector<BoundingBox> annotations;
  std::vector<BoundingBox> objects;
  PoolTag tag = PoolTag::kLabeled;

  bool has_unknown(const CategoryVocabulary& vocab) const;
};

struct SamplePools {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;
  std::vector<Scene> test;

  const std::vector<Scene>& pool(PoolTag tag) const;
};

/// Deterministic in (config, seed); every scene draws from its own derived
/// seed so scenes are generated in parallel.
SamplePools generate_pools(const DatasetConfig& config, std::uint64_t seed);

/// Renders one scene; exposed for tests.
Scene generate_scene(const DatasetConfig& config, PoolTag tag, std::uint64_t scene_seed);

struct PoolStatistics {
  PoolTag tag = PoolTag::kLabeled;
  int scenes = 0;
  int scenes_with_unknown = 0;
  std::vector<int> objects_per_category;  // indexed by category id
  double contamination_rate() const {
    return scenes > 0 ? static_cast<double>(scenes_with_unknown) / scenes : 0.0;
  }
};

PoolStatistics pool_statistics(const std::vector<Scene>& scenes, PoolTag tag,
                               const CategoryVocabulary& vocab);

/// Mean intensity over pixels outside every object box.
double mean_background_intensity(const std::vector<Scene>& scenes);

// ---------------------------------------------------------------------------
// Augmentation

Image hflip(const Image& image);

struct WeakAugParams {
  bool flip = false;
  double brightness = 1.0;  // multiplicative, within [0.95, 1.05]

  static WeakAugParams draw(std::uint64_t seed);
};

Image apply_weak(const Image& image, const WeakAugParams& params);
Image weak_augment(const Image& image, std::uint64_t seed);

struct CutoutRect {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // half-open pixel ranges
};

struct StrongAugParams {
  double brightness = 1.0;   // within [0.6, 1.4]
  double contrast = 1.0;     // within [0.6, 1.4]
  double noise_sigma = 0.0;  // within [0, 0.1]
  std::uint64_t noise_seed = 0;
  std::vector<CutoutRect> cutouts;  // 1-3 rectangles, fully inside the image

  static StrongAugParams draw(std::uint64_t seed, int height, int width);
};

/// Photometric and cutout only; never moves geometry.
Image apply_strong(const Image& image, const StrongAugParams& params);
Image strong_augment(const Image& image, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk layout: <root>/meta.json and
// <root>/pools/<pool>/{images/NNNNN.png, annotations.json}

void write_pools(const SamplePools& pools, const std::filesystem::path& root);
SamplePools read_pools(const std::filesystem::path& root);

/// File name of scene `index` within its pool directory.
std::string image_name(std::size_t index);

void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

}  // namespace ctlab
