// SPDX-License-Identifier: Apache-2.0

#include "ctlab/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ctlab/errors.hpp"
#include "ctlab/json_util.hpp"
#include "ctlab/rng.hpp"

namespace ctlab {

namespace {

constexpr double kTintRange = 0.03;

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

bool point_in_polygon(double px, double py, const std::vector<std::pair<double, double>>& poly) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

std::vector<std::pair<double, double>> star_polygon(double cx, double cy, double r) {
  std::vector<std::pair<double, double>> pts;
  const double inner = 0.45 * r;
  for (int k = 0; k < 10; ++k) {
    const double rad = (k % 2 == 0) ? r : inner;
    const double ang = -std::numbers::pi / 2 + k * std::numbers::pi / 5;
    pts.emplace_back(cx + rad * std::cos(ang), cy + rad * std::sin(ang));
  }
  return pts;
}

/// Coverage test at a pixel centre for a shape inscribed in `box`.
bool shape_contains(ShapeKind kind, const BoundingBox& box, double px, double py,
                    const std::vector<std::pair<double, double>>& star) {
  const double cx = box.center_x();
  const double cy = box.center_y();
  const double r = 0.5 * box.width();
  const double dx = px - cx;
  const double dy = py - cy;
  switch (kind) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare:
      return true;
    case ShapeKind::kTriangle: {
      const double t = (py - box.y1) / box.height();
      return std::abs(dx) <= t * 0.5 * box.width();
    }
    case ShapeKind::kCross: {
      const double arm = box.width() / 6.0;
      return std::abs(dx) <= arm || std::abs(dy) <= arm;
    }
    case ShapeKind::kStar:
      return point_in_polygon(px, py, star);
    case ShapeKind::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
  }
  return false;
}

bool overlaps_any(const BoundingBox& box, const std::vector<BoundingBox>& placed) {
  for (const auto& p : placed) {
    // One pixel of clearance between objects.
    if (box.x1 < p.x2 + 1 && p.x1 < box.x2 + 1 && box.y1 < p.y2 + 1 && p.y1 < box.y2 + 1) return true;
  }
  return false;
}

}  // namespace

ShapeKind shape_from_name(const std::string& name) {
  if (name == "circle") return ShapeKind::kCircle;
  if (name == "square") return ShapeKind::kSquare;
  if (name == "triangle") return ShapeKind::kTriangle;
  if (name == "cross") return ShapeKind::kCross;
  if (name == "star") return ShapeKind::kStar;
  if (name == "ring") return ShapeKind::kRing;
  throw ConfigError("unknown shape category '" + name + "'");
}

const std::string& CategoryVocabulary::name(int id) const {
  if (id < 0 || id >= total()) throw InputError("category id out of range: " + std::to_string(id));
  return id < n() ? known[id] : unknown[id - n()];
}

int CategoryVocabulary::id(const std::string& category) const {
  for (int i = 0; i < total(); ++i) {
    if (name(i) == category) return i;
  }
  throw InputError("category '" + category + "' not in vocabulary");
}

void CategoryVocabulary::validate() const {
  if (known.size() < 2) throw ConfigError("vocabulary needs at least two known categories");
  for (const auto& k : known) {
    shape_from_name(k);
    if (std::find(unknown.begin(), unknown.end(), k) != unknown.end()) {
      throw ConfigError("category '" + k + "' is both known and unknown");
    }
  }
  for (const auto& u : unknown) shape_from_name(u);
  auto all = known;
  all.insert(all.end(), unknown.begin(), unknown.end());
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
    throw ConfigError("duplicate category name in vocabulary");
  }
}

const char* pool_name(PoolTag tag) {
  switch (tag) {
    case PoolTag::kLabeled:
      return "labeled";
    case PoolTag::kUnlabeled:
      return "unlabeled";
    case PoolTag::kTest:
      return "test";
  }
  return "?";
}

void DatasetConfig::validate() const {
  vocabulary.validate();
  if (n_labeled < 0 || n_unlabeled < 0 || n_test < 0) throw ConfigError("negative pool size");
  if (image_size < 32 || image_size % 8 != 0) {
    throw ConfigError("image_size must be a multiple of 8 and at least 32");
  }
  if (!(unknown_rate >= 0.0 && unknown_rate <= 1.0)) throw ConfigError("unknown_rate must lie in [0, 1]");
  if (unknown_rate > 0.0 && vocabulary.unknown.empty()) {
    throw ConfigError("unknown_rate > 0 requires unknown categories");
  }
  if (min_known_objects < 1 || max_known_objects < min_known_objects) {
    throw ConfigError("known object counts must satisfy 1 <= min <= max");
  }
  if (min_unknown_objects < 1 || max_unknown_objects < min_unknown_objects) {
    throw ConfigError("unknown object counts must satisfy 1 <= min <= max");
  }
  if (min_object_size < 4 || max_object_size < min_object_size || max_object_size > image_size) {
    throw ConfigError("object sizes must satisfy 4 <= min <= max <= image_size");
  }
  if (labeled_noise < 0.0 || noise_scale < 0.0) throw ConfigError("noise amplitudes must be >= 0");
  if (scene_brightness_jitter < 0.0) throw ConfigError("scene_brightness_jitter must be >= 0");
  const double hi = labeled_brightness + brightness_offset + scene_brightness_jitter + kTintRange;
  const double lo = labeled_brightness - scene_brightness_jitter - kTintRange;
  if (lo < 0.0 || hi > 1.0) throw ConfigError("background levels leave [0, 1]");
  if (min_contrast < 0.0 || min_contrast > 0.45) throw ConfigError("min_contrast must lie in [0, 0.45]");
}

nlohmann::json DatasetConfig::to_json() const {
  return {{"image_size", image_size},
          {"n_labeled", n_labeled},
          {"n_unlabeled", n_unlabeled},
          {"n_test", n_test},
          {"known_categories", vocabulary.known},
          {"unknown_categories", vocabulary.unknown},
          {"unknown_rate", unknown_rate},
          {"min_known_objects", min_known_objects},
          {"max_known_objects", max_known_objects},
          {"min_unknown_objects", min_unknown_objects},
          {"max_unknown_objects", max_unknown_objects},
          {"min_object_size", min_object_size},
          {"max_object_size", max_object_size},
          {"labeled_brightness", labeled_brightness},
          {"brightness_offset", brightness_offset},
          {"labeled_noise", labeled_noise},
          {"noise_scale", noise_scale},
          {"scene_brightness_jitter", scene_brightness_jitter},
          {"min_contrast", min_contrast}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
  constexpr const char* ctx = "dataset";
  require_known_keys(j,
                     {"image_size", "n_labeled", "n_unlabeled", "n_test", "known_categories",
                      "unknown_categories", "unknown_rate", "min_known_objects", "max_known_objects",
                      "min_unknown_objects", "max_unknown_objects", "min_object_size",
                      "max_object_size", "labeled_brightness", "brightness_offset", "labeled_noise",
                      "noise_scale", "scene_brightness_jitter", "min_contrast"},
                     ctx);
  DatasetConfig c;
  read_opt(j, "image_size", c.image_size, ctx);
  read_opt(j, "n_labeled", c.n_labeled, ctx);
  read_opt(j, "n_unlabeled", c.n_unlabeled, ctx);
  read_opt(j, "n_test", c.n_test, ctx);
  read_opt(j, "known_categories", c.vocabulary.known, ctx);
  read_opt(j, "unknown_categories", c.vocabulary.unknown, ctx);
  read_opt(j, "unknown_rate", c.unknown_rate, ctx);
  read_opt(j, "min_known_objects", c.min_known_objects, ctx);
  read_opt(j, "max_known_objects", c.max_known_objects, ctx);
  read_opt(j, "min_unknown_objects", c.min_unknown_objects, ctx);
  read_opt(j, "max_unknown_objects", c.max_unknown_objects, ctx);
  read_opt(j, "min_object_size", c.min_object_size, ctx);
  read_opt(j, "max_object_size", c.max_object_size, ctx);
  read_opt(j, "labeled_brightness", c.labeled_brightness, ctx);
  read_opt(j, "brightness_offset", c.brightness_offset, ctx);
  read_opt(j, "labeled_noise", c.labeled_noise, ctx);
  read_opt(j, "noise_scale", c.noise_scale, ctx);
  read_opt(j, "scene_brightness_jitter", c.scene_brightness_jitter, ctx);
  read_opt(j, "min_contrast", c.min_contrast, ctx);
  c.validate();
  return c;
}

bool Scene::has_unknown(const CategoryVocabulary& vocab) const {
  return std::any_of(objects.begin(), objects.end(),
                     [&](const BoundingBox& b) { return b.category && !vocab.is_known(*b.category); });
}

const std::vector<Scene>& SamplePools::pool(PoolTag tag) const {
  switch (tag) {
    case PoolTag::kLabeled:
      return labeled;
    case PoolTag::kUnlabeled:
      return unlabeled;
    case PoolTag::kTest:
      return test;
  }
  return labeled;
}

Scene generate_scene(const DatasetConfig& config, PoolTag tag, std::uint64_t scene_seed) {
  Rng rng(scene_seed);
  const int size = config.image_size;
  const bool shifted = tag != PoolTag::kLabeled;
  const auto& vocab = config.vocabulary;

  const double level = config.labeled_brightness + (shifted ? config.brightness_offset : 0.0) +
                       uniform(rng, -config.scene_brightness_jitter, config.scene_brightness_jitter);
  const double noise = config.labeled_noise * (shifted ? config.noise_scale : 1.0);
  double tint[3];
  for (double& t : tint) t = uniform(rng, -kTintRange, kTintRange);

  std::vector<double> canvas(static_cast<std::size_t>(3) * size * size);
  for (int c = 0; c < 3; ++c) {
    std::fill_n(canvas.begin() + static_cast<std::ptrdiff_t>(c) * size * size, size * size,
                level + tint[c]);
  }

  // Unknown objects are placed first so that a contaminated scene really
  // receives at least one of them.
  std::vector<int> categories;
  if (shifted && !vocab.unknown.empty() && bernoulli(rng, config.unknown_rate)) {
    const int k = uniform_int(rng, config.min_unknown_objects, config.max_unknown_objects);
    for (int i = 0; i < k; ++i) {
      categories.push_back(vocab.n() + uniform_int(rng, 0, static_cast<int>(vocab.unknown.size()) - 1));
    }
  }
  const int known_count = uniform_int(rng, config.min_known_objects, config.max_known_objects);
  for (int i = 0; i < known_count; ++i) categories.push_back(uniform_int(rng, 0, vocab.n() - 1));

  Scene scene;
  scene.tag = tag;
  for (int category : categories) {
    BoundingBox box;
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const int s = uniform_int(rng, config.min_object_size, config.max_object_size);
      const int x1 = uniform_int(rng, 0, size - s);
      const int y1 = uniform_int(rng, 0, size - s);
      box = BoundingBox{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x1 + s),
                        static_cast<double>(y1 + s), category, {}};
      placed = !overlaps_any(box, scene.objects);
    }
    if (!placed) continue;

    double color[3];
    bool contrast_ok = false;
    for (int attempt = 0; attempt < 100 && !contrast_ok; ++attempt) {
      for (double& v : color) v = uniform(rng, 0.0, 1.0);
      contrast_ok = std::abs((color[0] + color[1] + color[2]) / 3.0 - level) >= config.min_contrast;
    }
    if (!contrast_ok) std::fill(std::begin(color), std::end(color), level > 0.5 ? 0.05 : 0.95);

    const ShapeKind kind = shape_from_name(vocab.name(category));
    const auto star = star_polygon(box.center_x(), box.center_y(), 0.5 * box.width());
    for (int y = static_cast<int>(box.y1); y < static_cast<int>(box.y2); ++y) {
      for (int x = static_cast<int>(box.x1); x < static_cast<int>(box.x2); ++x) {
        if (!shape_contains(kind, box, x + 0.5, y + 0.5, star)) continue;
        for (int c = 0; c < 3; ++c) canvas[(static_cast<std::size_t>(c) * size + y) * size + x] = color[c];
      }
    }
    scene.objects.push_back(box);
  }

  std::normal_distribution<double> gauss(0.0, 1.0);
  scene.image = Image(size, size);
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double n = noise > 0.0 ? noise * gauss(rng) : 0.0;
    scene.image.data[i] = quantize(canvas[i] + n);
  }

  switch (tag) {
    case PoolTag::kLabeled:
    case PoolTag::kTest:
      for (const auto& b : scene.objects) {
        if (vocab.is_known(*b.category)) scene.annotations.push_back(b);
      }
      break;
    case PoolTag::kUnlabeled:
      break;
  }
  return scene;
}

SamplePools generate_pools(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  SamplePools pools;
  pools.config = config;
  pools.seed = seed;

  auto fill = [&](std::vector<Scene>& out, int count, PoolTag tag, Stream stream) {
    out.resize(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < count; ++i) {
      out[i] = generate_scene(config, tag, derive_seed(seed, stream, static_cast<std::uint64_t>(i)));
    }
  };
  fill(pools.labeled, config.n_labeled, PoolTag::kLabeled, Stream::kLabeledPool);
  fill(pools.unlabeled, config.n_unlabeled, PoolTag::kUnlabeled, Stream::kUnlabeledPool);
  fill(pools.test, config.n_test, PoolTag::kTest, Stream::kTestPool);
  return pools;
}

PoolStatistics pool_statistics(const std::vector<Scene>& scenes, PoolTag tag,
                               const CategoryVocabulary& vocab) {
  PoolStatistics stats;
  stats.tag = tag;
  stats.scenes = static_cast<int>(scenes.size());
  stats.objects_per_category.assign(static_cast<std::size_t>(vocab.total()), 0);
  for (const auto& s : scenes) {
    if (s.has_unknown(vocab)) ++stats.scenes_with_unknown;
    for (const auto& b : s.objects) ++stats.objects_per_category[*b.category];
  }
  return stats;
}

double mean_background_intensity(const std::vector<Scene>& scenes) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : scenes) {
    const Image& im = s.image;
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        const double px = x + 0.5;
        const double py = y + 0.5;
        const bool covered = std::any_of(s.objects.begin(), s.objects.end(), [&](const BoundingBox& b) {
          return px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2;
        });
        if (covered) continue;
        for (int c = 0; c < Image::kChannels; ++c) sum += im.at(c, y, x);
        count += Image::kChannels;
      }
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : 0.0;
}

// ---------------------------------------------------------------------------

Image hflip(const Image& image) {
  Image out(image.height, image.width);
  for (int c = 0; c < Image::kChannels; ++c) {
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
    }
  }
  return out;
}

WeakAugParams WeakAugParams::draw(std::uint64_t seed) {
  Rng rng(seed);
  WeakAugParams p;
  p.flip = bernoulli(rng, 0.5);
  p.brightness = uniform(rng, 0.95, 1.05);
  return p;
}

Image apply_weak(const Image& image, const WeakAugParams& params) {
  Image out = params.flip ? hflip(image) : image;
  if (params.brightness != 1.0) {
    for (float& v : out.data) v = static_cast<float>(std::clamp(v * params.brightness, 0.0, 1.0));
  }
  return out;
}

Image weak_augment(const Image& image, std::uint64_t seed) {
  return apply_weak(image, WeakAugParams::draw(seed));
}

StrongAugParams StrongAugParams::draw(std::uint64_t seed, int height, int width) {
  Rng rng(seed);
  StrongAugParams p;
  p.brightness = uniform(rng, 0.6, 1.4);
  p.contrast = uniform(rng, 0.6, 1.4);
  p.noise_sigma = uniform(rng, 0.0, 0.1);
  p.noise_seed = rng();
  const int count = uniform_int(rng, 1, 3);
  const int max_side = std::max(2, std::min(height, width) / 4);
  for (int i = 0; i < count; ++i) {
    const int w = uniform_int(rng, 2, max_side);
    const int h = uniform_int(rng, 2, max_side);
    const int x1 = uniform_int(rng, 0, width - w);
    const int y1 = uniform_int(rng, 0, height - h);
    p.cutouts.push_back({x1, y1, x1 + w, y1 + h});
  }
  return p;
}

Image apply_strong(const Image& image, const StrongAugParams& params) {
  Image out = image;
  const std::size_t plane = image.plane();
  for (int c = 0; c < Image::kChannels; ++c) {
    float* ch = out.data.data() + c * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += ch[i];
    mean /= static_cast<double>(plane);
    if (params.brightness != 1.0 || params.contrast != 1.0) {
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = ((ch[i] - mean) * params.contrast + mean) * params.brightness;
        ch[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  if (params.noise_sigma > 0.0) {
    Rng rng(params.noise_seed);
    std::normal_distribution<double> gauss(0.0, params.noise_sigma);
    for (float& v : out.data) v = static_cast<float>(std::clamp(v + gauss(rng), 0.0, 1.0));
  }
  if (!params.cutouts.empty()) {
    for (int c = 0; c < Image::kChannels; ++c) {
      const float* ch = out.data.data() + c * plane;
      double mean = 0.0;
      for (std::size_t i = 0; i < plane; ++i) mean += ch[i];
      const auto fill = static_cast<float>(mean / static_cast<double>(plane));
      for (const auto& r : params.cutouts) {
        for (int y = r.y1; y < r.y2; ++y) {
          for (int x = r.x1; x < r.x2; ++x) out.at(c, y, x) = fill;
        }
      }
    }
  }
  return out;
}

Image strong_augment(const Image& image, std::uint64_t seed) {
  return apply_strong(image, StrongAugParams::draw(seed, image.height, image.width));
}

}  // namespace ctlab
