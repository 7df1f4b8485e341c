// SPDX-License-Identifier: Apache-2.0

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <iomanip>

#include "ctlab/errors.hpp"
#include "ctlab/scenes.hpp"

namespace ctlab {

namespace fs = std::filesystem;

void write_png(const Image& image, const fs::path& path) {
  std::vector<png_byte> rgb(static_cast<std::size_t>(image.height) * image.width * 3);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(image.at(c, y, x)), 0.0, 1.0);
        rgb[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, rgb.data(), 0, nullptr)) {
    throw IoError("cannot write " + path.string() + ": " + png.message);
  }
}

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw IoError("cannot read " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> rgb(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode " + path.string() + ": " + png.message);
  }
  Image out(static_cast<int>(png.height), static_cast<int>(png.width));
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(c, y, x) = static_cast<float>(rgb[(static_cast<std::size_t>(y) * out.width + x) * 3 + c]) / 255.0f;
      }
    }
  }
  return out;
}

std::string image_name(std::size_t index) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << index << ".png";
  return os.str();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace

void write_pools(const SamplePools& pools, const fs::path& root) {
  const auto& vocab = pools.config.vocabulary;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());

  nlohmann::json counts = nlohmann::json::object();
  for (PoolTag tag : {PoolTag::kLabeled, PoolTag::kUnlabeled, PoolTag::kTest}) {
    const auto& scenes = pools.pool(tag);
    const fs::path dir = root / "pools" / pool_name(tag);
    fs::create_directories(dir / "images", ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const std::string name = image_name(i);
      write_png(scenes[i].image, dir / "images" / name);
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : scenes[i].objects) {
        boxes.push_back({{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2},
                         {"category", vocab.name(*b.category)}});
      }
      entries.push_back({{"image", name}, {"boxes", boxes}});
    }
    write_text(dir / "annotations.json", entries.dump(1) + "\n");
    counts[pool_name(tag)] = scenes.size();
  }

  nlohmann::json meta = {
      {"format", "ctlab.pools/v1"},
      {"seed", pools.seed},
      {"vocabulary", {{"known", vocab.known}, {"unknown", vocab.unknown}}},
      {"counts", counts},
      {"shift", {{"brightness_offset", pools.config.brightness_offset},
                 {"noise_scale", pools.config.noise_scale},
                 {"labeled_brightness", pools.config.labeled_brightness},
                 {"labeled_noise", pools.config.labeled_noise}}},
      {"dataset", pools.config.to_json()},
  };
  write_text(root / "meta.json", meta.dump(2) + "\n");
}

SamplePools read_pools(const fs::path& root) {
  if (!fs::exists(root / "meta.json")) throw IoError("no dataset at " + root.string() + " (meta.json missing)");
  const auto meta = read_json(root / "meta.json");
  SamplePools pools;
  try {
    pools.config = DatasetConfig::from_json(meta.at("dataset"));
    pools.seed = meta.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("meta.json: " + std::string(e.what()));
  }
  const auto& vocab = pools.config.vocabulary;

  for (PoolTag tag : {PoolTag::kLabeled, PoolTag::kUnlabeled, PoolTag::kTest}) {
    const fs::path dir = root / "pools" / pool_name(tag);
    const auto entries = read_json(dir / "annotations.json");
    std::vector<Scene>& scenes = tag == PoolTag::kLabeled     ? pools.labeled
                                 : tag == PoolTag::kUnlabeled ? pools.unlabeled
                                                              : pools.test;
    scenes.reserve(entries.size());
    for (const auto& e : entries) {
      Scene s;
      s.tag = tag;
      try {
        s.image = read_png(dir / "images" / e.at("image").get<std::string>());
        for (const auto& b : e.at("boxes")) {
          BoundingBox box = BoundingBox::make(b.at("x1").get<double>(), b.at("y1").get<double>(),
                                              b.at("x2").get<double>(), b.at("y2").get<double>(),
                                              vocab.id(b.at("category").get<std::string>()));
          s.objects.push_back(box);
          if (tag != PoolTag::kUnlabeled && vocab.is_known(*box.category)) s.annotations.push_back(box);
        }
      } catch (const nlohmann::json::exception& ex) {
        throw IoError(dir.string() + "/annotations.json: " + ex.what());
      } catch (const InputError& ex) {
        throw IoError(dir.string() + "/annotations.json: " + ex.what());
      }
      if (tag == PoolTag::kLabeled && s.has_unknown(vocab)) {
        throw IoError("labeled pool contains an unknown-category annotation");
      }
      scenes.push_back(std::move(s));
    }
  }
  return pools;
}

}  // namespace ctlab
