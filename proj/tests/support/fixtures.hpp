#pragma once

#include <chrono>
#include <filesystem>
#include <random>
#include <string>

#include "endofuse/image.hpp"
#include "endofuse/model.hpp"
#include "endofuse/radiomics.hpp"

namespace endofuse::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = std::filesystem::temp_directory_path() /
            ("endofuse-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

struct RandomRegion {
  GrayImage image;
  RoiMask mask;
  int levels;
};

/// 8x8 to 16x16 image with a few distinct intensities (so runs and zones form)
/// and a random mask: a blob, a speckle pattern, or their union.
inline RandomRegion random_region(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> side(8, 16), levels(2, 8), shades(2, 6), style(0, 2);
  const int h = side(rng), w = side(rng);
  const int k = shades(rng);
  std::uniform_int_distribution<int> shade(0, k - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  RandomRegion r{GrayImage{Raster(h, w)}, RoiMask{BitRaster::Constant(h, w, false)}, levels(rng)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) r.image.pixels(y, x) = shade(rng) / static_cast<double>(k - 1);

  const int s = style(rng);
  const double cy = u(rng) * h, cx = u(rng) * w, rad = 2.0 + u(rng) * (std::min(h, w) / 2.0);
  const double density = 0.3 + 0.6 * u(rng);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool blob = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= rad * rad;
      const bool speckle = u(rng) < density;
      r.mask.bits(y, x) = s == 0 ? blob : s == 1 ? speckle : (blob || speckle);
    }
  // Guarantee at least a couple of neighbouring pixels.
  r.mask.bits(h / 2, w / 2) = r.mask.bits(h / 2, w / 2 - 1) = true;
  r.mask.bits(h / 2 - 1, w / 2) = true;
  return r;
}

/// Tiny backbone used by the gradient and determinism checks.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.d_in = 5;
  c.d_embed = 4;
  c.mlp_hidden = 6;
  c.growth_rate = 4;
  c.blocks = 2;
  c.layers_per_block = 2;
  c.proj_dim = 4;
  c.num_classes = 3;
  c.input_side = 16;
  return c;
}

}  // namespace endofuse::testing
