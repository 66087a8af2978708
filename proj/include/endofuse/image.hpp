#pragma once

#include <Eigen/Core>

#include <array>

namespace endofuse {

using Raster = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BitRaster = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Single-channel image; rows are image rows. Loaded images hold values in [0,1].
struct GrayImage {
  Raster pixels;

  Eigen::Index width() const { return pixels.cols(); }
  Eigen::Index height() const { return pixels.rows(); }
};

struct RgbImage {
  std::array<Raster, 3> channels;

  Eigen::Index width() const { return channels[0].cols(); }
  Eigen::Index height() const { return channels[0].rows(); }
};

/// Per-pixel region-of-interest membership.
struct RoiMask {
  BitRaster bits;

  Eigen::Index width() const { return bits.cols(); }
  Eigen::Index height() const { return bits.rows(); }
  Eigen::Index count() const { return bits.count(); }
};

// Rec. 601 luma.
inline GrayImage to_gray(const RgbImage& rgb) {
  return GrayImage{0.299 * rgb.channels[0] + 0.587 * rgb.channels[1] + 0.114 * rgb.channels[2]};
}

}  // namespace endofuse
