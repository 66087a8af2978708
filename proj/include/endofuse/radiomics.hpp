#pragma once

#include <Eigen/Core>

#include <array>
#include <span>
#include <string>
#include <vector>

#include "endofuse/feature_table.hpp"
#include "endofuse/image.hpp"

namespace endofuse::radiomics {

using Index = Eigen::Index;
using LevelRaster = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kDefaultLevels = 32;
inline constexpr Index kMinRegionPixels = 16;
inline constexpr const char* kExtractorVersion = "endofuse-radiomics 1.0";

/// Disk centred at ((H-1)/2, (W-1)/2) with radius radius_fraction * min(W,H)/2.
/// Throws ParameterError for images smaller than 8x8 or a fraction outside (0,1].
RoiMask make_central_mask(Index width, Index height, double radius_fraction = 0.5);

/// Exact complement of make_central_mask with the same arguments.
RoiMask make_peripheral_mask(Index width, Index height, double radius_fraction = 0.5);

/// Gray levels 1..num_levels on masked pixels, 0 elsewhere.
struct QuantizedRegion {
  LevelRaster levels;
  int num_levels = 0;

  Index count() const { return (levels > 0).count(); }
};

/// Fixed-count binning over the masked [min, max]; a constant region maps to level 1.
QuantizedRegion quantize(const GrayImage& img, const RoiMask& mask, int num_levels = kDefaultLevels);

/// Feature names paired with their values, in a fixed order.
struct FeatureVector {
  std::vector<std::string> names;
  Eigen::VectorXd values;

  double at(const std::string& name) const;
};

/// Pixel displacement (row, column) between neighbours.
struct Offset {
  int dy;
  int dx;
};

// 0, 45, 90 and 135 degrees at distance 1.
inline constexpr std::array<Offset, 4> kDirections{{{0, 1}, {-1, 1}, {-1, 0}, {-1, -1}}};

/// mean, variance, skewness, kurtosis, energy, entropy, min, max, median, range
/// over the masked pixels.
FeatureVector first_order_features(const GrayImage& img, const RoiMask& mask);

/// Symmetric co-occurrence matrix normalized per offset and averaged over the
/// offsets that contain at least one masked pair. Index (i-1, j-1) holds levels (i, j).
Eigen::MatrixXd glcm_matrix(const QuantizedRegion& q, std::span<const Offset> offsets = kDirections);

/// contrast, correlation, energy (ASM), homogeneity, entropy, dissimilarity.
FeatureVector glcm_features(const QuantizedRegion& q, std::span<const Offset> offsets = kDirections);
FeatureVector glcm_features_from_matrix(const Eigen::MatrixXd& p);

/// Run counts for one direction: (level-1, length-1) -> number of maximal runs.
Eigen::MatrixXd glrlm_matrix(const QuantizedRegion& q, Offset direction);

/// short-run emphasis, long-run emphasis, gray-level non-uniformity,
/// run-length non-uniformity, run percentage; averaged over directions.
FeatureVector glrlm_features(const QuantizedRegion& q, std::span<const Offset> directions = kDirections);
FeatureVector glrlm_features_from_matrix(const Eigen::MatrixXd& runs, Index pixel_count);

/// Zone counts: (level-1, size-1) -> number of 8-connected equal-level zones.
Eigen::MatrixXd glszm_matrix(const QuantizedRegion& q);

/// small-area emphasis, large-area emphasis, gray-level non-uniformity,
/// zone-size non-uniformity, zone percentage.
FeatureVector glszm_features(const QuantizedRegion& q);
FeatureVector glszm_features_from_matrix(const Eigen::MatrixXd& zones, Index pixel_count);

/// Discrete Laplacian-of-Gaussian kernel of half-width ceil(3 sigma), shifted to sum to 0.
Raster log_kernel(double sigma);

/// LoG response with reflect-101 borders. sigma must be 1 or 2.
GrayImage log_filter(const GrayImage& img, double sigma);

struct RadiomicsRecord {
  std::string image_id;
  FeatureVector features;
  std::string version = kExtractorVersion;
};

/// The 46 feature names produced by extract_record, in order.
const std::vector<std::string>& record_feature_names();

/// first-order + GLCM + GLRLM + GLSZM on the raw image, then first-order on the
/// sigma=1 and sigma=2 LoG responses. Throws RegionTooSmall when the mask has
/// fewer than 16 pixels and FeatureUndefined when a texture matrix is empty.
RadiomicsRecord extract_record(const GrayImage& img, const RoiMask& mask, std::string image_id = {},
                               int num_levels = kDefaultLevels);

/// Builds a table from records of one mask type. Labels are attached when given.
FeatureTable records_to_table(std::span<const RadiomicsRecord> records,
                              const std::vector<int>* labels = nullptr);

/// Side-by-side join on image_id with `central_` / `peripheral_` prefixes;
/// diagnostic (non-numeric) columns are dropped. Row order follows `central`.
FeatureTable merge_tables(const FeatureTable& central, const FeatureTable& peripheral);

}  // namespace endofuse::radiomics
