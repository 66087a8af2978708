#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "endofuse/feature_table.hpp"
#include "endofuse/image.hpp"

namespace endofuse {

/// Decodes an 8-bit PNG (gray or RGB) into [0,1] channels; gray is replicated to
/// three channels. When side > 0 the image is resized to side x side.
RgbImage load_image(const std::filesystem::path& path, Eigen::Index side = 0);

void write_png(const RgbImage& image, const std::filesystem::path& path);

/// Bilinear resize with half-pixel centres; same-size input is returned unchanged.
RgbImage resize_bilinear(const RgbImage& image, Eigen::Index width, Eigen::Index height);

struct ManifestEntry {
  std::string path;  // as written in the manifest; doubles as image_id
  int label = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;
  std::filesystem::path base_dir;  // relative entry paths resolve against this

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::filesystem::path resolve(const ManifestEntry& e) const;
  std::vector<int> labels() const;
};

/// Parses a `path,label` CSV with header. Labels are class indices; with
/// num_classes unset the class count is max(label)+1.
DatasetManifest load_manifest(const std::filesystem::path& path, std::optional<int> num_classes = std::nullopt);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

struct SyntheticSpec {
  int classes = 4;
  int per_class = 50;
  Eigen::Index side = 64;
  std::uint64_t seed = 0;
};

struct SyntheticImage {
  std::string name;
  int label = 0;
  RgbImage image;  // values on the 8-bit grid
};

/// Deterministic textured images whose class sets stripe frequency, blob
/// density and contrast, so both texture statistics and CNN features separate
/// the classes. Output is class-interleaved: image i has label i % classes.
std::vector<SyntheticImage> synthesize_images(const SyntheticSpec& spec);

/// Writes the images as PNGs plus `manifest.csv` under out_dir.
DatasetManifest synthesize_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Images and normalized feature rows aligned by image_id.
struct Dataset {
  std::vector<std::string> ids;
  std::vector<int> labels;
  int num_classes = 0;
  Eigen::Index side = 0;
  Eigen::ArrayXf images;     // N x 3 x side x side, row-major
  Eigen::MatrixXd features;  // N x d
  std::vector<std::string> feature_columns;

  Eigen::Index size() const { return static_cast<Eigen::Index>(ids.size()); }
  Eigen::Index image_stride() const { return 3 * side * side; }
};

/// Joins manifest images to feature rows. Throws ValidationError naming the
/// first manifest image absent from the table. When `subset` is given only
/// those manifest indices are loaded, in that order.
Dataset build_dataset(const DatasetManifest& manifest, const FeatureTable& features, Eigen::Index side,
                      const std::vector<std::size_t>* subset = nullptr);

/// Seeded per-epoch shuffles of [0, count) cut into batches; the final partial
/// batch is kept. The order for an epoch depends only on (seed, epoch).
class BatchIterator {
 public:
  BatchIterator(Eigen::Index count, Eigen::Index batch_size, std::uint64_t seed);

  std::vector<std::vector<Eigen::Index>> epoch(int epoch_index) const;

 private:
  Eigen::Index count_;
  Eigen::Index batch_size_;
  std::uint64_t seed_;
};

/// Stratified seeded split: each class contributes round(fraction * n_c) items
/// (at least one when n_c >= 2) to validation.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
Split stratified_split(std::span<const int> labels, double val_fraction, std::uint64_t seed);

}  // namespace endofuse
