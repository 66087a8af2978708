#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace endofuse {

/// Named numeric feature columns per image, one row per image_id.
struct FeatureTable {
  std::vector<std::string> image_ids;
  std::vector<std::string> columns;
  Eigen::MatrixXd values;  // rows = images, cols = columns
  std::optional<std::vector<int>> labels;
  // Non-numeric per-row columns (e.g. extractor version). Dropped when tables
  // are merged and never written to CSV.
  std::map<std::string, std::vector<std::string>> diagnostics;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(image_ids.size()); }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(columns.size()); }

  std::optional<Eigen::Index> row_of(const std::string& image_id) const;
  std::optional<Eigen::Index> column_of(const std::string& name) const;

  // Throws ValidationError on a non-rectangular table, duplicate ids or non-finite values.
  void validate() const;
};

/// CSV with header `image_id[,label],<features...>`, LF endings, 17 significant digits.
void write_feature_csv(const FeatureTable& table, std::ostream& out);
void write_feature_csv(const FeatureTable& table, const std::filesystem::path& path);
FeatureTable read_feature_csv(std::istream& in, const std::string& source = "<stream>");
FeatureTable read_feature_csv(const std::filesystem::path& path);

/// Column-wise z-score statistics fitted on a training split.
struct NormStats {
  std::vector<std::string> columns;  // retained, in table order
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
  std::vector<std::string> dropped;  // zero-variance columns
};

NormStats fit_norm_stats(const FeatureTable& table, std::span<const std::string> train_ids);

/// Keeps only the retained columns and z-scores them. Throws SchemaError when a
/// retained column is missing from the table.
FeatureTable apply_norm(const FeatureTable& table, const NormStats& stats);

/// Inverse of apply_norm on the retained columns.
FeatureTable denormalize(const FeatureTable& normalized, const NormStats& stats);

}  // namespace endofuse
