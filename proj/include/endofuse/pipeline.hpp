#pragma once

// Command implementations behind the endofuse executable. Each command throws
// on failure; the executable maps exceptions to a nonzero exit code.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "endofuse/dataset.hpp"
#include "endofuse/feature_table.hpp"
#include "endofuse/metrics.hpp"
#include "endofuse/model.hpp"
#include "endofuse/training.hpp"

namespace endofuse {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

/// Flat `key = value` lines; `#` starts a comment. Keys are ModelConfig and
/// TrainConfig field names. Unknown keys and malformed values throw ConfigError
/// naming the line.
RunConfig parse_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);
std::string format_config(const RunConfig& cfg);

/// Small backbone and schedule sized for a single CPU: 2 blocks x 4 layers, k=12,
/// 64-wide embeddings, batch 32, 20 epochs, 64x64 inputs.
RunConfig desk_config();

struct ExtractOptions {
  double radius = 0.5;
  int bins = 32;
  Eigen::Index side = 64;
  int threads = 0;  // 0: ENDOFUSE_THREADS, else hardware concurrency
  double max_failure_fraction = 0.10;
};

struct ExtractResult {
  FeatureTable table;
  std::vector<std::pair<std::string, std::string>> skipped;  // image_id, reason
};

/// Central and peripheral radiomics records per manifest image, merged into one
/// labelled table. Failing images are skipped; more than max_failure_fraction
/// failures throws ValidationError.
ExtractResult extract_features(const DatasetManifest& manifest, const ExtractOptions& options);

/// Worker count for extraction: ENDOFUSE_THREADS when set, else the hardware
/// concurrency, never more than `jobs`.
int extract_worker_count(int requested, std::size_t jobs);

void cmd_extract(const std::filesystem::path& manifest, const std::filesystem::path& out,
                 const ExtractOptions& options, std::ostream& log);

void cmd_train(const std::filesystem::path& manifest, const std::filesystem::path& features,
               const std::optional<std::filesystem::path>& config, const std::filesystem::path& out_dir,
               std::optional<std::uint64_t> seed, std::ostream& log);

/// Evaluates on the checkpoint's validation split, or every manifest row with
/// `all_rows`. Writes metrics.json, roc.csv and scores.csv.
metrics::MetricsReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                                const std::filesystem::path& features, const std::filesystem::path& out_dir,
                                bool all_rows, std::ostream& log);

/// Writes training_curves.svg and roc_curves.svg.
void cmd_plot(const std::filesystem::path& log_csv, const std::filesystem::path& roc_csv,
              const std::filesystem::path& out_dir);

std::string training_curves_svg(std::span<const EpochLog> log);
std::string roc_curves_svg(std::span<const metrics::ClassRoc> curves);

/// Per-sample probabilities: `image_id,label,p0,...`.
void write_scores_csv(const std::vector<std::string>& ids, std::span<const int> labels,
                      const Eigen::MatrixXd& probabilities, const std::filesystem::path& path);
void read_scores_csv(const std::filesystem::path& path, std::vector<std::string>& ids, std::vector<int>& labels,
                     Eigen::MatrixXd& probabilities);

}  // namespace endofuse
