#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "endofuse/dataset.hpp"
#include "endofuse/training.hpp"

namespace endofuse::metrics {

/// Rows are true classes, columns predicted classes.
using ConfusionMatrix = Eigen::Matrix<long long, Eigen::Dynamic, Eigen::Dynamic>;

ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred, int classes);

/// Row-wise argmax; the lowest index wins ties.
std::vector<int> argmax_rows(const Eigen::MatrixXd& scores);

/// Support-weighted averages of per-class recall, precision and F1.
struct WeightedMetrics {
  double accuracy = 0;
  double sensitivity = 0;
  double precision = 0;
  double f1 = 0;
  bool zero_division = false;  // some per-class denominator vanished and was taken as 0
  Eigen::VectorXd recall_per_class;
  Eigen::VectorXd precision_per_class;
  Eigen::VectorXd f1_per_class;
};

WeightedMetrics weighted_metrics(const ConfusionMatrix& cm);

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
};

/// One-vs-rest ROC: thresholds at each distinct score, descending, from (0,0)
/// to (1,1). Throws ValidationError if `positive` is all-true or all-false.
std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const bool> positive);

/// Trapezoidal area under the curve.
double auc(std::span<const RocPoint> curve);
double auc(std::span<const double> scores, std::span<const bool> positive);

struct ClassRoc {
  int label = 0;
  std::vector<RocPoint> points;  // empty when undefined
  std::optional<double> auc;     // nullopt when the class is absent (or is every sample)
};

struct MetricsReport {
  int samples = 0;
  double accuracy = 0;
  double sensitivity = 0;
  double f1 = 0;
  double precision = 0;
  bool zero_division = false;
  std::vector<long long> support;
  std::vector<std::optional<double>> auc;
};

struct Evaluation {
  MetricsReport report;
  std::vector<ClassRoc> roc;
  ConfusionMatrix confusion;
};

/// Metrics from per-sample class probabilities (N x C) and true labels.
Evaluation evaluate_scores(const Eigen::MatrixXd& probabilities, std::span<const int> labels);

/// Eval-mode forward of a checkpoint over the manifest rows in `rows` (all rows when null).
Evaluation evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest, const FeatureTable& raw_features,
                    const std::vector<std::size_t>* rows = nullptr, Eigen::MatrixXd* probabilities = nullptr);

std::string report_json(const MetricsReport& report);
void write_metrics_json(const MetricsReport& report, const std::filesystem::path& path);

/// CSV `class,fpr,tpr`; classes with undefined ROC are omitted.
void write_roc_csv(std::span<const ClassRoc> curves, const std::filesystem::path& path);
std::vector<ClassRoc> read_roc_csv(const std::filesystem::path& path);

/// `ACC 0.762 | Sensitivity 0.762 | F1 0.659 | Precision 0.611`
std::string table_row(const MetricsReport& report);

}  // namespace endofuse::metrics
