#include "endofuse/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>

#include "json.hpp"

#include "endofuse/errors.hpp"
#include "endofuse/text.hpp"

namespace endofuse::metrics {

using Eigen::Index;

ConfusionMatrix confusion_matrix(std::span<const int> y_true, std::span<const int> y_pred, int classes) {
  if (y_true.size() != y_pred.size()) throw DimensionError("confusion_matrix: label and prediction counts differ");
  ConfusionMatrix cm = ConfusionMatrix::Zero(classes, classes);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= classes || y_pred[i] < 0 || y_pred[i] >= classes) {
      throw ValidationError("confusion_matrix: label out of range at sample " + std::to_string(i));
    }
    ++cm(y_true[i], y_pred[i]);
  }
  return cm;
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& scores) {
  std::vector<int> out;
  for (Index r = 0; r < scores.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < scores.cols(); ++c)
      if (scores(r, c) > scores(r, best)) best = c;
    out.push_back(static_cast<int>(best));
  }
  return out;
}

WeightedMetrics weighted_metrics(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.sum());
  if (cm.size() == 0 || total <= 0) throw ValidationError("weighted_metrics: empty confusion matrix");
  const Index c = cm.rows();
  WeightedMetrics m;
  m.recall_per_class = Eigen::VectorXd::Zero(c);
  m.precision_per_class = Eigen::VectorXd::Zero(c);
  m.f1_per_class = Eigen::VectorXd::Zero(c);
  for (Index k = 0; k < c; ++k) {
    const double tp = static_cast<double>(cm(k, k));
    const double support = static_cast<double>(cm.row(k).sum());
    const double predicted = static_cast<double>(cm.col(k).sum());
    const double weight = support / total;
    if (support > 0) m.recall_per_class(k) = tp / support;
    if (predicted > 0) {
      m.precision_per_class(k) = tp / predicted;
    } else if (support > 0) {
      m.zero_division = true;
    }
    const double pr = m.precision_per_class(k) + m.recall_per_class(k);
    if (pr > 0) {
      m.f1_per_class(k) = 2.0 * m.precision_per_class(k) * m.recall_per_class(k) / pr;
    } else if (support > 0) {
      m.zero_division = true;
    }
    m.sensitivity += weight * m.recall_per_class(k);
    m.precision += weight * m.precision_per_class(k);
    m.f1 += weight * m.f1_per_class(k);
  }
  m.accuracy = static_cast<double>(cm.trace()) / total;
  return m;
}

std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw DimensionError("roc_points: score and label counts differ");
  const auto pos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const double neg = static_cast<double>(positive.size()) - pos;
  if (pos == 0 || neg == 0) throw ValidationError("roc_points: labels contain a single class");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> curve{{0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == threshold; ++i) (positive[order[i]] ? tp : fp) += 1;
    curve.push_back({fp / neg, tp / pos});
  }
  return curve;
}

double auc(std::span<const RocPoint> curve) {
  double area = 0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].fpr - curve[i - 1].fpr) * (curve[i].tpr + curve[i - 1].tpr) / 2.0;
  }
  return area;
}

double auc(std::span<const double> scores, std::span<const bool> positive) {
  const auto curve = roc_points(scores, positive);
  return auc(curve);
}

Evaluation evaluate_scores(const Eigen::MatrixXd& probabilities, std::span<const int> labels) {
  if (probabilities.rows() != static_cast<Index>(labels.size())) {
    throw DimensionError("evaluate_scores: probability rows do not match labels");
  }
  const int classes = static_cast<int>(probabilities.cols());
  const auto predictions = argmax_rows(probabilities);
  Evaluation ev;
  ev.confusion = confusion_matrix(labels, predictions, classes);
  const WeightedMetrics w = weighted_metrics(ev.confusion);
  ev.report.samples = static_cast<int>(labels.size());
  ev.report.accuracy = w.accuracy;
  ev.report.sensitivity = w.sensitivity;
  ev.report.precision = w.precision;
  ev.report.f1 = w.f1;
  ev.report.zero_division = w.zero_division;
  for (int k = 0; k < classes; ++k) {
    ev.report.support.push_back(ev.confusion.row(k).sum());
    const std::size_t n = labels.size();
    std::vector<double> scores(n);
    std::unique_ptr<bool[]> positive(new bool[n]);
    long long pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = probabilities(static_cast<Index>(i), k);
      positive[i] = labels[i] == k;
      pos += positive[i];
    }
    ClassRoc roc;
    roc.label = k;
    if (pos > 0 && pos < static_cast<long long>(n)) {
      roc.points = roc_points(scores, std::span<const bool>(positive.get(), n));
      roc.auc = auc(roc.points);
    }
    ev.report.auc.push_back(roc.auc);
    ev.roc.push_back(std::move(roc));
  }
  return ev;
}

Evaluation evaluate(const Checkpoint& ckpt, const DatasetManifest& manifest, const FeatureTable& raw_features,
                    const std::vector<std::size_t>* rows, Eigen::MatrixXd* probabilities) {
  if (manifest.num_classes() != ckpt.model.num_classes) {
    throw SchemaError("manifest has " + std::to_string(manifest.num_classes()) + " classes, checkpoint expects " +
                      std::to_string(ckpt.model.num_classes));
  }
  const FeatureTable features = apply_norm(raw_features, ckpt.norm);
  const Dataset data = build_dataset(manifest, features, ckpt.model.input_side, rows);
  if (data.size() == 0) throw ValidationError("evaluate: no samples selected");
  ParameterSet<TrainScalar> params = restore_parameters(ckpt);
  const Eigen::MatrixXd probs = predict_proba(ckpt.model, params, data, ckpt.train.batch);
  if (probabilities) *probabilities = probs;
  return evaluate_scores(probs, data.labels);
}

std::string report_json(const MetricsReport& report) {
  nlohmann::ordered_json j;
  j["samples"] = report.samples;
  j["accuracy"] = report.accuracy;
  j["sensitivity"] = report.sensitivity;
  j["f1"] = report.f1;
  j["precision"] = report.precision;
  j["zero_division"] = report.zero_division;
  j["support"] = report.support;
  nlohmann::ordered_json aucs = nlohmann::ordered_json::array();
  for (const auto& a : report.auc) aucs.push_back(a ? nlohmann::ordered_json(*a) : nlohmann::ordered_json(nullptr));
  j["auc"] = aucs;
  return j.dump(2) + "\n";
}

void write_metrics_json(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << report_json(report);
  if (!out) throw IoError("failed writing " + path.string());
}

void write_roc_csv(std::span<const ClassRoc> curves, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "class,fpr,tpr\n";
  for (const auto& c : curves)
    for (const auto& p : c.points) out << c.label << ',' << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<ClassRoc> read_roc_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open ROC file " + path.string());
  std::string line;
  if (!read_line(in, line) || line != "class,fpr,tpr") {
    throw FormatError(path.string() + ": row 1: expected header class,fpr,tpr");
  }
  std::map<int, ClassRoc> by_class;
  for (std::size_t row = 2; read_line(in, line); ++row) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const auto label = cells.size() == 3 ? parse_int(cells[0]) : std::nullopt;
    const auto fpr = cells.size() == 3 ? parse_double(cells[1]) : std::nullopt;
    const auto tpr = cells.size() == 3 ? parse_double(cells[2]) : std::nullopt;
    if (!label || !fpr || !tpr) throw FormatError(path.string() + ": row " + std::to_string(row) + ": malformed");
    auto& c = by_class[static_cast<int>(*label)];
    c.label = static_cast<int>(*label);
    c.points.push_back({*fpr, *tpr});
  }
  std::vector<ClassRoc> out;
  for (auto& [label, c] : by_class) {
    c.auc = auc(c.points);
    out.push_back(std::move(c));
  }
  return out;
}

std::string table_row(const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "ACC %.3f | Sensitivity %.3f | F1 %.3f | Precision %.3f", r.accuracy, r.sensitivity,
                r.f1, r.precision);
  return buf;
}

}  // namespace endofuse::metrics
