#include "endofuse/feature_table.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <unordered_map>

#include "endofuse/errors.hpp"
#include "endofuse/text.hpp"

namespace endofuse {

std::optional<Eigen::Index> FeatureTable::row_of(const std::string& image_id) const {
  for (std::size_t i = 0; i < image_ids.size(); ++i)
    if (image_ids[i] == image_id) return static_cast<Eigen::Index>(i);
  return std::nullopt;
}

std::optional<Eigen::Index> FeatureTable::column_of(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i)
    if (columns[i] == name) return static_cast<Eigen::Index>(i);
  return std::nullopt;
}

void FeatureTable::validate() const {
  if (values.rows() != rows() || values.cols() != cols()) {
    throw ValidationError("feature table is not rectangular: " + std::to_string(values.rows()) + "x" +
                          std::to_string(values.cols()) + " values for " + std::to_string(rows()) +
                          " ids and " + std::to_string(cols()) + " columns");
  }
  if (labels && static_cast<Eigen::Index>(labels->size()) != rows()) {
    throw ValidationError("feature table has " + std::to_string(labels->size()) + " labels for " +
                          std::to_string(rows()) + " rows");
  }
  std::set<std::string> seen;
  for (const auto& id : image_ids)
    if (!seen.insert(id).second) throw ValidationError("duplicate image_id " + id);
  if (!values.allFinite()) throw ValidationError("feature table contains non-finite values");
}

void write_feature_csv(const FeatureTable& table, std::ostream& out) {
  table.validate();
  out << "image_id";
  if (table.labels) out << ",label";
  for (const auto& c : table.columns) out << ',' << c;
  out << '\n';
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    out << table.image_ids[r];
    if (table.labels) out << ',' << (*table.labels)[r];
    for (Eigen::Index c = 0; c < table.cols(); ++c) out << ',' << format_double(table.values(r, c));
    out << '\n';
  }
}

void write_feature_csv(const FeatureTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_feature_csv(table, out);
  if (!out) throw IoError("failed writing " + path.string());
}

FeatureTable read_feature_csv(std::istream& in, const std::string& source) {
  std::string line;
  if (!read_line(in, line)) throw FormatError(source + ": missing header");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "image_id") {
    throw FormatError(source + ": header must start with image_id");
  }
  FeatureTable table;
  const bool has_label = header.size() > 1 && header[1] == "label";
  const std::size_t first_feature = has_label ? 2 : 1;
  table.columns.assign(header.begin() + static_cast<std::ptrdiff_t>(first_feature), header.end());
  if (has_label) table.labels = std::vector<int>();

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError(source + ": row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " cells, header has " + std::to_string(header.size()));
    }
    table.image_ids.push_back(cells[0]);
    if (has_label) {
      const auto label = parse_int(cells[1]);
      if (!label) throw FormatError(source + ": row " + std::to_string(line_no) + " column label: not an integer");
      table.labels->push_back(static_cast<int>(*label));
    }
    std::vector<double> row;
    for (std::size_t c = first_feature; c < cells.size(); ++c) {
      const auto v = parse_double(cells[c]);
      if (!v) {
        throw FormatError(source + ": row " + std::to_string(line_no) + " column " + header[c] +
                          ": non-numeric value '" + cells[c] + "'");
      }
      row.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  table.values.resize(static_cast<Eigen::Index>(rows.size()), table.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  table.validate();
  return table;
}

FeatureTable read_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature table " + path.string());
  return read_feature_csv(in, path.string());
}

NormStats fit_norm_stats(const FeatureTable& table, std::span<const std::string> train_ids) {
  if (train_ids.empty()) throw ValidationError("fit_norm_stats: empty training split");
  std::vector<Eigen::Index> rows;
  for (const auto& id : train_ids) {
    const auto r = table.row_of(id);
    if (!r) throw ValidationError("fit_norm_stats: training id " + id + " not in feature table");
    rows.push_back(*r);
  }
  NormStats stats;
  std::vector<double> means, stds;
  const double n = static_cast<double>(rows.size());
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    double mean = 0.0;
    for (auto r : rows) mean += table.values(r, c);
    mean /= n;
    double var = 0.0;
    for (auto r : rows) var += (table.values(r, c) - mean) * (table.values(r, c) - mean);
    const double sd = std::sqrt(var / n);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      stats.dropped.push_back(table.columns[c]);
      continue;
    }
    stats.columns.push_back(table.columns[c]);
    means.push_back(mean);
    stds.push_back(sd);
  }
  stats.mean = Eigen::Map<Eigen::VectorXd>(means.data(), static_cast<Eigen::Index>(means.size()));
  stats.stddev = Eigen::Map<Eigen::VectorXd>(stds.data(), static_cast<Eigen::Index>(stds.size()));
  return stats;
}

namespace {

std::vector<Eigen::Index> retained_indices(const FeatureTable& table, const NormStats& stats) {
  std::unordered_map<std::string, Eigen::Index> index;
  for (Eigen::Index c = 0; c < table.cols(); ++c) index.emplace(table.columns[c], c);
  std::vector<Eigen::Index> out;
  for (const auto& name : stats.columns) {
    auto it = index.find(name);
    if (it == index.end()) throw SchemaError("feature column " + name + " missing from table");
    out.push_back(it->second);
  }
  return out;
}

FeatureTable with_columns(const FeatureTable& table, const NormStats& stats) {
  FeatureTable out;
  out.image_ids = table.image_ids;
  out.labels = table.labels;
  out.columns = stats.columns;
  out.values.resize(table.rows(), static_cast<Eigen::Index>(stats.columns.size()));
  return out;
}

}  // namespace

FeatureTable apply_norm(const FeatureTable& table, const NormStats& stats) {
  const auto idx = retained_indices(table, stats);
  FeatureTable out = with_columns(table, stats);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    out.values.col(c) = (table.values.col(idx[k]).array() - stats.mean(c)) / stats.stddev(c);
  }
  return out;
}

FeatureTable denormalize(const FeatureTable& normalized, const NormStats& stats) {
  const auto idx = retained_indices(normalized, stats);
  FeatureTable out = with_columns(normalized, stats);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    out.values.col(c) = normalized.values.col(idx[k]).array() * stats.stddev(c) + stats.mean(c);
  }
  return out;
}

}  // namespace endofuse
