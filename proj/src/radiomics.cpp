#include "endofuse/radiomics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "endofuse/errors.hpp"

namespace endofuse::radiomics {

namespace {

// Keeps the top of the range strictly inside the last bin.
constexpr double kBinSlack = 1e-12;

std::vector<double> masked_values(const GrayImage& img, const RoiMask& mask) {
  if (img.width() != mask.width() || img.height() != mask.height()) {
    throw DimensionError("mask " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                         " does not match image " + std::to_string(img.width()) + "x" +
                         std::to_string(img.height()));
  }
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(mask.count()));
  for (Index r = 0; r < img.height(); ++r)
    for (Index c = 0; c < img.width(); ++c)
      if (mask.bits(r, c)) values.push_back(img.pixels(r, c));
  return values;
}

int bin_of(double v, double lo, double hi, int bins) {
  const int g = 1 + static_cast<int>(std::floor(bins * (v - lo) / (hi - lo + kBinSlack)));
  return std::clamp(g, 1, bins);
}

bool inside(const LevelRaster& levels, Index r, Index c) {
  return r >= 0 && c >= 0 && r < levels.rows() && c < levels.cols() && levels(r, c) > 0;
}

Index reflect101(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

FeatureVector prefixed(const FeatureVector& f, const std::string& prefix) {
  FeatureVector out{{}, f.values};
  for (const auto& n : f.names) out.names.push_back(prefix + n);
  return out;
}

}  // namespace

double FeatureVector::at(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return values(static_cast<Index>(i));
  throw std::out_of_range("no feature named " + name);
}

RoiMask make_central_mask(Index width, Index height, double radius_fraction) {
  if (width < 8 || height < 8) {
    throw ParameterError("mask needs at least 8x8 pixels, got " + std::to_string(width) + "x" +
                         std::to_string(height));
  }
  if (!(radius_fraction > 0.0 && radius_fraction <= 1.0)) {
    throw ParameterError("radius fraction must be in (0,1], got " + std::to_string(radius_fraction));
  }
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double radius = radius_fraction * static_cast<double>(std::min(width, height)) / 2.0;
  RoiMask mask{BitRaster(height, width)};
  for (Index r = 0; r < height; ++r) {
    for (Index c = 0; c < width; ++c) {
      const double dy = static_cast<double>(r) - cy;
      const double dx = static_cast<double>(c) - cx;
      mask.bits(r, c) = dy * dy + dx * dx <= radius * radius;
    }
  }
  return mask;
}

RoiMask make_peripheral_mask(Index width, Index height, double radius_fraction) {
  RoiMask mask = make_central_mask(width, height, radius_fraction);
  mask.bits = !mask.bits;
  return mask;
}

QuantizedRegion quantize(const GrayImage& img, const RoiMask& mask, int num_levels) {
  if (num_levels < 2) throw ParameterError("quantize needs at least 2 levels");
  const auto values = masked_values(img, mask);
  QuantizedRegion q{LevelRaster::Zero(img.height(), img.width()), num_levels};
  if (values.empty()) return q;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  for (Index r = 0; r < img.height(); ++r)
    for (Index c = 0; c < img.width(); ++c)
      if (mask.bits(r, c)) q.levels(r, c) = bin_of(img.pixels(r, c), lo, hi, num_levels);
  return q;
}

FeatureVector first_order_features(const GrayImage& img, const RoiMask& mask) {
  auto values = masked_values(img, mask);
  if (values.empty()) throw FeatureUndefined("first-order features on an empty region");
  // Owned copy: Eigen's vectorized sums follow the buffer's alignment, and a
  // std::vector's alignment varies with the allocating thread.
  const Eigen::ArrayXd v = Eigen::Map<const Eigen::ArrayXd>(values.data(), static_cast<Index>(values.size()));
  const double n = static_cast<double>(v.size());
  const double mean = v.mean();
  const Eigen::ArrayXd centered = v - mean;
  const double m2 = centered.square().sum() / n;
  const double m3 = centered.cube().sum() / n;
  const double m4 = centered.square().square().sum() / n;
  const double skewness = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
  const double kurtosis = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
  const double lo = v.minCoeff(), hi = v.maxCoeff();

  constexpr int kHistogramBins = 32;
  Eigen::ArrayXd hist = Eigen::ArrayXd::Zero(kHistogramBins);
  for (double x : values) hist(bin_of(x, lo, hi, kHistogramBins) - 1) += 1.0;
  double entropy = 0.0;
  for (double count : hist) {
    if (count > 0.0) {
      const double p = count / n;
      entropy -= p * std::log2(p);
    }
  }

  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  const double median = values.size() % 2 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);

  FeatureVector f;
  f.names = {"mean", "variance", "skewness", "kurtosis", "energy",
             "entropy", "min", "max", "median", "range"};
  f.values.resize(10);
  f.values << mean, m2, skewness, kurtosis, v.square().sum(), entropy, lo, hi, median, hi - lo;
  return f;
}

Eigen::MatrixXd glcm_matrix(const QuantizedRegion& q, std::span<const Offset> offsets) {
  const int ng = q.num_levels;
  Eigen::MatrixXd averaged = Eigen::MatrixXd::Zero(ng, ng);
  int used = 0;
  for (const Offset& off : offsets) {
    Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(ng, ng);
    for (Index r = 0; r < q.levels.rows(); ++r) {
      for (Index c = 0; c < q.levels.cols(); ++c) {
        if (q.levels(r, c) == 0 || !inside(q.levels, r + off.dy, c + off.dx)) continue;
        const int a = q.levels(r, c) - 1;
        const int b = q.levels(r + off.dy, c + off.dx) - 1;
        counts(a, b) += 1.0;
        counts(b, a) += 1.0;
      }
    }
    const double total = counts.sum();
    if (total > 0.0) {
      averaged += counts / total;
      ++used;
    }
  }
  if (used == 0) throw FeatureUndefined("GLCM: no masked pixel pairs under any offset");
  return averaged / static_cast<double>(used);
}

FeatureVector glcm_features_from_matrix(const Eigen::MatrixXd& p) {
  const Index ng = p.rows();
  const Eigen::ArrayXd level = Eigen::ArrayXd::LinSpaced(ng, 1.0, static_cast<double>(ng));
  const Eigen::ArrayXd row_marginal = p.rowwise().sum().array();
  const Eigen::ArrayXd col_marginal = p.colwise().sum().transpose().array();
  const double mu_i = (level * row_marginal).sum();
  const double mu_j = (level * col_marginal).sum();
  const double sd_i = std::sqrt(((level - mu_i).square() * row_marginal).sum());
  const double sd_j = std::sqrt(((level - mu_j).square() * col_marginal).sum());

  double contrast = 0, cov = 0, asm_ = 0, homogeneity = 0, entropy = 0, dissimilarity = 0;
  for (Index i = 0; i < ng; ++i) {
    for (Index j = 0; j < ng; ++j) {
      const double v = p(i, j);
      if (v == 0.0) continue;
      const double d = static_cast<double>(i - j);
      contrast += d * d * v;
      cov += (level(i) - mu_i) * (level(j) - mu_j) * v;
      asm_ += v * v;
      homogeneity += v / (1.0 + d * d);
      entropy -= v * std::log2(v);
      dissimilarity += std::abs(d) * v;
    }
  }
  const double correlation = (sd_i > 0.0 && sd_j > 0.0) ? cov / (sd_i * sd_j) : 1.0;

  FeatureVector f;
  f.names = {"contrast", "correlation", "energy", "homogeneity", "entropy", "dissimilarity"};
  f.values.resize(6);
  f.values << contrast, correlation, asm_, homogeneity, entropy, dissimilarity;
  return f;
}

FeatureVector glcm_features(const QuantizedRegion& q, std::span<const Offset> offsets) {
  return glcm_features_from_matrix(glcm_matrix(q, offsets));
}

Eigen::MatrixXd glrlm_matrix(const QuantizedRegion& q, Offset direction) {
  const Index rows = q.levels.rows(), cols = q.levels.cols();
  BitRaster consumed = BitRaster::Constant(rows, cols, false);
  std::vector<std::pair<int, Index>> runs;  // (level, length)
  Index longest = 0;
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const int level = q.levels(r, c);
      if (level == 0 || consumed(r, c)) continue;
      // Extend in both directions from any unconsumed member of the run.
      Index length = 1;
      consumed(r, c) = true;
      for (int sign : {-1, 1}) {
        Index y = r + sign * direction.dy, x = c + sign * direction.dx;
        while (inside(q.levels, y, x) && q.levels(y, x) == level) {
          consumed(y, x) = true;
          ++length;
          y += sign * direction.dy;
          x += sign * direction.dx;
        }
      }
      runs.emplace_back(level, length);
      longest = std::max(longest, length);
    }
  }
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(q.num_levels, longest);
  for (const auto& [level, length] : runs) m(level - 1, length - 1) += 1.0;
  return m;
}

FeatureVector glrlm_features_from_matrix(const Eigen::MatrixXd& runs, Index pixel_count) {
  const double total = runs.sum();
  if (total <= 0.0 || pixel_count <= 0) throw FeatureUndefined("GLRLM: region has no runs");
  const Eigen::ArrayXd length =
      Eigen::ArrayXd::LinSpaced(runs.cols(), 1.0, static_cast<double>(runs.cols()));
  const Eigen::ArrayXd per_length = runs.colwise().sum().transpose().array();
  const Eigen::ArrayXd per_level = runs.rowwise().sum().array();
  FeatureVector f;
  f.names = {"short_run_emphasis", "long_run_emphasis", "gray_level_nonuniformity",
             "run_length_nonuniformity", "run_percentage"};
  f.values.resize(5);
  f.values << (per_length / length.square()).sum() / total, (per_length * length.square()).sum() / total,
      per_level.square().sum() / total, per_length.square().sum() / total,
      total / static_cast<double>(pixel_count);
  return f;
}

FeatureVector glrlm_features(const QuantizedRegion& q, std::span<const Offset> directions) {
  const Index pixels = q.count();
  if (pixels == 0 || directions.empty()) throw FeatureUndefined("GLRLM: empty region");
  FeatureVector mean;
  for (const Offset& d : directions) {
    FeatureVector f = glrlm_features_from_matrix(glrlm_matrix(q, d), pixels);
    if (mean.names.empty()) {
      mean = f;
    } else {
      mean.values += f.values;
    }
  }
  mean.values /= static_cast<double>(directions.size());
  return mean;
}

Eigen::MatrixXd glszm_matrix(const QuantizedRegion& q) {
  const Index rows = q.levels.rows(), cols = q.levels.cols();
  std::vector<Index> parent(static_cast<std::size_t>(rows * cols));
  std::iota(parent.begin(), parent.end(), Index{0});
  auto find = [&](Index i) {
    while (parent[i] != i) {
      parent[i] = parent[parent[i]];
      i = parent[i];
    }
    return i;
  };
  // Forward half of the 8-neighbourhood; the other half is covered by symmetry.
  constexpr std::array<Offset, 4> kForward{{{0, 1}, {1, -1}, {1, 0}, {1, 1}}};
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      const int level = q.levels(r, c);
      if (level == 0) continue;
      for (const Offset& o : kForward) {
        const Index y = r + o.dy, x = c + o.dx;
        if (inside(q.levels, y, x) && q.levels(y, x) == level) {
          const Index a = find(r * cols + c), b = find(y * cols + x);
          if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
      }
    }
  }
  std::vector<Index> size(parent.size(), 0);
  for (Index i = 0; i < rows * cols; ++i)
    if (q.levels(i / cols, i % cols) > 0) ++size[find(i)];
  const Index largest = *std::max_element(size.begin(), size.end());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(q.num_levels, largest);
  for (Index i = 0; i < rows * cols; ++i)
    if (size[i] > 0) m(q.levels(i / cols, i % cols) - 1, size[i] - 1) += 1.0;
  return m;
}

FeatureVector glszm_features_from_matrix(const Eigen::MatrixXd& zones, Index pixel_count) {
  const double total = zones.sum();
  if (total <= 0.0 || pixel_count <= 0) throw FeatureUndefined("GLSZM: region has no zones");
  const Eigen::ArrayXd area = Eigen::ArrayXd::LinSpaced(zones.cols(), 1.0, static_cast<double>(zones.cols()));
  const Eigen::ArrayXd per_size = zones.colwise().sum().transpose().array();
  const Eigen::ArrayXd per_level = zones.rowwise().sum().array();
  FeatureVector f;
  f.names = {"small_area_emphasis", "large_area_emphasis", "gray_level_nonuniformity",
             "zone_size_nonuniformity", "zone_percentage"};
  f.values.resize(5);
  f.values << (per_size / area.square()).sum() / total, (per_size * area.square()).sum() / total,
      per_level.square().sum() / total, per_size.square().sum() / total,
      total / static_cast<double>(pixel_count);
  return f;
}

FeatureVector glszm_features(const QuantizedRegion& q) {
  const Index pixels = q.count();
  if (pixels == 0) throw FeatureUndefined("GLSZM: empty region");
  return glszm_features_from_matrix(glszm_matrix(q), pixels);
}

Raster log_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ParameterError("LoG sigma must be positive");
  const Index half = static_cast<Index>(std::ceil(3.0 * sigma));
  const Index side = 2 * half + 1;
  const double s2 = sigma * sigma;
  Raster k(side, side);
  for (Index r = 0; r < side; ++r) {
    for (Index c = 0; c < side; ++c) {
      const double y = static_cast<double>(r - half), x = static_cast<double>(c - half);
      const double q = (x * x + y * y) / (2.0 * s2);
      k(r, c) = -1.0 / (std::numbers::pi * s2 * s2) * (1.0 - q) * std::exp(-q);
    }
  }
  k -= k.mean();
  return k;
}

GrayImage log_filter(const GrayImage& img, double sigma) {
  if (sigma != 1.0 && sigma != 2.0) {
    throw ParameterError("LoG filter supports sigma 1 or 2, got " + std::to_string(sigma));
  }
  const Raster k = log_kernel(sigma);
  const Index half = k.rows() / 2;
  const Index h = img.height(), w = img.width();
  std::vector<Index> rows(static_cast<std::size_t>(h + 2 * half)), cols(static_cast<std::size_t>(w + 2 * half));
  for (Index i = 0; i < h + 2 * half; ++i) rows[i] = reflect101(i - half, h);
  for (Index i = 0; i < w + 2 * half; ++i) cols[i] = reflect101(i - half, w);
  Raster padded(h + 2 * half, w + 2 * half);
  for (Index r = 0; r < padded.rows(); ++r)
    for (Index c = 0; c < padded.cols(); ++c) padded(r, c) = img.pixels(rows[r], cols[c]);
  GrayImage out{Raster::Zero(h, w)};
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) out.pixels(r, c) = (padded.block(r, c, k.rows(), k.cols()) * k).sum();
  return out;
}

const std::vector<std::string>& record_feature_names() {
  static const std::vector<std::string> names = [] {
    GrayImage probe{Raster::Zero(8, 8)};
    for (Index i = 0; i < 64; ++i) probe.pixels(i / 8, i % 8) = static_cast<double>(i % 5) / 4.0;
    return extract_record(probe, RoiMask{BitRaster::Constant(8, 8, true)}).features.names;
  }();
  return names;
}

RadiomicsRecord extract_record(const GrayImage& img, const RoiMask& mask, std::string image_id,
                               int num_levels) {
  if (img.width() != mask.width() || img.height() != mask.height()) {
    throw DimensionError("mask dimensions do not match image");
  }
  if (mask.count() < kMinRegionPixels) {
    throw RegionTooSmall("region has " + std::to_string(mask.count()) + " pixels, need at least " +
                         std::to_string(kMinRegionPixels));
  }
  const QuantizedRegion q = quantize(img, mask, num_levels);
  const std::vector<FeatureVector> parts = {
      prefixed(first_order_features(img, mask), "fo_"),
      prefixed(glcm_features(q), "glcm_"),
      prefixed(glrlm_features(q), "glrlm_"),
      prefixed(glszm_features(q), "glszm_"),
      prefixed(first_order_features(log_filter(img, 1.0), mask), "log1_fo_"),
      prefixed(first_order_features(log_filter(img, 2.0), mask), "log2_fo_"),
  };
  RadiomicsRecord record;
  record.image_id = std::move(image_id);
  Index total = 0;
  for (const auto& p : parts) total += p.values.size();
  record.features.values.resize(total);
  Index at = 0;
  for (const auto& p : parts) {
    record.features.names.insert(record.features.names.end(), p.names.begin(), p.names.end());
    record.features.values.segment(at, p.values.size()) = p.values;
    at += p.values.size();
  }
  if (!record.features.values.allFinite()) throw FeatureUndefined("non-finite feature value");
  return record;
}

FeatureTable records_to_table(std::span<const RadiomicsRecord> records, const std::vector<int>* labels) {
  FeatureTable table;
  if (labels && labels->size() != records.size()) {
    throw DimensionError("records_to_table: label count does not match record count");
  }
  table.columns = records.empty() ? record_feature_names() : records.front().features.names;
  table.values.resize(static_cast<Index>(records.size()), static_cast<Index>(table.columns.size()));
  auto& versions = table.diagnostics["version"];
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].features.names != table.columns) {
      throw SchemaError("record " + records[i].image_id + " has a different feature set");
    }
    table.image_ids.push_back(records[i].image_id);
    table.values.row(static_cast<Index>(i)) = records[i].features.values.transpose();
    versions.push_back(records[i].version);
  }
  if (labels) table.labels = *labels;
  return table;
}

FeatureTable merge_tables(const FeatureTable& central, const FeatureTable& peripheral) {
  std::set<std::string> central_ids(central.image_ids.begin(), central.image_ids.end());
  std::vector<std::string> missing;
  for (const auto& id : central.image_ids)
    if (!peripheral.row_of(id)) missing.push_back(id + " (absent from peripheral)");
  for (const auto& id : peripheral.image_ids)
    if (!central_ids.contains(id)) missing.push_back(id + " (absent from central)");
  if (!missing.empty()) {
    std::string msg = "merge_tables: image id mismatch:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }

  FeatureTable merged;
  merged.image_ids = central.image_ids;
  for (const auto& c : central.columns) merged.columns.push_back("central_" + c);
  for (const auto& c : peripheral.columns) merged.columns.push_back("peripheral_" + c);
  merged.values.resize(central.rows(), central.cols() + peripheral.cols());
  if (central.labels || peripheral.labels) merged.labels = std::vector<int>();
  for (Index r = 0; r < central.rows(); ++r) {
    const Index pr = *peripheral.row_of(central.image_ids[r]);
    merged.values.row(r) << central.values.row(r), peripheral.values.row(pr);
    if (merged.labels) {
      const int label = central.labels ? (*central.labels)[r] : (*peripheral.labels)[pr];
      if (central.labels && peripheral.labels && (*peripheral.labels)[pr] != label) {
        throw ValidationError("merge_tables: label mismatch for " + central.image_ids[r]);
      }
      merged.labels->push_back(label);
    }
  }
  return merged;
}

}  // namespace endofuse::radiomics
