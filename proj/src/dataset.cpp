#include "endofuse/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <unordered_map>

#include "endofuse/errors.hpp"
#include "endofuse/ops.hpp"
#include "endofuse/text.hpp"

namespace endofuse {

namespace {

using Eigen::Index;

double gaussian(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0,1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Index uniform_index(Rng& rng, Index bound) {
  return static_cast<Index>(uniform01(rng) * static_cast<double>(bound));
}

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

RgbImage resize_bilinear(const RgbImage& image, Index width, Index height) {
  if (width == image.width() && height == image.height()) return image;
  if (width <= 0 || height <= 0) throw ParameterError("resize target must be positive");
  const double sy = static_cast<double>(image.height()) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width()) / static_cast<double>(width);
  RgbImage out;
  for (auto& ch : out.channels) ch.resize(height, width);
  for (Index r = 0; r < height; ++r) {
    const double fy = std::clamp((static_cast<double>(r) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height() - 1));
    const Index y0 = static_cast<Index>(std::floor(fy));
    const Index y1 = std::min(y0 + 1, image.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (Index c = 0; c < width; ++c) {
      const double fx = std::clamp((static_cast<double>(c) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width() - 1));
      const Index x0 = static_cast<Index>(std::floor(fx));
      const Index x1 = std::min(x0 + 1, image.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t k = 0; k < 3; ++k) {
        const Raster& src = image.channels[k];
        out.channels[k](r, c) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                                wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
      }
    }
  }
  return out;
}

RgbImage load_image(const std::filesystem::path& path, Index side) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read image " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode image " + path.string() + ": " + msg);
  }
  const Index h = png.height, w = png.width;
  RgbImage img;
  for (auto& ch : img.channels) ch.resize(h, w);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c)
      for (std::size_t k = 0; k < 3; ++k)
        img.channels[k](r, c) = static_cast<double>(buffer[static_cast<std::size_t>((r * w + c) * 3) + k]) / 255.0;
  return side > 0 ? resize_bilinear(img, side, side) : img;
}

void write_png(const RgbImage& image, const std::filesystem::path& path) {
  const Index h = image.height(), w = image.width();
  std::vector<png_byte> buffer(static_cast<std::size_t>(h * w * 3));
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c)
      for (std::size_t k = 0; k < 3; ++k)
        buffer[static_cast<std::size_t>((r * w + c) * 3) + k] =
            static_cast<png_byte>(std::lround(std::clamp(image.channels[k](r, c), 0.0, 1.0) * 255.0));
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("cannot write image " + path.string() + ": " + png.message);
  }
}

std::filesystem::path DatasetManifest::resolve(const ManifestEntry& e) const {
  const std::filesystem::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<int> DatasetManifest::labels() const {
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.label);
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& path, std::optional<int> num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::string line;
  if (!read_line(in, line) || split_csv_line(line) != std::vector<std::string>{"path", "label"}) {
    throw ValidationError(path.string() + ": line 1: expected header 'path,label'");
  }
  DatasetManifest manifest;
  manifest.base_dir = path.parent_path();
  std::set<std::string> seen;
  int max_label = -1;
  for (std::size_t line_no = 2; read_line(in, line); ++line_no) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ": line " + std::to_string(line_no);
    if (cells.size() != 2 || cells[0].empty()) throw ValidationError(where + ": expected 'path,label'");
    const auto label = parse_int(cells[1]);
    if (!label || *label < 0) throw ValidationError(where + ": unknown label '" + cells[1] + "'");
    if (num_classes && *label >= *num_classes) {
      throw ValidationError(where + ": label " + cells[1] + " outside [0," + std::to_string(*num_classes) + ")");
    }
    if (!seen.insert(cells[0]).second) throw ValidationError(where + ": duplicate path " + cells[0]);
    manifest.entries.push_back({cells[0], static_cast<int>(*label)});
    max_label = std::max(max_label, static_cast<int>(*label));
  }
  const int classes = num_classes.value_or(max_label + 1);
  for (int c = 0; c < classes; ++c) manifest.class_names.push_back("class_" + std::to_string(c));
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "path,label\n";
  for (const auto& e : manifest.entries) out << e.path << ',' << e.label << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<SyntheticImage> synthesize_images(const SyntheticSpec& spec) {
  if (spec.classes < 1 || spec.per_class < 1 || spec.side < 8) {
    throw ParameterError("synthetic dataset needs classes >= 1, per_class >= 1, side >= 8");
  }
  const Index side = spec.side;
  const double s = static_cast<double>(side);
  std::vector<SyntheticImage> out;
  for (int i = 0; i < spec.classes * spec.per_class; ++i) {
    const int k = i % spec.classes;
    const double t = spec.classes > 1 ? static_cast<double>(k) / (spec.classes - 1) : 0.0;
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) + 1);

    // Class sets stripe frequency, blob count and overall contrast.
    const double freq = (2.0 + 6.0 * t) * (0.9 + 0.2 * uniform01(rng));
    const double angle = std::numbers::pi * uniform01(rng);
    const double phase = 2.0 * std::numbers::pi * uniform01(rng);
    const double stripe_amp = 0.10 + 0.12 * t;
    const int blobs = 2 + static_cast<int>(std::lround(14.0 * t)) + static_cast<int>(uniform_index(rng, 3));
    const double base = 0.35 + 0.25 * uniform01(rng);

    Raster g = Raster::Constant(side, side, base);
    const double cs = std::cos(angle), sn = std::sin(angle);
    for (Index r = 0; r < side; ++r)
      for (Index c = 0; c < side; ++c)
        g(r, c) += stripe_amp * std::sin(2.0 * std::numbers::pi * freq * (cs * c + sn * r) / s + phase);
    for (int b = 0; b < blobs; ++b) {
      const double by = uniform01(rng) * s, bx = uniform01(rng) * s;
      const double radius = s * (0.03 + 0.03 * uniform01(rng));
      const double amp = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * (0.15 + 0.1 * uniform01(rng));
      for (Index r = 0; r < side; ++r)
        for (Index c = 0; c < side; ++c) {
          const double d2 = ((r - by) * (r - by) + (c - bx) * (c - bx)) / (2.0 * radius * radius);
          if (d2 < 12.0) g(r, c) += amp * std::exp(-d2);
        }
    }
    for (Index r = 0; r < side; ++r)
      for (Index c = 0; c < side; ++c) g(r, c) += 0.02 * gaussian(rng);

    SyntheticImage img;
    img.label = k;
    char name[64];
    std::snprintf(name, sizeof name, "img_%05d_c%d.png", i, k);
    img.name = name;
    img.image.channels[0] = g.unaryExpr(&quantize8);
    img.image.channels[1] = (0.85 * g + 0.08).unaryExpr(&quantize8);
    img.image.channels[2] = (0.7 * g + 0.12).unaryExpr(&quantize8);
    out.push_back(std::move(img));
  }
  return out;
}

DatasetManifest synthesize_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir / "images");
  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  for (const auto& img : synthesize_images(spec)) {
    const std::string rel = "images/" + img.name;
    write_png(img.image, out_dir / rel);
    manifest.entries.push_back({rel, img.label});
  }
  for (int c = 0; c < spec.classes; ++c) manifest.class_names.push_back("class_" + std::to_string(c));
  write_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

Dataset build_dataset(const DatasetManifest& manifest, const FeatureTable& features, Index side,
                      const std::vector<std::size_t>* subset) {
  std::unordered_map<std::string, Index> row_index;
  for (Index r = 0; r < features.rows(); ++r) row_index.emplace(features.image_ids[r], r);

  std::vector<std::size_t> order;
  if (subset) {
    order = *subset;
  } else {
    order.resize(manifest.entries.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  }
  // Alignment is checked for every entry before any image is decoded.
  std::vector<Index> rows;
  for (std::size_t i : order) {
    const auto& e = manifest.entries.at(i);
    auto it = row_index.find(e.path);
    if (it == row_index.end()) {
      throw ValidationError("image " + e.path + " is in the manifest but absent from the feature table");
    }
    rows.push_back(it->second);
  }

  Dataset ds;
  ds.num_classes = manifest.num_classes();
  ds.side = side;
  ds.feature_columns = features.columns;
  ds.features.resize(static_cast<Index>(order.size()), features.cols());
  ds.images.resize(static_cast<Index>(order.size()) * 3 * side * side);
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& e = manifest.entries[order[k]];
    ds.ids.push_back(e.path);
    ds.labels.push_back(e.label);
    ds.features.row(static_cast<Index>(k)) = features.values.row(rows[k]);
    const RgbImage img = load_image(manifest.resolve(e), side);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      Eigen::Map<Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          ds.images.data() + (static_cast<Index>(k) * 3 + static_cast<Index>(ch)) * side * side, side, side) =
          img.channels[ch].cast<float>();
    }
  }
  return ds;
}

BatchIterator::BatchIterator(Index count, Index batch_size, std::uint64_t seed)
    : count_(count), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw ParameterError("batch size must be positive");
}

std::vector<std::vector<Index>> BatchIterator::epoch(int epoch_index) const {
  std::vector<Index> order(static_cast<std::size_t>(count_));
  for (Index i = 0; i < count_; ++i) order[i] = i;
  Rng rng(seed_ ^ (0xD1B54A32D192ED03ULL * (static_cast<std::uint64_t>(epoch_index) + 1)));
  for (Index i = count_ - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  std::vector<std::vector<Index>> batches;
  for (Index start = 0; start < count_; start += batch_size_) {
    const Index end = std::min(count_, start + batch_size_);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

Split stratified_split(std::span<const int> labels, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ParameterError("validation fraction must be in [0,1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed ^ 0x5851F42D4C957F2DULL);
  Split split;
  for (auto& [label, items] : by_class) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, static_cast<Index>(i))]);
    std::size_t n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(items.size())));
    if (val_fraction > 0.0 && items.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, items.size() - 1);
    split.val.insert(split.val.end(), items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.insert(split.train.end(), items.begin() + static_cast<std::ptrdiff_t>(n_val), items.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

}  // namespace endofuse
