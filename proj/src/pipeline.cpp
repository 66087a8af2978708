#include "endofuse/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "endofuse/errors.hpp"
#include "endofuse/radiomics.hpp"
#include "endofuse/text.hpp"

namespace endofuse {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

using Setter = std::function<bool(RunConfig&, std::string_view)>;

template <typename T>
Setter int_field(T RunConfig::*group, int T::*field) {
  return [group, field](RunConfig& c, std::string_view v) {
    const auto x = parse_int(v);
    if (!x || *x < INT32_MIN || *x > INT32_MAX) return false;
    (c.*group).*field = static_cast<int>(*x);
    return true;
  };
}

template <typename T>
Setter double_field(T RunConfig::*group, double T::*field) {
  return [group, field](RunConfig& c, std::string_view v) {
    const auto x = parse_double(v);
    if (!x) return false;
    (c.*group).*field = *x;
    return true;
  };
}

const std::map<std::string, Setter, std::less<>>& config_fields() {
  static const std::map<std::string, Setter, std::less<>> fields = {
      {"d_embed", int_field(&RunConfig::model, &ModelConfig::d_embed)},
      {"mlp_hidden", int_field(&RunConfig::model, &ModelConfig::mlp_hidden)},
      {"mlp_dropout", double_field(&RunConfig::model, &ModelConfig::mlp_dropout)},
      {"growth_rate", int_field(&RunConfig::model, &ModelConfig::growth_rate)},
      {"blocks", int_field(&RunConfig::model, &ModelConfig::blocks)},
      {"layers_per_block", int_field(&RunConfig::model, &ModelConfig::layers_per_block)},
      {"compression", double_field(&RunConfig::model, &ModelConfig::compression)},
      {"backbone_dropout", double_field(&RunConfig::model, &ModelConfig::backbone_dropout)},
      {"stem_channels", int_field(&RunConfig::model, &ModelConfig::stem_channels)},
      {"proj_dim", int_field(&RunConfig::model, &ModelConfig::proj_dim)},
      {"input_side", int_field(&RunConfig::model, &ModelConfig::input_side)},
      {"bottleneck",
       [](RunConfig& c, std::string_view v) {
         if (v == "true" || v == "1") {
           c.model.bottleneck = true;
         } else if (v == "false" || v == "0") {
           c.model.bottleneck = false;
         } else {
           return false;
         }
         return true;
       }},
      {"lr", double_field(&RunConfig::train, &TrainConfig::lr)},
      {"weight_decay", double_field(&RunConfig::train, &TrainConfig::weight_decay)},
      {"beta1", double_field(&RunConfig::train, &TrainConfig::beta1)},
      {"beta2", double_field(&RunConfig::train, &TrainConfig::beta2)},
      {"eps", double_field(&RunConfig::train, &TrainConfig::eps)},
      {"batch", int_field(&RunConfig::train, &TrainConfig::batch)},
      {"epochs", int_field(&RunConfig::train, &TrainConfig::epochs)},
      {"val_fraction", double_field(&RunConfig::train, &TrainConfig::val_fraction)},
      {"seed",
       [](RunConfig& c, std::string_view v) {
         const auto x = parse_int(v);
         if (!x || *x < 0) return false;
         c.train.seed = static_cast<std::uint64_t>(*x);
         return true;
       }},
  };
  return fields;
}

}  // namespace

RunConfig parse_config(std::istream& in, const std::string& source) {
  RunConfig cfg;
  std::string line;
  for (int lineno = 1; read_line(in, line); ++lineno) {
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string_view::npos) throw ConfigError(where + "expected key = value");
    const std::string_view key = trim(body.substr(0, eq));
    const std::string_view value = trim(body.substr(eq + 1));
    const auto& fields = config_fields();
    const auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError(where + "unknown key '" + std::string(key) + "'");
    if (!it->second(cfg, value)) {
      throw ConfigError(where + "bad value '" + std::string(value) + "' for " + std::string(key));
    }
  }
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  return parse_config(in, path.string());
}

std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  const auto& m = c.model;
  const auto& t = c.train;
  os << "d_embed = " << m.d_embed << "\nmlp_hidden = " << m.mlp_hidden
     << "\nmlp_dropout = " << format_shortest(m.mlp_dropout) << "\ngrowth_rate = " << m.growth_rate
     << "\nblocks = " << m.blocks << "\nlayers_per_block = " << m.layers_per_block
     << "\ncompression = " << format_shortest(m.compression)
     << "\nbackbone_dropout = " << format_shortest(m.backbone_dropout) << "\nstem_channels = " << m.stem_channels
     << "\nproj_dim = " << m.proj_dim << "\ninput_side = " << m.input_side
     << "\nbottleneck = " << (m.bottleneck ? "true" : "false") << "\nlr = " << format_shortest(t.lr)
     << "\nweight_decay = " << format_shortest(t.weight_decay) << "\nbeta1 = " << format_shortest(t.beta1)
     << "\nbeta2 = " << format_shortest(t.beta2) << "\neps = " << format_shortest(t.eps) << "\nbatch = " << t.batch
     << "\nepochs = " << t.epochs << "\nval_fraction = " << format_shortest(t.val_fraction) << "\nseed = " << t.seed
     << '\n';
  return os.str();
}

RunConfig desk_config() {
  RunConfig c;
  c.model.d_embed = 64;
  c.model.growth_rate = 12;
  c.model.blocks = 2;
  c.model.layers_per_block = 4;
  c.model.proj_dim = 64;
  c.model.input_side = 64;
  c.train.batch = 32;
  c.train.epochs = 20;
  return c;
}

// ---------------------------------------------------------------- extract

int extract_worker_count(int requested, std::size_t jobs) {
  long n = requested;
  if (n <= 0) {
    if (const char* env = std::getenv("ENDOFUSE_THREADS")) {
      const auto v = parse_int(env);
      if (!v || *v < 1) throw ConfigError(std::string("ENDOFUSE_THREADS must be a positive integer, got '") + env + "'");
      n = static_cast<long>(*v);
    } else {
      n = std::max(1u, std::thread::hardware_concurrency());
    }
  }
  n = std::min<long>(n, static_cast<long>(std::max<std::size_t>(jobs, 1)));
  return static_cast<int>(n);
}

ExtractResult extract_features(const DatasetManifest& manifest, const ExtractOptions& options) {
  if (!(options.radius > 0.0 && options.radius <= 1.0)) throw ParameterError("radius must be in (0,1]");
  if (options.bins < 2) throw ParameterError("bins must be at least 2");
  if (options.side < 8) throw ParameterError("side must be at least 8");
  const std::size_t n = manifest.entries.size();

  struct Slot {
    std::optional<radiomics::RadiomicsRecord> central, peripheral;
    std::string error;
  };
  std::vector<Slot> slots(n);
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& e = manifest.entries[i];
      try {
        const GrayImage gray = to_gray(load_image(manifest.resolve(e), options.side));
        const Index w = gray.pixels.cols(), h = gray.pixels.rows();
        slots[i].central = radiomics::extract_record(gray, radiomics::make_central_mask(w, h, options.radius), e.path,
                                                     options.bins);
        slots[i].peripheral = radiomics::extract_record(
            gray, radiomics::make_peripheral_mask(w, h, options.radius), e.path, options.bins);
      } catch (const std::exception& ex) {
        slots[i].central.reset();
        slots[i].error = ex.what();
      }
    }
  };
  const int workers = extract_worker_count(options.threads, n);
  std::vector<std::jthread> pool;
  for (int t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  pool.clear();

  ExtractResult result;
  std::vector<radiomics::RadiomicsRecord> central, peripheral;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    if (!slots[i].central) {
      result.skipped.emplace_back(manifest.entries[i].path, slots[i].error);
      continue;
    }
    central.push_back(std::move(*slots[i].central));
    peripheral.push_back(std::move(*slots[i].peripheral));
    labels.push_back(manifest.entries[i].label);
  }
  if (n == 0) throw ValidationError("manifest lists no images");
  if (static_cast<double>(result.skipped.size()) > options.max_failure_fraction * static_cast<double>(n)) {
    std::string msg = std::to_string(result.skipped.size()) + " of " + std::to_string(n) +
                      " images failed feature extraction";
    if (!result.skipped.empty()) msg += " (first: " + result.skipped[0].first + ": " + result.skipped[0].second + ")";
    throw ValidationError(msg);
  }
  result.table = radiomics::merge_tables(radiomics::records_to_table(central, &labels),
                                         radiomics::records_to_table(peripheral, &labels));
  return result;
}

void cmd_extract(const fs::path& manifest_path, const fs::path& out, const ExtractOptions& options,
                 std::ostream& log) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  const ExtractResult r = extract_features(manifest, options);
  for (const auto& [id, reason] : r.skipped) log << "warning: skipped " << id << ": " << reason << '\n';
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_feature_csv(r.table, out);
  log << "extracted " << r.table.rows() << " images x " << r.table.cols() << " features -> " << out.string() << '\n';
}

// ---------------------------------------------------------------- train / eval

void cmd_train(const fs::path& manifest_path, const fs::path& features_path, const std::optional<fs::path>& config,
               const fs::path& out_dir, std::optional<std::uint64_t> seed, std::ostream& log) {
  RunConfig cfg = config ? load_config(*config) : desk_config();
  if (seed) cfg.train.seed = *seed;
  cfg.train.validate();
  const DatasetManifest manifest = load_manifest(manifest_path);
  const FeatureTable features = read_feature_csv(features_path);
  fs::create_directories(out_dir);

  FitOptions opts;
  opts.model = cfg.model;
  opts.train = cfg.train;
  opts.on_epoch = [&log](const EpochLog& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %3d  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f",
                  e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc);
    log << buf << std::endl;
  };
  const FitResult result = fit(manifest, features, opts);
  save_checkpoint(result.final_checkpoint, out_dir / "final.ckpt");
  save_checkpoint(result.best_checkpoint, out_dir / "best.ckpt");
  write_epoch_log(result.log, out_dir / "train_log.csv");
}

void write_scores_csv(const std::vector<std::string>& ids, std::span<const int> labels,
                      const Eigen::MatrixXd& probabilities, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "image_id,label";
  for (Index c = 0; c < probabilities.cols(); ++c) out << ",p" << c;
  out << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << ',' << labels[i];
    for (Index c = 0; c < probabilities.cols(); ++c) out << ',' << format_double(probabilities(static_cast<Index>(i), c));
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void read_scores_csv(const fs::path& path, std::vector<std::string>& ids, std::vector<int>& labels,
                     Eigen::MatrixXd& probabilities) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!read_line(in, line)) throw FormatError(path.string() + ": row 1: missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "image_id" || header[1] != "label") {
    throw FormatError(path.string() + ": row 1: expected image_id,label,p0,...");
  }
  const Index classes = static_cast<Index>(header.size()) - 2;
  std::vector<std::vector<double>> rows;
  ids.clear();
  labels.clear();
  for (std::size_t row = 2; read_line(in, line); ++row) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const auto bad = [&] { return FormatError(path.string() + ": row " + std::to_string(row) + ": malformed"); };
    if (static_cast<Index>(cells.size()) != classes + 2) throw bad();
    const auto label = parse_int(cells[1]);
    if (!label) throw bad();
    std::vector<double> p;
    for (std::size_t c = 2; c < cells.size(); ++c) {
      const auto v = parse_double(cells[c]);
      if (!v) throw bad();
      p.push_back(*v);
    }
    ids.push_back(cells[0]);
    labels.push_back(static_cast<int>(*label));
    rows.push_back(std::move(p));
  }
  probabilities.resize(static_cast<Index>(rows.size()), classes);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Index c = 0; c < classes; ++c) probabilities(static_cast<Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
}

metrics::MetricsReport cmd_eval(const fs::path& checkpoint, const fs::path& manifest_path,
                                const fs::path& features_path, const fs::path& out_dir, bool all_rows,
                                std::ostream& log) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const DatasetManifest manifest = load_manifest(manifest_path);
  const FeatureTable features = read_feature_csv(features_path);
  std::vector<std::size_t> rows;
  if (all_rows) {
    rows.resize(manifest.entries.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  } else {
    rows = split_for(manifest, ckpt.train).val;
  }
  Eigen::MatrixXd probs;
  const metrics::Evaluation ev = metrics::evaluate(ckpt, manifest, features, &rows, &probs);

  std::vector<std::string> ids;
  std::vector<int> labels;
  for (std::size_t i : rows) {
    ids.push_back(manifest.entries[i].path);
    labels.push_back(manifest.entries[i].label);
  }
  fs::create_directories(out_dir);
  metrics::write_metrics_json(ev.report, out_dir / "metrics.json");
  metrics::write_roc_csv(ev.roc, out_dir / "roc.csv");
  write_scores_csv(ids, labels, probs, out_dir / "scores.csv");
  for (std::size_t k = 0; k < ev.report.auc.size(); ++k) {
    if (!ev.report.auc[k]) log << "warning: AUC undefined for class " << k << " (absent from the evaluated rows)\n";
  }
  log << metrics::table_row(ev.report) << '\n';
  return ev.report;
}

// ---------------------------------------------------------------- plot

namespace {

constexpr double kPanelW = 420, kPanelH = 300, kMargin = 50;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Panel {
  double x0, y0;  // top-left of the plotting area
  double xmin, xmax, ymin, ymax;

  double px(double x) const { return x0 + (xmax > xmin ? (x - xmin) / (xmax - xmin) : 0.5) * kPanelW; }
  double py(double y) const { return y0 + kPanelH - (ymax > ymin ? (y - ymin) / (ymax - ymin) : 0.5) * kPanelH; }
};

void axes(std::ostringstream& os, const Panel& p, const std::string& title, const std::string& xlabel,
          const std::string& ylabel) {
  os << "<rect x=\"" << num(p.x0) << "\" y=\"" << num(p.y0) << "\" width=\"" << num(kPanelW) << "\" height=\""
     << num(kPanelH) << "\" fill=\"none\" stroke=\"#333\"/>\n";
  os << "<text x=\"" << num(p.x0 + kPanelW / 2) << "\" y=\"" << num(p.y0 - 12)
     << "\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<text x=\"" << num(p.x0 + kPanelW / 2) << "\" y=\"" << num(p.y0 + kPanelH + 36)
     << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel << "</text>\n";
  os << "<text x=\"" << num(p.x0 - 38) << "\" y=\"" << num(p.y0 + kPanelH / 2)
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 " << num(p.x0 - 38) << ' '
     << num(p.y0 + kPanelH / 2) << ")\">" << ylabel << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = p.xmin + (p.xmax - p.xmin) * i / 4.0, fy = p.ymin + (p.ymax - p.ymin) * i / 4.0;
    os << "<text x=\"" << num(p.px(fx)) << "\" y=\"" << num(p.y0 + kPanelH + 16)
       << "\" text-anchor=\"middle\" font-size=\"10\">" << num(fx) << "</text>\n";
    os << "<text x=\"" << num(p.x0 - 6) << "\" y=\"" << num(p.py(fy) + 3)
       << "\" text-anchor=\"end\" font-size=\"10\">" << num(fy) << "</text>\n";
  }
}

void polyline(std::ostringstream& os, const Panel& p, std::span<const std::pair<double, double>> pts,
              const std::string& color) {
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i) os << ' ';
    os << num(p.px(pts[i].first)) << ',' << num(p.py(pts[i].second));
  }
  os << "\"/>\n";
}

void legend(std::ostringstream& os, double x, double y, std::span<const std::pair<std::string, std::string>> items) {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double yy = y + 16.0 * static_cast<double>(i);
    os << "<rect x=\"" << num(x) << "\" y=\"" << num(yy - 8) << "\" width=\"12\" height=\"3\" fill=\""
       << items[i].second << "\"/>\n";
    os << "<text x=\"" << num(x + 16) << "\" y=\"" << num(yy - 3) << "\" font-size=\"11\">" << items[i].first
       << "</text>\n";
  }
}

const char* const kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string svg_open(double w, double h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) +
         "\" height=\"" + num(h) + "\" viewBox=\"0 0 " + num(w) + ' ' + num(h) +
         "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

}  // namespace

std::string training_curves_svg(std::span<const EpochLog> log) {
  if (log.empty()) throw ValidationError("training log has no epochs");
  std::ostringstream os;
  os << svg_open(2 * (kPanelW + 2 * kMargin), kPanelH + 2 * kMargin + 20);
  const double e0 = log.front().epoch, e1 = log.back().epoch;
  double lmax = 0;
  for (const auto& e : log) lmax = std::max({lmax, e.train_loss, e.val_loss});
  if (!(lmax > 0) || !std::isfinite(lmax)) lmax = 1;

  using Series = std::vector<std::pair<double, double>>;
  Series tl, vl, ta, va;
  for (const auto& e : log) {
    tl.emplace_back(e.epoch, e.train_loss);
    vl.emplace_back(e.epoch, e.val_loss);
    ta.emplace_back(e.epoch, e.train_acc);
    va.emplace_back(e.epoch, e.val_acc);
  }
  const std::pair<std::string, std::string> items[] = {{"training", kPalette[0]}, {"validation", kPalette[1]}};

  const Panel loss{kMargin, kMargin, e0, e1, 0.0, lmax * 1.05};
  axes(os, loss, "Loss", "epoch", "loss");
  polyline(os, loss, tl, kPalette[0]);
  polyline(os, loss, vl, kPalette[1]);
  legend(os, loss.x0 + kPanelW - 100, loss.y0 + 18, items);

  const Panel acc{kPanelW + 3 * kMargin, kMargin, e0, e1, 0.0, 1.0};
  axes(os, acc, "Accuracy", "epoch", "accuracy");
  polyline(os, acc, ta, kPalette[0]);
  polyline(os, acc, va, kPalette[1]);
  legend(os, acc.x0 + kPanelW - 100, acc.y0 + kPanelH - 30, items);
  os << "</svg>\n";
  return os.str();
}

std::string roc_curves_svg(std::span<const metrics::ClassRoc> curves) {
  if (curves.empty()) throw ValidationError("ROC file has no curves");
  std::ostringstream os;
  os << svg_open(kPanelW + 2 * kMargin + 170, kPanelH + 2 * kMargin + 20);
  const Panel p{kMargin, kMargin, 0.0, 1.0, 0.0, 1.0};
  axes(os, p, "ROC (one-vs-rest)", "false positive rate", "true positive rate");
  os << "<line x1=\"" << num(p.px(0)) << "\" y1=\"" << num(p.py(0)) << "\" x2=\"" << num(p.px(1)) << "\" y2=\""
     << num(p.py(1)) << "\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n";
  std::vector<std::pair<std::string, std::string>> items;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i];
    const std::string color = kPalette[static_cast<std::size_t>(c.label) % std::size(kPalette)];
    std::vector<std::pair<double, double>> pts;
    for (const auto& q : c.points) pts.emplace_back(q.fpr, q.tpr);
    polyline(os, p, pts, color);
    char label[64];
    std::snprintf(label, sizeof label, "Class %d (AUC = %.4f)", c.label, c.auc ? *c.auc : metrics::auc(c.points));
    items.emplace_back(label, color);
  }
  legend(os, p.x0 + kPanelW + 16, p.y0 + 10, items);
  os << "</svg>\n";
  return os.str();
}

void cmd_plot(const fs::path& log_csv, const fs::path& roc_csv, const fs::path& out_dir) {
  const auto log = read_epoch_log(log_csv);
  const auto roc = metrics::read_roc_csv(roc_csv);
  const std::string curves = training_curves_svg(log);
  const std::string roc_svg = roc_curves_svg(roc);
  fs::create_directories(out_dir);
  for (const auto& [name, body] : {std::pair{"training_curves.svg", &curves}, std::pair{"roc_curves.svg", &roc_svg}}) {
    std::ofstream out(out_dir / name, std::ios::binary);
    if (!out) throw IoError("cannot open " + (out_dir / name).string() + " for writing");
    out << *body;
    if (!out) throw IoError("failed writing " + (out_dir / name).string());
  }
}

}  // namespace endofuse
