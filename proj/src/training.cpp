#include "endofuse/training.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "endofuse/text.hpp"

namespace endofuse {

using json = nlohmann::json;

namespace {

constexpr char kMagic[4] = {'E', 'F', 'C', 'K'};

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  return seed * 0x9E3779B97F4A7C15ULL ^ (0xBF58476D1CE4E5B9ULL * (static_cast<std::uint64_t>(epoch) + 1));
}

int argmax_row(const Eigen::MatrixXd& m, Index r) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(r, c) > m(r, best)) best = c;
  return static_cast<int>(best);
}

json model_to_json(const ModelConfig& c) {
  return {{"d_in", c.d_in},
          {"d_embed", c.d_embed},
          {"mlp_hidden", c.mlp_hidden},
          {"mlp_dropout", c.mlp_dropout},
          {"growth_rate", c.growth_rate},
          {"blocks", c.blocks},
          {"layers_per_block", c.layers_per_block},
          {"compression", c.compression},
          {"backbone_dropout", c.backbone_dropout},
          {"stem_channels", c.stem()},
          {"proj_dim", c.proj_dim},
          {"num_classes", c.num_classes},
          {"input_side", c.input_side},
          {"bottleneck", c.bottleneck}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  c.d_in = j.at("d_in");
  c.d_embed = j.at("d_embed");
  c.mlp_hidden = j.at("mlp_hidden");
  c.mlp_dropout = j.at("mlp_dropout");
  c.growth_rate = j.at("growth_rate");
  c.blocks = j.at("blocks");
  c.layers_per_block = j.at("layers_per_block");
  c.compression = j.at("compression");
  c.backbone_dropout = j.at("backbone_dropout");
  c.stem_channels = j.at("stem_channels");
  c.proj_dim = j.at("proj_dim");
  c.num_classes = j.at("num_classes");
  c.input_side = j.at("input_side");
  c.bottleneck = j.at("bottleneck");
  return c;
}

json train_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},         {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
          {"beta2", c.beta2},   {"eps", c.eps},                   {"batch", c.batch},
          {"epochs", c.epochs}, {"seed", c.seed},                 {"val_fraction", c.val_fraction}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr");
  c.weight_decay = j.at("weight_decay");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.eps = j.at("eps");
  c.batch = j.at("batch");
  c.epochs = j.at("epochs");
  c.seed = j.at("seed");
  c.val_fraction = j.at("val_fraction");
  return c;
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return static_cast<T>(v);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ParsedHeader {
  json header;
  std::size_t payload_offset = 0;
};

ParsedHeader parse_header(const std::string& bytes, const std::string& source) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(source + ": not a checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != Checkpoint::kFormatVersion) {
    throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint32_t>(bytes, 6);
  if (bytes.size() < 10 + static_cast<std::size_t>(header_len)) throw FormatError(source + ": truncated header");
  ParsedHeader parsed;
  try {
    parsed.header = json::parse(bytes.substr(10, header_len));
  } catch (const json::exception& e) {
    throw FormatError(source + ": malformed header: " + e.what());
  }
  parsed.payload_offset = 10 + header_len;
  return parsed;
}

}  // namespace

void write_epoch_log(std::span<const EpochLog> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& e : log) {
    out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.train_acc) << ','
        << format_double(e.val_loss) << ',' << format_double(e.val_acc) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<EpochLog> read_epoch_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open training log " + path.string());
  std::string line;
  if (!read_line(in, line) || line != "epoch,train_loss,train_acc,val_loss,val_acc") {
    throw FormatError(path.string() + ": row 1: expected header epoch,train_loss,train_acc,val_loss,val_acc");
  }
  std::vector<EpochLog> log;
  for (std::size_t row = 2; read_line(in, line); ++row) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    std::vector<double> v;
    for (const auto& c : cells) {
      if (auto d = parse_double(c)) v.push_back(*d);
    }
    if (cells.size() != 5 || v.size() != 5) throw FormatError(path.string() + ": row " + std::to_string(row) + ": malformed");
    log.push_back({static_cast<int>(v[0]), v[1], v[2], v[3], v[4]});
  }
  return log;
}

Tensor<TrainScalar> gather_images(const Dataset& ds, std::span<const Index> rows) {
  const Index stride = ds.image_stride();
  Tensor<TrainScalar> out({static_cast<Index>(rows.size()), 3, ds.side, ds.side});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.value().segment(static_cast<Index>(i) * stride, stride) = ds.images.segment(rows[i] * stride, stride);
  }
  return out;
}

Tensor<TrainScalar> gather_features(const Dataset& ds, std::span<const Index> rows) {
  const Index d = ds.features.cols();
  Tensor<TrainScalar> out({static_cast<Index>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index c = 0; c < d; ++c) out.value()(static_cast<Index>(i) * d + c) = static_cast<float>(ds.features(rows[i], c));
  }
  return out;
}

EpochStats train_epoch(const ModelConfig& model, ParameterSet<TrainScalar>& params, AdamState<TrainScalar>& adam,
                       const TrainConfig& cfg, const Dataset& data, int epoch) {
  const BatchIterator batches(data.size(), cfg.batch, cfg.seed);
  Rng rng(epoch_seed(cfg.seed, epoch));
  Tape<TrainScalar> tape;
  double loss_sum = 0.0;
  Index correct = 0, seen = 0;
  const auto order = batches.epoch(epoch);
  for (std::size_t b = 0; b < order.size(); ++b) {
    const auto& rows = order[b];
    if (rows.size() < 2) continue;  // batch norm needs two samples
    std::vector<int> labels;
    for (Index r : rows) labels.push_back(data.labels[r]);
    ForwardContext<TrainScalar> ctx{Mode::train, &tape, &rng};
    tape.reset();
    params.zero_grad();
    const Tensor<TrainScalar> logits =
        model_forward(gather_images(data, rows), gather_features(data, rows), params, model, ctx);
    const Tensor<TrainScalar> loss = softmax_cross_entropy<TrainScalar>(logits, labels, &tape);
    if (!std::isfinite(loss.item())) {
      throw std::runtime_error("non-finite training loss in epoch " + std::to_string(epoch) + " at batch " +
                               std::to_string(b));
    }
    tape.backward(loss);
    adam_step(params, adam, cfg);

    const Index n = static_cast<Index>(rows.size());
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
    const Eigen::MatrixXd z = ConstMatrixMap<TrainScalar>(logits.data(), n, logits.dim(1)).cast<double>();
    for (Index i = 0; i < n; ++i) correct += argmax_row(z, i) == labels[i];
    seen += n;
  }
  tape.reset();
  params.zero_grad();
  if (seen == 0) return {};
  return {loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(seen)};
}

Eigen::MatrixXd predict_proba(const ModelConfig& model, ParameterSet<TrainScalar>& params, const Dataset& data,
                              int batch) {
  Eigen::MatrixXd probs(data.size(), model.num_classes);
  ForwardContext<TrainScalar> ctx;  // eval, no tape
  for (Index start = 0; start < data.size(); start += batch) {
    std::vector<Index> rows;
    for (Index r = start; r < std::min<Index>(data.size(), start + batch); ++r) rows.push_back(r);
    const Tensor<TrainScalar> logits =
        model_forward(gather_images(data, rows), gather_features(data, rows), params, model, ctx);
    probs.middleRows(start, static_cast<Index>(rows.size())) = softmax(logits).cast<double>();
  }
  return probs;
}

EpochStats evaluate_loss(const ModelConfig& model, ParameterSet<TrainScalar>& params, const Dataset& data, int batch) {
  if (data.size() == 0) return {};
  const Eigen::MatrixXd probs = predict_proba(model, params, data, batch);
  double loss = 0.0;
  Index correct = 0;
  for (Index i = 0; i < data.size(); ++i) {
    loss -= std::log(std::max(probs(i, data.labels[i]), 1e-300));
    correct += argmax_row(probs, i) == data.labels[i];
  }
  const double n = static_cast<double>(data.size());
  return {loss / n, static_cast<double>(correct) / n};
}

Checkpoint make_checkpoint(const ModelConfig& model, const TrainConfig& train, const ParameterSet<TrainScalar>& params,
                           const NormStats& norm, int epoch) {
  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.train = train;
  ckpt.norm = norm;
  ckpt.seed = train.seed;
  ckpt.epoch = epoch;
  for (const auto& e : params.entries()) {
    const auto& v = e.tensor.value();
    ckpt.tensors.push_back({e.name, e.tensor.shape(), std::vector<float>(v.data(), v.data() + v.size())});
  }
  return ckpt;
}

ParameterSet<TrainScalar> restore_parameters(const Checkpoint& ckpt) {
  ParameterSet<TrainScalar> params = init_parameters<TrainScalar>(ckpt.model, 0);
  if (params.entries().size() != ckpt.tensors.size()) {
    throw SchemaError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.entries().size()));
  }
  for (const auto& rec : ckpt.tensors) {
    Tensor<TrainScalar>& t = params.at(rec.name);
    if (t.shape() != rec.shape) {
      throw SchemaError("checkpoint tensor " + rec.name + " has shape " + shape_string(rec.shape) + ", model expects " +
                        shape_string(t.shape()));
    }
    t.value() = Eigen::Map<const Eigen::ArrayXf>(rec.data.data(), static_cast<Index>(rec.data.size()));
  }
  return params;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  json header;
  header["model"] = model_to_json(ckpt.model);
  header["train"] = train_to_json(ckpt.train);
  header["layer_order"] = ckpt.layer_order;
  header["seed"] = ckpt.seed;
  header["epoch"] = ckpt.epoch;
  header["norm"] = {{"columns", ckpt.norm.columns},
                    {"mean", to_vector(ckpt.norm.mean)},
                    {"stddev", to_vector(ckpt.norm.stddev)},
                    {"dropped", ckpt.norm.dropped}};
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size() * sizeof(float);
  }
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string bytes(kMagic, 4);
  put_le<std::uint16_t>(bytes, Checkpoint::kFormatVersion);
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(text.size()));
  bytes += text;
  bytes.reserve(bytes.size() + offset);
  for (const auto& t : ckpt.tensors)
    for (float v : t.data) put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const ParsedHeader parsed = parse_header(bytes, path.string());
  const json& h = parsed.header;
  Checkpoint ckpt;
  try {
    ckpt.model = model_from_json(h.at("model"));
    ckpt.train = train_from_json(h.at("train"));
    ckpt.layer_order = h.at("layer_order");
    ckpt.seed = h.at("seed");
    ckpt.epoch = h.at("epoch");
    const json& norm = h.at("norm");
    ckpt.norm.columns = norm.at("columns").get<std::vector<std::string>>();
    ckpt.norm.mean = from_vector(norm.at("mean").get<std::vector<double>>());
    ckpt.norm.stddev = from_vector(norm.at("stddev").get<std::vector<double>>());
    ckpt.norm.dropped = norm.at("dropped").get<std::vector<std::string>>();
    for (const json& t : h.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name");
      rec.shape = t.at("shape").get<Shape>();
      const std::size_t offset = t.at("offset");
      const std::size_t count = t.at("count");
      if (static_cast<Index>(count) != shape_size(rec.shape)) {
        throw FormatError(path.string() + ": tensor " + rec.name + " count disagrees with its shape");
      }
      const std::size_t begin = parsed.payload_offset + offset;
      if (begin + count * sizeof(float) > bytes.size()) {
        throw FormatError(path.string() + ": truncated payload for tensor " + rec.name);
      }
      rec.data.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        rec.data[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, begin + i * sizeof(float)));
      }
      ckpt.tensors.push_back(std::move(rec));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  }
  if (ckpt.layer_order != kDenseLayerOrder) {
    throw FormatError(path.string() + ": unsupported dense-layer order " + ckpt.layer_order);
  }
  return ckpt;
}

std::string read_checkpoint_header(const std::filesystem::path& path) {
  return parse_header(read_file(path), path.string()).header.dump(2);
}

std::vector<std::string> checkpoint_tensor_names(const std::filesystem::path& path) {
  const json h = parse_header(read_file(path), path.string()).header;
  std::vector<std::string> names;
  for (const json& t : h.at("tensors")) names.push_back(t.at("name"));
  return names;
}

Split split_for(const DatasetManifest& manifest, const TrainConfig& cfg) {
  const auto labels = manifest.labels();
  return stratified_split(labels, cfg.val_fraction, cfg.seed);
}

FitResult fit(const DatasetManifest& manifest, const FeatureTable& raw_features, const FitOptions& options) {
  TrainConfig train = options.train;
  train.validate();
  const Split split = split_for(manifest, train);
  if (split.train.empty() || split.val.empty()) {
    throw ConfigError("train/validation split is empty (" + std::to_string(split.train.size()) + " train, " +
                      std::to_string(split.val.size()) + " validation)");
  }

  NormStats norm;
  if (options.resume) {
    norm = options.resume->norm;
  } else {
    std::vector<std::string> train_ids;
    for (std::size_t i : split.train) train_ids.push_back(manifest.entries[i].path);
    norm = fit_norm_stats(raw_features, train_ids);
  }
  const FeatureTable features = apply_norm(raw_features, norm);

  ModelConfig model = options.resume ? options.resume->model : options.model;
  if (!options.resume) {
    model.d_in = static_cast<int>(norm.columns.size());
    model.num_classes = manifest.num_classes();
  }
  model.validate();
  if (model.num_classes != manifest.num_classes()) {
    throw ConfigError("checkpoint has " + std::to_string(model.num_classes) + " classes, manifest has " +
                      std::to_string(manifest.num_classes()));
  }

  const Dataset train_data = build_dataset(manifest, features, model.input_side, &split.train);
  const Dataset val_data = build_dataset(manifest, features, model.input_side, &split.val);

  ParameterSet<TrainScalar> params =
      options.resume ? restore_parameters(*options.resume) : init_parameters<TrainScalar>(model, train.seed);
  AdamState<TrainScalar> adam;
  const int first_epoch = options.resume ? options.resume->epoch + 1 : 1;

  FitResult result;
  double best_acc = -1.0;
  for (int epoch = first_epoch; epoch <= train.epochs; ++epoch) {
    const EpochStats tr = train_epoch(model, params, adam, train, train_data, epoch);
    const EpochStats va = evaluate_loss(model, params, val_data, train.batch);
    const EpochLog row{epoch, tr.loss, tr.accuracy, va.loss, va.accuracy};
    result.log.push_back(row);
    if (options.on_epoch) options.on_epoch(row);
    if (va.accuracy > best_acc) {
      best_acc = va.accuracy;
      result.best_checkpoint = make_checkpoint(model, train, params, norm, epoch);
    }
  }
  result.final_checkpoint = make_checkpoint(model, train, params, norm, std::max(first_epoch - 1, train.epochs));
  if (result.log.empty()) result.best_checkpoint = result.final_checkpoint;
  return result;
}

}  // namespace endofuse
