#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "endofuse/dataset.hpp"
#include "endofuse/feature_table.hpp"
#include "endofuse/model.hpp"

namespace endofuse {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch = 64;
  int epochs = 100;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (batch < 2) throw ConfigError("batch must be at least 2 (batch normalization)");
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0,1)");
  }
};

/// First/second moment estimates per trainable parameter.
template <typename S>
struct AdamState {
  std::vector<Eigen::Array<S, Eigen::Dynamic, 1>> m;
  std::vector<Eigen::Array<S, Eigen::Dynamic, 1>> v;
  long long t = 0;
};

/// One Adam update with coupled L2 weight decay (g <- g + wd w). `t` is the
/// already-incremented step count.
template <typename S, typename Derived>
void adam_update(Eigen::ArrayBase<Derived>& w, const Eigen::Array<S, Eigen::Dynamic, 1>& grad,
                 Eigen::Array<S, Eigen::Dynamic, 1>& m, Eigen::Array<S, Eigen::Dynamic, 1>& v, long long t,
                 const TrainConfig& cfg) {
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const S c2 = static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const Eigen::Array<S, Eigen::Dynamic, 1> g = grad + static_cast<S>(cfg.weight_decay) * w.derived();
  m = b1 * m + (S(1) - b1) * g;
  v = b2 * v + (S(1) - b2) * g.square();
  w.derived() -= static_cast<S>(cfg.lr) * (m / c1) / ((v / c2).sqrt() + static_cast<S>(cfg.eps));
}

/// Applies adam_update to every trainable parameter; BN running statistics are
/// never touched. Parameters without a gradient are treated as g = 0.
template <typename S>
void adam_step(ParameterSet<S>& params, AdamState<S>& state, const TrainConfig& cfg) {
  auto& entries = params.entries();
  if (state.m.empty()) {
    for (const auto& e : entries) {
      const Index n = e.trainable() ? e.tensor.size() : 0;
      state.m.push_back(Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n));
      state.v.push_back(Eigen::Array<S, Eigen::Dynamic, 1>::Zero(n));
    }
  }
  if (state.m.size() != entries.size()) throw UsageError("Adam state does not match the parameter set");
  ++state.t;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    if (!e.trainable()) continue;
    if (state.m[i].size() != e.tensor.size()) {
      throw UsageError("Adam state for " + e.name + " has " + std::to_string(state.m[i].size()) +
                       " entries, parameter has " + std::to_string(e.tensor.size()));
    }
    const Eigen::Array<S, Eigen::Dynamic, 1> g =
        e.tensor.has_grad() ? e.tensor.grad() : Eigen::Array<S, Eigen::Dynamic, 1>::Zero(e.tensor.size());
    adam_update<S>(e.tensor.value(), g, state.m[i], state.v[i], state.t, cfg);
  }
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double val_loss = 0;
  double val_acc = 0;
};

void write_epoch_log(std::span<const EpochLog> log, const std::filesystem::path& path);
std::vector<EpochLog> read_epoch_log(const std::filesystem::path& path);

using TrainScalar = float;

Tensor<TrainScalar> gather_images(const Dataset& ds, std::span<const Index> rows);
Tensor<TrainScalar> gather_features(const Dataset& ds, std::span<const Index> rows);

struct EpochStats {
  double loss = 0;
  double accuracy = 0;
};

/// forward (train) -> loss -> backward -> adam_step for every batch of the epoch.
/// Throws std::runtime_error naming the batch index on a non-finite loss.
EpochStats train_epoch(const ModelConfig& model, ParameterSet<TrainScalar>& params, AdamState<TrainScalar>& adam,
                       const TrainConfig& cfg, const Dataset& data, int epoch);

/// Eval-mode class probabilities (N x C) in dataset order.
Eigen::MatrixXd predict_proba(const ModelConfig& model, ParameterSet<TrainScalar>& params, const Dataset& data,
                              int batch);

/// Eval-mode mean cross-entropy and accuracy.
EpochStats evaluate_loss(const ModelConfig& model, ParameterSet<TrainScalar>& params, const Dataset& data, int batch);

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Everything needed to rebuild an eval-ready model.
struct Checkpoint {
  static constexpr std::uint16_t kFormatVersion = 1;

  ModelConfig model;
  TrainConfig train;
  std::string layer_order = kDenseLayerOrder;
  NormStats norm;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::vector<TensorRecord> tensors;
};

Checkpoint make_checkpoint(const ModelConfig& model, const TrainConfig& train, const ParameterSet<TrainScalar>& params,
                           const NormStats& norm, int epoch);
ParameterSet<TrainScalar> restore_parameters(const Checkpoint& ckpt);

/// `EFCK` | u16 version | u32 header length | JSON header | f32 LE payload.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Reads only the JSON header (validated) and returns its text.
std::string read_checkpoint_header(const std::filesystem::path& path);
/// Tensor names listed in the header, in payload order.
std::vector<std::string> checkpoint_tensor_names(const std::filesystem::path& path);

struct FitOptions {
  ModelConfig model;
  TrainConfig train;
  const Checkpoint* resume = nullptr;
  std::function<void(const EpochLog&)> on_epoch;
};

struct FitResult {
  Checkpoint final_checkpoint;
  Checkpoint best_checkpoint;
  std::vector<EpochLog> log;
};

/// Seeded stratified split, normalization fitted on the training rows, then
/// train/eval epochs. The best-validation-accuracy checkpoint is kept alongside
/// the final one. With `resume`, parameters and normalization come from the
/// checkpoint and training continues at its epoch + 1.
FitResult fit(const DatasetManifest& manifest, const FeatureTable& raw_features, const FitOptions& options);

/// Manifest indices of the split recorded by (seed, val_fraction).
Split split_for(const DatasetManifest& manifest, const TrainConfig& cfg);

}  // namespace endofuse
