#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "endofuse/ops.hpp"

namespace endofuse {

/// Architecture hyperparameters of the fusion network.
struct ModelConfig {
  int d_in = 92;          // radiomics input width
  int d_embed = 128;      // MLP embedding width
  int mlp_hidden = 1024;
  double mlp_dropout = 0.5;
  int growth_rate = 24;   // k
  int blocks = 3;
  int layers_per_block = 16;
  double compression = 0.5;  // theta
  double backbone_dropout = 0.2;
  int stem_channels = 0;  // 0 selects 2 * growth_rate
  int proj_dim = 128;
  int num_classes = 10;
  int input_side = 224;
  bool bottleneck = false;  // 1x1 conv to 4k channels before the 3x3 conv

  int stem() const { return stem_channels > 0 ? stem_channels : 2 * growth_rate; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
    };
    positive(d_in, "d_in");
    positive(d_embed, "d_embed");
    positive(mlp_hidden, "mlp_hidden");
    positive(growth_rate, "growth_rate");
    positive(blocks, "blocks");
    positive(proj_dim, "proj_dim");
    positive(num_classes, "num_classes");
    positive(stem(), "stem_channels");
    if (layers_per_block < 0) throw ConfigError("layers_per_block must be non-negative");
    if (!(compression > 0.0 && compression <= 1.0)) throw ConfigError("compression must be in (0,1]");
    if (!(mlp_dropout >= 0.0 && mlp_dropout < 1.0) || !(backbone_dropout >= 0.0 && backbone_dropout < 1.0)) {
      throw ConfigError("dropout probabilities must be in [0,1)");
    }
    if (input_side < (1 << blocks)) {
      throw ConfigError("input_side " + std::to_string(input_side) + " too small for " +
                        std::to_string(blocks - 1) + " poolings (need >= " + std::to_string(1 << blocks) + ")");
    }
  }
};

// Order of the dense-layer composite, stored in checkpoints.
inline constexpr const char* kDenseLayerOrder = "bn-relu-conv";

/// Channel count entering each dense block and leaving the backbone.
struct BackboneShape {
  std::vector<int> block_in;
  std::vector<int> block_out;
  int out_channels = 0;
  int out_side = 0;
};

inline BackboneShape backbone_shape(const ModelConfig& cfg) {
  BackboneShape s;
  int channels = cfg.stem();
  int side = cfg.input_side;
  for (int b = 0; b < cfg.blocks; ++b) {
    s.block_in.push_back(channels);
    channels += cfg.layers_per_block * cfg.growth_rate;
    s.block_out.push_back(channels);
    if (b + 1 < cfg.blocks) {
      channels = static_cast<int>(std::floor(cfg.compression * channels));
      side = (side + 1) / 2;
    }
  }
  s.out_channels = channels;
  s.out_side = side;
  return s;
}

enum class ParamKind { weight, bias, bn_scale, bn_shift, running_mean, running_var };

/// Named parameter tensors in a fixed insertion order.
template <typename S>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<S> tensor;
    ParamKind kind;

    bool trainable() const { return kind != ParamKind::running_mean && kind != ParamKind::running_var; }
  };

  Tensor<S> add(std::string name, Shape shape, ParamKind kind) {
    if (index_.contains(name)) throw UsageError("duplicate parameter " + name);
    Entry e{name, Tensor<S>(std::move(shape)), kind};
    e.tensor.set_requires_grad(e.trainable());
    index_.emplace(std::move(name), entries_.size());
    entries_.push_back(std::move(e));
    return entries_.back().tensor;
  }

  Tensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("no parameter named " + name);
    return entries_[it->second].tensor;
  }
  const Tensor<S>& at(const std::string& name) const { return const_cast<ParameterSet*>(this)->at(name); }
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  Index trainable_count() const {
    Index n = 0;
    for (const auto& e : entries_)
      if (e.trainable()) n += e.tensor.size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename S>
struct ForwardContext {
  Mode mode = Mode::eval;
  Tape<S>* tape = nullptr;
  Rng* rng = nullptr;  // required when mode == train and any dropout is active
};

namespace detail {

template <typename S>
Tensor<S> maybe_dropout(const Tensor<S>& x, double p, ForwardContext<S>& ctx) {
  if (ctx.mode == Mode::eval || p == 0.0) return x;
  if (ctx.rng == nullptr) throw UsageError("train-mode forward needs a random generator for dropout");
  return dropout(x, p, ctx.mode, *ctx.rng, ctx.tape);
}

template <typename S>
Tensor<S> bn(const Tensor<S>& x, ParameterSet<S>& params, const std::string& prefix, ForwardContext<S>& ctx) {
  return batch_norm(x, params.at(prefix + ".gamma"), params.at(prefix + ".beta"),
                    params.at(prefix + ".running_mean"), params.at(prefix + ".running_var"), ctx.mode, ctx.tape);
}

template <typename S>
void add_bn(ParameterSet<S>& params, const std::string& prefix, Index channels) {
  params.add(prefix + ".gamma", {channels}, ParamKind::bn_scale).value().setOnes();
  params.add(prefix + ".beta", {channels}, ParamKind::bn_shift);
  params.add(prefix + ".running_mean", {channels}, ParamKind::running_mean);
  params.add(prefix + ".running_var", {channels}, ParamKind::running_var).value().setOnes();
}

inline double normal_sample(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename S>
void normal_fill(Tensor<S>& t, double stddev, Rng& rng) {
  for (Index i = 0; i < t.size(); ++i) t.value()(i) = static_cast<S>(stddev * normal_sample(rng));
}

}  // namespace detail

/// Allocates every parameter in a fixed order. Conv and affine weights feeding a
/// ReLU get He-normal init; the classifier uses LeCun-normal; biases are zero;
/// BN gamma = 1, beta = 0, running var = 1.
template <typename S>
ParameterSet<S> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterSet<S> p;
  Rng rng(seed);
  auto weight = [&](const std::string& name, Shape shape, double fan_in, double gain) {
    Tensor<S> w = p.add(name, std::move(shape), ParamKind::weight);
    detail::normal_fill(w, std::sqrt(gain / fan_in), rng);
  };
  auto bias = [&](const std::string& name, Index n) { p.add(name, {n}, ParamKind::bias); };

  weight("mlp.fc1.weight", {cfg.mlp_hidden, cfg.d_in}, cfg.d_in, 2.0);
  bias("mlp.fc1.bias", cfg.mlp_hidden);
  weight("mlp.fc2.weight", {cfg.d_embed, cfg.mlp_hidden}, cfg.mlp_hidden, 2.0);
  bias("mlp.fc2.bias", cfg.d_embed);

  weight("backbone.stem.weight", {cfg.stem(), 3, 3, 3}, 27.0, 2.0);
  bias("backbone.stem.bias", cfg.stem());
  const BackboneShape shape = backbone_shape(cfg);
  const int k = cfg.growth_rate;
  for (int b = 0; b < cfg.blocks; ++b) {
    for (int l = 0; l < cfg.layers_per_block; ++l) {
      const std::string pre = "backbone.block" + std::to_string(b) + ".layer" + std::to_string(l);
      const int c_in = shape.block_in[b] + l * k;
      detail::add_bn(p, pre + ".bn", c_in);
      int conv_in = c_in;
      if (cfg.bottleneck) {
        weight(pre + ".bottleneck.weight", {4 * k, c_in}, c_in, 2.0);
        bias(pre + ".bottleneck.bias", 4 * k);
        detail::add_bn(p, pre + ".bn2", 4 * k);
        conv_in = 4 * k;
      }
      weight(pre + ".conv.weight", {k, conv_in, 3, 3}, 9.0 * conv_in, 2.0);
      bias(pre + ".conv.bias", k);
    }
    if (b + 1 < cfg.blocks) {
      const std::string pre = "backbone.transition" + std::to_string(b);
      const int c_in = shape.block_out[b];
      const int c_out = static_cast<int>(std::floor(cfg.compression * c_in));
      detail::add_bn(p, pre + ".bn", c_in);
      weight(pre + ".conv.weight", {c_out, c_in}, c_in, 2.0);
      bias(pre + ".conv.bias", c_out);
    }
  }
  detail::add_bn(p, "backbone.final_bn", shape.out_channels);

  weight("proj.fc.weight", {cfg.proj_dim, shape.out_channels}, shape.out_channels, 2.0);
  bias("proj.fc.bias", cfg.proj_dim);
  detail::add_bn(p, "proj.bn", cfg.proj_dim);

  weight("head.weight", {cfg.num_classes, cfg.proj_dim + cfg.d_embed}, cfg.proj_dim + cfg.d_embed, 1.0);
  bias("head.bias", cfg.num_classes);
  return p;
}

/// z = dropout(W2 dropout(relu(W1 x + b1)) + b2)
template <typename S>
Tensor<S> mlp_forward(const Tensor<S>& x, ParameterSet<S>& params, const ModelConfig& cfg,
                      ForwardContext<S>& ctx) {
  if (x.rank() != 2 || x.dim(1) != params.at("mlp.fc1.weight").dim(1)) {
    throw SchemaError("mlp input " + shape_string(x.shape()) + " does not match d_in " +
                      std::to_string(params.at("mlp.fc1.weight").dim(1)));
  }
  Tensor<S> h = relu(affine(x, params.at("mlp.fc1.weight"), params.at("mlp.fc1.bias"), ctx.tape), ctx.tape);
  h = detail::maybe_dropout(h, cfg.mlp_dropout, ctx);
  Tensor<S> z = affine(h, params.at("mlp.fc2.weight"), params.at("mlp.fc2.bias"), ctx.tape);
  return detail::maybe_dropout(z, cfg.mlp_dropout, ctx);
}

/// H_l: batch_norm -> relu -> 3x3 conv (k outputs) -> dropout.
template <typename S>
Tensor<S> dense_layer_forward(const Tensor<S>& x, ParameterSet<S>& params, const std::string& prefix,
                              const ModelConfig& cfg, ForwardContext<S>& ctx) {
  Tensor<S> y = relu(detail::bn(x, params, prefix + ".bn", ctx), ctx.tape);
  if (cfg.bottleneck) {
    y = conv1x1(y, params.at(prefix + ".bottleneck.weight"), params.at(prefix + ".bottleneck.bias"), ctx.tape);
    y = relu(detail::bn(y, params, prefix + ".bn2", ctx), ctx.tape);
  }
  y = conv2d(y, params.at(prefix + ".conv.weight"), params.at(prefix + ".conv.bias"), ctx.tape);
  return detail::maybe_dropout(y, cfg.backbone_dropout, ctx);
}

/// X_l = H_l([X_0; ...; X_{l-1}]) for l = 1..L; returns [X_0; ...; X_L].
template <typename S>
Tensor<S> dense_block_forward(const Tensor<S>& x0, int layers, ParameterSet<S>& params,
                              const std::string& prefix, const ModelConfig& cfg, ForwardContext<S>& ctx) {
  std::vector<Tensor<S>> features{x0};
  for (int l = 0; l < layers; ++l) {
    const Tensor<S> input = concat_channels<S>(features, ctx.tape);
    features.push_back(dense_layer_forward(input, params, prefix + ".layer" + std::to_string(l), cfg, ctx));
  }
  return concat_channels<S>(features, ctx.tape);
}

/// batch_norm -> relu -> 1x1 conv to floor(theta C) channels -> 2x2 average pool.
template <typename S>
Tensor<S> transition_forward(const Tensor<S>& x, ParameterSet<S>& params, const std::string& prefix,
                             ForwardContext<S>& ctx) {
  Tensor<S> y = relu(detail::bn(x, params, prefix + ".bn", ctx), ctx.tape);
  y = conv1x1(y, params.at(prefix + ".conv.weight"), params.at(prefix + ".conv.bias"), ctx.tape);
  return avg_pool_2x2(y, ctx.tape);
}

/// Stem conv, then dense blocks separated by transitions, then BN + ReLU.
template <typename S>
Tensor<S> densenet_forward(const Tensor<S>& images, ParameterSet<S>& params, const ModelConfig& cfg,
                           ForwardContext<S>& ctx) {
  if (images.rank() != 4 || images.dim(1) != 3) {
    throw DimensionError("densenet expects [N,3,S,S] images, got " + shape_string(images.shape()));
  }
  if (images.dim(2) < (1 << cfg.blocks) || images.dim(3) < (1 << cfg.blocks)) {
    throw ConfigError("input side " + std::to_string(images.dim(2)) + " too small for " +
                      std::to_string(cfg.blocks - 1) + " poolings");
  }
  Tensor<S> x = conv2d(images, params.at("backbone.stem.weight"), params.at("backbone.stem.bias"), ctx.tape);
  for (int b = 0; b < cfg.blocks; ++b) {
    x = dense_block_forward(x, cfg.layers_per_block, params, "backbone.block" + std::to_string(b), cfg, ctx);
    if (b + 1 < cfg.blocks) x = transition_forward(x, params, "backbone.transition" + std::to_string(b), ctx);
  }
  return relu(detail::bn(x, params, "backbone.final_bn", ctx), ctx.tape);
}

/// GAP -> affine -> batch_norm -> relu.
template <typename S>
Tensor<S> projection_forward(const Tensor<S>& z, ParameterSet<S>& params, ForwardContext<S>& ctx) {
  const Index proj_dim = params.at("proj.fc.weight").dim(0);
  if (z.rank() == 4 && proj_dim >= z.dim(1) * z.dim(2) * z.dim(3)) {
    std::cerr << "warning: projection width " << proj_dim << " is not smaller than the feature map size "
              << z.dim(1) * z.dim(2) * z.dim(3) << '\n';
  }
  Tensor<S> y = affine(global_avg_pool(z, ctx.tape), params.at("proj.fc.weight"), params.at("proj.fc.bias"), ctx.tape);
  return relu(detail::bn(y, params, "proj.bn", ctx), ctx.tape);
}

/// [F_proj ; F_mlp] -> single affine layer to class logits.
template <typename S>
Tensor<S> fuse_and_classify(const Tensor<S>& f_proj, const Tensor<S>& f_mlp, ParameterSet<S>& params,
                            ForwardContext<S>& ctx) {
  if (f_proj.rank() != 2 || f_mlp.rank() != 2 || f_proj.dim(0) != f_mlp.dim(0)) {
    throw DimensionError("fusion inputs " + shape_string(f_proj.shape()) + " and " +
                         shape_string(f_mlp.shape()) + " disagree on batch size");
  }
  const Tensor<S> combined = concat_channels<S>({f_proj, f_mlp}, ctx.tape);
  return affine(combined, params.at("head.weight"), params.at("head.bias"), ctx.tape);
}

template <typename S>
Tensor<S> model_forward(const Tensor<S>& images, const Tensor<S>& features, ParameterSet<S>& params,
                        const ModelConfig& cfg, ForwardContext<S>& ctx) {
  if (images.dim(0) != features.dim(0)) {
    throw DimensionError("image batch " + shape_string(images.shape()) + " and feature batch " +
                         shape_string(features.shape()) + " disagree");
  }
  const Tensor<S> f_cnn = densenet_forward(images, params, cfg, ctx);
  const Tensor<S> f_mlp = mlp_forward(features, params, cfg, ctx);
  const Tensor<S> f_proj = projection_forward(f_cnn, params, ctx);
  return fuse_and_classify(f_proj, f_mlp, params, ctx);
}

}  // namespace endofuse
