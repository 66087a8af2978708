#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "endofuse/tensor.hpp"

namespace endofuse {

enum class Mode { train, eval };

using Rng = std::mt19937_64;

// Uniform double in [0,1) from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

template <typename... Ts>
bool any_requires_grad(const Ts&... ts) {
  return (ts.requires_grad() || ...);
}

template <typename S>
bool recording(const Tape<S>* tape, const Tensor<S>& out) {
  return tape != nullptr && out.requires_grad();
}

// Spatial extent of an [N,C,...] tensor (1 for rank 2).
template <typename S>
Index spatial_size(const Tensor<S>& x) {
  Index s = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) s *= x.dim(i);
  return s;
}

// Columns of the (C*9) x (H*W) patch matrix for a 3x3 kernel at stride 1, pad 1.
template <typename S>
void im2col_3x3(const S* x, Index channels, Index h, Index w, S* col) {
  const Index hw = h * w;
  for (Index c = 0; c < channels; ++c) {
    const S* plane = x + c * hw;
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        S* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        const Index dy = ky - 1;
        const Index dx = kx - 1;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(w, w - dx);
        for (Index y = 0; y < h; ++y) {
          S* dst = row + y * w;
          const Index iy = y + dy;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + w, S(0));
            continue;
          }
          const S* src = plane + iy * w + dx;
          for (Index xx = 0; xx < x0; ++xx) dst[xx] = S(0);
          for (Index xx = x0; xx < x1; ++xx) dst[xx] = src[xx];
          for (Index xx = x1; xx < w; ++xx) dst[xx] = S(0);
        }
      }
    }
  }
}

// Adjoint of im2col_3x3: scatters patch-matrix gradients back onto the image.
template <typename S>
void col2im_3x3_add(const S* col, Index channels, Index h, Index w, S* x) {
  const Index hw = h * w;
  for (Index c = 0; c < channels; ++c) {
    S* plane = x + c * hw;
    for (Index ky = 0; ky < 3; ++ky) {
      for (Index kx = 0; kx < 3; ++kx) {
        const S* row = col + ((c * 3 + ky) * 3 + kx) * hw;
        const Index dy = ky - 1;
        const Index dx = kx - 1;
        const Index x0 = std::max<Index>(0, -dx);
        const Index x1 = std::min<Index>(w, w - dx);
        for (Index y = 0; y < h; ++y) {
          const Index iy = y + dy;
          if (iy < 0 || iy >= h) continue;
          const S* src = row + y * w;
          S* dst = plane + iy * w + dx;
          for (Index xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
        }
      }
    }
  }
}

}  // namespace detail

/// out[n,j] = sum_i W[j,i] x[n,i] + b[j]
template <typename S>
Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 Tape<S>* tape = nullptr) {
  if (x.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
      bias.dim(0) != weight.dim(0)) {
    throw DimensionError("affine: x " + shape_string(x.shape()) + " incompatible with W " +
                         shape_string(weight.shape()) + " and b " + shape_string(bias.shape()));
  }
  const Index n = x.dim(0), d_in = x.dim(1), d_out = weight.dim(0);
  Tensor<S> out({n, d_out}, detail::any_requires_grad(x, weight, bias));
  MatrixMap<S> y(out.value().data(), n, d_out);
  y.noalias() = ConstMatrixMap<S>(x.data(), n, d_in) *
                ConstMatrixMap<S>(weight.data(), d_out, d_in).transpose();
  y.rowwise() += bias.value().matrix().transpose();

  if (detail::recording(tape, out)) {
    tape->record([x, weight, bias, out, n, d_in, d_out]() mutable {
      if (!out.has_grad()) return;
      ConstMatrixMap<S> dy(out.grad().data(), n, d_out);
      if (x.requires_grad()) {
        MatrixMap<S>(x.grad().data(), n, d_in).noalias() +=
            dy * ConstMatrixMap<S>(weight.data(), d_out, d_in);
      }
      if (weight.requires_grad()) {
        MatrixMap<S>(weight.grad().data(), d_out, d_in).noalias() +=
            dy.transpose() * ConstMatrixMap<S>(x.data(), n, d_in);
      }
      if (bias.requires_grad()) bias.grad().matrix() += dy.colwise().sum().transpose();
    });
  }
  return out;
}

/// 1x1 convolution: the same affine map applied at every pixel of [N,C,H,W].
template <typename S>
Tensor<S> conv1x1(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                  Tape<S>* tape = nullptr) {
  if (x.rank() != 4 || weight.rank() != 2 || bias.rank() != 1 || x.dim(1) != weight.dim(1) ||
      bias.dim(0) != weight.dim(0)) {
    throw DimensionError("conv1x1: x " + shape_string(x.shape()) + " incompatible with W " +
                         shape_string(weight.shape()) + " and b " + shape_string(bias.shape()));
  }
  const Index n = x.dim(0), c_in = x.dim(1), c_out = weight.dim(0);
  const Index hw = x.dim(2) * x.dim(3);
  Tensor<S> out({n, c_out, x.dim(2), x.dim(3)}, detail::any_requires_grad(x, weight, bias));
  ConstMatrixMap<S> wm(weight.data(), c_out, c_in);
  for (Index i = 0; i < n; ++i) {
    MatrixMap<S> y(out.value().data() + i * c_out * hw, c_out, hw);
    y.noalias() = wm * ConstMatrixMap<S>(x.data() + i * c_in * hw, c_in, hw);
    y.colwise() += bias.value().matrix();
  }

  if (detail::recording(tape, out)) {
    tape->record([x, weight, bias, out, n, c_in, c_out, hw]() mutable {
      if (!out.has_grad()) return;
      ConstMatrixMap<S> wm(weight.data(), c_out, c_in);
      for (Index i = 0; i < n; ++i) {
        ConstMatrixMap<S> dy(out.grad().data() + i * c_out * hw, c_out, hw);
        if (x.requires_grad()) {
          MatrixMap<S>(x.grad().data() + i * c_in * hw, c_in, hw).noalias() += wm.transpose() * dy;
        }
        if (weight.requires_grad()) {
          MatrixMap<S>(weight.grad().data(), c_out, c_in).noalias() +=
              dy * ConstMatrixMap<S>(x.data() + i * c_in * hw, c_in, hw).transpose();
        }
        if (bias.requires_grad()) bias.grad().matrix() += dy.rowwise().sum();
      }
    });
  }
  return out;
}

/// 3x3 cross-correlation, stride 1, zero padding 1. kernel is [C_out,C_in,3,3].
template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                 Tape<S>* tape = nullptr) {
  if (x.rank() != 4 || kernel.rank() != 4 || bias.rank() != 1 || kernel.dim(2) != 3 ||
      kernel.dim(3) != 3 || x.dim(1) != kernel.dim(1) || bias.dim(0) != kernel.dim(0)) {
    throw DimensionError("conv2d: x " + shape_string(x.shape()) + " incompatible with K " +
                         shape_string(kernel.shape()) + " and b " + shape_string(bias.shape()));
  }
  const Index n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index c_out = kernel.dim(0), hw = h * w, patch = c_in * 9;
  Tensor<S> out({n, c_out, h, w}, detail::any_requires_grad(x, kernel, bias));
  ConstMatrixMap<S> km(kernel.data(), c_out, patch);
  RowMatrix<S> col(patch, hw);
  for (Index i = 0; i < n; ++i) {
    detail::im2col_3x3(x.data() + i * c_in * hw, c_in, h, w, col.data());
    MatrixMap<S> y(out.value().data() + i * c_out * hw, c_out, hw);
    y.noalias() = km * col;
    y.colwise() += bias.value().matrix();
  }

  if (detail::recording(tape, out)) {
    tape->record([x, kernel, bias, out, n, c_in, c_out, h, w, hw, patch]() mutable {
      if (!out.has_grad()) return;
      ConstMatrixMap<S> km(kernel.data(), c_out, patch);
      RowMatrix<S> col(patch, hw);
      RowMatrix<S> dcol(patch, hw);
      for (Index i = 0; i < n; ++i) {
        ConstMatrixMap<S> dy(out.grad().data() + i * c_out * hw, c_out, hw);
        if (kernel.requires_grad()) {
          detail::im2col_3x3(x.data() + i * c_in * hw, c_in, h, w, col.data());
          MatrixMap<S>(kernel.grad().data(), c_out, patch).noalias() += dy * col.transpose();
        }
        if (bias.requires_grad()) bias.grad().matrix() += dy.rowwise().sum();
        if (x.requires_grad()) {
          dcol.noalias() = km.transpose() * dy;
          detail::col2im_3x3_add(dcol.data(), c_in, h, w, x.grad().data() + i * c_in * hw);
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  Tensor<S> out(x.shape(), x.value().max(S(0)), x.requires_grad());
  if (detail::recording(tape, out)) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      x.grad() += (x.value() > S(0)).select(out.grad(), S(0));
    });
  }
  return out;
}

/// Per-channel batch normalization over every axis except axis 1.
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running estimates with momentum 0.1; eval mode uses the
/// running estimates. Statistics are accumulated in double.
template <typename S>
Tensor<S> batch_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     Tensor<S>& running_mean, Tensor<S>& running_var, Mode mode,
                     Tape<S>* tape = nullptr) {
  if (x.rank() < 2) throw DimensionError("batch_norm: input " + shape_string(x.shape()) + " has no channel axis");
  const Index n = x.dim(0), channels = x.dim(1), hw = detail::spatial_size(x);
  for (const Tensor<S>* t : std::initializer_list<const Tensor<S>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw DimensionError("batch_norm: per-channel tensor " + shape_string(t->shape()) +
                           " does not match input " + shape_string(x.shape()));
    }
  }
  if (mode == Mode::train && n < 2) {
    throw DimensionError("batch_norm: train mode needs a batch of at least 2, got " + std::to_string(n));
  }

  const double count = static_cast<double>(n * hw);
  Eigen::ArrayXd mean(channels), inv_std(channels);
  if (mode == Mode::train) {
    mean.setZero();
    Eigen::ArrayXd var = Eigen::ArrayXd::Zero(channels);
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < channels; ++c)
        mean(c) += x.value().segment((i * channels + c) * hw, hw).template cast<double>().sum();
    mean /= count;
    for (Index i = 0; i < n; ++i)
      for (Index c = 0; c < channels; ++c)
        var(c) += (x.value().segment((i * channels + c) * hw, hw).template cast<double>() - mean(c))
                      .square()
                      .sum();
    var /= count;
    inv_std = (var + kBatchNormEps).rsqrt();
    running_mean.value() = ((1.0 - kBatchNormMomentum) * running_mean.value().template cast<double>() +
                            kBatchNormMomentum * mean)
                               .template cast<S>();
    running_var.value() = ((1.0 - kBatchNormMomentum) * running_var.value().template cast<double>() +
                           kBatchNormMomentum * var)
                              .template cast<S>();
  } else {
    mean = running_mean.value().template cast<double>();
    inv_std = (running_var.value().template cast<double>() + kBatchNormEps).rsqrt();
  }

  typename Tensor<S>::Array normalized(x.size());
  Tensor<S> out(x.shape(), detail::any_requires_grad(x, gamma, beta));
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (i * channels + c) * hw;
      normalized.segment(off, hw) =
          (x.value().segment(off, hw) - static_cast<S>(mean(c))) * static_cast<S>(inv_std(c));
      out.value().segment(off, hw) = normalized.segment(off, hw) * gamma.value()(c) + beta.value()(c);
    }
  }

  if (detail::recording(tape, out)) {
    tape->record([x, gamma, beta, out, normalized = std::move(normalized), inv_std, mode, n, channels,
                  hw, count]() mutable {
      if (!out.has_grad()) return;
      const auto& dy = out.grad();
      Eigen::ArrayXd sum_dy = Eigen::ArrayXd::Zero(channels);
      Eigen::ArrayXd sum_dy_xhat = Eigen::ArrayXd::Zero(channels);
      for (Index i = 0; i < n; ++i) {
        for (Index c = 0; c < channels; ++c) {
          const Index off = (i * channels + c) * hw;
          sum_dy(c) += dy.segment(off, hw).template cast<double>().sum();
          sum_dy_xhat(c) +=
              (dy.segment(off, hw) * normalized.segment(off, hw)).template cast<double>().sum();
        }
      }
      if (gamma.requires_grad()) gamma.grad() += sum_dy_xhat.cast<S>();
      if (beta.requires_grad()) beta.grad() += sum_dy.cast<S>();
      if (!x.requires_grad()) return;
      auto& dx = x.grad();
      for (Index c = 0; c < channels; ++c) {
        const double g = static_cast<double>(gamma.value()(c));
        const S scale = static_cast<S>(g * inv_std(c));
        const S mean_dy = static_cast<S>(sum_dy(c) / count);
        const S mean_dy_xhat = static_cast<S>(sum_dy_xhat(c) / count);
        for (Index i = 0; i < n; ++i) {
          const Index off = (i * channels + c) * hw;
          if (mode == Mode::train) {
            dx.segment(off, hw) +=
                scale * (dy.segment(off, hw) - mean_dy - normalized.segment(off, hw) * mean_dy_xhat);
          } else {
            dx.segment(off, hw) += scale * dy.segment(off, hw);
          }
        }
      }
    });
  }
  return out;
}

/// Inverted dropout: train mode zeroes each element with probability p and
/// scales survivors by 1/(1-p); eval mode (or p == 0) returns x unchanged.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Mode mode, Rng& rng, Tape<S>* tape = nullptr) {
  if (!(p >= 0.0 && p < 1.0)) throw ParameterError("dropout probability must be in [0,1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return x;
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  typename Tensor<S>::Array mask(x.size());
  for (Index i = 0; i < mask.size(); ++i) mask(i) = uniform01(rng) >= p ? keep_scale : S(0);
  Tensor<S> out(x.shape(), x.value() * mask, x.requires_grad());
  if (detail::recording(tape, out)) {
    tape->record([x, out, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      x.grad() += out.grad() * mask;
    });
  }
  return out;
}

/// Concatenation along axis 1 of rank-2 [N,C] or rank-4 [N,C,H,W] tensors.
template <typename S>
Tensor<S> concat_channels(std::span<const Tensor<S>> xs, Tape<S>* tape = nullptr) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  const Tensor<S>& first = xs.front();
  if (first.rank() != 2 && first.rank() != 4) {
    throw DimensionError("concat_channels: unsupported rank for " + shape_string(first.shape()));
  }
  Index total = 0;
  bool needs_grad = false;
  for (const auto& t : xs) {
    bool ok = t.rank() == first.rank() && t.dim(0) == first.dim(0);
    for (std::size_t a = 2; ok && a < t.rank(); ++a) ok = t.dim(a) == first.dim(a);
    if (!ok) {
      throw DimensionError("concat_channels: " + shape_string(t.shape()) + " does not match " +
                           shape_string(first.shape()) + " outside the channel axis");
    }
    total += t.dim(1);
    needs_grad = needs_grad || t.requires_grad();
  }
  if (xs.size() == 1) return first;

  const Index n = first.dim(0), hw = detail::spatial_size(first);
  Shape shape = first.shape();
  shape[1] = total;
  Tensor<S> out(shape, needs_grad);
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    const Index block = t.dim(1) * hw;
    for (Index i = 0; i < n; ++i) {
      out.value().segment((i * total + offset) * hw, block) = t.value().segment(i * block, block);
    }
    offset += t.dim(1);
  }

  if (detail::recording(tape, out)) {
    tape->record([inputs = std::vector<Tensor<S>>(xs.begin(), xs.end()), out, offsets, n, hw,
                  total]() mutable {
      if (!out.has_grad()) return;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& t = inputs[k];
        if (!t.requires_grad()) continue;
        const Index block = t.dim(1) * hw;
        auto& g = t.grad();
        for (Index i = 0; i < n; ++i) {
          g.segment(i * block, block) += out.grad().segment((i * total + offsets[k]) * hw, block);
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_channels(std::initializer_list<Tensor<S>> xs, Tape<S>* tape = nullptr) {
  return concat_channels(std::span<const Tensor<S>>(xs.begin(), xs.size()), tape);
}

/// Channels [begin, begin+count) of a rank-2 or rank-4 tensor.
template <typename S>
Tensor<S> slice_channels(const Tensor<S>& x, Index begin, Index count, Tape<S>* tape = nullptr) {
  if (x.rank() < 2 || begin < 0 || count < 0 || begin + count > x.dim(1)) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + "," +
                         std::to_string(begin + count) + ") outside " + shape_string(x.shape()));
  }
  const Index n = x.dim(0), channels = x.dim(1), hw = detail::spatial_size(x);
  Shape shape = x.shape();
  shape[1] = count;
  Tensor<S> out(shape, x.requires_grad());
  const Index block = count * hw;
  for (Index i = 0; i < n; ++i) {
    out.value().segment(i * block, block) = x.value().segment((i * channels + begin) * hw, block);
  }
  if (detail::recording(tape, out)) {
    tape->record([x, out, n, channels, hw, begin, block]() mutable {
      if (!out.has_grad()) return;
      auto& g = x.grad();
      for (Index i = 0; i < n; ++i) {
        g.segment((i * channels + begin) * hw, block) += out.grad().segment(i * block, block);
      }
    });
  }
  return out;
}

/// Per-channel spatial mean: [N,C,H,W] -> [N,C].
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  if (x.rank() != 4 || x.dim(2) < 1 || x.dim(3) < 1) {
    throw DimensionError("global_avg_pool: expected non-empty [N,C,H,W], got " + shape_string(x.shape()));
  }
  const Index rows = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out({x.dim(0), x.dim(1)}, x.requires_grad());
  for (Index r = 0; r < rows; ++r) {
    out.value()(r) = static_cast<S>(x.value().segment(r * hw, hw).template cast<double>().sum() /
                                    static_cast<double>(hw));
  }
  if (detail::recording(tape, out)) {
    tape->record([x, out, rows, hw]() mutable {
      if (!out.has_grad()) return;
      auto& g = x.grad();
      const S inv = S(1) / static_cast<S>(hw);
      for (Index r = 0; r < rows; ++r) g.segment(r * hw, hw) += out.grad()(r) * inv;
    });
  }
  return out;
}

/// Non-overlapping 2x2 mean pooling. A trailing odd row or column is averaged
/// over the pixels that exist, so the output is [N,C,ceil(H/2),ceil(W/2)].
template <typename S>
Tensor<S> avg_pool_2x2(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) {
    throw DimensionError("avg_pool_2x2: expected [N,C,H>=2,W>=2], got " + shape_string(x.shape()));
  }
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index oh = (h + 1) / 2, ow = (w + 1) / 2;
  Tensor<S> out({x.dim(0), x.dim(1), oh, ow}, x.requires_grad());
  auto for_each_window = [=](auto&& fn) {
    for (Index p = 0; p < planes; ++p)
      for (Index oy = 0; oy < oh; ++oy)
        for (Index ox = 0; ox < ow; ++ox) {
          const Index y0 = 2 * oy, x0 = 2 * ox;
          const Index y1 = std::min(y0 + 2, h), x1 = std::min(x0 + 2, w);
          fn(p * h * w, y0, y1, x0, x1, (p * oh + oy) * ow + ox,
             static_cast<S>((y1 - y0) * (x1 - x0)));
        }
  };
  const S* src = x.data();
  S* dst = out.value().data();
  for_each_window([&](Index base, Index y0, Index y1, Index x0, Index x1, Index o, S count) {
    S acc = 0;
    for (Index y = y0; y < y1; ++y)
      for (Index xx = x0; xx < x1; ++xx) acc += src[base + y * w + xx];
    dst[o] = acc / count;
  });
  if (detail::recording(tape, out)) {
    tape->record([x, out, for_each_window, w]() mutable {
      if (!out.has_grad()) return;
      S* g = x.grad().data();
      const S* dy = out.grad().data();
      for_each_window([&](Index base, Index y0, Index y1, Index x0, Index x1, Index o, S count) {
        const S share = dy[o] / count;
        for (Index y = y0; y < y1; ++y)
          for (Index xx = x0; xx < x1; ++xx) g[base + y * w + xx] += share;
      });
    });
  }
  return out;
}

/// Row-wise softmax of [N,C] logits (max-subtracted).
template <typename S>
RowMatrix<S> softmax(const Tensor<S>& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: expected [N,C], got " + shape_string(logits.shape()));
  RowMatrix<S> p = ConstMatrixMap<S>(logits.data(), logits.dim(0), logits.dim(1));
  for (Index r = 0; r < p.rows(); ++r) {
    p.row(r).array() -= p.row(r).maxCoeff();
    p.row(r) = p.row(r).array().exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, std::span<const int> labels,
                                Tape<S>* tape = nullptr) {
  if (logits.rank() != 2 || static_cast<Index>(labels.size()) != logits.dim(0)) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const Index n = logits.dim(0), classes = logits.dim(1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " outside [0," + std::to_string(classes) + ")");
    }
  }
  ConstMatrixMap<S> z(logits.data(), n, classes);
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const double m = static_cast<double>(z.row(r).maxCoeff());
    const double lse = m + std::log((z.row(r).template cast<double>().array() - m).exp().sum());
    total += lse - static_cast<double>(z(r, labels[r]));
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / static_cast<double>(n)), logits.requires_grad());
  if (detail::recording(tape, out)) {
    tape->record([logits, out, label_copy = std::vector<int>(labels.begin(), labels.end()), n,
                  classes]() mutable {
      if (!out.has_grad()) return;
      RowMatrix<S> d = softmax(logits);
      for (Index r = 0; r < n; ++r) d(r, label_copy[r]) -= S(1);
      d *= out.grad()(0) / static_cast<S>(n);
      MatrixMap<S>(logits.grad().data(), n, classes) += d;
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& x, Tape<S>* tape = nullptr) {
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(x.value().template cast<double>().sum()), x.requires_grad());
  if (detail::recording(tape, out)) {
    tape->record([x, out]() mutable {
      if (!out.has_grad()) return;
      x.grad() += out.grad()(0);
    });
  }
  return out;
}

}  // namespace endofuse
