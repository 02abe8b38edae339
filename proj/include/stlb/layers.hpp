#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stlb/errors.hpp"
#include "stlb/tensor.hpp"

namespace stlb {

enum class LayerKind { Convolution, ReLU, MaxPool, FullyConnected, Dropout, Softmax };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Convolution: return "conv";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::FullyConnected: return "fc";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Softmax: return "softmax";
  }
  return "?";
}

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Convolution weights. `kernel` has shape (out_channels, in_channels, kh, kw).
template <typename Scalar>
struct ConvParams {
  Tensor4<Scalar> kernel;
  Vector<Scalar> bias;
  Index stride = 1;
  Index pad = 0;

  Index out_channels() const { return kernel.shape().n; }
  Index in_channels() const { return kernel.shape().c; }
  Index kernel_h() const { return kernel.shape().h; }
  Index kernel_w() const { return kernel.shape().w; }
};

/// floor((in + 2 pad - k) / stride) + 1, or a ShapeError if that is < 1.
inline Index conv_extent(Index in, Index k, Index stride, Index pad) {
  if (stride < 1 || pad < 0 || k < 1) throw ShapeError("convolution: invalid stride, pad or kernel");
  const Index span = in + 2 * pad - k;
  if (span < 0) throw ShapeError("convolution: kernel larger than padded input");
  return span / stride + 1;
}

template <typename Scalar>
Shape4 conv_output_shape(const Shape4& in, const ConvParams<Scalar>& p) {
  if (in.c != p.in_channels()) throw ShapeError("convolution: input channel mismatch");
  if (p.bias.size() != p.out_channels()) throw ShapeError("convolution: bias size mismatch");
  return {in.n, p.out_channels(), conv_extent(in.h, p.kernel_h(), p.stride, p.pad),
          conv_extent(in.w, p.kernel_w(), p.stride, p.pad)};
}

namespace detail {

// Lowers batch item `n` into a (out_h*out_w) x (C*kh*kw) patch matrix.
//
// Orientation is that of a true convolution: with the input zero padded by
// `pad`, output (oy, ox) reads kernel tap (u, v) against padded input row
// oy*stride + (kh-1-u) and column ox*stride + (kw-1-v). Kernel taps are
// therefore displacements from the far corner of the window, and a 1x1
// kernel reduces to a per-pixel channel mix.
template <typename Scalar>
void im2col(const Tensor4<Scalar>& x, Index n, Index kh, Index kw, Index stride, Index pad,
            const Shape4& out, Matrix<Scalar>& cols) {
  const Shape4& in = x.shape();
  cols.resize(out.h * out.w, in.c * kh * kw);
  for (Index l = 0; l < in.c; ++l) {
    for (Index u = 0; u < kh; ++u) {
      for (Index v = 0; v < kw; ++v) {
        Scalar* col = cols.col((l * kh + u) * kw + v).data();
        const Index y0 = kh - 1 - u - pad;
        const Index x0 = kw - 1 - v - pad;
        for (Index oy = 0; oy < out.h; ++oy) {
          const Index iy = oy * stride + y0;
          Scalar* dst = col + oy * out.w;
          if (iy < 0 || iy >= in.h) {
            std::fill(dst, dst + out.w, Scalar(0));
            continue;
          }
          const Scalar* row = x.data() + x.offset(n, l, iy, 0);
          for (Index ox = 0; ox < out.w; ++ox) {
            const Index ix = ox * stride + x0;
            dst[ox] = (ix < 0 || ix >= in.w) ? Scalar(0) : row[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters (accumulates) a patch-matrix gradient back
// into batch item `n` of `grad_x`.
template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, Index n, Index kh, Index kw, Index stride, Index pad,
            const Shape4& out, Tensor4<Scalar>& grad_x) {
  const Shape4& in = grad_x.shape();
  for (Index l = 0; l < in.c; ++l) {
    for (Index u = 0; u < kh; ++u) {
      for (Index v = 0; v < kw; ++v) {
        const Scalar* col = cols.col((l * kh + u) * kw + v).data();
        const Index y0 = kh - 1 - u - pad;
        const Index x0 = kw - 1 - v - pad;
        for (Index oy = 0; oy < out.h; ++oy) {
          const Index iy = oy * stride + y0;
          if (iy < 0 || iy >= in.h) continue;
          Scalar* row = grad_x.data() + grad_x.offset(n, l, iy, 0);
          const Scalar* src = col + oy * out.w;
          for (Index ox = 0; ox < out.w; ++ox) {
            const Index ix = ox * stride + x0;
            if (ix >= 0 && ix < in.w) row[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Kernel viewed as a (C*kh*kw) x K matrix.
template <typename Scalar>
auto kernel_matrix(const ConvParams<Scalar>& p) {
  return typename Tensor4<Scalar>::ConstMatrixMap(p.kernel.data(), p.kernel.shape().item_size(),
                                                  p.out_channels());
}

}  // namespace detail

/// out(k, y) = bias(k) + sum over (l, u) of kernel(k, l, u) * x(l, y - u),
/// on the zero-padded input at the configured stride.
template <typename Scalar>
Tensor4<Scalar> conv_forward(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p) {
  const Shape4 out_shape = conv_output_shape(x.shape(), p);
  Tensor4<Scalar> out(out_shape);
  const auto weights = detail::kernel_matrix(p);
  Matrix<Scalar> cols;
  for (Index n = 0; n < x.shape().n; ++n) {
    detail::im2col(x, n, p.kernel_h(), p.kernel_w(), p.stride, p.pad, out_shape, cols);
    auto dst = out.channel_matrix(n);
    dst.noalias() = cols * weights;
    dst.rowwise() += p.bias.transpose();
  }
  return out;
}

/// Gradient with respect to the input only: the adjoint (transpose) of the
/// bias-free convolution applied to `grad_out`.
template <typename Scalar>
Tensor4<Scalar> conv_input_grad(const Tensor4<Scalar>& grad_out, const ConvParams<Scalar>& p,
                                const Shape4& input_shape) {
  const Shape4 out_shape = conv_output_shape(input_shape, p);
  require_same_shape(grad_out.shape(), out_shape, "convolution backward");
  Tensor4<Scalar> grad_x(input_shape);
  const auto weights = detail::kernel_matrix(p);
  Matrix<Scalar> cols;
  for (Index n = 0; n < input_shape.n; ++n) {
    cols.noalias() = grad_out.channel_matrix(n) * weights.transpose();
    detail::col2im(cols, n, p.kernel_h(), p.kernel_w(), p.stride, p.pad, out_shape, grad_x);
  }
  return grad_x;
}

template <typename Scalar>
struct ConvGrads {
  Tensor4<Scalar> grad_x;
  Tensor4<Scalar> grad_kernel;
  Vector<Scalar> grad_bias;
};

/// Gradients of sum(conv_forward(x, p) * grad_out). With `need_input_grad`
/// false the (possibly large) input gradient is skipped and left as zeros.
template <typename Scalar>
ConvGrads<Scalar> conv_backward(const Tensor4<Scalar>& x, const ConvParams<Scalar>& p,
                                const Tensor4<Scalar>& grad_out, bool need_input_grad = true) {
  const Shape4 out_shape = conv_output_shape(x.shape(), p);
  require_same_shape(grad_out.shape(), out_shape, "convolution backward");
  ConvGrads<Scalar> g{Tensor4<Scalar>(x.shape()), Tensor4<Scalar>(p.kernel.shape()),
                      Vector<Scalar>::Zero(p.out_channels())};
  const auto weights = detail::kernel_matrix(p);
  typename Tensor4<Scalar>::MatrixMap grad_w(g.grad_kernel.data(), p.kernel.shape().item_size(),
                                             p.out_channels());
  Matrix<Scalar> cols;
  Matrix<Scalar> grad_cols;
  for (Index n = 0; n < x.shape().n; ++n) {
    const auto go = grad_out.channel_matrix(n);
    detail::im2col(x, n, p.kernel_h(), p.kernel_w(), p.stride, p.pad, out_shape, cols);
    grad_w.noalias() += cols.transpose() * go;
    g.grad_bias += go.colwise().sum().transpose();
    if (need_input_grad) {
      grad_cols.noalias() = go * weights.transpose();
      detail::col2im(grad_cols, n, p.kernel_h(), p.kernel_w(), p.stride, p.pad, out_shape, g.grad_x);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

template <typename Scalar>
struct ReluResult {
  Tensor4<Scalar> out;
  Mask4 mask;  // true where the input was strictly positive
};

template <typename Scalar>
ReluResult<Scalar> relu_forward(const Tensor4<Scalar>& x) {
  ReluResult<Scalar> r{Tensor4<Scalar>(x.shape()), Mask4(x.shape())};
  r.mask.values() = (x.values().array() > Scalar(0)).matrix();
  r.out.values() = x.values().cwiseMax(Scalar(0));
  return r;
}

/// Passes `grad_out` where the mask is set and zeroes it elsewhere.
template <typename Scalar>
Tensor4<Scalar> relu_backward(const Tensor4<Scalar>& grad_out, const Mask4& mask) {
  require_same_shape(grad_out.shape(), mask.shape(), "relu backward");
  return Tensor4<Scalar>(grad_out.shape(),
                         mask.values().select(grad_out.values(), Vector<Scalar>::Zero(grad_out.size())));
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

struct PoolParams {
  Index window_h = 2;
  Index window_w = 2;
  Index stride = 2;
};

inline Shape4 pool_output_shape(const Shape4& in, const PoolParams& p) {
  if (p.window_h < 1 || p.window_w < 1 || p.stride < 1) throw ShapeError("max pooling: invalid window or stride");
  if (p.window_h > in.h || p.window_w > in.w) throw ShapeError("max pooling: window larger than input");
  return {in.n, in.c, (in.h - p.window_h) / p.stride + 1, (in.w - p.window_w) / p.stride + 1};
}

/// Locations selected by a max-pooling forward pass: for every pooled output
/// element, the flat index of the winning input element.
struct PoolSwitch {
  Shape4 input_shape;
  Shape4 output_shape;
  PoolParams params;
  std::vector<Index> argmax;
};

template <typename Scalar>
struct PoolResult {
  Tensor4<Scalar> out;
  PoolSwitch switches;
};

/// Plain window maximum; ties go to the lowest flat input index.
template <typename Scalar>
PoolResult<Scalar> maxpool_forward(const Tensor4<Scalar>& x, const PoolParams& p) {
  const Shape4 out_shape = pool_output_shape(x.shape(), p);
  PoolResult<Scalar> r{Tensor4<Scalar>(out_shape), PoolSwitch{x.shape(), out_shape, p, {}}};
  r.switches.argmax.resize(static_cast<std::size_t>(out_shape.size()));
  Index o = 0;
  for (Index n = 0; n < out_shape.n; ++n) {
    for (Index c = 0; c < out_shape.c; ++c) {
      for (Index oy = 0; oy < out_shape.h; ++oy) {
        for (Index ox = 0; ox < out_shape.w; ++ox, ++o) {
          Index best = x.offset(n, c, oy * p.stride, ox * p.stride);
          Scalar best_value = x[best];
          for (Index dy = 0; dy < p.window_h; ++dy) {
            for (Index dx = 0; dx < p.window_w; ++dx) {
              const Index i = x.offset(n, c, oy * p.stride + dy, ox * p.stride + dx);
              if (x[i] > best_value) {
                best = i;
                best_value = x[i];
              }
            }
          }
          r.out[o] = best_value;
          r.switches.argmax[static_cast<std::size_t>(o)] = best;
        }
      }
    }
  }
  return r;
}

/// Routes each pooled value to its recorded argmax; overlapping windows
/// accumulate. This is both the pooling gradient and the unpooling map.
template <typename Scalar>
Tensor4<Scalar> maxpool_backward(const Tensor4<Scalar>& grad_out, const PoolSwitch& sw,
                                 const Shape4& input_shape) {
  if (!(sw.input_shape == input_shape) || !(sw.output_shape == grad_out.shape()) ||
      static_cast<Index>(sw.argmax.size()) != grad_out.size()) {
    throw SwitchError("max pooling switches do not match the tensors they are applied to");
  }
  Tensor4<Scalar> grad_x(input_shape);
  for (Index o = 0; o < grad_out.size(); ++o) {
    const Index i = sw.argmax[static_cast<std::size_t>(o)];
    if (i < 0 || i >= grad_x.size()) throw SwitchError("max pooling switch points outside the input");
    grad_x[i] += grad_out[o];
  }
  return grad_x;
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// Dense layer: `weight` is out_units x in_units.
template <typename Scalar>
struct FcParams {
  Matrix<Scalar> weight;
  Vector<Scalar> bias;

  Index out_units() const { return weight.rows(); }
  Index in_units() const { return weight.cols(); }
};

/// out = weight * flatten(x) + bias per batch item, shaped (n, out_units, 1, 1).
template <typename Scalar>
Tensor4<Scalar> fc_forward(const Tensor4<Scalar>& x, const FcParams<Scalar>& p) {
  if (x.shape().item_size() != p.in_units()) throw ShapeError("fully connected: input size mismatch");
  if (p.bias.size() != p.out_units()) throw ShapeError("fully connected: bias size mismatch");
  Tensor4<Scalar> out(Shape4{x.shape().n, p.out_units(), 1, 1});
  auto y = out.item_matrix();
  y.noalias() = p.weight * x.item_matrix();
  y.colwise() += p.bias;
  return out;
}

/// weight^T * grad_out, reshaped to `input_shape`.
template <typename Scalar>
Tensor4<Scalar> fc_input_grad(const Tensor4<Scalar>& grad_out, const FcParams<Scalar>& p,
                              const Shape4& input_shape) {
  if (input_shape.item_size() != p.in_units()) throw ShapeError("fully connected: input size mismatch");
  require_same_shape(grad_out.shape(), Shape4{input_shape.n, p.out_units(), 1, 1}, "fully connected backward");
  Tensor4<Scalar> grad_x(input_shape);
  grad_x.item_matrix().noalias() = p.weight.transpose() * grad_out.item_matrix();
  return grad_x;
}

template <typename Scalar>
struct FcGrads {
  Tensor4<Scalar> grad_x;
  Matrix<Scalar> grad_weight;
  Vector<Scalar> grad_bias;
};

template <typename Scalar>
FcGrads<Scalar> fc_backward(const Tensor4<Scalar>& x, const FcParams<Scalar>& p,
                            const Tensor4<Scalar>& grad_out, bool need_input_grad = true) {
  if (x.shape().item_size() != p.in_units()) throw ShapeError("fully connected: input size mismatch");
  require_same_shape(grad_out.shape(), Shape4{x.shape().n, p.out_units(), 1, 1}, "fully connected backward");
  const auto g = grad_out.item_matrix();
  FcGrads<Scalar> r{Tensor4<Scalar>(x.shape()), g * x.item_matrix().transpose(), g.rowwise().sum()};
  if (need_input_grad) r.grad_x.item_matrix().noalias() = p.weight.transpose() * g;
  return r;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

template <typename Scalar>
struct DropoutResult {
  Tensor4<Scalar> out;
  Mask4 mask;  // true for kept elements
};

/// Inverted dropout: in training each element is kept with probability
/// 1 - rate and scaled by 1 / (1 - rate); at inference it is the identity.
template <typename Scalar, typename Rng>
DropoutResult<Scalar> dropout_forward(const Tensor4<Scalar>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  DropoutResult<Scalar> r{x, Mask4::constant(x.shape(), true)};
  if (!training || rate == 0.0) return r;
  std::bernoulli_distribution keep(1.0 - rate);
  const Scalar s = Scalar(1.0 / (1.0 - rate));
  for (Index i = 0; i < x.size(); ++i) {
    const bool k = keep(rng);
    r.mask[i] = k;
    r.out[i] = k ? x[i] * s : Scalar(0);
  }
  return r;
}

template <typename Scalar>
Tensor4<Scalar> dropout_backward(const Tensor4<Scalar>& grad_out, const Mask4& mask, double rate) {
  require_same_shape(grad_out.shape(), mask.shape(), "dropout backward");
  const Scalar s = Scalar(1.0 / (1.0 - rate));
  return Tensor4<Scalar>(grad_out.shape(),
                         mask.values().select(grad_out.values() * s, Vector<Scalar>::Zero(grad_out.size())));
}

// ---------------------------------------------------------------------------
// Softmax and loss
// ---------------------------------------------------------------------------

/// Row-wise softmax over the item_size logits of each batch item.
template <typename Scalar>
Tensor4<Scalar> softmax_forward(const Tensor4<Scalar>& logits) {
  Tensor4<Scalar> out(logits.shape());
  const auto z = logits.item_matrix();
  auto p = out.item_matrix();
  for (Index n = 0; n < z.cols(); ++n) {
    const Scalar m = z.col(n).maxCoeff();
    p.col(n) = (z.col(n).array() - m).exp().matrix();
    p.col(n) /= p.col(n).sum();
  }
  return out;
}

template <typename Scalar>
struct LossResult {
  Scalar loss;
  Tensor4<Scalar> grad_logits;
};

/// Mean over the batch of -log softmax(logits)[label], computed with the
/// row maximum subtracted. The gradient is (softmax - onehot) / batch.
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor4<Scalar>& logits, std::span<const int> labels) {
  const Index batch = logits.shape().n;
  const Index classes = logits.shape().item_size();
  if (static_cast<Index>(labels.size()) != batch) throw DataError("label count does not match batch size");
  LossResult<Scalar> r{Scalar(0), Tensor4<Scalar>(logits.shape())};
  const auto z = logits.item_matrix();
  auto g = r.grad_logits.item_matrix();
  for (Index n = 0; n < batch; ++n) {
    const int label = labels[static_cast<std::size_t>(n)];
    if (label < 0 || label >= classes) throw DataError("label " + std::to_string(label) + " out of range");
    const Scalar m = z.col(n).maxCoeff();
    const auto shifted = (z.col(n).array() - m).eval();
    const Scalar log_sum = std::log(shifted.exp().sum());
    r.loss += log_sum - shifted(label);
    g.col(n) = (shifted - log_sum).exp().matrix();
    g(label, n) -= Scalar(1);
  }
  r.loss /= Scalar(batch);
  g /= Scalar(batch);
  return r;
}

}  // namespace stlb
