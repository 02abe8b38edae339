#pragma once

#include <cstddef>
#include <vector>

#include "stlb/layers.hpp"
#include "stlb/network.hpp"

namespace stlb {

// Inverse maps of the backward visualisation path. Each takes a feature map
// shaped like its layer's output and returns one shaped like the layer's
// input. Biases never enter the backward path.

/// Deconvolution: the transpose of the bias-free convolution, so that
/// dot(conv(x), h) == dot(x, deconv_layer(h)). Output (l, y) accumulates
/// kernel(k, l, u) * h(k, y + u) under the forward stride and padding.
template <typename Scalar>
Tensor4<Scalar> deconv_layer(const Tensor4<Scalar>& h, const ConvParams<Scalar>& p, const Shape4& input_shape) {
  return conv_input_grad(h, p, input_shape);
}

/// Unpooling: every pooled value is put back at the location that won the
/// forward max, everything else is zero.
template <typename Scalar>
Tensor4<Scalar> unpool_layer(const Tensor4<Scalar>& h, const PoolSwitch& switches, const Shape4& input_shape) {
  return maxpool_backward(h, switches, input_shape);
}

/// Backward gating by the forward ReLU mask. Unlike a rectifier applied to
/// the backward signal, negative values at forward-positive locations pass.
template <typename Scalar>
Tensor4<Scalar> unrelu_layer(const Tensor4<Scalar>& h, const Mask4& relu_mask) {
  return relu_backward(h, relu_mask);
}

/// weight^T * h reshaped to the layer's input. Fully connected layers change
/// shape, so they cannot be skipped as an identity.
template <typename Scalar>
Tensor4<Scalar> fc_backproject(const Tensor4<Scalar>& h, const FcParams<Scalar>& p, const Shape4& input_shape) {
  return fc_input_grad(h, p, input_shape);
}

struct ChannelSelection {
  enum class Mode { All, Single, TopEnergy };
  Mode mode = Mode::TopEnergy;
  Index channel = 0;  // Single
  Index count = 1;    // TopEnergy: keep this many channels

  static ChannelSelection all() { return {Mode::All, 0, 0}; }
  static ChannelSelection single(Index k) { return {Mode::Single, k, 0}; }
  static ChannelSelection top(Index m) { return {Mode::TopEnergy, 0, m}; }
};

struct SaliencyRequest {
  std::size_t layer_index = 0;
  ChannelSelection selection;
};

struct SaliencyImage {
  Tensor4d raw;        // signed backprojection, shaped like the network input
  Tensor4d magnitude;  // (n, 1, h, w): channel L2 norm of raw, scaled to [0, 1] per image
};

/// Zeroes every channel not chosen by `selection`. Channel energy is the sum
/// of squares over the spatial extent, evaluated per batch item; ties go to
/// the lower channel index.
Tensor4d select_channels(const Tensor4d& feature, const ChannelSelection& selection);

/// Applies the inverse maps of layers layer_index, ..., 0 to `h`:
/// conv -> deconv_layer, maxpool -> unpool_layer, relu -> unrelu_layer,
/// fc -> fc_backproject, dropout and softmax -> identity.
/// Linear in `h` for a fixed trace.
Tensor4d backproject_map(const Network& net, const ForwardTrace& trace, std::size_t layer_index, const Tensor4d& h);

/// Backprojects the selected channels of layer `request.layer_index`'s
/// recorded activation. The trace must come from an eval-mode pass.
SaliencyImage backproject(const Network& net, const ForwardTrace& trace, const SaliencyRequest& request);

/// |raw| combined over channels and divided by its per-image maximum
/// (all-zero images stay zero).
Tensor4d normalized_magnitude(const Tensor4d& raw);

}  // namespace stlb
