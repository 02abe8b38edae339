#include "stlb/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stlb {

Tensor4d select_channels(const Tensor4d& feature, const ChannelSelection& selection) {
  const Shape4 s = feature.shape();
  if (selection.mode == ChannelSelection::Mode::All) return feature;
  Tensor4d out(s);
  const Index plane = s.h * s.w;
  for (Index n = 0; n < s.n; ++n) {
    std::vector<Index> keep;
    if (selection.mode == ChannelSelection::Mode::Single) {
      if (selection.channel < 0 || selection.channel >= s.c) throw UsageError("selected channel out of range");
      keep.push_back(selection.channel);
    } else {
      if (selection.count < 1) throw UsageError("top-energy selection needs a positive channel count");
      std::vector<double> energy(static_cast<std::size_t>(s.c));
      for (Index c = 0; c < s.c; ++c) {
        energy[static_cast<std::size_t>(c)] = feature.values().segment((n * s.c + c) * plane, plane).squaredNorm();
      }
      std::vector<Index> order(static_cast<std::size_t>(s.c));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return energy[static_cast<std::size_t>(a)] > energy[static_cast<std::size_t>(b)];
      });
      order.resize(static_cast<std::size_t>(std::min(selection.count, s.c)));
      keep = order;
    }
    for (Index c : keep) {
      out.values().segment((n * s.c + c) * plane, plane) = feature.values().segment((n * s.c + c) * plane, plane);
    }
  }
  return out;
}

Tensor4d backproject_map(const Network& net, const ForwardTrace& trace, std::size_t layer_index, const Tensor4d& h) {
  if (trace.mode != Mode::Eval) throw UsageError("saliency needs an eval-mode trace");
  if (layer_index >= net.layer_count() || trace.activations.size() != net.layer_count()) {
    throw UsageError("saliency layer index out of range");
  }
  require_same_shape(h.shape(), trace.activations[layer_index].shape(), "backproject");
  Tensor4d cur = h;
  for (std::size_t i = layer_index + 1; i-- > 0;) {
    const Shape4 in_shape = i == 0 ? trace.input.shape() : trace.activations[i - 1].shape();
    switch (net.arch.layers[i].kind) {
      case LayerKind::Convolution:
        cur = deconv_layer(cur, std::get<ConvParams<double>>(net.params[i]), in_shape);
        break;
      case LayerKind::MaxPool:
        if (!trace.switches[i].pool) throw SwitchError("missing pooling switches");
        cur = unpool_layer(cur, *trace.switches[i].pool, in_shape);
        break;
      case LayerKind::ReLU:
        if (!trace.switches[i].relu_mask) throw SwitchError("missing ReLU switches");
        cur = unrelu_layer(cur, *trace.switches[i].relu_mask);
        break;
      case LayerKind::FullyConnected:
        cur = fc_backproject(cur, std::get<FcParams<double>>(net.params[i]), in_shape);
        break;
      case LayerKind::Dropout:
      case LayerKind::Softmax:
        break;
    }
  }
  return cur;
}

Tensor4d normalized_magnitude(const Tensor4d& raw) {
  const Shape4 s = raw.shape();
  Tensor4d mag(Shape4{s.n, 1, s.h, s.w});
  const Index plane = s.h * s.w;
  for (Index n = 0; n < s.n; ++n) {
    auto dst = mag.values().segment(n * plane, plane);
    for (Index c = 0; c < s.c; ++c) {
      dst += raw.values().segment((n * s.c + c) * plane, plane).cwiseAbs2();
    }
    dst = dst.cwiseSqrt();
    const double peak = dst.maxCoeff();
    if (peak > 0.0) dst /= peak;
  }
  return mag;
}

SaliencyImage backproject(const Network& net, const ForwardTrace& trace, const SaliencyRequest& request) {
  const Tensor4d& feature = feature_at(net, trace, request.layer_index);
  SaliencyImage img;
  img.raw = backproject_map(net, trace, request.layer_index, select_channels(feature, request.selection));
  img.magnitude = normalized_magnitude(img.raw);
  return img;
}

}  // namespace stlb
