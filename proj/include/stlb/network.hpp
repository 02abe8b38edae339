#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stlb/layers.hpp"
#include "stlb/tensor.hpp"

namespace stlb {

using Rng = std::mt19937_64;

/// One layer of a sequential architecture. Only the fields relevant to
/// `kind` are read.
struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  Index units = 0;         // conv output channels or fc output units
  Index kernel = 1;        // square conv kernel extent
  Index stride = 1;        // conv or pool stride
  Index pad = 0;           // symmetric zero padding (conv)
  Index window = 2;        // square pool window
  double rate = 0.5;       // dropout rate

  static LayerSpec conv(std::string name, Index channels, Index kernel, Index stride = 1, Index pad = 0);
  static LayerSpec relu(std::string name = "relu");
  static LayerSpec maxpool(std::string name, Index window, Index stride);
  static LayerSpec fc(std::string name, Index units);
  static LayerSpec dropout(std::string name, double rate);
  static LayerSpec softmax(std::string name = "prob");

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Sequential layer stack with a declared feature-extractor / classifier
/// boundary. Layers [0, split_index) form the feature extractor.
struct ArchitectureSpec {
  std::vector<LayerSpec> layers;
  std::size_t split_index = 0;
  Shape4 input_shape;  // batch extent ignored
  Index class_count = 2;
  /// Subtracted from every input value before the first layer, so inputs in
  /// [0, 1] reach the network roughly zero-centred.
  double input_mean = 0.0;

  /// Throws ConfigError unless shapes chain from the input to class_count
  /// logits and split_index is in range.
  void validate() const;

  /// Output shape of every layer for a batch of one, computed symbolically.
  std::vector<Shape4> layer_output_shapes() const;

  /// Index of the layer called `name`, or nullopt.
  std::optional<std::size_t> find(const std::string& name) const;

  /// Same architecture with the final classifier resized to `classes`.
  ArchitectureSpec with_class_count(Index classes) const;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

/// The desk-scale AlexNet analogue, input mean 0.5:
/// conv(16,5,p2)-relu-pool(2,2)-conv(32,5,p2)-relu-pool(2,2)-fc6(128)-relu-
/// dropout(0.5)-fc7(64)-relu-fc8(classes), split at fc7.
ArchitectureSpec mini_alex(Index class_count, Index image_size = 32);

/// A smaller topology with the same stage/classifier layout, used where many
/// networks have to be trained on one CPU core.
ArchitectureSpec compact_alex(Index class_count, Index image_size = 32);

using LayerParams = std::variant<std::monostate, ConvParams<double>, FcParams<double>>;

enum class InitScheme : std::uint8_t { HeGaussian = 1 };

struct Network {
  ArchitectureSpec arch;
  std::vector<LayerParams> params;
  std::uint64_t seed = 0;
  InitScheme init = InitScheme::HeGaussian;

  std::size_t layer_count() const { return arch.layers.size(); }

  /// Number of trainable scalars in layers [begin, end).
  Index parameter_count(std::size_t begin = 0, std::size_t end = SIZE_MAX) const;
};

/// Derives an independent 64-bit seed from a base seed and a salt.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

/// 64-bit FNV-1a of a string; stable across platforms.
std::uint64_t hash_string(std::string_view s);

/// Zero-mean Gaussian weights with standard deviation sqrt(2 / fan_in) and
/// zero biases. Each layer draws from its own stream derived from
/// (seed, layer index), so re-initialising a subset of layers is
/// reproducible on its own.
Network init_random(const ArchitectureSpec& arch, std::uint64_t seed);

/// Fresh random parameters for every layer at or above the split index.
/// With `keep_hidden_classifier` only the final fully connected layer is
/// replaced and the other classifier layers keep their weights.
Network reinit_classifier(const Network& net, std::uint64_t seed, bool keep_hidden_classifier = false);

/// Replaces the output layer so the network predicts `classes` classes.
/// The new output layer is freshly initialised from `seed`.
Network resize_classifier(const Network& net, Index classes, std::uint64_t seed);

enum class Mode { Train, Eval };

/// Per-layer switch records from a forward pass.
struct Switches {
  std::optional<Mask4> relu_mask;
  std::optional<PoolSwitch> pool;
  std::optional<Mask4> dropout_mask;
};

/// Activations and switches of one forward pass. activations[i] is the
/// output of layer i; `input` is what layer 0 saw, i.e. after subtracting
/// the architecture's input mean.
struct ForwardTrace {
  Mode mode = Mode::Eval;
  Tensor4d input;
  std::vector<Tensor4d> activations;
  std::vector<Switches> switches;

  const Tensor4d& output() const { return activations.back(); }
};

/// Applies the layers in order. Dropout only acts in train mode; `rng` is
/// consumed only by dropout.
ForwardTrace forward(const Network& net, const Tensor4d& x, Mode mode, Rng& rng);

/// Eval-mode forward pass.
ForwardTrace forward(const Network& net, const Tensor4d& x);

/// The output of layer `layer_index` (not its input).
const Tensor4d& feature_at(const Network& net, const ForwardTrace& trace, std::size_t layer_index);

/// Input of the loss: the final activation, or the softmax input when the
/// architecture ends in an explicit softmax layer.
const Tensor4d& logits_of(const Network& net, const ForwardTrace& trace);

/// Parameter gradients, one slot per layer (monostate for parameterless
/// layers and for layers below `first_trainable`).
using Gradients = std::vector<LayerParams>;

/// Backpropagates the gradient of the loss with respect to the logits.
/// Layers below `first_trainable` receive no gradient and the backward pass
/// stops as soon as nothing below needs one.
Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor4d& grad_logits,
                   std::size_t first_trainable = 0);

/// Zero-valued parameter record shaped like `p`.
LayerParams zeros_like(const LayerParams& p);

// Checkpoints -------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

/// Binary checkpoint:
///   "STLB" | u16 version | u8 init scheme | architecture | parameter blobs |
///   u64 seed | u32 CRC32 of everything before it.
/// Integers and doubles are little-endian. The architecture is
///   u32 input c, h, w | u32 class_count | f64 input mean | u32 split_index |
///   u32 layer count |
///   per layer: u8 kind, u16 name length, name bytes, u32 units, kernel,
///   stride, pad, window, f64 rate.
/// Parameter blobs follow layer order: conv kernel (k, l, kh, kw row-major)
/// then bias; fc weight (row-major, out x in) then bias.
std::vector<std::uint8_t> serialize_checkpoint(const Network& net);
Network deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Network& net, const std::filesystem::path& path);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace stlb
