#include "stlb/network.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace stlb {

LayerSpec LayerSpec::conv(std::string name, Index channels, Index kernel, Index stride, Index pad) {
  LayerSpec s;
  s.kind = LayerKind::Convolution;
  s.name = std::move(name);
  s.units = channels;
  s.kernel = kernel;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::relu(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::ReLU;
  s.name = std::move(name);
  return s;
}

LayerSpec LayerSpec::maxpool(std::string name, Index window, Index stride) {
  LayerSpec s;
  s.kind = LayerKind::MaxPool;
  s.name = std::move(name);
  s.window = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::fc(std::string name, Index units) {
  LayerSpec s;
  s.kind = LayerKind::FullyConnected;
  s.name = std::move(name);
  s.units = units;
  return s;
}

LayerSpec LayerSpec::dropout(std::string name, double rate) {
  LayerSpec s;
  s.kind = LayerKind::Dropout;
  s.name = std::move(name);
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::softmax(std::string name) {
  LayerSpec s;
  s.kind = LayerKind::Softmax;
  s.name = std::move(name);
  return s;
}

namespace {

Shape4 layer_output_shape(const LayerSpec& l, const Shape4& in) {
  switch (l.kind) {
    case LayerKind::Convolution:
      if (l.units < 1) throw ConfigError("layer '" + l.name + "': conv needs at least one output channel");
      return {in.n, l.units, conv_extent(in.h, l.kernel, l.stride, l.pad), conv_extent(in.w, l.kernel, l.stride, l.pad)};
    case LayerKind::MaxPool:
      return pool_output_shape(in, PoolParams{l.window, l.window, l.stride});
    case LayerKind::FullyConnected:
      if (l.units < 1) throw ConfigError("layer '" + l.name + "': fc needs at least one unit");
      return {in.n, l.units, 1, 1};
    case LayerKind::Dropout:
      if (!(l.rate >= 0.0 && l.rate < 1.0)) throw ConfigError("layer '" + l.name + "': dropout rate must lie in [0, 1)");
      return in;
    case LayerKind::ReLU:
    case LayerKind::Softmax:
      return in;
  }
  throw ConfigError("unknown layer kind");
}

bool has_params(LayerKind k) { return k == LayerKind::Convolution || k == LayerKind::FullyConnected; }

LayerParams draw_layer(const LayerSpec& l, const Shape4& in, std::uint64_t seed) {
  Rng rng(seed);
  if (l.kind == LayerKind::Convolution) {
    const Index fan_in = in.c * l.kernel * l.kernel;
    std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    ConvParams<double> p{Tensor4d(Shape4{l.units, in.c, l.kernel, l.kernel}), Vector<double>::Zero(l.units), l.stride, l.pad};
    for (Index i = 0; i < p.kernel.size(); ++i) p.kernel[i] = gauss(rng);
    return p;
  }
  if (l.kind == LayerKind::FullyConnected) {
    const Index fan_in = in.item_size();
    std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    FcParams<double> p{Matrix<double>(l.units, fan_in), Vector<double>::Zero(l.units)};
    for (Index r = 0; r < l.units; ++r) {
      for (Index c = 0; c < fan_in; ++c) p.weight(r, c) = gauss(rng);
    }
    return p;
  }
  return std::monostate{};
}

std::size_t last_param_layer(const ArchitectureSpec& arch) {
  for (std::size_t i = arch.layers.size(); i-- > 0;) {
    if (arch.layers[i].kind == LayerKind::FullyConnected) return i;
  }
  throw ConfigError("architecture has no fully connected output layer");
}

}  // namespace

void ArchitectureSpec::validate() const {
  if (layers.empty()) throw ConfigError("architecture has no layers");
  if (split_index > layers.size()) throw ConfigError("split_index beyond the last layer");
  if (class_count < 1) throw ConfigError("class_count must be positive");
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::Softmax) throw ConfigError("softmax is only allowed as the final layer");
  }
  std::vector<Shape4> shapes;
  try {
    shapes = layer_output_shapes();
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("architecture shapes do not chain: ") + e.what());
  }
  if (shapes.back().item_size() != class_count) {
    throw ConfigError("final layer yields " + std::to_string(shapes.back().item_size()) + " outputs, expected " +
                      std::to_string(class_count) + " classes");
  }
}

std::vector<Shape4> ArchitectureSpec::layer_output_shapes() const {
  validate_shape(input_shape.with_batch(1));
  std::vector<Shape4> shapes;
  Shape4 s = input_shape.with_batch(1);
  for (const LayerSpec& l : layers) {
    s = layer_output_shape(l, s);
    shapes.push_back(s);
  }
  return shapes;
}

std::optional<std::size_t> ArchitectureSpec::find(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

ArchitectureSpec ArchitectureSpec::with_class_count(Index classes) const {
  ArchitectureSpec a = *this;
  a.layers[last_param_layer(a)].units = classes;
  a.class_count = classes;
  a.validate();
  return a;
}

ArchitectureSpec mini_alex(Index class_count, Index image_size) {
  ArchitectureSpec a;
  a.input_shape = {1, 1, image_size, image_size};
  a.input_mean = 0.5;
  a.class_count = class_count;
  a.layers = {LayerSpec::conv("conv1", 16, 5, 1, 2), LayerSpec::relu("relu1"), LayerSpec::maxpool("pool1", 2, 2),
              LayerSpec::conv("conv2", 32, 5, 1, 2), LayerSpec::relu("relu2"), LayerSpec::maxpool("pool2", 2, 2),
              LayerSpec::fc("fc6", 128),             LayerSpec::relu("relu6"), LayerSpec::dropout("drop6", 0.5),
              LayerSpec::fc("fc7", 64),              LayerSpec::relu("relu7"), LayerSpec::fc("fc8", class_count)};
  a.split_index = 9;
  a.validate();
  return a;
}

ArchitectureSpec compact_alex(Index class_count, Index image_size) {
  ArchitectureSpec a;
  a.input_shape = {1, 1, image_size, image_size};
  a.input_mean = 0.5;
  a.class_count = class_count;
  a.layers = {LayerSpec::conv("conv1", 8, 5, 2, 2), LayerSpec::relu("relu1"), LayerSpec::maxpool("pool1", 2, 2),
              LayerSpec::conv("conv2", 16, 3, 1, 1), LayerSpec::relu("relu2"), LayerSpec::maxpool("pool2", 2, 2),
              LayerSpec::fc("fc6", 64),              LayerSpec::relu("relu6"), LayerSpec::dropout("drop6", 0.5),
              LayerSpec::fc("fc7", 32),              LayerSpec::relu("relu7"), LayerSpec::fc("fc8", class_count)};
  a.split_index = 9;
  a.validate();
  return a;
}

Index Network::parameter_count(std::size_t begin, std::size_t end) const {
  Index total = 0;
  for (std::size_t i = begin; i < std::min(end, params.size()); ++i) {
    if (const auto* c = std::get_if<ConvParams<double>>(&params[i])) total += c->kernel.size() + c->bias.size();
    if (const auto* f = std::get_if<FcParams<double>>(&params[i])) total += f->weight.size() + f->bias.size();
  }
  return total;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt) {
  // splitmix64 finaliser over the combined words.
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Network init_random(const ArchitectureSpec& arch, std::uint64_t seed) {
  arch.validate();
  Network net{arch, {}, seed, InitScheme::HeGaussian};
  Shape4 in = arch.input_shape.with_batch(1);
  const auto shapes = arch.layer_output_shapes();
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    net.params.push_back(draw_layer(arch.layers[i], in, derive_seed(seed, i)));
    in = shapes[i];
  }
  return net;
}

Network reinit_classifier(const Network& net, std::uint64_t seed, bool keep_hidden_classifier) {
  Network out = net;
  const auto shapes = net.arch.layer_output_shapes();
  const std::size_t output_layer = last_param_layer(net.arch);
  for (std::size_t i = net.arch.split_index; i < net.layer_count(); ++i) {
    if (!has_params(net.arch.layers[i].kind)) continue;
    if (keep_hidden_classifier && i != output_layer) continue;
    const Shape4 in = i == 0 ? net.arch.input_shape.with_batch(1) : shapes[i - 1];
    out.params[i] = draw_layer(net.arch.layers[i], in, derive_seed(seed, i));
  }
  out.seed = seed;
  return out;
}

Network resize_classifier(const Network& net, Index classes, std::uint64_t seed) {
  if (classes == net.arch.class_count) return net;
  Network out = net;
  out.arch = net.arch.with_class_count(classes);
  const std::size_t i = last_param_layer(out.arch);
  const auto shapes = out.arch.layer_output_shapes();
  const Shape4 in = i == 0 ? out.arch.input_shape.with_batch(1) : shapes[i - 1];
  out.params[i] = draw_layer(out.arch.layers[i], in, derive_seed(seed, i));
  return out;
}

ForwardTrace forward(const Network& net, const Tensor4d& x, Mode mode, Rng& rng) {
  if (!(x.shape().with_batch(1) == net.arch.input_shape.with_batch(1))) {
    throw ShapeError("network input has the wrong shape");
  }
  ForwardTrace t;
  t.mode = mode;
  t.input = x;
  if (net.arch.input_mean != 0.0) t.input.values().array() -= net.arch.input_mean;
  t.activations.reserve(net.layer_count());
  t.switches.resize(net.layer_count());
  const Tensor4d* cur = &t.input;
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    const LayerSpec& l = net.arch.layers[i];
    switch (l.kind) {
      case LayerKind::Convolution:
        t.activations.push_back(conv_forward(*cur, std::get<ConvParams<double>>(net.params[i])));
        break;
      case LayerKind::ReLU: {
        auto r = relu_forward(*cur);
        t.activations.push_back(std::move(r.out));
        t.switches[i].relu_mask = std::move(r.mask);
        break;
      }
      case LayerKind::MaxPool: {
        auto r = maxpool_forward(*cur, PoolParams{l.window, l.window, l.stride});
        t.activations.push_back(std::move(r.out));
        t.switches[i].pool = std::move(r.switches);
        break;
      }
      case LayerKind::FullyConnected:
        t.activations.push_back(fc_forward(*cur, std::get<FcParams<double>>(net.params[i])));
        break;
      case LayerKind::Dropout: {
        auto r = dropout_forward(*cur, l.rate, mode == Mode::Train, rng);
        t.activations.push_back(std::move(r.out));
        t.switches[i].dropout_mask = std::move(r.mask);
        break;
      }
      case LayerKind::Softmax:
        t.activations.push_back(softmax_forward(*cur));
        break;
    }
    cur = &t.activations.back();
  }
  return t;
}

ForwardTrace forward(const Network& net, const Tensor4d& x) {
  Rng unused(0);
  return forward(net, x, Mode::Eval, unused);
}

const Tensor4d& feature_at(const Network& net, const ForwardTrace& trace, std::size_t layer_index) {
  if (layer_index >= net.layer_count() || layer_index >= trace.activations.size()) {
    throw UsageError("feature_at: layer index " + std::to_string(layer_index) + " out of range");
  }
  return trace.activations[layer_index];
}

const Tensor4d& logits_of(const Network& net, const ForwardTrace& trace) {
  if (net.arch.layers.back().kind == LayerKind::Softmax) {
    return trace.activations.size() >= 2 ? trace.activations[trace.activations.size() - 2] : trace.input;
  }
  return trace.activations.back();
}

Gradients backward(const Network& net, const ForwardTrace& trace, const Tensor4d& grad_logits,
                   std::size_t first_trainable) {
  Gradients grads(net.layer_count());
  std::size_t top = net.layer_count();
  if (net.arch.layers.back().kind == LayerKind::Softmax) --top;
  if (top == 0) return grads;
  Tensor4d grad = grad_logits;
  for (std::size_t i = top; i-- > first_trainable;) {
    const LayerSpec& l = net.arch.layers[i];
    const Tensor4d& input = i == 0 ? trace.input : trace.activations[i - 1];
    const bool propagate = i > first_trainable;
    switch (l.kind) {
      case LayerKind::Convolution: {
        auto g = conv_backward(input, std::get<ConvParams<double>>(net.params[i]), grad, propagate);
        const auto& p = std::get<ConvParams<double>>(net.params[i]);
        grads[i] = ConvParams<double>{std::move(g.grad_kernel), std::move(g.grad_bias), p.stride, p.pad};
        grad = std::move(g.grad_x);
        break;
      }
      case LayerKind::FullyConnected: {
        auto g = fc_backward(input, std::get<FcParams<double>>(net.params[i]), grad, propagate);
        grads[i] = FcParams<double>{std::move(g.grad_weight), std::move(g.grad_bias)};
        grad = std::move(g.grad_x);
        break;
      }
      case LayerKind::ReLU:
        if (propagate) grad = relu_backward(grad, *trace.switches[i].relu_mask);
        break;
      case LayerKind::MaxPool:
        if (propagate) grad = maxpool_backward(grad, *trace.switches[i].pool, input.shape());
        break;
      case LayerKind::Dropout:
        if (propagate) grad = dropout_backward(grad, *trace.switches[i].dropout_mask, l.rate);
        break;
      case LayerKind::Softmax:
        throw ConfigError("softmax can only be the final layer");
    }
  }
  return grads;
}

LayerParams zeros_like(const LayerParams& p) {
  if (const auto* c = std::get_if<ConvParams<double>>(&p)) {
    return ConvParams<double>{Tensor4d(c->kernel.shape()), Vector<double>::Zero(c->bias.size()), c->stride, c->pad};
  }
  if (const auto* f = std::get_if<FcParams<double>>(&p)) {
    return FcParams<double>{Matrix<double>::Zero(f->weight.rows(), f->weight.cols()), Vector<double>::Zero(f->bias.size())};
  }
  return std::monostate{};
}

// Checkpoints ---------------------------------------------------------------

namespace {

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    if constexpr (std::is_same_v<T, double>) {
      put(std::bit_cast<std::uint64_t>(value));
    } else {
      for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
      }
    }
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    if constexpr (std::is_same_v<T, double>) {
      return std::bit_cast<double>(get<std::uint64_t>(what));
    } else {
      need(sizeof(T), what);
      std::uint64_t v = 0;
      for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
      pos_ += sizeof(T);
      return static_cast<T>(v);
    }
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Network& net) {
  ByteWriter w;
  w.put_bytes("STLB");
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(net.init));
  const ArchitectureSpec& a = net.arch;
  w.put(static_cast<std::uint32_t>(a.input_shape.c));
  w.put(static_cast<std::uint32_t>(a.input_shape.h));
  w.put(static_cast<std::uint32_t>(a.input_shape.w));
  w.put(static_cast<std::uint32_t>(a.class_count));
  w.put(a.input_mean);
  w.put(static_cast<std::uint32_t>(a.split_index));
  w.put(static_cast<std::uint32_t>(a.layers.size()));
  for (const LayerSpec& l : a.layers) {
    w.put(static_cast<std::uint8_t>(l.kind));
    w.put(static_cast<std::uint16_t>(l.name.size()));
    w.put_bytes(l.name);
    for (Index v : {l.units, l.kernel, l.stride, l.pad, l.window}) w.put(static_cast<std::uint32_t>(v));
    w.put(l.rate);
  }
  for (const LayerParams& p : net.params) {
    if (const auto* c = std::get_if<ConvParams<double>>(&p)) {
      for (Index i = 0; i < c->kernel.size(); ++i) w.put(c->kernel[i]);
      for (Index i = 0; i < c->bias.size(); ++i) w.put(c->bias[i]);
    } else if (const auto* f = std::get_if<FcParams<double>>(&p)) {
      for (Index r = 0; r < f->weight.rows(); ++r) {
        for (Index col = 0; col < f->weight.cols(); ++col) w.put(f->weight(r, col));
      }
      for (Index i = 0; i < f->bias.size(); ++i) w.put(f->bias[i]);
    }
  }
  w.put(net.seed);
  w.put(crc32_of(w.bytes()));
  return std::move(w.bytes());
}

Network deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_string(4, "magic") != "STLB") throw FormatError("not a checkpoint: bad magic", 0);
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  if (bytes.size() < 4) throw FormatError("checkpoint truncated", bytes.size());
  const std::size_t body = bytes.size() - 4;
  ByteReader crc_reader(bytes.subspan(body));
  if (crc_reader.get<std::uint32_t>("crc") != crc32_of(bytes.first(body))) {
    throw FormatError("checkpoint CRC mismatch", body);
  }

  Network net;
  const auto init = r.get<std::uint8_t>("init scheme");
  if (init != static_cast<std::uint8_t>(InitScheme::HeGaussian)) throw FormatError("unknown init scheme", r.pos() - 1);
  net.init = static_cast<InitScheme>(init);
  ArchitectureSpec& a = net.arch;
  a.input_shape.c = r.get<std::uint32_t>("input channels");
  a.input_shape.h = r.get<std::uint32_t>("input height");
  a.input_shape.w = r.get<std::uint32_t>("input width");
  a.class_count = r.get<std::uint32_t>("class count");
  a.input_mean = r.get<double>("input mean");
  if (!std::isfinite(a.input_mean)) throw FormatError("input mean is not finite", r.pos() - 8);
  a.split_index = r.get<std::uint32_t>("split index");
  const auto count = r.get<std::uint32_t>("layer count");
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    const std::size_t at = r.pos();
    const auto kind = r.get<std::uint8_t>("layer kind");
    if (kind > static_cast<std::uint8_t>(LayerKind::Softmax)) throw FormatError("unknown layer kind", at);
    l.kind = static_cast<LayerKind>(kind);
    l.name = r.get_string(r.get<std::uint16_t>("name length"), "layer name");
    l.units = r.get<std::uint32_t>("units");
    l.kernel = r.get<std::uint32_t>("kernel");
    l.stride = r.get<std::uint32_t>("stride");
    l.pad = r.get<std::uint32_t>("pad");
    l.window = r.get<std::uint32_t>("window");
    l.rate = r.get<double>("rate");
    a.layers.push_back(std::move(l));
  }
  const std::size_t arch_end = r.pos();
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint architecture invalid: ") + e.what(), arch_end);
  }

  Shape4 in = a.input_shape.with_batch(1);
  const auto shapes = a.layer_output_shapes();
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const LayerSpec& l = a.layers[i];
    if (l.kind == LayerKind::Convolution) {
      ConvParams<double> p{Tensor4d(Shape4{l.units, in.c, l.kernel, l.kernel}), Vector<double>(l.units), l.stride, l.pad};
      for (Index k = 0; k < p.kernel.size(); ++k) p.kernel[k] = r.get<double>("conv kernel");
      for (Index k = 0; k < p.bias.size(); ++k) p.bias[k] = r.get<double>("conv bias");
      net.params.emplace_back(std::move(p));
    } else if (l.kind == LayerKind::FullyConnected) {
      FcParams<double> p{Matrix<double>(l.units, in.item_size()), Vector<double>(l.units)};
      for (Index row = 0; row < p.weight.rows(); ++row) {
        for (Index col = 0; col < p.weight.cols(); ++col) p.weight(row, col) = r.get<double>("fc weight");
      }
      for (Index k = 0; k < p.bias.size(); ++k) p.bias[k] = r.get<double>("fc bias");
      net.params.emplace_back(std::move(p));
    } else {
      net.params.emplace_back(std::monostate{});
    }
    in = shapes[i];
  }
  net.seed = r.get<std::uint64_t>("seed");
  if (r.pos() != body) throw FormatError("unexpected bytes after parameters", r.pos());
  return net;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace stlb
