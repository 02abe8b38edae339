#include "stlb/training.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace stlb {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (plateau_window < 2) throw ConfigError("plateau window must be at least 2 epochs");
  if (max_epochs < plateau_window) throw ConfigError("max_epochs must be >= plateau_window");
  if (!(plateau_epsilon >= 0.0)) throw ConfigError("plateau epsilon must be >= 0");
}

const char* to_string(StopReason r) { return r == StopReason::Plateau ? "plateau" : "max_epochs"; }

Velocity zero_velocity(const Network& net) {
  Velocity v;
  v.reserve(net.params.size());
  for (const auto& p : net.params) v.push_back(zeros_like(p));
  return v;
}

namespace {

template <typename Update>
void for_each_param_block(Network& net, Velocity& velocity, const Gradients& grads, std::size_t begin, Update&& update) {
  for (std::size_t i = begin; i < net.params.size(); ++i) {
    if (auto* c = std::get_if<ConvParams<double>>(&net.params[i])) {
      auto& vc = std::get<ConvParams<double>>(velocity[i]);
      const auto& gc = std::get<ConvParams<double>>(grads[i]);
      update(c->kernel.values(), vc.kernel.values(), gc.kernel.values());
      update(c->bias, vc.bias, gc.bias);
    } else if (auto* f = std::get_if<FcParams<double>>(&net.params[i])) {
      auto& vf = std::get<FcParams<double>>(velocity[i]);
      const auto& gf = std::get<FcParams<double>>(grads[i]);
      update(f->weight, vf.weight, gf.weight);
      update(f->bias, vf.bias, gf.bias);
    }
  }
}

bool params_finite(const Network& net) {
  for (const auto& p : net.params) {
    if (const auto* c = std::get_if<ConvParams<double>>(&p)) {
      if (!c->kernel.all_finite() || !c->bias.allFinite()) return false;
    } else if (const auto* f = std::get_if<FcParams<double>>(&p)) {
      if (!f->weight.allFinite() || !f->bias.allFinite()) return false;
    }
  }
  return true;
}

Tensor4d gather_images(const Dataset& data, std::span<const std::size_t> order) {
  const Shape4 item = data[order.front()].image.shape();
  Tensor4d batch(item.with_batch(static_cast<Index>(order.size())));
  const Index stride = item.item_size();
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Tensor4d& img = data[order[k]].image;
    if (img.size() != stride) throw ShapeError("dataset images differ in shape");
    batch.values().segment(static_cast<Index>(k) * stride, stride) = img.values();
  }
  return batch;
}

}  // namespace

double sgd_step(Network& net, const Tensor4d& images, std::span<const int> labels, const TrainConfig& config,
                Velocity& velocity, Rng& rng) {
  if (images.shape().n < 1 || labels.empty()) throw DataError("sgd_step needs a nonempty batch");
  const ForwardTrace trace = forward(net, images, Mode::Train, rng);
  const auto loss = softmax_cross_entropy(logits_of(net, trace), labels);
  if (!std::isfinite(loss.loss)) throw DivergenceError("training loss is not finite", {});
  const Gradients grads = backward(net, trace, loss.grad_logits, config.frozen_below);
  const double lr = config.learning_rate;
  const double mu = config.momentum;
  for_each_param_block(net, velocity, grads, config.frozen_below, [&](auto& param, auto& vel, const auto& grad) {
    vel = mu * vel - lr * grad;
    param += vel;
  });
  return loss.loss;
}

Tensor4d predict_logits(const Network& net, const Dataset& data, std::size_t chunk) {
  if (data.empty()) throw DataError("cannot evaluate an empty dataset");
  const Index classes = net.arch.class_count;
  Tensor4d logits(Shape4{static_cast<Index>(data.size()), classes, 1, 1});
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const auto idx = std::span<const std::size_t>(order).subspan(begin, end - begin);
    const ForwardTrace t = forward(net, gather_images(data, idx));
    const Tensor4d& z = logits_of(net, t);
    logits.values().segment(static_cast<Index>(begin) * classes, z.size()) = z.values();
  }
  return logits;
}

DatasetScore score(const Network& net, const Dataset& data, std::size_t chunk) {
  const Tensor4d logits = predict_logits(net, data, chunk);
  std::vector<int> labels;
  labels.reserve(data.size());
  for (const auto& e : data) labels.push_back(e.label);
  DatasetScore s;
  s.loss = softmax_cross_entropy(logits, labels).loss;
  const auto z = logits.item_matrix();
  std::size_t correct = 0;
  for (Index n = 0; n < z.cols(); ++n) {
    Index best = 0;
    for (Index k = 1; k < z.rows(); ++k) {
      if (z(k, n) > z(best, n)) best = k;
    }
    s.predictions.push_back(static_cast<int>(best));
    if (best == labels[static_cast<std::size_t>(n)]) ++correct;
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return s;
}

TrainResult train(const Network& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config) {
  config.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("training and validation sets must be nonempty");

  TrainResult result{net, {}};
  TrainLog& log = result.log;
  Network current = net;
  Velocity velocity = zero_velocity(current);
  Rng rng(config.seed);

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;

  double best_train = 0.0;
  double best_val = 0.0;
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const auto idx = std::span<const std::size_t>(order).subspan(begin, end - begin);
      labels.clear();
      for (std::size_t i : idx) labels.push_back(train_set[i].label);
      double batch_loss = 0.0;
      try {
        batch_loss = sgd_step(current, gather_images(train_set, idx), labels, config, velocity, rng);
      } catch (const DivergenceError& e) {
        throw DivergenceError(fmt::format("diverged in epoch {}: {}", epoch, e.what()), log);
      }
      loss_sum += batch_loss * static_cast<double>(idx.size());
    }
    if (!params_finite(current)) {
      throw DivergenceError(fmt::format("parameters became non-finite in epoch {}", epoch), log);
    }
    const double train_loss = loss_sum / static_cast<double>(order.size());
    const DatasetScore val = score(current, val_set);
    log.train_loss.push_back(train_loss);
    log.val_loss.push_back(val.loss);
    log.val_acc.push_back(val.accuracy);
    log.epochs_run = epoch;
    if (!std::isfinite(val.loss)) throw DivergenceError(fmt::format("validation loss non-finite in epoch {}", epoch), log);

    if (epoch == 1 || val.loss < best_val) {
      best_val = val.loss;
      result.net = current;
      log.best_epoch = epoch;
    }
    if (epoch == 1 || train_loss < best_train * (1.0 - config.plateau_epsilon)) {
      best_train = train_loss;
      stale = 0;
    } else if (++stale >= config.plateau_window) {
      log.stop_reason = StopReason::Plateau;
      return result;
    }
  }
  log.stop_reason = StopReason::MaxEpochs;
  return result;
}

std::vector<std::size_t> class_histogram(const Dataset& data) {
  std::vector<std::size_t> counts;
  for (const auto& e : data) {
    if (e.label < 0) throw DataError("negative label");
    if (static_cast<std::size_t>(e.label) >= counts.size()) counts.resize(static_cast<std::size_t>(e.label) + 1, 0);
    ++counts[static_cast<std::size_t>(e.label)];
  }
  return counts;
}

std::vector<std::size_t> subsample_counts(std::span<const std::size_t> class_counts, double r) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("subsample fraction must lie in (0, 1]");
  std::vector<std::size_t> keep;
  for (std::size_t count : class_counts) {
    if (count == 0) throw DataError("cannot subsample an empty class");
    const auto k = static_cast<std::size_t>(std::llround(r * static_cast<double>(count)));
    keep.push_back(std::clamp<std::size_t>(k, 1, count));
  }
  return keep;
}

DatasetSlice subsample(const Dataset& train_set, double r, std::uint64_t seed) {
  const auto counts = class_histogram(train_set);
  const auto keep = subsample_counts(counts, r);
  if (r == 1.0) return {train_set, 1.0};

  std::vector<std::vector<std::size_t>> members(counts.size());
  for (std::size_t i = 0; i < train_set.size(); ++i) members[static_cast<std::size_t>(train_set[i].label)].push_back(i);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < members.size(); ++c) {
    Rng rng(derive_seed(seed, c));
    std::shuffle(members[c].begin(), members[c].end(), rng);
    chosen.insert(chosen.end(), members[c].begin(), members[c].begin() + static_cast<std::ptrdiff_t>(keep[c]));
  }
  std::sort(chosen.begin(), chosen.end());
  DatasetSlice slice{{}, r};
  slice.examples.reserve(chosen.size());
  for (std::size_t i : chosen) slice.examples.push_back(train_set[i]);
  return slice;
}

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_acc\n";
  for (std::size_t e = 0; e < log.epochs_run; ++e) {
    out << fmt::format("{},{:.17g},{:.17g},{:.17g}\n", e + 1, log.train_loss[e], log.val_loss[e], log.val_acc[e]);
  }
}

}  // namespace stlb
