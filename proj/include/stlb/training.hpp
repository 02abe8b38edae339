#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stlb/network.hpp"

namespace stlb {

/// A single labelled image, shaped (1, c, h, w).
struct Example {
  Tensor4d image;
  int label = 0;
};

using Dataset = std::vector<Example>;

/// A per-class subsample of a training set.
struct DatasetSlice {
  Dataset examples;
  double fraction = 1.0;
};

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t plateau_window = 10;
  double plateau_epsilon = 1e-3;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  /// Layers below this index are frozen: no gradient, no update.
  std::size_t frozen_below = 0;

  void validate() const;
};

enum class StopReason { Plateau, MaxEpochs };

const char* to_string(StopReason r);

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_acc;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // 1-based epoch whose parameters were kept
  StopReason stop_reason = StopReason::MaxEpochs;
};

/// Raised when the loss or the parameters stop being finite. Carries the
/// log up to the failing epoch.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, TrainLog log) : Error(what), log_(std::move(log)) {}
  const TrainLog& log() const { return log_; }

 private:
  TrainLog log_;
};

/// Momentum buffers, one per layer, shaped like the parameters.
using Velocity = std::vector<LayerParams>;

Velocity zero_velocity(const Network& net);

/// One momentum SGD step on a batch:
///   v <- momentum * v - lr * grad,  params <- params + v.
/// Returns the batch loss measured before the update.
double sgd_step(Network& net, const Tensor4d& images, std::span<const int> labels, const TrainConfig& config,
                Velocity& velocity, Rng& rng);

struct TrainResult {
  Network net;
  TrainLog log;
};

/// Shuffled minibatch training until the training loss plateaus (the best
/// loss has not improved by a relative `plateau_epsilon` for
/// `plateau_window` consecutive epochs) or `max_epochs` is reached. Returns
/// the parameters of the epoch with the lowest validation loss.
TrainResult train(const Network& net, const Dataset& train_set, const Dataset& val_set, const TrainConfig& config);

struct DatasetScore {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<int> predictions;  // argmax, ties to the lowest class id
};

/// Eval-mode loss, accuracy and predictions over a dataset.
DatasetScore score(const Network& net, const Dataset& data, std::size_t chunk = 128);

/// Eval-mode logits for every example, shaped (count, classes, 1, 1).
Tensor4d predict_logits(const Network& net, const Dataset& data, std::size_t chunk = 128);

/// Keeps round(r * count) examples of each class (at least one), chosen by a
/// seeded shuffle; original order is preserved. r = 1 returns the input.
DatasetSlice subsample(const Dataset& train_set, double r, std::uint64_t seed);

/// Per-class counts kept by subsample for the given class sizes.
std::vector<std::size_t> subsample_counts(std::span<const std::size_t> class_counts, double r);

/// Number of examples per label (index = label).
std::vector<std::size_t> class_histogram(const Dataset& data);

void write_train_log_csv(const TrainLog& log, const std::filesystem::path& path);

}  // namespace stlb
