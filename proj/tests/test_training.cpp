#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "oracles.hpp"
#include "stlb/training.hpp"

using stlb::ArchitectureSpec;
using stlb::Dataset;
using stlb::Index;
using stlb::LayerSpec;
using stlb::Network;
using stlb::Tensor4d;
using stlb::TrainConfig;

namespace {

// Single fully connected layer on a 2-pixel input.
Network linear_net(Index classes, std::uint64_t seed) {
  ArchitectureSpec a;
  a.input_shape = {1, 1, 1, 2};
  a.layers = {LayerSpec::fc("fc", classes)};
  a.class_count = classes;
  a.split_index = 0;
  return stlb::init_random(a, seed);
}

stlb::FcParams<double>& fc(Network& n) { return std::get<stlb::FcParams<double>>(n.params[0]); }

// Two Gaussian blobs separated along the first pixel.
Dataset blobs(std::size_t per_class, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.3);
  Dataset d;
  for (std::size_t i = 0; i < per_class; ++i)
    for (int label = 0; label < 2; ++label) {
      Tensor4d img({1, 1, 1, 2});
      img[0] = (label == 0 ? -2.0 : 2.0) + noise(rng);
      img[1] = noise(rng);
      d.push_back({img, label});
    }
  return d;
}

Tensor4d stack(const Dataset& d, std::vector<int>& labels) {
  std::vector<Tensor4d> items;
  labels.clear();
  for (const auto& e : d) {
    items.push_back(e.image);
    labels.push_back(e.label);
  }
  return stlb::stack_items<double>(items);
}

stlb::Gradients gradients(const Network& net, const Tensor4d& x, const std::vector<int>& labels) {
  const auto trace = stlb::forward(net, x);
  return stlb::backward(net, trace, stlb::softmax_cross_entropy(trace.output(), labels).grad_logits);
}

Dataset labelled(std::vector<int> labels) {
  Dataset d;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Tensor4d img({1, 1, 1, 2});
    img[0] = static_cast<double>(i);
    d.push_back({img, labels[i]});
  }
  return d;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), stlb::ConfigError);
  c = {};
  c.plateau_window = 1;
  CHECK_THROWS_AS(c.validate(), stlb::ConfigError);
  c = {};
  c.max_epochs = 5;
  CHECK_THROWS_AS(c.validate(), stlb::ConfigError);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), stlb::ConfigError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  Network net = linear_net(2, 1);
  const Network before = net;
  std::vector<int> labels;
  const Tensor4d x = stack(blobs(4, 1), labels);
  TrainConfig c;
  c.learning_rate = 0.0;
  auto v = stlb::zero_velocity(net);
  stlb::Rng rng(1);
  stlb::sgd_step(net, x, labels, c, v, rng);
  stlb::sgd_step(net, x, labels, c, v, rng);
  CHECK(fc(net).weight == std::get<stlb::FcParams<double>>(before.params[0]).weight);
}

TEST_CASE("momentum zero is plain gradient descent") {
  Network net = linear_net(3, 2);
  std::vector<int> labels;
  const Tensor4d x = stack(blobs(3, 2), labels);
  for (auto& l : labels) l = l == 0 ? 2 : l;
  const auto g = std::get<stlb::FcParams<double>>(gradients(net, x, labels)[0]);
  const auto before = fc(net);
  TrainConfig c;
  c.momentum = 0.0;
  c.learning_rate = 0.1;
  auto v = stlb::zero_velocity(net);
  stlb::Rng rng(1);
  stlb::sgd_step(net, x, labels, c, v, rng);
  CHECK(fc(net).weight == before.weight - 0.1 * g.weight);
  CHECK(fc(net).bias == before.bias - 0.1 * g.bias);
}

TEST_CASE("two momentum steps follow the unrolled recurrence") {
  // One trainable scalar: a single output bias with every weight pinned to
  // zero by the input. Loss is log(1 + exp(-b)) for label 0 of two classes
  // with logits (b, 0); its derivative is -1 / (1 + exp(b)).
  ArchitectureSpec a;
  a.input_shape = {1, 1, 1, 1};
  a.layers = {LayerSpec::fc("fc", 2)};
  a.class_count = 2;
  Network net = stlb::init_random(a, 3);
  fc(net).bias << 0.3, 0.0;
  const Tensor4d x({1, 1, 1, 1});  // zero input: weights get no gradient
  const std::vector<int> labels{0};

  TrainConfig c;
  c.learning_rate = 0.5;
  c.momentum = 0.9;
  auto v = stlb::zero_velocity(net);
  stlb::Rng rng(1);
  auto dloss = [](double b0, double b1) { return -1.0 / (1.0 + std::exp(b0 - b1)); };

  double b0 = 0.3, b1 = 0.0, v0 = 0.0, v1 = 0.0;
  for (int step = 0; step < 2; ++step) {
    const double g0 = dloss(b0, b1), g1 = -g0;
    v0 = 0.9 * v0 - 0.5 * g0;
    v1 = 0.9 * v1 - 0.5 * g1;
    b0 += v0;
    b1 += v1;
    stlb::sgd_step(net, x, labels, c, v, rng);
  }
  CHECK(fc(net).bias[0] == doctest::Approx(b0).epsilon(1e-14));
  CHECK(fc(net).bias[1] == doctest::Approx(b1).epsilon(1e-14));
}

TEST_CASE("a small plain step decreases the loss") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Network net = linear_net(2, 10 + trial);
    std::vector<int> labels;
    const Tensor4d x = stack(blobs(5, 20 + trial), labels);
    const double before = stlb::softmax_cross_entropy(stlb::forward(net, x).output(), labels).loss;
    TrainConfig c;
    c.momentum = 0.0;
    c.learning_rate = 1e-4;
    auto v = stlb::zero_velocity(net);
    stlb::Rng r(1);
    stlb::sgd_step(net, x, labels, c, v, r);
    CHECK(stlb::softmax_cross_entropy(stlb::forward(net, x).output(), labels).loss < before);
  }
}

TEST_CASE("separable toy problem is learned") {
  const Dataset train = blobs(100, 5), val = blobs(20, 6);
  TrainConfig c;
  c.seed = 7;
  c.learning_rate = 0.05;
  c.max_epochs = 50;
  const auto result = stlb::train(linear_net(2, 3), train, val, c);
  CHECK(stlb::score(result.net, train).accuracy >= 0.99);
  CHECK(result.log.epochs_run <= 50);
}

TEST_CASE("constant loss stops after exactly plateau_window epochs past the first") {
  TrainConfig c;
  c.learning_rate = 0.0;
  c.plateau_window = 4;
  c.max_epochs = 50;
  const Dataset d = blobs(5, 8);
  const auto result = stlb::train(linear_net(2, 1), d, d, c);
  CHECK(result.log.epochs_run == 5);
  CHECK(result.log.stop_reason == stlb::StopReason::Plateau);
  CHECK(result.log.best_epoch == 1);
  CHECK(result.log.train_loss.size() == 5);

  c.max_epochs = 4;
  const auto capped = stlb::train(linear_net(2, 1), d, d, c);
  CHECK(capped.log.epochs_run == 4);
  CHECK(capped.log.stop_reason == stlb::StopReason::MaxEpochs);
}

TEST_CASE("training is deterministic and keeps the best validation epoch") {
  const Dataset train = blobs(40, 9), val = blobs(10, 10);
  TrainConfig c;
  c.seed = 11;
  c.max_epochs = 15;
  c.plateau_window = 15;
  const auto a = stlb::train(linear_net(2, 4), train, val, c);
  const auto b = stlb::train(linear_net(2, 4), train, val, c);
  CHECK(stlb::serialize_checkpoint(a.net) == stlb::serialize_checkpoint(b.net));
  CHECK(a.log.train_loss == b.log.train_loss);
  const auto best = std::min_element(a.log.val_loss.begin(), a.log.val_loss.end());
  CHECK(a.log.best_epoch == static_cast<std::size_t>(best - a.log.val_loss.begin()) + 1);
  CHECK(stlb::score(a.net, val).loss == *best);
}

TEST_CASE("frozen layers receive no update") {
  ArchitectureSpec a;
  a.input_shape = {1, 1, 1, 2};
  a.layers = {LayerSpec::fc("fc1", 4), LayerSpec::relu("r"), LayerSpec::fc("fc2", 2)};
  a.class_count = 2;
  a.split_index = 2;
  const Network net = stlb::init_random(a, 5);
  TrainConfig c;
  c.frozen_below = 2;
  c.max_epochs = 10;
  const Dataset d = blobs(10, 3);
  const auto result = stlb::train(net, d, d, c);
  CHECK(std::get<stlb::FcParams<double>>(result.net.params[0]).weight ==
        std::get<stlb::FcParams<double>>(net.params[0]).weight);
  CHECK(std::get<stlb::FcParams<double>>(result.net.params[2]).weight !=
        std::get<stlb::FcParams<double>>(net.params[2]).weight);
}

TEST_CASE("diverging training raises with the log so far") {
  TrainConfig c;
  c.max_epochs = 10;
  Dataset d = blobs(10, 3);
  d[3].image[0] = std::numeric_limits<double>::infinity();
  try {
    stlb::train(linear_net(2, 1), d, d, c);
    FAIL("no divergence");
  } catch (const stlb::DivergenceError& e) {
    CHECK(e.log().train_loss.size() <= 10);
  }
}

TEST_CASE("subsample rounding, minimum and order") {
  const std::vector<std::size_t> counts{100, 40};
  CHECK(stlb::subsample_counts(counts, 0.5) == std::vector<std::size_t>{50, 20});
  const std::vector<std::size_t> tiny{1, 3};
  CHECK(stlb::subsample_counts(tiny, 0.1) == std::vector<std::size_t>{1, 1});
  CHECK_THROWS_AS(stlb::subsample_counts(counts, 0.0), stlb::ConfigError);
  CHECK_THROWS_AS(stlb::subsample_counts(counts, 1.5), stlb::ConfigError);
  const std::vector<std::size_t> empty_class{3, 0};
  CHECK_THROWS_AS(stlb::subsample_counts(empty_class, 0.5), stlb::DataError);

  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(0);
  for (int i = 0; i < 40; ++i) labels.push_back(1);
  const Dataset d = labelled(labels);
  const auto full = stlb::subsample(d, 1.0, 9);
  REQUIRE(full.examples.size() == d.size());
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(full.examples[i].image[0] == d[i].image[0]);

  const auto half = stlb::subsample(d, 0.5, 9);
  CHECK(stlb::class_histogram(half.examples) == std::vector<std::size_t>{50, 20});
  for (std::size_t i = 1; i < half.examples.size(); ++i) CHECK(half.examples[i - 1].image[0] < half.examples[i].image[0]);
  const auto again = stlb::subsample(d, 0.5, 9);
  const auto other = stlb::subsample(d, 0.5, 10);
  bool same = true, differs = false;
  for (std::size_t i = 0; i < half.examples.size(); ++i) {
    same = same && half.examples[i].image[0] == again.examples[i].image[0];
    differs = differs || half.examples[i].image[0] != other.examples[i].image[0];
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("subsample keeps class proportions") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> labels;
    for (int c = 0; c < 5; ++c) {
      const auto n = oracle::uniform_int(rng, 1, 60);
      for (Index i = 0; i < n; ++i) labels.push_back(c);
    }
    const Dataset d = labelled(labels);
    const double r = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    const auto parent = stlb::class_histogram(d);
    const auto kept = stlb::class_histogram(stlb::subsample(d, r, trial).examples);
    for (std::size_t c = 0; c < parent.size(); ++c) {
      const double n = static_cast<double>(parent[c]);
      CHECK(std::abs(static_cast<double>(kept[c]) / n - r) <= 1.0 / n);
      CHECK(kept[c] >= 1);
    }
  }
}

TEST_CASE("training log CSV") {
  stlb::TrainLog log;
  log.train_loss = {1.5, 0.25};
  log.val_loss = {1.0, 0.5};
  log.val_acc = {0.5, 0.75};
  log.epochs_run = 2;
  const auto path = std::filesystem::temp_directory_path() / "stlb_test_log.csv";
  stlb::write_train_log_csv(log, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "epoch,train_loss,val_loss,val_acc\n1,1.5,1,0.5\n2,0.25,0.5,0.75\n");
  std::filesystem::remove(path);
}
