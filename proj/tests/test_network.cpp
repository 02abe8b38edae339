#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "stlb/network.hpp"
#include "stlb/training.hpp"

using stlb::ArchitectureSpec;
using stlb::Index;
using stlb::LayerSpec;
using stlb::Network;
using stlb::Shape4;
using stlb::Tensor4d;

namespace {

ArchitectureSpec tiny_arch(bool with_dropout = false) {
  ArchitectureSpec a;
  a.input_shape = {1, 2, 6, 6};
  a.class_count = 3;
  a.layers = {LayerSpec::conv("conv1", 3, 3, 1, 1), LayerSpec::relu("relu1"), LayerSpec::maxpool("pool1", 2, 2),
              LayerSpec::fc("fc6", 5), LayerSpec::relu("relu6")};
  if (with_dropout) a.layers.push_back(LayerSpec::dropout("drop6", 0.5));
  a.layers.push_back(LayerSpec::fc("fc7", 3));
  a.split_index = with_dropout ? 6 : 5;
  return a;
}

const stlb::ConvParams<double>& conv_at(const Network& n, std::size_t i) {
  return std::get<stlb::ConvParams<double>>(n.params[i]);
}
const stlb::FcParams<double>& fc_at(const Network& n, std::size_t i) {
  return std::get<stlb::FcParams<double>>(n.params[i]);
}

// Second implementation of the eval forward pass from the oracle layers.
Tensor4d oracle_forward(const Network& net, const Tensor4d& x, std::size_t upto) {
  Tensor4d cur = x;
  for (Index i = 0; i < cur.size(); ++i) cur[i] -= net.arch.input_mean;
  for (std::size_t i = 0; i <= upto; ++i) {
    const LayerSpec& l = net.arch.layers[i];
    switch (l.kind) {
      case stlb::LayerKind::Convolution: cur = oracle::conv(cur, conv_at(net, i)); break;
      case stlb::LayerKind::ReLU:
        for (Index j = 0; j < cur.size(); ++j) cur[j] = cur[j] > 0.0 ? cur[j] : 0.0;
        break;
      case stlb::LayerKind::MaxPool: cur = oracle::maxpool(cur, l.window, l.stride).first; break;
      case stlb::LayerKind::FullyConnected: {
        const auto& p = fc_at(net, i);
        Tensor4d out({cur.shape().n, p.weight.rows(), 1, 1});
        const Index in = cur.shape().item_size();
        for (Index n = 0; n < cur.shape().n; ++n)
          for (Index o = 0; o < p.weight.rows(); ++o) {
            double s = p.bias[o];
            for (Index k = 0; k < in; ++k) s += p.weight(o, k) * cur[n * in + k];
            out(n, o, 0, 0) = s;
          }
        cur = out;
        break;
      }
      default: break;
    }
  }
  return cur;
}

}  // namespace

TEST_CASE("default architectures validate and chain shapes") {
  for (const ArchitectureSpec& a : {stlb::mini_alex(7), stlb::compact_alex(12)}) {
    CHECK_NOTHROW(a.validate());
    const auto shapes = a.layer_output_shapes();
    CHECK(shapes.back().item_size() == a.class_count);
    CHECK(a.layers[a.split_index].name == "fc7");
    std::mt19937_64 rng(1);
    const Network net = stlb::init_random(a, 3);
    const auto trace = stlb::forward(net, oracle::random_tensor(a.input_shape.with_batch(2), rng, 0.0, 1.0));
    REQUIRE(trace.activations.size() == a.layers.size());
    for (std::size_t i = 0; i < shapes.size(); ++i) CHECK(trace.activations[i].shape() == shapes[i].with_batch(2));
  }
  const auto mini = stlb::mini_alex(7);
  CHECK(mini.layers[0].units == 16);
  CHECK(mini.layers[3].units == 32);
  CHECK(mini.layers[*mini.find("fc6")].units == 128);
  CHECK(mini.layers[*mini.find("fc7")].units == 64);
  CHECK(mini.layers[*mini.find("drop6")].rate == 0.5);
}

TEST_CASE("invalid architectures are rejected") {
  ArchitectureSpec a = tiny_arch();
  a.class_count = 4;
  CHECK_THROWS_AS(a.validate(), stlb::ConfigError);
  a = tiny_arch();
  a.split_index = 99;
  CHECK_THROWS_AS(a.validate(), stlb::ConfigError);
  a = tiny_arch();
  a.layers.insert(a.layers.begin(), LayerSpec::softmax());
  CHECK_THROWS_AS(a.validate(), stlb::ConfigError);
  a = tiny_arch();
  a.layers[0].kernel = 9;
  a.layers[0].pad = 0;
  CHECK_THROWS_AS(stlb::init_random(a, 1), stlb::ConfigError);
}

TEST_CASE("initialisation is deterministic per seed with zero biases") {
  const Network a = stlb::init_random(tiny_arch(), 5);
  const Network b = stlb::init_random(tiny_arch(), 5);
  const Network c = stlb::init_random(tiny_arch(), 6);
  CHECK(stlb::serialize_checkpoint(a) == stlb::serialize_checkpoint(b));
  CHECK(conv_at(a, 0).kernel.values() != conv_at(c, 0).kernel.values());
  CHECK(conv_at(a, 0).bias.isZero());
  CHECK(fc_at(a, 3).bias.isZero());
}

TEST_CASE("He initialisation has std sqrt(2 / fan_in)") {
  ArchitectureSpec a;
  a.input_shape = {1, 16, 3, 3};
  a.layers = {LayerSpec::conv("conv", 100, 3, 1, 0)};
  a.class_count = 100;
  const Network net = stlb::init_random(a, 11);
  const auto& k = conv_at(net, 0).kernel;
  REQUIRE(k.size() >= 10000);
  const double mean = k.values().mean();
  const double sd = std::sqrt((k.values().array() - mean).square().sum() / static_cast<double>(k.size() - 1));
  const double want = std::sqrt(2.0 / 144.0);
  CHECK(std::abs(sd - want) < 0.1 * want);
  CHECK(std::abs(mean) < 0.05 * want);
}

TEST_CASE("eval forward is deterministic and matches an independent forward") {
  std::mt19937_64 rng(2);
  Network net = stlb::init_random(tiny_arch(true), 9);
  // A few training steps so the parameters are no longer the initial draw.
  stlb::TrainConfig cfg;
  cfg.learning_rate = 0.05;
  auto vel = stlb::zero_velocity(net);
  stlb::Rng step_rng(1);
  const Tensor4d batch = oracle::random_tensor({8, 2, 6, 6}, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
  for (int i = 0; i < 5; ++i) stlb::sgd_step(net, batch, labels, cfg, vel, step_rng);

  const Tensor4d x = oracle::random_tensor({3, 2, 6, 6}, rng);
  const auto t1 = stlb::forward(net, x);
  const auto t2 = stlb::forward(net, x);
  for (std::size_t i = 0; i < t1.activations.size(); ++i) CHECK(t1.activations[i].values() == t2.activations[i].values());
  const Tensor4d want = oracle_forward(net, x, net.layer_count() - 1);
  CHECK(oracle::relative_error(t1.output(), want) < 1e-12);
}

TEST_CASE("a single 1x1 identity convolution returns its input") {
  ArchitectureSpec a;
  a.input_shape = {1, 1, 3, 4};
  a.layers = {LayerSpec::conv("id", 1, 1)};
  a.class_count = 12;
  a.split_index = 1;
  Network net = stlb::init_random(a, 1);
  std::get<stlb::ConvParams<double>>(net.params[0]).kernel[0] = 1.0;
  std::mt19937_64 rng(3);
  const Tensor4d x = oracle::random_tensor({2, 1, 3, 4}, rng);
  CHECK(stlb::forward(net, x).output().values() == x.values());
}

TEST_CASE("forward rejects inputs of the wrong shape") {
  const Network net = stlb::init_random(tiny_arch(), 1);
  CHECK_THROWS_AS(stlb::forward(net, Tensor4d({1, 1, 6, 6})), stlb::ShapeError);
}

TEST_CASE("dropout acts only in train mode") {
  const Network net = stlb::init_random(tiny_arch(true), 4);
  std::mt19937_64 rng(5);
  const Tensor4d x = oracle::random_tensor({4, 2, 6, 6}, rng);
  stlb::Rng r1(1);
  const auto train = stlb::forward(net, x, stlb::Mode::Train, r1);
  const auto eval = stlb::forward(net, x);
  CHECK(train.activations[5].values() != eval.activations[5].values());
  CHECK(eval.activations[5].values() == eval.activations[4].values());
}

TEST_CASE("feature_at returns recorded activations") {
  const Network net = stlb::init_random(tiny_arch(), 8);
  std::mt19937_64 rng(6);
  const Tensor4d x = oracle::random_tensor({2, 2, 6, 6}, rng);
  const auto t = stlb::forward(net, x);
  CHECK(&stlb::feature_at(net, t, net.layer_count() - 1) == &t.output());
  CHECK(stlb::feature_at(net, t, 0).shape() == Shape4{2, 3, 6, 6});  // output of layer 0
  CHECK_THROWS_AS(stlb::feature_at(net, t, net.layer_count()), stlb::UsageError);
  for (std::size_t i = 0; i < net.layer_count(); ++i) {
    CHECK(oracle::relative_error(stlb::feature_at(net, t, i), oracle_forward(net, x, i)) < 1e-12);
  }
}

TEST_CASE("reinit_classifier touches only the classifier") {
  const Network net = stlb::init_random(tiny_arch(true), 10);
  const Network r1 = stlb::reinit_classifier(net, 77);
  const Network r2 = stlb::reinit_classifier(net, 77);
  for (std::size_t i = 0; i < net.arch.split_index; ++i) {
    if (const auto* c = std::get_if<stlb::ConvParams<double>>(&net.params[i])) {
      CHECK(conv_at(r1, i).kernel.values() == c->kernel.values());
    }
    if (const auto* f = std::get_if<stlb::FcParams<double>>(&net.params[i])) CHECK(fc_at(r1, i).weight == f->weight);
  }
  const std::size_t out = net.layer_count() - 1;
  CHECK(fc_at(r1, out).weight != fc_at(net, out).weight);
  CHECK(fc_at(r1, out).weight == fc_at(r2, out).weight);

  std::mt19937_64 rng(7);
  const Tensor4d x = oracle::random_tensor({2, 2, 6, 6}, rng);
  const auto before = stlb::forward(net, x);
  const auto after = stlb::forward(r1, x);
  const std::size_t last_feature = net.arch.split_index - 1;
  CHECK(before.activations[last_feature].values() == after.activations[last_feature].values());
  CHECK(before.output().values() != after.output().values());
}

TEST_CASE("reinit with hidden classifier kept only redraws the output layer") {
  ArchitectureSpec a = stlb::compact_alex(5);
  const Network net = stlb::init_random(a, 1);
  const Network r = stlb::reinit_classifier(net, 2, true);
  const auto fc7 = *a.find("fc7"), fc8 = *a.find("fc8");
  CHECK(fc_at(r, fc7).weight == fc_at(net, fc7).weight);
  CHECK(fc_at(r, fc8).weight != fc_at(net, fc8).weight);
}

TEST_CASE("reinitialised classifier weights are uncorrelated with the old ones") {
  const Network net = stlb::init_random(stlb::mini_alex(7), 21);
  const Network r = stlb::reinit_classifier(net, 22);
  const auto& a = fc_at(net, *net.arch.find("fc7")).weight;
  const auto& b = fc_at(r, *net.arch.find("fc7")).weight;
  REQUIRE(a.size() >= 1000);
  const double ma = a.mean(), mb = b.mean();
  const double cov = ((a.array() - ma) * (b.array() - mb)).sum();
  const double corr = cov / std::sqrt((a.array() - ma).square().sum() * (b.array() - mb).square().sum());
  CHECK(std::abs(corr) < 0.05);
}

TEST_CASE("resize_classifier changes the output width only") {
  const Network net = stlb::init_random(stlb::compact_alex(10), 3);
  const Network r = stlb::resize_classifier(net, 7, 4);
  CHECK(r.arch.class_count == 7);
  CHECK(fc_at(r, r.layer_count() - 1).weight.rows() == 7);
  CHECK(fc_at(r, *r.arch.find("fc7")).weight == fc_at(net, *net.arch.find("fc7")).weight);
}

TEST_CASE("whole-network backward matches finite differences") {
  Network net = stlb::init_random(tiny_arch(), 12);
  net.arch.input_mean = 0.25;
  std::mt19937_64 rng(8);
  const Tensor4d x = oracle::random_tensor({3, 2, 6, 6}, rng);
  const std::vector<int> labels{0, 2, 1};
  const auto trace = stlb::forward(net, x);
  const auto loss = stlb::softmax_cross_entropy(trace.output(), labels);
  const auto grads = stlb::backward(net, trace, loss.grad_logits);

  auto loss_of = [&](const Network& n) { return stlb::softmax_cross_entropy(stlb::forward(n, x).output(), labels).loss; };
  const Tensor4d num_k = oracle::numeric_gradient(
      [&](const Tensor4d& k) {
        Network n = net;
        std::get<stlb::ConvParams<double>>(n.params[0]).kernel = k;
        return loss_of(n);
      },
      conv_at(net, 0).kernel);
  CHECK(oracle::relative_error(std::get<stlb::ConvParams<double>>(grads[0]).kernel, num_k) < 1e-4);

  const auto& g6 = std::get<stlb::FcParams<double>>(grads[5]);
  Network n = net;
  auto& b = std::get<stlb::FcParams<double>>(n.params[5]).bias;
  for (Index o = 0; o < b.size(); ++o) {
    const double orig = b[o];
    b[o] = orig + 1e-5;
    const double fp = loss_of(n);
    b[o] = orig - 1e-5;
    const double fm = loss_of(n);
    b[o] = orig;
    CHECK(g6.bias[o] == doctest::Approx((fp - fm) / 2e-5).epsilon(1e-6));
  }

  const auto partial = stlb::backward(net, trace, loss.grad_logits, 3);
  CHECK(std::holds_alternative<std::monostate>(partial[0]));
  CHECK(std::get<stlb::FcParams<double>>(partial[3]).weight == std::get<stlb::FcParams<double>>(grads[3]).weight);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Network net = stlb::init_random(stlb::compact_alex(7), 99);
  const auto bytes = stlb::serialize_checkpoint(net);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "STLB");
  const Network back = stlb::deserialize_checkpoint(bytes);
  CHECK(back.arch == net.arch);
  CHECK(back.seed == 99);
  CHECK(stlb::serialize_checkpoint(back) == bytes);

  std::mt19937_64 rng(9);
  const Tensor4d x = oracle::random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
  CHECK(stlb::forward(net, x).output().values() == stlb::forward(back, x).output().values());
}

TEST_CASE("corrupt checkpoints raise format errors with offsets") {
  const auto bytes = stlb::serialize_checkpoint(stlb::init_random(tiny_arch(), 1));

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    stlb::deserialize_checkpoint(bad_magic);
    FAIL("accepted bad magic");
  } catch (const stlb::FormatError& e) {
    CHECK(e.offset() == 0);
  }

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(stlb::deserialize_checkpoint(flipped), stlb::FormatError);

  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 10);
  CHECK_THROWS_AS(stlb::deserialize_checkpoint(truncated), stlb::FormatError);

  auto version = bytes;
  version[4] = 9;
  try {
    stlb::deserialize_checkpoint(version);
    FAIL("accepted unknown version");
  } catch (const stlb::FormatError& e) {
    CHECK(e.offset() == 4);
  }
}

TEST_CASE("derived seeds and string hashes are stable") {
  CHECK(stlb::derive_seed(1, 2) == stlb::derive_seed(1, 2));
  CHECK(stlb::derive_seed(1, 2) != stlb::derive_seed(2, 1));
  CHECK(stlb::hash_string("") == 14695981039346656037ULL);
  CHECK(stlb::hash_string("a") == 0xaf63dc4c8601ec8cULL);
}
