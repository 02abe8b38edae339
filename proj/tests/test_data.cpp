#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "stlb/data.hpp"

using stlb::DomainKind;
using stlb::DomainSpec;
using stlb::Image;
using stlb::Index;

namespace {

DomainSpec small_spec(DomainKind kind, Index per_class = 20) {
  DomainSpec s;
  s.kind = kind;
  s.class_count = 7;
  s.examples_per_class = per_class;
  s.eval_per_class = per_class / 2;
  s.seed = 3;
  return s;
}

double mean_gradient(const stlb::Dataset& d) {
  double sum = 0.0;
  for (const auto& e : d) sum += stlb::mean_gradient_magnitude(stlb::to_image(e.image));
  return sum / static_cast<double>(d.size());
}

Image ramp(Index h, Index w, double a, double b, double c) {
  Image img(h, w);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) img(y, x) = a + b * static_cast<double>(y) + c * static_cast<double>(x);
  return img;
}

// Minimal second P5 decoder: whitespace-separated header tokens, no comments.
Image independent_decode(const std::vector<std::uint8_t>& bytes) {
  std::string header(bytes.begin(), bytes.begin() + std::min<std::size_t>(bytes.size(), 64));
  std::istringstream in(header);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  REQUIRE(magic == "P5");
  REQUIRE(maxval == 255);
  const auto start = static_cast<std::size_t>(in.tellg()) + 1;
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img(y, x) = bytes[start + static_cast<std::size_t>(y * w + x)] / 255.0;
  return img;
}

}  // namespace

TEST_CASE("generation is deterministic and in range") {
  for (DomainKind k : {DomainKind::Natural, DomainKind::Textural, DomainKind::Target}) {
    const auto a = stlb::generate_domain(small_spec(k, 6));
    const auto b = stlb::generate_domain(small_spec(k, 6));
    REQUIRE(a.train.size() == b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      CHECK(a.train[i].image.values() == b.train[i].image.values());
      CHECK(a.train[i].label == b.train[i].label);
      CHECK(a.train[i].image.values().minCoeff() >= 0.0);
      CHECK(a.train[i].image.values().maxCoeff() <= 1.0);
      CHECK(a.train[i].image.shape() == stlb::Shape4{1, 1, 32, 32});
    }
  }
  auto other = small_spec(DomainKind::Target, 6);
  other.seed = 4;
  CHECK(stlb::generate_domain(other).train[0].image.values() !=
        stlb::generate_domain(small_spec(DomainKind::Target, 6)).train[0].image.values());
}

TEST_CASE("classes are balanced and imbalance follows the ratio") {
  const auto set = stlb::generate_domain(small_spec(DomainKind::Target));
  CHECK(stlb::class_histogram(set.train) == std::vector<std::size_t>(7, 20));
  CHECK(stlb::class_histogram(set.eval) == std::vector<std::size_t>(7, 10));

  auto spec = small_spec(DomainKind::Target, 50);
  spec.imbalance = 10.0;
  const auto skewed = stlb::generate_domain(spec);
  const auto h = stlb::class_histogram(skewed.train);
  CHECK(h.front() == 50);
  CHECK(h.back() == 5);
  for (std::size_t c = 1; c < h.size(); ++c) CHECK(h[c] <= h[c - 1]);
  CHECK(stlb::class_histogram(skewed.eval) == std::vector<std::size_t>(7, 25));
}

TEST_CASE("invalid domain specs are rejected") {
  auto s = small_spec(DomainKind::Target);
  s.class_count = 1;
  CHECK_THROWS_AS(stlb::generate_domain(s), stlb::ConfigError);
  s = small_spec(DomainKind::Target);
  s.class_count = stlb::max_classes(DomainKind::Target) + 1;
  CHECK_THROWS_AS(stlb::generate_domain(s), stlb::ConfigError);
  s = small_spec(DomainKind::Textural);
  s.imbalance = 0.5;
  CHECK_THROWS_AS(stlb::generate_domain(s), stlb::ConfigError);
  CHECK_THROWS_AS(stlb::domain_kind_from_string("imagenet"), stlb::ConfigError);
  CHECK(stlb::domain_kind_from_string("textural") == DomainKind::Textural);
}

TEST_CASE("train and eval splits are disjoint") {
  for (DomainKind k : {DomainKind::Natural, DomainKind::Textural, DomainKind::Target}) {
    const auto set = stlb::generate_domain(small_spec(k));
    std::set<std::uint64_t> train;
    for (const auto& e : set.train) train.insert(stlb::hash_pixels(e.image));
    CHECK(train.size() == set.train.size());
    for (const auto& e : set.eval) CHECK(train.count(stlb::hash_pixels(e.image)) == 0);
  }
}

TEST_CASE("target classes are separable but not trivially") {
  const auto set = stlb::generate_domain(small_spec(DomainKind::Target, 100));
  const double acc = stlb::nearest_centroid_accuracy(set.train, set.eval);
  MESSAGE("nearest-centroid accuracy " << acc);
  CHECK(acc > 1.0 / 7.0);
  CHECK(acc < 0.9);
}

TEST_CASE("natural images carry more edge energy than textures") {
  // Margin: natural mean gradient magnitude at least 10% above textural.
  auto nat = small_spec(DomainKind::Natural, 60);
  auto tex = small_spec(DomainKind::Textural, 60);
  nat.class_count = tex.class_count = 10;
  const double g_nat = mean_gradient(stlb::generate_domain(nat).train);
  const double g_tex = mean_gradient(stlb::generate_domain(tex).train);
  MESSAGE("mean gradient natural " << g_nat << " textural " << g_tex);
  CHECK(g_nat > 1.1 * g_tex);
}

TEST_CASE("bicubic is exact on ramps and constants") {
  const Image r = ramp(6, 9, 0.1, 0.05, 0.02);
  const Image up = stlb::bicubic_resize_unclamped(r, 11, 17);
  for (Index y = 0; y < 11; ++y)
    for (Index x = 0; x < 17; ++x) {
      const double sy = static_cast<double>(y) * 5.0 / 10.0, sx = static_cast<double>(x) * 8.0 / 16.0;
      CHECK(std::abs(up(y, x) - (0.1 + 0.05 * sy + 0.02 * sx)) < 1e-9);
    }
  const Image c = Image::Constant(5, 7, 0.375);
  CHECK(stlb::bicubic_resize(c, 13, 3) == Image::Constant(13, 3, 0.375));
  CHECK(stlb::bicubic_resize(r, 6, 9) == r);
}

TEST_CASE("bicubic commutes with a constant offset") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(7, 5);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
  const Image a = stlb::bicubic_resize_unclamped(img, 15, 12);
  const Image b = stlb::bicubic_resize_unclamped((img.array() + 0.25).matrix(), 15, 12);
  CHECK(((b.array() - 0.25) - a.array()).abs().maxCoeff() < 1e-12);
  const Image clamped = stlb::bicubic_resize(img, 15, 12);
  CHECK(clamped.minCoeff() >= 0.0);
  CHECK(clamped.maxCoeff() <= 1.0);
  CHECK_THROWS_AS(stlb::bicubic_resize(img, 0, 3), stlb::ConfigError);
  CHECK_THROWS_AS(stlb::bicubic_resize(Image::Zero(1, 4), 3, 3), stlb::ConfigError);
}

TEST_CASE("PGM round trip and independent decoding") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(9, 13);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
  const auto bytes = stlb::encode_pgm(img);
  const Image back = stlb::decode_pgm(bytes);
  CHECK((back - img).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
  CHECK(independent_decode(bytes) == back);

  const auto path = std::filesystem::temp_directory_path() / "stlb_test.pgm";
  stlb::save_pgm(img, path);
  CHECK(stlb::load_pgm(path) == back);
  std::filesystem::remove(path);

  const std::string commented = "P5\n# made by hand\n2 1\n255\n";
  std::vector<std::uint8_t> with_comment(commented.begin(), commented.end());
  with_comment.push_back(0);
  with_comment.push_back(255);
  const Image c = stlb::decode_pgm(with_comment);
  CHECK(c(0, 0) == 0.0);
  CHECK(c(0, 1) == 1.0);
}

TEST_CASE("malformed PGM reports the byte offset") {
  auto offset_of = [](const std::string& text) -> std::size_t {
    const std::vector<std::uint8_t> b(text.begin(), text.end());
    try {
      stlb::decode_pgm(b);
    } catch (const stlb::FormatError& e) {
      return e.offset();
    }
    FAIL("accepted malformed PGM");
    return 0;
  };
  CHECK(offset_of("P2\n2 2\n255\n....") == 0);
  CHECK(offset_of("P5\n2 x\n255\n....") == 5);
  CHECK(offset_of("P5\n2 2\n65535\n........") == 7);
  CHECK(offset_of("P5\n2 2\n255\n..") == 13);
}
