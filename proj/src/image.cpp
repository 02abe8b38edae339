#include "stlb/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace stlb {

Tensor4d to_tensor(const Image& img) {
  Tensor4d t(Shape4{1, 1, img.rows(), img.cols()});
  Eigen::Map<Image>(t.data(), img.rows(), img.cols()) = img;
  return t;
}

Image to_image(const Tensor4d& t, Index item, Index channel) {
  const Shape4 s = t.shape();
  return Eigen::Map<const Image>(t.data() + t.offset(item, channel, 0, 0), s.h, s.w);
}

namespace {

// Catmull-Rom through p1 (t = 0) and p2 (t = 1), written in differences
// from p1 so that constant input reproduces p1 exactly.
double catmull_rom(double p0, double p1, double p2, double p3, double t) {
  const double d0 = p0 - p1;
  const double d2 = p2 - p1;
  const double d3 = p3 - p1;
  return p1 + t * (0.5 * (d2 - d0) + t * ((d0 + 2.0 * d2 - 0.5 * d3) + t * (-0.5 * d0 - 1.5 * d2 + 0.5 * d3)));
}

// Sample of a 1-D signal at integer position i, extended cubically outside
// [0, n). Requires n >= 3 for the extrapolation, n == 2 falls back to
// linear continuation.
template <typename Get>
double extended(Get&& get, Index n, Index i) {
  if (i >= 0 && i < n) return get(i);
  if (n == 2) {
    return i < 0 ? 2.0 * get(0) - get(1) : 2.0 * get(1) - get(0);
  }
  if (i < 0) return 3.0 * get(0) - 3.0 * get(1) + get(2);
  return 3.0 * get(n - 1) - 3.0 * get(n - 2) + get(n - 3);
}

template <typename Get>
double sample_1d(Get&& get, Index n, double x) {
  Index i = static_cast<Index>(std::floor(x));
  if (i >= n - 1) i = n - 2;
  const double t = x - static_cast<double>(i);
  return catmull_rom(extended(get, n, i - 1), get(i), get(i + 1), extended(get, n, i + 2), t);
}

double source_coord(Index j, Index in, Index out) {
  if (out == 1) return 0.0;
  return static_cast<double>(j) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
}

}  // namespace

Image bicubic_resize_unclamped(const Image& img, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ConfigError("bicubic target size must be positive");
  if (img.rows() < 2 || img.cols() < 2) throw ConfigError("bicubic input must be at least 2x2");
  if (out_h == img.rows() && out_w == img.cols()) return img;
  // Separable: resample rows first, then columns.
  Image horizontal(img.rows(), out_w);
  for (Index y = 0; y < img.rows(); ++y) {
    auto get = [&](Index i) { return img(y, i); };
    for (Index x = 0; x < out_w; ++x) horizontal(y, x) = sample_1d(get, img.cols(), source_coord(x, img.cols(), out_w));
  }
  Image out(out_h, out_w);
  for (Index x = 0; x < out_w; ++x) {
    auto get = [&](Index i) { return horizontal(i, x); };
    for (Index y = 0; y < out_h; ++y) out(y, x) = sample_1d(get, img.rows(), source_coord(y, img.rows(), out_h));
  }
  return out;
}

Image bicubic_resize(const Image& img, Index out_h, Index out_w) {
  return bicubic_resize_unclamped(img, out_h, out_w).cwiseMax(0.0).cwiseMin(1.0);
}

namespace {

class PgmHeaderParser {
 public:
  explicit PgmHeaderParser(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  long next_int(const char* what) {
    skip_space_and_comments();
    const std::size_t start = token_start_ = pos_;
    long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1'000'000) throw FormatError(std::string("PGM ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("PGM header: expected ") + what, start);
    return v;
  }

  std::size_t pos() const { return pos_; }
  std::size_t token_start() const { return token_start_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::size_t token_start_ = 0;
};

}  // namespace

Image decode_pgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("not a binary PGM: bad magic", 0);
  PgmHeaderParser p(bytes);
  p.advance(2);
  const long w = p.next_int("width");
  const long h = p.next_int("height");
  const long maxval = p.next_int("maxval");
  const std::size_t maxval_at = p.token_start();
  if (w < 1 || h < 1) throw FormatError("PGM dimensions must be positive", maxval_at);
  if (maxval != 255) throw FormatError("only 8-bit PGM (maxval 255) is supported", maxval_at);
  if (p.pos() >= bytes.size() || !std::isspace(bytes[p.pos()])) {
    throw FormatError("PGM header must end with a single whitespace", p.pos());
  }
  p.advance(1);
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (bytes.size() - p.pos() < need) throw FormatError("PGM pixel data truncated", bytes.size());
  Image img(h, w);
  for (std::size_t i = 0; i < need; ++i) img.data()[i] = bytes[p.pos() + i] / 255.0;
  return img;
}

std::vector<std::uint8_t> encode_pgm(const Image& img) {
  const std::string header = "P5\n" + std::to_string(img.cols()) + " " + std::to_string(img.rows()) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(header.size() + static_cast<std::size_t>(img.size()));
  for (Index i = 0; i < img.size(); ++i) {
    const double v = std::clamp(img.data()[i], 0.0, 1.0);
    bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
  }
  return bytes;
}

Image load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_pgm(bytes);
}

void save_pgm(const Image& img, const std::filesystem::path& path) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

double mean_gradient_magnitude(const Image& img) {
  if (img.rows() < 2 || img.cols() < 2) return 0.0;
  double sum = 0.0;
  for (Index y = 0; y + 1 < img.rows(); ++y) {
    for (Index x = 0; x + 1 < img.cols(); ++x) {
      const double gx = img(y, x + 1) - img(y, x);
      const double gy = img(y + 1, x) - img(y, x);
      sum += std::sqrt(gx * gx + gy * gy);
    }
  }
  return sum / static_cast<double>((img.rows() - 1) * (img.cols() - 1));
}

}  // namespace stlb
