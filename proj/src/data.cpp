#include "stlb/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>

namespace stlb {

const char* to_string(DomainKind k) {
  switch (k) {
    case DomainKind::Natural: return "natural";
    case DomainKind::Textural: return "textural";
    case DomainKind::Target: return "target";
  }
  return "?";
}

DomainKind domain_kind_from_string(const std::string& s) {
  if (s == "natural") return DomainKind::Natural;
  if (s == "textural" || s == "texture") return DomainKind::Textural;
  if (s == "target") return DomainKind::Target;
  throw ConfigError("unknown domain kind '" + s + "'");
}

Index max_classes(DomainKind kind) {
  switch (kind) {
    case DomainKind::Natural: return 10;
    case DomainKind::Textural: return 12;
    case DomainKind::Target: return 7;
  }
  return 0;
}

void DomainSpec::validate() const {
  if (class_count < 2 || class_count > max_classes(kind)) {
    throw ConfigError(std::string(to_string(kind)) + " domain supports 2.." + std::to_string(max_classes(kind)) + " classes");
  }
  if (examples_per_class < 1 || eval_per_class < 1) throw ConfigError("each split needs at least one example per class");
  if (image_size < 8) throw ConfigError("image size must be at least 8");
  if (!(imbalance >= 1.0)) throw ConfigError("imbalance ratio must be >= 1");
}

Index DomainSpec::train_count(Index c) const {
  if (imbalance == 1.0) return examples_per_class;
  const double e = static_cast<double>(c) / static_cast<double>(class_count - 1);
  const auto n = std::llround(static_cast<double>(examples_per_class) * std::pow(imbalance, -e));
  return std::max<Index>(1, n);
}

namespace {

constexpr double kPi = std::numbers::pi;

// Drawing helpers on a square canvas. Coordinates are in pixels with the
// pixel centre at integer + 0.5.
class Canvas {
 public:
  Canvas(Index size, Rng& rng) : img_(Image::Zero(size, size)), rng_(rng) {}

  Index size() const { return img_.rows(); }
  Image& image() { return img_; }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double gauss(double sigma) { return std::normal_distribution<double>(0.0, sigma)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }

  void fill(double v) { img_.setConstant(v); }

  // Linear ramp of total change `amount` along a random direction.
  void add_gradient(double amount) {
    const double a = uniform(0.0, 2.0 * kPi);
    const double cx = std::cos(a), cy = std::sin(a);
    const double n = static_cast<double>(size());
    for (Index y = 0; y < size(); ++y) {
      for (Index x = 0; x < size(); ++x) {
        img_(y, x) += amount * (((x + 0.5) / n - 0.5) * cx + ((y + 0.5) / n - 0.5) * cy);
      }
    }
  }

  // Smooth noise in roughly [-1, 1] with `cells` lattice cells per side.
  Image smooth_noise(Index cells) {
    Image grid(cells + 1, cells + 1);
    for (Index i = 0; i < grid.size(); ++i) grid.data()[i] = uniform(-1.0, 1.0);
    return bicubic_resize_unclamped(grid, size(), size());
  }

  void add_noise(double sigma) {
    for (Index i = 0; i < img_.size(); ++i) img_.data()[i] += gauss(sigma);
  }

  // Blends `value` in with the supersampled coverage of `inside`.
  template <typename Inside>
  void paint(Inside&& inside, double value, double alpha = 1.0) {
    static constexpr double kOffsets[2] = {0.25, 0.75};
    for (Index y = 0; y < size(); ++y) {
      for (Index x = 0; x < size(); ++x) {
        int hits = 0;
        for (double oy : kOffsets) {
          for (double ox : kOffsets) hits += inside(x + ox, y + oy) ? 1 : 0;
        }
        if (hits == 0) continue;
        const double c = alpha * hits / 4.0;
        img_(y, x) = (1.0 - c) * img_(y, x) + c * value;
      }
    }
  }

  void polygon(const std::vector<std::pair<double, double>>& pts, double value) {
    paint(
        [&](double px, double py) {
          bool in = false;
          for (std::size_t i = 0, j = pts.size() - 1; i < pts.size(); j = i++) {
            const auto [xi, yi] = pts[i];
            const auto [xj, yj] = pts[j];
            if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) in = !in;
          }
          return in;
        },
        value);
  }

  void disc(double cx, double cy, double r, double value, double alpha = 1.0) {
    paint([&](double px, double py) { return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r; }, value, alpha);
  }

  void ring(double cx, double cy, double r, double width, double value) {
    paint(
        [&](double px, double py) {
          const double d = std::sqrt((px - cx) * (px - cx) + (py - cy) * (py - cy));
          return std::abs(d - r) <= 0.5 * width;
        },
        value);
  }

  void segment(double x0, double y0, double x1, double y1, double width, double value, double alpha = 1.0) {
    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = std::max(dx * dx + dy * dy, 1e-12);
    paint(
        [&](double px, double py) {
          const double t = std::clamp(((px - x0) * dx + (py - y0) * dy) / len2, 0.0, 1.0);
          const double ex = px - (x0 + t * dx), ey = py - (y0 + t * dy);
          return ex * ex + ey * ey <= 0.25 * width * width;
        },
        value, alpha);
  }

  void add_grating(double period, double angle, double amplitude) {
    const double phase = uniform(0.0, 2.0 * kPi);
    const double kx = 2.0 * kPi / period * std::cos(angle), ky = 2.0 * kPi / period * std::sin(angle);
    for (Index y = 0; y < size(); ++y) {
      for (Index x = 0; x < size(); ++x) img_(y, x) += amplitude * std::sin(kx * x + ky * y + phase);
    }
  }

  void add_gabor(double cx, double cy, double sigma, double period, double angle, double amplitude) {
    const double c = std::cos(angle), s = std::sin(angle);
    for (Index y = 0; y < size(); ++y) {
      for (Index x = 0; x < size(); ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        const double env = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        img_(y, x) += amplitude * env * std::cos(2.0 * kPi * (dx * c + dy * s) / period);
      }
    }
  }

  void add_blob(double cx, double cy, double sigma, double amplitude) {
    for (Index y = 0; y < size(); ++y) {
      for (Index x = 0; x < size(); ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        img_(y, x) += amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      }
    }
  }

  std::pair<double, double> point(double margin = 0.0) {
    return {uniform(margin, size() - margin), uniform(margin, size() - margin)};
  }

 private:
  Image img_;
  Rng& rng_;
};

std::vector<std::pair<double, double>> regular_polygon(double cx, double cy, double r, int sides, double rot,
                                                       double inner = 0.0) {
  std::vector<std::pair<double, double>> pts;
  const int n = inner > 0.0 ? 2 * sides : sides;
  for (int i = 0; i < n; ++i) {
    const double a = rot + 2.0 * kPi * i / n;
    const double rr = (inner > 0.0 && i % 2 == 1) ? inner : r;
    pts.emplace_back(cx + rr * std::cos(a), cy + rr * std::sin(a));
  }
  return pts;
}

// Edge-dominated scenes: one main object class per label over a smooth
// gradient background with small distractor objects, plus a few thin
// clutter lines.
void draw_natural(Canvas& cv, Index label) {
  const double s = static_cast<double>(cv.size());
  const double bg = cv.uniform(0.1, 0.9);
  cv.fill(bg);
  cv.add_gradient(cv.uniform(-0.3, 0.3));
  for (int k = cv.integer(3, 6); k > 0; --k) {  // small background objects
    const auto [x, y] = cv.point();
    const double size = cv.uniform(0.08, 0.15) * s, tone = cv.uniform(0.0, 1.0);
    if (cv.integer(0, 1) == 0) {
      cv.disc(x, y, size, tone);
    } else {
      cv.polygon(regular_polygon(x, y, size, 4, cv.uniform(0.0, kPi)), tone);
    }
  }
  const double fg = bg > 0.5 ? cv.uniform(0.0, bg - 0.4) : cv.uniform(bg + 0.4, 1.0);
  const auto [cx, cy] = cv.point(0.3 * s);
  const double r = cv.uniform(0.22, 0.36) * s;
  const double rot = cv.uniform(0.0, 2.0 * kPi);
  switch (label) {
    case 0: cv.polygon(regular_polygon(cx, cy, r, 3, rot), fg); break;
    case 1: cv.polygon(regular_polygon(cx, cy, r, 4, rot), fg); break;
    case 2: cv.disc(cx, cy, r * 0.8, fg); break;
    case 3: {  // half-plane edge through the centre region
      const double c = std::cos(rot), sn = std::sin(rot);
      cv.paint([&](double px, double py) { return (px - cx) * c + (py - cy) * sn > 0.0; }, fg);
      break;
    }
    case 4: {  // bundle of parallel bars
      const double c = std::cos(rot), sn = std::sin(rot);
      const double gap = cv.uniform(0.18, 0.26) * s;
      for (int k = -1; k <= 1; ++k) {
        const double ox = cx - sn * gap * k, oy = cy + c * gap * k;
        cv.segment(ox - c * r, oy - sn * r, ox + c * r, oy + sn * r, 2.0, fg);
      }
      break;
    }
    case 5: {  // cross
      const double c = std::cos(rot), sn = std::sin(rot);
      cv.segment(cx - c * r, cy - sn * r, cx + c * r, cy + sn * r, 0.25 * r, fg);
      cv.segment(cx + sn * r, cy - c * r, cx - sn * r, cy + c * r, 0.25 * r, fg);
      break;
    }
    case 6: cv.ring(cx, cy, r * 0.75, cv.uniform(2.0, 3.5), fg); break;
    case 7: cv.polygon(regular_polygon(cx, cy, r, 5, rot, 0.45 * r), fg); break;
    case 8: {  // L shape
      const double c = std::cos(rot), sn = std::sin(rot);
      const double w = 0.3 * r;
      cv.segment(cx, cy, cx + c * r, cy + sn * r, 2.0 * w, fg);
      cv.segment(cx, cy, cx - sn * r, cy + c * r, 2.0 * w, fg);
      break;
    }
    default: {  // two overlapping polygons of different tone
      cv.polygon(regular_polygon(cx, cy, r, 6, rot), fg);
      const double mid = 0.5 * (fg + bg);
      cv.polygon(regular_polygon(cx + 0.4 * r, cy + 0.4 * r, 0.6 * r, 4, -rot), mid);
      break;
    }
  }
  for (int k = cv.integer(1, 3); k > 0; --k) {
    const auto [x0, y0] = cv.point();
    const auto [x1, y1] = cv.point();
    cv.segment(x0, y0, x1, y1, 1.5, cv.uniform(0.0, 1.0), 0.8);
  }
  cv.add_noise(0.02);
}

// Stationary fields. Contrast is kept moderate: these classes differ in
// structure, not in edges.
void draw_textural(Canvas& cv, Index label) {
  const double s = static_cast<double>(cv.size());
  const double mean = cv.uniform(0.35, 0.65);
  const double amp = cv.uniform(0.09, 0.15);
  cv.fill(mean);
  const double jitter = cv.uniform(-0.15, 0.15);
  switch (label) {
    case 0: cv.add_grating(cv.uniform(7.0, 9.0), jitter, amp); break;
    case 1: cv.add_grating(cv.uniform(4.5, 5.5), 0.25 * kPi + jitter, amp); break;
    case 2: cv.add_grating(cv.uniform(5.0, 6.5), 0.5 * kPi + jitter, amp); break;
    case 3:
    case 4: {  // thresholded noise, coarse or fine
      const Image n = cv.smooth_noise(label == 3 ? 4 : 10);
      const double t = cv.uniform(-0.15, 0.15);
      cv.image().array() += amp * (2.0 * (n.array() > t).cast<double>() - 1.0);
      break;
    }
    case 5: {  // scattered Gabor patches
      for (int k = cv.integer(5, 8); k > 0; --k) {
        const auto [x, y] = cv.point();
        cv.add_gabor(x, y, cv.uniform(2.0, 3.0), cv.uniform(4.0, 6.0), cv.uniform(0.0, kPi), 1.5 * amp);
      }
      break;
    }
    case 6:
    case 7: {  // checkerboards
      const double period = label == 6 ? cv.uniform(8.0, 10.0) : cv.uniform(4.5, 5.5);
      const double a = cv.uniform(0.0, 0.5 * kPi);
      const double c = std::cos(a), sn = std::sin(a);
      const double ox = cv.uniform(0.0, period), oy = cv.uniform(0.0, period);
      for (Index y = 0; y < cv.size(); ++y) {
        for (Index x = 0; x < cv.size(); ++x) {
          const double u = std::floor(((x + ox) * c + (y + oy) * sn) / period);
          const double v = std::floor((-(x + ox) * sn + (y + oy) * c) / period);
          cv.image()(y, x) += (static_cast<long>(u + v) % 2 == 0 ? amp : -amp);
        }
      }
      break;
    }
    case 8: {  // cellular spots
      const int count = static_cast<int>(s * s / 40.0);
      for (int k = 0; k < count; ++k) {
        const auto [x, y] = cv.point();
        cv.disc(x, y, cv.uniform(1.0, 2.0), mean - 2.0 * amp);
      }
      break;
    }
    case 9: cv.image() += 2.0 * amp * cv.smooth_noise(5); break;
    case 10:
      cv.add_grating(cv.uniform(5.0, 7.0), jitter, 0.7 * amp);
      cv.add_grating(cv.uniform(5.0, 7.0), 0.5 * kPi + jitter, 0.7 * amp);
      break;
    default: {  // tiled small rings
      const double step = cv.uniform(7.0, 9.0);
      const double ox = cv.uniform(0.0, step), oy = cv.uniform(0.0, step);
      for (double y = oy - step; y < s + step; y += step) {
        for (double x = ox - step; x < s + step; x += step) cv.ring(x, y, 0.3 * step, 1.2, mean + 1.5 * amp);
      }
      break;
    }
  }
  cv.add_noise(0.02);
}

// Lung-pattern-like target classes: consolidation, ground glass,
// honeycombing, reticulation, emphysema, nodules, normal.
void draw_target(Canvas& cv, Index label) {
  const double s = static_cast<double>(cv.size());
  const double base = cv.uniform(0.2, 0.45);
  cv.fill(base);
  cv.image() += 0.04 * cv.smooth_noise(3);
  auto vessels = [&](int count, double tone) {
    for (int k = 0; k < count; ++k) {
      auto [x, y] = cv.point();
      double a = cv.uniform(0.0, 2.0 * kPi);
      for (int seg = 0; seg < 4; ++seg) {
        const double len = cv.uniform(4.0, 8.0);
        const double nx = x + len * std::cos(a), ny = y + len * std::sin(a);
        cv.segment(x, y, nx, ny, cv.uniform(1.0, 2.0), tone, 0.8);
        x = nx;
        y = ny;
        a += cv.uniform(-0.5, 0.5);
      }
    }
  };
  switch (label) {
    case 0: {  // consolidation: bright region with a curved boundary and dark pits
      const double tone = base + cv.uniform(0.25, 0.4);
      const auto [cx, cy] = cv.point(0.25 * s);
      const double rot = cv.uniform(0.0, 2.0 * kPi);
      const double curve = cv.uniform(-0.04, 0.04);
      const double c = std::cos(rot), sn = std::sin(rot);
      cv.paint(
          [&](double px, double py) {
            const double u = (px - cx) * c + (py - cy) * sn;
            const double v = -(px - cx) * sn + (py - cy) * c;
            return u + curve * v * v > 0.0;
          },
          tone);
      for (int k = cv.integer(2, 5); k > 0; --k) {
        const auto [x, y] = cv.point();
        cv.disc(x, y, cv.uniform(0.8, 1.6), base, 0.8);
      }
      break;
    }
    case 1:  // ground glass: raised haze with fine speckle
      cv.image().array() += cv.uniform(0.08, 0.18);
      cv.image() += 0.06 * cv.smooth_noise(12);
      vessels(1, base + 0.3);
      break;
    case 2: {  // honeycombing: clustered cysts with bright walls
      const int count = cv.integer(6, 10);
      const auto [cx, cy] = cv.point(0.3 * s);
      for (int k = 0; k < count; ++k) {
        const double x = cx + cv.gauss(0.22 * s), y = cy + cv.gauss(0.22 * s);
        const double r = cv.uniform(2.0, 3.5);
        cv.disc(x, y, r, base - 0.12);
        cv.ring(x, y, r, 1.1, base + 0.3);
      }
      break;
    }
    case 3: {  // reticulation: irregular net of thin lines
      const double step = cv.uniform(6.0, 9.0);
      const double tone = base + cv.uniform(0.2, 0.3);
      for (double y = cv.uniform(0.0, step); y < s; y += step) {
        double x0 = 0.0, y0 = y + cv.gauss(1.0);
        for (double x = step; x <= s + step; x += step) {
          const double y1 = y + cv.gauss(1.5);
          cv.segment(x0, y0, x, y1, 1.0, tone, 0.8);
          x0 = x;
          y0 = y1;
        }
      }
      for (double x = cv.uniform(0.0, step); x < s; x += step) {
        double y0 = 0.0, x0 = x + cv.gauss(1.0);
        for (double y = step; y <= s + step; y += step) {
          const double x1 = x + cv.gauss(1.5);
          cv.segment(x0, y0, x1, y, 1.0, tone, 0.8);
          x0 = x1;
          y0 = y;
        }
      }
      break;
    }
    case 4: {  // emphysema: dark holes without walls
      for (int k = cv.integer(4, 8); k > 0; --k) {
        const auto [x, y] = cv.point();
        cv.disc(x, y, cv.uniform(2.0, 4.5), base - cv.uniform(0.12, 0.2));
      }
      vessels(1, base + 0.25);
      break;
    }
    case 5: {  // nodules: small bright dots
      for (int k = cv.integer(6, 12); k > 0; --k) {
        const auto [x, y] = cv.point();
        cv.add_blob(x, y, cv.uniform(0.8, 1.4), cv.uniform(0.2, 0.35));
      }
      break;
    }
    default:  // normal: smooth background with branching vessels
      vessels(cv.integer(1, 3), base + cv.uniform(0.2, 0.35));
      break;
  }
  cv.add_noise(cv.uniform(0.03, 0.06));
}

}  // namespace

Image generate_patch(const DomainSpec& spec, Index label, int stream, Index index) {
  const std::uint64_t split_seed = derive_seed(spec.seed, static_cast<std::uint64_t>(spec.kind) * 16 + static_cast<std::uint64_t>(stream));
  Rng rng(derive_seed(split_seed, static_cast<std::uint64_t>(label) * 1'000'003ULL + static_cast<std::uint64_t>(index)));
  Canvas cv(spec.image_size, rng);
  switch (spec.kind) {
    case DomainKind::Natural: draw_natural(cv, label); break;
    case DomainKind::Textural: draw_textural(cv, label); break;
    case DomainKind::Target: draw_target(cv, label); break;
  }
  return cv.image().cwiseMax(0.0).cwiseMin(1.0);
}

PatchSet generate_domain(const DomainSpec& spec) {
  spec.validate();
  PatchSet set;
  for (Index c = 0; c < spec.class_count; ++c) {
    for (Index i = 0; i < spec.train_count(c); ++i) {
      set.train.push_back({to_tensor(generate_patch(spec, c, 0, i)), static_cast<int>(c)});
    }
    for (Index i = 0; i < spec.eval_per_class; ++i) {
      set.eval.push_back({to_tensor(generate_patch(spec, c, 1, i)), static_cast<int>(c)});
    }
  }
  return set;
}

double nearest_centroid_accuracy(const Dataset& train, const Dataset& eval) {
  if (train.empty() || eval.empty()) throw DataError("nearest centroid needs nonempty splits");
  const auto counts = class_histogram(train);
  const Index dim = train.front().image.size();
  Matrix<double> centroids = Matrix<double>::Zero(dim, static_cast<Index>(counts.size()));
  for (const auto& e : train) centroids.col(e.label) += e.image.values();
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) centroids.col(static_cast<Index>(c)) /= static_cast<double>(counts[c]);
  }
  std::size_t correct = 0;
  for (const auto& e : eval) {
    Index best = -1;
    double best_d = 0.0;
    for (Index c = 0; c < centroids.cols(); ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      const double d = (centroids.col(c) - e.image.values()).squaredNorm();
      if (best < 0 || d < best_d) {
        best = c;
        best_d = d;
      }
    }
    if (best == e.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

std::uint64_t hash_pixels(const Tensor4d& image) {
  std::uint64_t h = 14695981039346656037ULL;
  for (Index i = 0; i < image.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(image[i]);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xff;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace stlb
