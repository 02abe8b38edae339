#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stlb/image.hpp"
#include "stlb/training.hpp"

namespace stlb {

/// Which stand-in domain to synthesise.
///  - Natural: edge-dominated compositions of polygons, discs, bars and
///    lines over smooth gradients.
///  - Textural: stationary fields (gratings with random phase, thresholded
///    noise, Gabor-like blobs, checkerboards, cellular spots, ...).
///  - Target: seven lung-pattern-like texture classes with within-class
///    parameter jitter.
enum class DomainKind { Natural, Textural, Target };

const char* to_string(DomainKind k);
DomainKind domain_kind_from_string(const std::string& s);

/// Number of distinct class designs available for a kind.
Index max_classes(DomainKind kind);

struct DomainSpec {
  DomainKind kind = DomainKind::Target;
  Index class_count = 7;
  Index examples_per_class = 200;  // training split, per class
  Index eval_per_class = 50;
  Index image_size = 32;
  std::uint64_t seed = 1;
  /// Ratio between the largest and the smallest training class. Class c
  /// receives examples_per_class * imbalance^(-c / (C - 1)) examples, so
  /// 1 means balanced. The eval split stays balanced.
  double imbalance = 1.0;

  void validate() const;
  /// Training examples generated for class c.
  Index train_count(Index c) const;
};

/// Labelled single-channel patches in [0, 1], split into train and eval.
/// The two splits draw from disjoint seed streams.
struct PatchSet {
  Dataset train;
  Dataset eval;
};

PatchSet generate_domain(const DomainSpec& spec);

/// One image of class `label`. `stream` selects the split (0 = train,
/// 1 = eval); `index` numbers the example within class and split.
Image generate_patch(const DomainSpec& spec, Index label, int stream, Index index);

/// Accuracy of a pixel-space nearest-centroid classifier fit on `train` and
/// scored on `eval`.
double nearest_centroid_accuracy(const Dataset& train, const Dataset& eval);

/// 64-bit FNV-1a hash of an example's pixels.
std::uint64_t hash_pixels(const Tensor4d& image);

}  // namespace stlb
