#pragma once

#include <Eigen/Core>

#include <cassert>
#include <cstdint>
#include <limits>
#include <ostream>
#include <utility>

#include "stlb/errors.hpp"

namespace stlb {

using Index = Eigen::Index;

/// Extents of a rank-4 (batch, channel, row, column) array.
struct Shape4 {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  /// Elements in one batch item (c * h * w).
  Index item_size() const { return c * h * w; }
  Index size() const { return n * item_size(); }

  /// Same extents with a different batch count.
  Shape4 with_batch(Index batch) const { return {batch, c, h, w}; }

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Shape4& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

/// Throws ShapeError unless every extent is positive and the element count
/// fits in Index.
inline void validate_shape(const Shape4& s) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ShapeError("every tensor extent must be >= 1");
  }
  Index total = 1;
  for (Index e : {s.n, s.c, s.h, s.w}) {
    if (__builtin_mul_overflow(total, e, &total)) {
      throw ShapeError("tensor element count overflows the index range");
    }
  }
}

/// Dense rank-4 array stored contiguously in row-major (n, c, h, w) order.
///
/// Storage is an Eigen column vector so the data can be mapped into matrix
/// expressions without copies. Index errors are programming errors and are
/// caught by assertions only.
template <typename Scalar>
class Tensor4 {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;
  using ConstMatrixMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;

  Tensor4() : Tensor4(Shape4{}) {}

  explicit Tensor4(const Shape4& shape) : shape_(shape) {
    validate_shape(shape_);
    data_ = Vector::Zero(shape_.size());
  }

  Tensor4(const Shape4& shape, Vector values) : shape_(shape), data_(std::move(values)) {
    validate_shape(shape_);
    if (data_.size() != shape_.size()) {
      throw ShapeError("value count does not match tensor shape");
    }
  }

  static Tensor4 zeros(const Shape4& shape) { return Tensor4(shape); }

  static Tensor4 constant(const Shape4& shape, Scalar value) {
    Tensor4 t(shape);
    t.data_.setConstant(value);
    return t;
  }

  const Shape4& shape() const { return shape_; }
  Index size() const { return data_.size(); }

  Index offset(Index n, Index c, Index y, Index x) const {
    assert(n >= 0 && n < shape_.n && c >= 0 && c < shape_.c);
    assert(y >= 0 && y < shape_.h && x >= 0 && x < shape_.w);
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Scalar& operator()(Index n, Index c, Index y, Index x) { return data_[offset(n, c, y, x)]; }
  Scalar operator()(Index n, Index c, Index y, Index x) const { return data_[offset(n, c, y, x)]; }

  Scalar& operator[](Index i) {
    assert(i >= 0 && i < data_.size());
    return data_[i];
  }
  Scalar operator[](Index i) const {
    assert(i >= 0 && i < data_.size());
    return data_[i];
  }

  Vector& values() { return data_; }
  const Vector& values() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  /// Batch item `n` as an (h*w) x c column-major matrix. Column k is
  /// channel k flattened in row-major spatial order.
  MatrixMap channel_matrix(Index n) {
    return MatrixMap(data_.data() + n * shape_.item_size(), shape_.h * shape_.w, shape_.c);
  }
  ConstMatrixMap channel_matrix(Index n) const {
    return ConstMatrixMap(data_.data() + n * shape_.item_size(), shape_.h * shape_.w, shape_.c);
  }

  /// All batch items as an item_size x n matrix (column j = flattened item j).
  MatrixMap item_matrix() { return MatrixMap(data_.data(), shape_.item_size(), shape_.n); }
  ConstMatrixMap item_matrix() const {
    return ConstMatrixMap(data_.data(), shape_.item_size(), shape_.n);
  }

  /// Copy of a single batch item as a (1, c, h, w) tensor.
  Tensor4 item(Index n) const {
    assert(n >= 0 && n < shape_.n);
    Tensor4 out(shape_.with_batch(1));
    out.data_ = data_.segment(n * shape_.item_size(), shape_.item_size());
    return out;
  }

  /// Same data under a new shape with the same element count.
  Tensor4 reshaped(const Shape4& shape) const {
    if (shape.size() != shape_.size()) {
      throw ShapeError("reshape must preserve the element count");
    }
    return Tensor4(shape, data_);
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape4 shape_;
  Vector data_;
};

using Tensor4d = Tensor4<double>;
using Mask4 = Tensor4<bool>;

template <typename Scalar>
Tensor4<Scalar> zeros(const Shape4& shape) {
  return Tensor4<Scalar>::zeros(shape);
}

inline void require_same_shape(const Shape4& a, const Shape4& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch");
  }
}

/// Sum of a[i] * b[i], accumulated strictly in ascending linear index order.
///
/// The fixed order makes the result reproducible and symmetric in (a, b).
/// Eigen's own dot product is not used because its packet reduction
/// reassociates the sum.
template <typename Scalar>
Scalar dot(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  const Scalar* pa = a.data();
  const Scalar* pb = b.data();
  Scalar sum = 0;
  for (Index i = 0; i < a.size(); ++i) {
    sum += pa[i] * pb[i];
  }
  return sum;
}

template <typename Scalar, typename F>
Tensor4<Scalar> map_elementwise(const Tensor4<Scalar>& a, F&& f) {
  return Tensor4<Scalar>(a.shape(), a.values().unaryExpr(std::forward<F>(f)).eval());
}

template <typename Scalar>
Tensor4<Scalar> add(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  return Tensor4<Scalar>(a.shape(), a.values() + b.values());
}

template <typename Scalar>
Tensor4<Scalar> scale(const Tensor4<Scalar>& a, Scalar s) {
  return Tensor4<Scalar>(a.shape(), a.values() * s);
}

/// a * x + b * y.
template <typename Scalar>
Tensor4<Scalar> linear_combination(Scalar a, const Tensor4<Scalar>& x, Scalar b,
                                   const Tensor4<Scalar>& y) {
  require_same_shape(x.shape(), y.shape(), "linear_combination");
  return Tensor4<Scalar>(x.shape(), a * x.values() + b * y.values());
}

/// Stacks (1, c, h, w) items into one (count, c, h, w) batch.
template <typename Scalar, typename Range>
Tensor4<Scalar> stack_items(const Range& items) {
  Index count = 0;
  Shape4 item_shape;
  for (const Tensor4<Scalar>& t : items) {
    if (count == 0) item_shape = t.shape();
    if (t.shape().item_size() != item_shape.item_size() || !(t.shape().with_batch(1) == item_shape.with_batch(1))) {
      throw ShapeError("stack_items: items differ in shape");
    }
    count += t.shape().n;
  }
  if (count == 0) throw ShapeError("stack_items: nothing to stack");
  Tensor4<Scalar> out(item_shape.with_batch(count));
  Index pos = 0;
  for (const Tensor4<Scalar>& t : items) {
    out.values().segment(pos, t.size()) = t.values();
    pos += t.size();
  }
  return out;
}

/// Replicates a single-channel tensor into `channels` identical channels.
/// Used to feed grayscale images into networks built for RGB input.
template <typename Scalar>
Tensor4<Scalar> replicate_channels(const Tensor4<Scalar>& x, Index channels) {
  if (x.shape().c != 1) throw ShapeError("replicate_channels expects a single-channel input");
  const Shape4 s = x.shape();
  Tensor4<Scalar> out(Shape4{s.n, channels, s.h, s.w});
  const Index plane = s.h * s.w;
  for (Index n = 0; n < s.n; ++n) {
    for (Index c = 0; c < channels; ++c) {
      out.values().segment((n * channels + c) * plane, plane) = x.values().segment(n * plane, plane);
    }
  }
  return out;
}

}  // namespace stlb
