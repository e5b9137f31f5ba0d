#pragma once

#include <Eigen/Core>

#include <concepts>
#include <cstring>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "s2c/errors.hpp"
#include "s2c/rng.hpp"

namespace s2c {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
concept RealScalar = std::same_as<T, float> || std::same_as<T, double>;

enum class Precision : std::uint8_t { single = 4, double_ = 8 };

template <RealScalar Scalar>
constexpr Precision precision_of() {
  return sizeof(Scalar) == 4 ? Precision::single : Precision::double_;
}

std::string shape_string(const Shape& shape);

inline Index shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

inline void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (Index e : shape) {
    if (e < 1) throw ShapeError("tensor extent must be >= 1, got shape " + shape_string(shape));
  }
}

// Dense row-major tensor. Image tensors use batch x channels x height x width.
template <RealScalar Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Zero(shape_product(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_product(shape_)) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor normal(Shape shape, Scalar mean, Scalar stddev, SeededRng& rng) {
    if (!(stddev >= 0)) throw ShapeError("normal fill requires stddev >= 0");
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) {
      t.data_[i] = mean + stddev * static_cast<Scalar>(rng.normal());
    }
    return t;
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return Tensor(std::move(shape), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector& values() { return data_; }
  const Vector& values() const { return data_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  // View of the storage as a rows x cols row-major matrix.
  MatrixMap matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  void reshape(Shape shape) {
    check_shape(shape);
    if (shape_product(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    shape_ = std::move(shape);
  }

  Tensor zeros_like() const { return Tensor(shape_); }

  // Bitwise equality of shape and every element.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_) return false;
    return std::memcmp(a.data(), b.data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
  }

 private:
  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) throw ShapeError("matrix view does not cover tensor storage");
  }

  Shape shape_;
  Vector data_;
};

enum class BinaryOp { add, sub, mul };

template <RealScalar Scalar>
Tensor<Scalar> map_binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, BinaryOp op) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise operands differ in shape: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  typename Tensor<Scalar>::Vector out;
  switch (op) {
    case BinaryOp::add: out = a.values() + b.values(); break;
    case BinaryOp::sub: out = a.values() - b.values(); break;
    case BinaryOp::mul: out = a.values().cwiseProduct(b.values()); break;
  }
  return Tensor<Scalar>(a.shape(), std::move(out));
}

template <RealScalar Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return map_binary(a, b, BinaryOp::add);
}

template <RealScalar Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return map_binary(a, b, BinaryOp::sub);
}

template <RealScalar Scalar>
struct ChannelMoments {
  typename Tensor<Scalar>::Vector mean;
  // Biased: divided by the element count, not count - 1.
  typename Tensor<Scalar>::Vector variance;
};

inline void check_image_layout(const Shape& shape, const char* who) {
  if (shape.size() != 4) {
    throw ShapeError(std::string(who) + ": expected batch x channels x height x width, got " +
                     shape_string(shape));
  }
}

// Per-channel mean and biased variance over batch, height and width.
// Accumulates in double; the variance is computed around the mean (two-pass).
template <RealScalar Scalar>
ChannelMoments<Scalar> channel_moments(const Tensor<Scalar>& t) {
  check_image_layout(t.shape(), "channel_moments");
  const Index batch = t.dim(0), channels = t.dim(1), plane = t.dim(2) * t.dim(3);
  const double count = static_cast<double>(batch * plane);
  ChannelMoments<Scalar> m{Tensor<Scalar>::Vector::Zero(channels), Tensor<Scalar>::Vector::Zero(channels)};
  for (Index c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (Index n = 0; n < batch; ++n) {
      const Scalar* p = t.data() + (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (Index n = 0; n < batch; ++n) {
      const Scalar* p = t.data() + (n * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    m.mean[c] = static_cast<Scalar>(mean);
    m.variance[c] = static_cast<Scalar>(sq / count);
  }
  return m;
}

}  // namespace s2c
