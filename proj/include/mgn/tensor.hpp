#ifndef MGN_TENSOR_HPP
#define MGN_TENSOR_HPP

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

#include "mgn/error.hpp"

namespace mgn {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using RowMatrixXf = RowMatrix<float>;

struct Shape4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  bool operator==(const Shape4&) const = default;
  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + "]";
  }
};

/// Dense NCHW tensor. Each sample is viewable as a row-major [C, H*W] matrix.
template <typename Scalar>
class Tensor {
 public:
  using SampleMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstSampleMap = Eigen::Map<const RowMatrix<Scalar>>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  Tensor() = default;
  explicit Tensor(Shape4 shape, Scalar fill = Scalar(0)) : shape_(shape), data_(shape.size(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative tensor extent " + shape.str());
    }
  }
  Tensor(int n, int c, int h, int w, Scalar fill = Scalar(0)) : Tensor(Shape4{n, c, h, w}, fill) {}

  const Shape4& shape() const { return shape_; }
  int batch() const { return shape_.n; }
  int channels() const { return shape_.c; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(shape_.c) * static_cast<std::size_t>(shape_.h) *
           static_cast<std::size_t>(shape_.w);
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Scalar* sample_data(int n) { return data_.data() + n * sample_size(); }
  const Scalar* sample_data(int n) const { return data_.data() + n * sample_size(); }

  Scalar& operator()(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  Scalar operator()(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  SampleMap sample(int n) { return SampleMap(sample_data(n), shape_.c, shape_.h * shape_.w); }
  ConstSampleMap sample(int n) const { return ConstSampleMap(sample_data(n), shape_.c, shape_.h * shape_.w); }

  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }

  void set_zero() { std::fill(data_.begin(), data_.end(), Scalar(0)); }

 private:
  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Shape4 shape_;
  // Fixed base alignment keeps vectorized reductions bitwise reproducible.
  std::vector<Scalar, Eigen::aligned_allocator<Scalar>> data_;
};

using Tensor4f = Tensor<float>;

}  // namespace mgn

#endif  // MGN_TENSOR_HPP
