#ifndef MGN_OPS_HPP
#define MGN_OPS_HPP

// Stateless tensor kernels with explicit backward passes. Every function is a
// template over the scalar type so the same code runs at float precision in the
// network and at double precision in gradient checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "mgn/error.hpp"
#include "mgn/tensor.hpp"

namespace mgn {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using ConstMatrixView = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
using MatrixView = Eigen::Map<RowMatrix<Scalar>>;

struct ConvGeometry {
  int kernel = 1;
  int stride = 1;
  int padding = 0;

  int output_extent(int input) const { return (input + 2 * padding - kernel) / stride + 1; }
  bool is_pointwise() const { return kernel == 1 && stride == 1 && padding == 0; }
};

/// Unfolds one [C, H, W] sample into a row-major [C*k*k, Ho*Wo] patch matrix.
template <typename Scalar>
void im2col(const Scalar* image, int channels, int height, int width, const ConvGeometry& g, Scalar* col) {
  const int out_h = g.output_extent(height);
  const int out_w = g.output_extent(width);
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    const Scalar* plane = image + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        Scalar* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          Scalar* dst = row + static_cast<std::size_t>(oh) * out_w;
          if (ih < 0 || ih >= height) {
            std::fill(dst, dst + out_w, Scalar(0));
            continue;
          }
          const Scalar* src = plane + static_cast<std::size_t>(ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + kj;
            dst[ow] = (iw >= 0 && iw < width) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters (accumulates) a patch matrix back into an image.
template <typename Scalar>
void col2im(const Scalar* col, int channels, int height, int width, const ConvGeometry& g, Scalar* image) {
  const int out_h = g.output_extent(height);
  const int out_w = g.output_extent(width);
  const int k = g.kernel;
  for (int c = 0; c < channels; ++c) {
    Scalar* plane = image + static_cast<std::size_t>(c) * height * width;
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const Scalar* row = col + (static_cast<std::size_t>(c) * k * k + ki * k + kj) * out_h * out_w;
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + ki;
          if (ih < 0 || ih >= height) continue;
          const Scalar* src = row + static_cast<std::size_t>(oh) * out_w;
          Scalar* dst = plane + static_cast<std::size_t>(ih) * width;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + kj;
            if (iw >= 0 && iw < width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

/// Bias-free 2-D convolution. `weight` is [Cout, Cin*k*k].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, ConstMatrixView<Scalar> weight, const ConvGeometry& g) {
  const int k2 = g.kernel * g.kernel;
  if (weight.cols() != static_cast<Eigen::Index>(x.channels()) * k2) {
    throw ShapeError("conv2d: input has " + std::to_string(x.channels()) + " channels, weight expects " +
                     std::to_string(weight.cols() / k2));
  }
  const int out_h = g.output_extent(x.height());
  const int out_w = g.output_extent(x.width());
  if (out_h <= 0 || out_w <= 0) throw ShapeError("conv2d: input " + x.shape().str() + " too small for kernel");
  Tensor<Scalar> out(x.batch(), static_cast<int>(weight.rows()), out_h, out_w);
  if (g.is_pointwise()) {
    for (int n = 0; n < x.batch(); ++n) out.sample(n).noalias() = weight * x.sample(n);
    return out;
  }
  RowMatrix<Scalar> col(weight.cols(), static_cast<Eigen::Index>(out_h) * out_w);
  for (int n = 0; n < x.batch(); ++n) {
    im2col(x.sample_data(n), x.channels(), x.height(), x.width(), g, col.data());
    out.sample(n).noalias() = weight * col;
  }
  return out;
}

/// Accumulates d(loss)/d(weight) into `grad_weight` and returns d(loss)/d(x)
/// (an empty tensor when `need_input_grad` is false).
template <typename Scalar>
Tensor<Scalar> conv2d_backward(const Tensor<Scalar>& x, ConstMatrixView<Scalar> weight, const ConvGeometry& g,
                               const Tensor<Scalar>& grad_out, MatrixView<Scalar> grad_weight,
                               bool need_input_grad) {
  const Eigen::Index spatial = static_cast<Eigen::Index>(grad_out.height()) * grad_out.width();
  Tensor<Scalar> grad_in;
  if (need_input_grad) grad_in = Tensor<Scalar>(x.shape());
  if (g.is_pointwise()) {
    for (int n = 0; n < x.batch(); ++n) {
      grad_weight.noalias() += grad_out.sample(n) * x.sample(n).transpose();
      if (need_input_grad) grad_in.sample(n).noalias() = weight.transpose() * grad_out.sample(n);
    }
    return grad_in;
  }
  RowMatrix<Scalar> col(weight.cols(), spatial);
  RowMatrix<Scalar> grad_col(weight.cols(), spatial);
  for (int n = 0; n < x.batch(); ++n) {
    im2col(x.sample_data(n), x.channels(), x.height(), x.width(), g, col.data());
    grad_weight.noalias() += grad_out.sample(n) * col.transpose();
    if (need_input_grad) {
      grad_col.noalias() = weight.transpose() * grad_out.sample(n);
      col2im(grad_col.data(), x.channels(), x.height(), x.width(), g, grad_in.sample_data(n));
    }
  }
  return grad_in;
}

/// Per-channel statistics kept by a training-mode batch norm for its backward pass.
template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;
  Vector<Scalar> inv_std;
};

/// Batch normalization with batch statistics; updates running statistics in place
/// (unbiased variance, exponential averaging with `momentum`).
template <typename Scalar>
Tensor<Scalar> batch_norm_train(const Tensor<Scalar>& x, const Vector<Scalar>& gamma, const Vector<Scalar>& beta,
                                Eigen::Ref<Vector<Scalar>> running_mean, Eigen::Ref<Vector<Scalar>> running_var,
                                Scalar momentum, Scalar eps, BatchNormCache<Scalar>* cache) {
  const int channels = x.channels();
  const Eigen::Index count = static_cast<Eigen::Index>(x.batch()) * x.height() * x.width();
  if (count < 1) throw ShapeError("batch_norm_train: empty input " + x.shape().str());
  Vector<Scalar> mean = Vector<Scalar>::Zero(channels);
  for (int n = 0; n < x.batch(); ++n) mean += x.sample(n).rowwise().sum();
  mean /= static_cast<Scalar>(count);
  Vector<Scalar> var = Vector<Scalar>::Zero(channels);
  for (int n = 0; n < x.batch(); ++n) {
    var += (x.sample(n).colwise() - mean).array().square().matrix().rowwise().sum();
  }
  var /= static_cast<Scalar>(count);
  const Vector<Scalar> inv_std = (var.array() + eps).rsqrt().matrix();

  Tensor<Scalar> normalized(x.shape());
  Tensor<Scalar> out(x.shape());
  for (int n = 0; n < x.batch(); ++n) {
    normalized.sample(n) = (x.sample(n).colwise() - mean).array().colwise() * inv_std.array();
    out.sample(n) = (normalized.sample(n).array().colwise() * gamma.array()).colwise() + beta.array();
  }
  const Scalar unbias = count > 1 ? static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : Scalar(1);
  running_mean = (Scalar(1) - momentum) * running_mean + momentum * mean;
  running_var = (Scalar(1) - momentum) * running_var + momentum * unbias * var;
  if (cache != nullptr) {
    cache->normalized = std::move(normalized);
    cache->inv_std = inv_std;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& x, const Vector<Scalar>& gamma, const Vector<Scalar>& beta,
                               const Vector<Scalar>& running_mean, const Vector<Scalar>& running_var, Scalar eps) {
  const Vector<Scalar> scale = (gamma.array() * (running_var.array() + eps).rsqrt()).matrix();
  const Vector<Scalar> shift = (beta.array() - running_mean.array() * scale.array()).matrix();
  Tensor<Scalar> out(x.shape());
  for (int n = 0; n < x.batch(); ++n) {
    out.sample(n) = (x.sample(n).array().colwise() * scale.array()).colwise() + shift.array();
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm_backward(const Tensor<Scalar>& grad_out, const Vector<Scalar>& gamma,
                                   const BatchNormCache<Scalar>& cache, Eigen::Ref<Vector<Scalar>> grad_gamma,
                                   Eigen::Ref<Vector<Scalar>> grad_beta) {
  const int channels = grad_out.channels();
  const Scalar count = static_cast<Scalar>(grad_out.batch()) * grad_out.height() * grad_out.width();
  Vector<Scalar> sum_grad = Vector<Scalar>::Zero(channels);
  Vector<Scalar> sum_grad_xhat = Vector<Scalar>::Zero(channels);
  for (int n = 0; n < grad_out.batch(); ++n) {
    sum_grad += grad_out.sample(n).rowwise().sum();
    sum_grad_xhat += grad_out.sample(n).cwiseProduct(cache.normalized.sample(n)).rowwise().sum();
  }
  grad_gamma += sum_grad_xhat;
  grad_beta += sum_grad;
  const Vector<Scalar> coeff = (gamma.array() * cache.inv_std.array() / count).matrix();
  Tensor<Scalar> grad_in(grad_out.shape());
  for (int n = 0; n < grad_out.batch(); ++n) {
    auto centered = ((grad_out.sample(n).array() * count).colwise() - sum_grad.array()) -
                    cache.normalized.sample(n).array().colwise() * sum_grad_xhat.array();
    grad_in.sample(n) = centered.colwise() * coeff.array();
  }
  return grad_in;
}

template <typename Scalar>
void relu_inplace(Tensor<Scalar>& x) {
  x.array() = x.array().max(Scalar(0));
}

/// Masks `grad` by the positive entries of the rectifier's output.
template <typename Scalar>
void relu_backward_inplace(Tensor<Scalar>& grad, const Tensor<Scalar>& output) {
  grad.array() = (output.array() > Scalar(0)).select(grad.array(), Scalar(0));
}

/// Max pooling with per-output argmax (flat index within the input plane).
template <typename Scalar>
Tensor<Scalar> max_pool2d(const Tensor<Scalar>& x, const ConvGeometry& g, std::vector<std::int32_t>* argmax) {
  const int out_h = g.output_extent(x.height());
  const int out_w = g.output_extent(x.width());
  Tensor<Scalar> out(x.batch(), x.channels(), out_h, out_w);
  if (argmax != nullptr) argmax->assign(out.size(), -1);
  std::size_t o = 0;
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < x.channels(); ++c) {
      const Scalar* plane = x.sample_data(n) + static_cast<std::size_t>(c) * x.height() * x.width();
      Scalar* dst = out.sample_data(n) + static_cast<std::size_t>(c) * out_h * out_w;
      for (int oh = 0; oh < out_h; ++oh) {
        for (int ow = 0; ow < out_w; ++ow, ++o) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          std::int32_t best_index = -1;
          for (int ki = 0; ki < g.kernel; ++ki) {
            const int ih = oh * g.stride - g.padding + ki;
            if (ih < 0 || ih >= x.height()) continue;
            for (int kj = 0; kj < g.kernel; ++kj) {
              const int iw = ow * g.stride - g.padding + kj;
              if (iw < 0 || iw >= x.width()) continue;
              const std::int32_t idx = ih * x.width() + iw;
              if (plane[idx] > best || best_index < 0) {
                best = plane[idx];
                best_index = idx;
              }
            }
          }
          dst[oh * out_w + ow] = best;
          if (argmax != nullptr) (*argmax)[o] = best_index;
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> max_pool2d_backward(const Tensor<Scalar>& grad_out, const Shape4& input_shape,
                                   std::span<const std::int32_t> argmax) {
  Tensor<Scalar> grad_in(input_shape);
  const std::size_t plane_out = static_cast<std::size_t>(grad_out.height()) * grad_out.width();
  const std::size_t plane_in = static_cast<std::size_t>(input_shape.h) * input_shape.w;
  const Scalar* src = grad_out.data();
  Scalar* dst = grad_in.data();
  const std::size_t planes = static_cast<std::size_t>(grad_out.batch()) * grad_out.channels();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < plane_out; ++i) {
      dst[p * plane_in + argmax[p * plane_out + i]] += src[p * plane_out + i];
    }
  }
  return grad_in;
}

/// Splits a feature map into `num_parts` equal horizontal stripes, top to bottom.
template <typename Scalar>
std::vector<Tensor<Scalar>> partition_stripes(const Tensor<Scalar>& x, int num_parts) {
  if (num_parts < 1) throw ShapeError("partition_stripes: num_parts must be >= 1");
  if (x.height() % num_parts != 0) {
    throw ShapeError("partition_stripes: height " + std::to_string(x.height()) + " is not divisible by " +
                     std::to_string(num_parts));
  }
  const int stripe_h = x.height() / num_parts;
  const std::size_t stripe_plane = static_cast<std::size_t>(stripe_h) * x.width();
  const std::size_t full_plane = static_cast<std::size_t>(x.height()) * x.width();
  std::vector<Tensor<Scalar>> stripes;
  stripes.reserve(num_parts);
  for (int part = 0; part < num_parts; ++part) {
    Tensor<Scalar> stripe(x.batch(), x.channels(), stripe_h, x.width());
    for (int n = 0; n < x.batch(); ++n) {
      for (int c = 0; c < x.channels(); ++c) {
        const Scalar* src = x.sample_data(n) + c * full_plane + part * stripe_plane;
        std::copy(src, src + stripe_plane, stripe.sample_data(n) + c * stripe_plane);
      }
    }
    stripes.push_back(std::move(stripe));
  }
  return stripes;
}

/// Inverse of partition_stripes: stacks stripes vertically.
template <typename Scalar>
Tensor<Scalar> concat_stripes(std::span<const Tensor<Scalar>> stripes) {
  if (stripes.empty()) throw ShapeError("concat_stripes: no stripes");
  const Shape4 first = stripes.front().shape();
  int total_h = 0;
  for (const auto& s : stripes) {
    if (s.batch() != first.n || s.channels() != first.c || s.width() != first.w) {
      throw ShapeError("concat_stripes: stripe " + s.shape().str() + " does not match " + first.str());
    }
    total_h += s.height();
  }
  Tensor<Scalar> out(first.n, first.c, total_h, first.w);
  const std::size_t full_plane = static_cast<std::size_t>(total_h) * first.w;
  for (int n = 0; n < first.n; ++n) {
    for (int c = 0; c < first.c; ++c) {
      Scalar* dst = out.sample_data(n) + c * full_plane;
      for (const auto& s : stripes) {
        const std::size_t plane = static_cast<std::size_t>(s.height()) * s.width();
        const Scalar* src = s.sample_data(n) + c * plane;
        dst = std::copy(src, src + plane, dst);
      }
    }
  }
  return out;
}

/// Global max pooling to [N, C, 1, 1], recording the winning spatial index per (n, c).
template <typename Scalar>
Tensor<Scalar> global_max_pool(const Tensor<Scalar>& x, std::vector<std::int32_t>* argmax) {
  Tensor<Scalar> out(x.batch(), x.channels(), 1, 1);
  if (argmax != nullptr) argmax->assign(out.size(), 0);
  for (int n = 0; n < x.batch(); ++n) {
    auto plane = x.sample(n);
    for (int c = 0; c < x.channels(); ++c) {
      Eigen::Index best = 0;
      out(n, c, 0, 0) = plane.row(c).maxCoeff(&best);
      if (argmax != nullptr) (*argmax)[static_cast<std::size_t>(n) * x.channels() + c] = static_cast<std::int32_t>(best);
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> global_max_pool_backward(const Tensor<Scalar>& grad_out, const Shape4& input_shape,
                                        std::span<const std::int32_t> argmax) {
  Tensor<Scalar> grad_in(input_shape);
  for (int n = 0; n < input_shape.n; ++n) {
    for (int c = 0; c < input_shape.c; ++c) {
      const std::size_t i = static_cast<std::size_t>(n) * input_shape.c + c;
      grad_in.sample(n)(c, argmax[i]) += grad_out(n, c, 0, 0);
    }
  }
  return grad_in;
}

/// Mirrors every sample left-right.
template <typename Scalar>
Tensor<Scalar> hflip(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  for (int n = 0; n < x.batch(); ++n) {
    for (int c = 0; c < x.channels(); ++c) {
      for (int h = 0; h < x.height(); ++h) {
        for (int w = 0; w < x.width(); ++w) out(n, c, h, w) = x(n, c, h, x.width() - 1 - w);
      }
    }
  }
  return out;
}

/// L2 norm over channels at every spatial location of sample `n`: [H, W].
template <typename Scalar>
RowMatrix<Scalar> channel_norm_map(const Tensor<Scalar>& x, int n) {
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> norms = x.sample(n).colwise().norm();
  return Eigen::Map<const RowMatrix<Scalar>>(norms.data(), x.height(), x.width());
}

}  // namespace mgn

#endif  // MGN_OPS_HPP
