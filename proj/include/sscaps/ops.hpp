#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "sscaps/tensor.hpp"

namespace sscaps {

using Extent3 = std::array<std::size_t, 3>;

/// Geometry of a 3D (dilated, strided, zero-padded) convolution.
struct ConvSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 dilation{1, 1, 1};
  Extent3 padding{0, 0, 0};

  /// Isotropic convenience constructor.
  static ConvSpec cube(std::size_t in, std::size_t out, std::size_t k,
                       std::size_t stride = 1, std::size_t dilation = 1,
                       std::size_t padding = 0);

  /// Padding that keeps the spatial size at stride 1: dilation * (k - 1) / 2.
  static ConvSpec same(std::size_t in, std::size_t out, std::size_t k,
                       std::size_t dilation = 1);

  void validate() const;
  std::size_t kernel_volume() const { return kernel[0] * kernel[1] * kernel[2]; }

  /// floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1 per axis.
  /// Throws ShapeError naming the axis when an extent would drop below 1.
  Extent3 output_extents(const Extent3& in) const;

  /// Inverse of output_extents for the transposed convolution:
  /// (in - 1) stride - 2 pad + dilation (k - 1) + 1.
  Extent3 transposed_extents(const Extent3& in) const;
};

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

// input [N, Cin, H, W, D], weights [Cout, Cin, kH, kW, kD], bias [Cout] or empty.
template <typename T>
BasicTensor<T> conv3d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                              const BasicTensor<T>& bias, const ConvSpec& spec);

template <typename T>
ConvGrads<T> conv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weights, const ConvSpec& spec);

// Transposed convolution. input [N, Cin, ...], weights [Cin, Cout, kH, kW, kD]
// (the layout of the forward convolution it transposes), bias [Cout] or empty.
template <typename T>
BasicTensor<T> deconv3d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                                const BasicTensor<T>& bias, const ConvSpec& spec);

template <typename T>
ConvGrads<T> deconv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                               const BasicTensor<T>& weights, const ConvSpec& spec);

enum class Mode { Train, Eval };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

template <typename T>
struct BatchNormStats {
  BasicTensor<T> mean;  // [C]
  BasicTensor<T> var;   // [C], unbiased

  static BatchNormStats init(std::size_t channels) {
    return {BasicTensor<T>({channels}, T{0}), BasicTensor<T>({channels}, T{1})};
  }
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Train;
  BasicTensor<T> xhat;
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_var;  // unbiased
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// Per-channel normalization over (N, spatial) of an [N, C, ...] tensor.
/// Train mode uses batch statistics; eval mode uses `running`. Running
/// statistics are not modified here: pass the cache to update_running_stats.
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                                 const BasicTensor<T>& beta, const BatchNormStats<T>& running,
                                 Mode mode, BatchNormCache<T>* cache);

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& gamma,
                                     const BatchNormCache<T>& cache);

/// running <- (1 - momentum) running + momentum batch, for a train-mode cache.
template <typename T>
void update_running_stats(BatchNormStats<T>& running, const BatchNormCache<T>& cache);

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax_forward(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& y,
                                std::size_t axis);

/// Euclidean norm along `axis`; the axis is removed from the output shape.
template <typename T>
BasicTensor<T> l2_norm_forward(const BasicTensor<T>& x, std::size_t axis);
template <typename T>
BasicTensor<T> l2_norm_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x,
                                const BasicTensor<T>& y, std::size_t axis);

template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, std::size_t axis);
/// Inverse of concat (and its backward): cuts `t` along `axis` into `sizes`.
template <typename T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& t, std::size_t axis,
                                  std::span<const std::size_t> sizes);

/// out.shape[i] = t.shape[axes[i]]. The backward of a permute is the
/// permute by the inverse axes.
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& t, std::span<const std::size_t> axes);

/// Inverse of a permutation, for permute backward.
std::vector<std::size_t> inverse_axes(std::span<const std::size_t> axes);

/// Nearest-neighbour subsampling of the last three axes: out[i] = in[i * factor].
template <typename T>
BasicTensor<T> downsample_labels(const BasicTensor<T>& labels, std::size_t factor);

template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src);

}  // namespace sscaps
