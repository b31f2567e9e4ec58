#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sscaps/ops.hpp"
#include "sscaps/tensor.hpp"

namespace sscaps {

inline constexpr double kSquashEps = 1e-9;

/// Capsule view of a tensor with axes [N, H, W, D, C, A]: C capsule types of
/// A-dimensional vectors at every voxel of every batch item.
template <typename T>
class CapsuleGrid {
 public:
  CapsuleGrid() = default;
  explicit CapsuleGrid(BasicTensor<T> tensor);

  static CapsuleGrid zeros(std::size_t batch, const Extent3& spatial, std::size_t types,
                           std::size_t dim);

  const BasicTensor<T>& tensor() const { return tensor_; }
  BasicTensor<T>& tensor() { return tensor_; }

  std::size_t batch() const { return tensor_.dim(0); }
  Extent3 spatial() const { return {tensor_.dim(1), tensor_.dim(2), tensor_.dim(3)}; }
  std::size_t caps_types() const { return tensor_.dim(4); }
  std::size_t caps_dim() const { return tensor_.dim(5); }
  std::size_t locations() const { return tensor_.dim(1) * tensor_.dim(2) * tensor_.dim(3); }

 private:
  BasicTensor<T> tensor_;
};

/// (|v|^2 / (1 + |v|^2)) * v / |v|, with |v| = sqrt(|v|^2 + kSquashEps).
template <typename T>
std::vector<T> squash(std::span<const T> v);

template <typename T>
std::vector<T> squash_backward(std::span<const T> v, std::span<const T> grad_out);

/// Squash applied to every vector along the last axis.
template <typename T>
BasicTensor<T> squash_last_axis(const BasicTensor<T>& t);
template <typename T>
BasicTensor<T> squash_last_axis_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& t);

/// Logits and couplings over (child, parent) pairs after a routing call.
template <typename T>
struct RoutingState {
  BasicTensor<T> logits;     // b [children, parents]
  BasicTensor<T> couplings;  // c = softmax(b) over parents
  std::size_t iterations = 0;
};

/// Dynamic routing by agreement.
///
/// predictions: [children, parents, dim]. Logits start at zero; each round
/// computes couplings c = softmax over parents, s_j = sum_i c_ij u_ij,
/// v_j = squash(s_j), then (except on the last round) b_ij += u_ij . v_j.
/// Returns v with shape [parents, dim]. When `trace` is set it receives the
/// couplings used in each round, in order.
template <typename T>
BasicTensor<T> dynamic_routing(const BasicTensor<T>& predictions, std::size_t iterations,
                               std::vector<BasicTensor<T>>* trace = nullptr,
                               RoutingState<T>* state = nullptr);

/// Gradient w.r.t. predictions through the unrolled routing rounds.
template <typename T>
BasicTensor<T> dynamic_routing_backward(const BasicTensor<T>& grad_out,
                                        const BasicTensor<T>& predictions,
                                        std::size_t iterations);

struct CapsConvSpec {
  std::size_t in_types = 1;
  std::size_t in_dim = 1;
  std::size_t out_types = 1;
  std::size_t out_dim = 1;
  Extent3 kernel{3, 3, 3};
  Extent3 stride{1, 1, 1};
  Extent3 padding{1, 1, 1};
  std::size_t routing_iterations = 3;

  /// Cubic kernel k with "same" padding (k - 1) / 2.
  static CapsConvSpec make(std::size_t in_types, std::size_t in_dim, std::size_t out_types,
                           std::size_t out_dim, std::size_t k, std::size_t stride,
                           std::size_t iterations = 3);

  void validate() const;
  /// The per-child-type vote convolution: in_dim -> out_types * out_dim.
  ConvSpec vote_conv() const;
  /// [in_types, out_types * out_dim, in_dim, kH, kW, kD]
  Shape weight_shape() const;
  Extent3 output_extents(const Extent3& in) const { return vote_conv().output_extents(in); }
};

template <typename T>
struct CapsConvCache {
  std::vector<BasicTensor<T>> children;  // per input type, [N, in_dim, H, W, D]
  BasicTensor<T> predictions;            // [N, H', W', D', in_types, out_types, out_dim]
};

template <typename T>
struct CapsConvGrads {
  BasicTensor<T> input;    // like the input grid tensor
  BasicTensor<T> weights;  // like the weights
};

/// 3D convolutional capsule layer: each input capsule type votes for every
/// output capsule through a convolution shared across space, and the votes
/// at each output location are combined by dynamic routing.
template <typename T>
CapsuleGrid<T> caps_conv3d_forward(const CapsuleGrid<T>& input, const BasicTensor<T>& weights,
                                   const CapsConvSpec& spec, CapsConvCache<T>* cache = nullptr);

template <typename T>
CapsConvGrads<T> caps_conv3d_backward(const BasicTensor<T>& grad_out,
                                      const BasicTensor<T>& weights, const CapsConvSpec& spec,
                                      const CapsConvCache<T>& cache);

/// [N, H, W, D, C, A] -> [N, H, W, D, C * A].
template <typename T>
BasicTensor<T> flatten_to_tensor(const CapsuleGrid<T>& grid);

/// [N, H, W, D, K] -> grid with `types` capsule types of dimension K / types.
template <typename T>
CapsuleGrid<T> from_tensor(const BasicTensor<T>& t, std::size_t types);

/// As above, additionally requiring K == types * dim.
template <typename T>
CapsuleGrid<T> from_tensor(const BasicTensor<T>& t, std::size_t types, std::size_t dim);

/// Euclidean norm of every capsule: [N, H, W, D, C].
template <typename T>
BasicTensor<T> capsule_lengths(const CapsuleGrid<T>& grid);

template <typename T>
BasicTensor<T> capsule_lengths_backward(const BasicTensor<T>& grad_out, const CapsuleGrid<T>& grid,
                                        const BasicTensor<T>& lengths);

/// [N, H, W, D, K] <-> [N, K, H, W, D].
template <typename T>
BasicTensor<T> channels_last_to_first(const BasicTensor<T>& t);
template <typename T>
BasicTensor<T> channels_first_to_last(const BasicTensor<T>& t);

}  // namespace sscaps
