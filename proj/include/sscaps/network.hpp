#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sscaps/capsules.hpp"
#include "sscaps/ops.hpp"
#include "sscaps/tensor.hpp"

namespace sscaps {

/// Architecture hyperparameters.
///
/// Encoder strides, the capsule dimension schedule, skip sources and the
/// location of the reconstruction branch are not fixed by the method
/// description; the defaults here are this implementation's choices:
///   * strides (1, 2, 1, 2, 1, 2): three halvings matched by three decoder stages
///   * capsule dimension 16 in every encoder layer (64 at entry, from the stem)
///   * skips are the capsule grids entering each stride-2 layer
///   * the reconstruction branch reads the last decoder feature map
///   * entry capsules (one type per voxel) are squashed like every other capsule
struct ArchSpec {
  std::size_t in_channels = 1;
  std::size_t num_classes = 4;

  bool use_stem = true;
  std::vector<std::size_t> stem_channels{16, 32, 64};
  std::size_t stem_kernel = 5;
  std::vector<std::size_t> stem_dilations{1, 3, 3};

  std::vector<std::size_t> caps_types{16, 16, 16, 8, 8, 4};
  std::vector<std::size_t> caps_dims{16, 16, 16, 16, 16, 16};
  std::vector<std::size_t> caps_strides{1, 2, 1, 2, 1, 2};
  std::size_t caps_kernel = 3;
  std::size_t routing_iterations = 3;

  /// Output channels of each decoder stage, deepest first.
  std::vector<std::size_t> decoder_channels{64, 32, 16};
  std::size_t decoder_kernel = 3;

  std::vector<std::size_t> recon_channels{64, 128};

  /// Full-size network: stem (16, 32, 64), capsule types (16, 16, 16, 8, 8, classes).
  static ArchSpec standard(std::size_t in_channels, std::size_t num_classes);
  /// Every channel and capsule count divided by 4, for CPU-scale experiments.
  static ArchSpec micro(std::size_t in_channels, std::size_t num_classes);

  /// First capsule layer's type count divided by 4 (minimum 1).
  ArchSpec with_reduced_first_caps() const;
  ArchSpec without_stem() const;

  void validate() const;
  /// Capsule dimension of the entry grid (stem output channels, or the raw
  /// input channels without a stem).
  std::size_t entry_dim() const;
  /// Product of encoder strides.
  std::size_t downsample_factor() const;
  std::size_t min_extent() const;
  /// Encoder layer indices that read a skip grid (stride-2 layers), shallowest first.
  std::vector<std::size_t> skip_layers() const;

  bool operator==(const ArchSpec&) const = default;
};

/// Named learnable tensors (with gradients) plus non-learnable buffers
/// (batch-norm running statistics), in a fixed insertion order.
template <typename T>
class NetworkParams {
 public:
  void add_param(const std::string& name, BasicTensor<T> value);
  void add_buffer(const std::string& name, BasicTensor<T> value);

  bool has_param(const std::string& name) const { return param_index_.count(name) > 0; }
  GradPair<T>& param(const std::string& name);
  const GradPair<T>& param(const std::string& name) const;
  BasicTensor<T>& buffer(const std::string& name);
  const BasicTensor<T>& buffer(const std::string& name) const;

  const std::vector<std::string>& param_names() const { return param_names_; }
  const std::vector<std::string>& buffer_names() const { return buffer_names_; }
  std::vector<GradPair<T>>& params() { return params_; }
  const std::vector<GradPair<T>>& params() const { return params_; }
  std::vector<BasicTensor<T>>& buffers() { return buffers_; }
  const std::vector<BasicTensor<T>>& buffers() const { return buffers_; }

  void zero_grad();
  /// Total learnable scalar count.
  std::size_t count() const;
  bool all_finite() const;

  template <typename U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.add_param(param_names_[i], params_[i].value.template cast<U>());
    }
    for (std::size_t i = 0; i < buffers_.size(); ++i) {
      out.add_buffer(buffer_names_[i], buffers_[i].template cast<U>());
    }
    return out;
  }

 private:
  std::vector<std::string> param_names_;
  std::vector<GradPair<T>> params_;
  std::map<std::string, std::size_t> param_index_;
  std::vector<std::string> buffer_names_;
  std::vector<BasicTensor<T>> buffers_;
  std::map<std::string, std::size_t> buffer_index_;
};

/// Copies every "stem." parameter from `src` into `dst`. Returns the count.
template <typename T>
std::size_t transplant_stem(const NetworkParams<T>& src, NetworkParams<T>& dst);

/// Shapes produced for a given input extent, without running anything.
struct ShapePlan {
  Shape features;                  // [N, entry_dim, H, W, D]
  std::vector<Shape> caps_grids;   // per encoder layer, [N, h, w, d, C, A]
  std::vector<Shape> skips;        // skip grids, deepest first
  Shape lengths;                   // [N, h, w, d, classes]
  Shape logits;                    // [N, classes, H, W, D]
  Shape reconstruction;
};

template <typename T>
struct StemCache {
  std::vector<BasicTensor<T>> inputs;  // input of each conv
  std::vector<BasicTensor<T>> pre;     // pre-activation of each conv
};

template <typename T>
struct EncoderCache {
  BasicTensor<T> entry_raw;  // features as capsules, before squash
  CapsuleGrid<T> entry;
  std::vector<CapsuleGrid<T>> outputs;
  std::vector<CapsConvCache<T>> layers;
};

template <typename T>
struct DecoderStageCache {
  BasicTensor<T> deconv_in;
  BasicTensor<T> concat_out;
  std::size_t up_channels = 0;
  std::size_t skip_channels = 0;
  BasicTensor<T> conv_out;
  BatchNormCache<T> bn;
  BasicTensor<T> bn_out;
};

template <typename T>
struct DecoderCache {
  std::vector<DecoderStageCache<T>> stages;
  BasicTensor<T> features;  // last stage output, input of the head
};

template <typename T>
struct ReconCache {
  std::vector<BasicTensor<T>> inputs;
  std::vector<BasicTensor<T>> pre;
};

template <typename T>
struct EncoderOutput {
  CapsuleGrid<T> final_grid;
  std::vector<CapsuleGrid<T>> skips;  // deepest first
};

template <typename T>
struct ForwardOutputs {
  BasicTensor<T> logits;           // [N, classes, H, W, D]
  BasicTensor<T> encoder_lengths;  // [N, h, w, d, classes]
  BasicTensor<T> reconstruction;   // like the input
};

template <typename T>
struct ForwardCache {
  Mode mode = Mode::Train;
  Shape input_shape;
  StemCache<T> stem;
  EncoderCache<T> encoder;
  std::vector<std::size_t> skip_sources;  // encoder output index per skip (deepest first), or npos for entry
  DecoderCache<T> decoder;
  ReconCache<T> recon;
  BasicTensor<T> lengths;
};

/// Gradients of a scalar objective w.r.t. the forward outputs. Empty
/// tensors stand for zero.
template <typename T>
struct OutputGrads {
  BasicTensor<T> logits;
  BasicTensor<T> encoder_lengths;
  BasicTensor<T> reconstruction;
};

template <typename T>
class Network {
 public:
  explicit Network(ArchSpec arch);

  const ArchSpec& arch() const { return arch_; }

  NetworkParams<T> init_params(std::uint64_t seed) const;
  ShapePlan plan(std::size_t batch, const Extent3& extents) const;

  BasicTensor<T> stem_forward(const BasicTensor<T>& volume, const NetworkParams<T>& p,
                              StemCache<T>* cache) const;
  /// Accumulates stem parameter gradients; returns the gradient w.r.t. the volume.
  BasicTensor<T> stem_backward(const BasicTensor<T>& grad_features, const StemCache<T>& cache,
                               NetworkParams<T>& p) const;

  EncoderOutput<T> encoder_forward(const BasicTensor<T>& features, const NetworkParams<T>& p,
                                   EncoderCache<T>* cache) const;

  /// Returns logits; `features_out` receives the last decoder feature map.
  BasicTensor<T> decoder_forward(const CapsuleGrid<T>& final_grid,
                                 const std::vector<CapsuleGrid<T>>& skips,
                                 const NetworkParams<T>& p, Mode mode, DecoderCache<T>* cache,
                                 BasicTensor<T>* features_out) const;

  BasicTensor<T> reconstruction_branch(const BasicTensor<T>& decoder_features,
                                       const NetworkParams<T>& p, ReconCache<T>* cache) const;

  ForwardOutputs<T> forward(const BasicTensor<T>& volume, const NetworkParams<T>& p, Mode mode,
                            ForwardCache<T>* cache) const;

  /// Accumulates every parameter gradient for the given output gradients.
  void backward(const ForwardCache<T>& cache, const OutputGrads<T>& grads,
                NetworkParams<T>& p) const;

  /// Folds the train-mode batch statistics of `cache` into the running stats.
  void commit_batchnorm_stats(const ForwardCache<T>& cache, NetworkParams<T>& p) const;

  CapsConvSpec caps_spec(std::size_t layer) const;

 private:
  ArchSpec arch_;
};

}  // namespace sscaps
