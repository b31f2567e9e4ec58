#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sscaps/error.hpp"
#include "sscaps/network.hpp"
#include "sscaps/random.hpp"

namespace sscaps {

enum class TransformKind { Identity, ZeroChannel, SwapPatches, Blur, Noise };

/// One of the seven pretext transformations with its parameters. Seeds
/// are stored alongside the kind, so applying it is deterministic.
struct TransformSpec {
  TransformKind kind = TransformKind::Identity;
  std::size_t channel = 0;  // zero_channel
  std::size_t count = 0;    // swap_patches: number of patch pairs
  std::size_t size = 0;     // swap_patches: cube edge
  double sigma = 0;         // blur (voxels) or noise (intensity units)
  std::uint64_t seed = 0;   // swap_patches, noise

  std::string name() const;
  nlohmann::json to_json() const;
  static TransformSpec from_json(const nlohmann::json& j);
  bool operator==(const TransformSpec&) const = default;
};

inline constexpr std::size_t kNumTransforms = 7;
inline constexpr std::size_t kSwapPatchPairs = 4;
inline constexpr double kBlurSigma = 1.5;
inline constexpr double kNoiseFraction = 0.1;

/// What the index -> transform mapping needs to know about the data.
struct TransformContext {
  std::size_t channels = 1;
  Extent3 extents{16, 16, 16};
  double intensity_std = 1.0;
};

/// 0 identity; 1-3 zero_channel (cycling over the available channels);
/// 4 swap_patches (4 pairs, edge = min extent / 4); 5 blur(1.5);
/// 6 noise(0.1 x intensity std). `seed` feeds the seeded kinds.
TransformSpec transform_for_index(std::size_t index, const TransformContext& ctx,
                                  std::uint64_t seed);

/// v is [C, H, W, D]; the output has the same shape.
Tensor apply_transform(const Tensor& v, const TransformSpec& t);

struct TransformPair {
  std::size_t i = 0;
  std::size_t j = 0;
  TransformSpec ti;
  TransformSpec tj;
};

/// i and j independent and uniform over 0..6 (i == j allowed).
TransformPair sample_transform_pair(Rng& rng, const TransformContext& ctx);

inline constexpr double kCollapseThreshold = 1e-6;

struct CollapseReading {
  double variance = 0;
  bool collapsed = false;
};

/// Per-channel variance of [N, C, ...] features over every sample and
/// voxel, averaged over channels. A stem that maps everything to a
/// constant (per channel) reads 0.
CollapseReading collapse_monitor(const Tensor& features, double threshold = kCollapseThreshold);

struct PretextBatchRecord {
  std::uint64_t step = 0;
  std::size_t i = 0;
  std::size_t j = 0;
  double loss = 0;
  double variance = 0;
  bool collapsed = false;

  nlohmann::json to_json() const;
};

struct PretrainConfig {
  std::size_t steps = 300;
  double learning_rate = 1e-4;
  std::size_t batch_size = 2;
  Extent3 patch{16, 16, 16};
  std::uint64_t seed = 0;
  double collapse_threshold = kCollapseThreshold;
  /// When non-empty, pairs are taken from this list in order (cycling)
  /// instead of being sampled.
  std::vector<std::pair<std::size_t, std::size_t>> fixed_pairs;

  void validate() const;

  nlohmann::json to_json() const;
  /// Missing keys keep their defaults.
  static PretrainConfig from_json(const nlohmann::json& j);
};

struct PretrainResult {
  NetworkParams<float> params;
  std::vector<PretextBatchRecord> history;
};

/// Thrown when the pretext loss turns non-finite; the last history entry
/// is the offending batch.
class PretrainAborted : public NumericError {
 public:
  PretrainAborted(const std::string& what, std::vector<PretextBatchRecord> history)
      : NumericError(what), history_(std::move(history)) {}
  const std::vector<PretextBatchRecord>& history() const { return history_; }

 private:
  std::vector<PretextBatchRecord> history_;
};

/// Minimizes the pretext loss over random patches of `images` (each
/// [C, H, W, D]) with Adam, updating only the "stem." parameters of
/// `params`. `on_record` sees every batch as it happens.
PretrainResult pretrain(const Network<float>& net, NetworkParams<float> params,
                        const std::vector<Tensor>& images, const PretrainConfig& config,
                        const std::function<void(const PretextBatchRecord&)>& on_record = {});

}  // namespace sscaps
