#pragma once

#include <vector>

#include "sscaps/ops.hpp"
#include "sscaps/random.hpp"
#include "sscaps/tensor.hpp"

namespace sscaps {

/// Tile origins covering `volume` with cubes of `patch` at 50% overlap.
/// Per axis: stride s = max(1, p / 2), n = ceil((v - p) / s) + 1 tiles,
/// the last one shifted back to end flush with the volume.
std::vector<Extent3> tile_origins(const Extent3& volume, const Extent3& patch);

/// Uniform over all origins where the patch fits.
Extent3 random_origin(const Extent3& volume, const Extent3& patch, Rng& rng);

/// Crops the last three axes of a [..., H, W, D] tensor.
template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& t, const Extent3& origin, const Extent3& patch);

enum class PatchMode { Train, Eval };

struct PatchSet {
  std::vector<Tensor> patches;  // each [C, p, p, p]
  std::vector<Extent3> origins;
};

/// Train mode draws `count` random patches from `rng`; eval mode returns
/// the tiling (count and rng unused). image is [C, H, W, D].
PatchSet extract_patches(const Tensor& image, const Extent3& patch, PatchMode mode,
                         Rng* rng = nullptr, std::size_t count = 1);

/// Averages overlapping patches ([K, p, p, p] each) into a [K, H, W, D]
/// tensor. Every voxel must be covered at least once.
Tensor stitch_patches(const std::vector<Tensor>& patches, const std::vector<Extent3>& origins,
                      const Shape& full);

void check_patch_fits(const Extent3& volume, const Extent3& patch);

}  // namespace sscaps
