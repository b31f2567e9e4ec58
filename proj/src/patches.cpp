#include "sscaps/patches.hpp"

#include <algorithm>

namespace sscaps {

void check_patch_fits(const Extent3& volume, const Extent3& patch) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch[a] == 0 || patch[a] > volume[a]) {
      throw ShapeError("patch extent " + std::to_string(patch[a]) + " on axis " +
                       std::to_string(a) + " does not fit the volume extent " +
                       std::to_string(volume[a]));
    }
  }
}

std::vector<Extent3> tile_origins(const Extent3& volume, const Extent3& patch) {
  check_patch_fits(volume, patch);
  std::array<std::vector<std::size_t>, 3> axes;
  for (std::size_t a = 0; a < 3; ++a) {
    const std::size_t s = std::max<std::size_t>(1, patch[a] / 2);
    const std::size_t span = volume[a] - patch[a];
    const std::size_t n = (span + s - 1) / s + 1;
    for (std::size_t i = 0; i < n; ++i) axes[a].push_back(std::min(i * s, span));
  }
  std::vector<Extent3> out;
  for (auto x : axes[0]) {
    for (auto y : axes[1]) {
      for (auto z : axes[2]) out.push_back({x, y, z});
    }
  }
  return out;
}

Extent3 random_origin(const Extent3& volume, const Extent3& patch, Rng& rng) {
  check_patch_fits(volume, patch);
  Extent3 o;
  for (std::size_t a = 0; a < 3; ++a) o[a] = rng.below(volume[a] - patch[a] + 1);
  return o;
}

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& t, const Extent3& origin, const Extent3& patch) {
  const std::size_t r = t.rank();
  if (r < 3) throw ShapeError("crop: tensor rank must be >= 3, got " + shape_str(t.shape()));
  const Extent3 ext{t.dim(r - 3), t.dim(r - 2), t.dim(r - 1)};
  for (std::size_t a = 0; a < 3; ++a) {
    if (origin[a] + patch[a] > ext[a]) {
      throw ShapeError("crop: patch at " + std::to_string(origin[a]) + " + " +
                       std::to_string(patch[a]) + " exceeds extent " + std::to_string(ext[a]));
    }
  }
  Shape shape = t.shape();
  shape[r - 3] = patch[0];
  shape[r - 2] = patch[1];
  shape[r - 1] = patch[2];
  BasicTensor<T> out(shape);
  const std::size_t lead = t.size() / (ext[0] * ext[1] * ext[2]);
  T* dst = out.raw();
  for (std::size_t l = 0; l < lead; ++l) {
    const T* src = t.raw() + l * ext[0] * ext[1] * ext[2];
    for (std::size_t x = 0; x < patch[0]; ++x) {
      for (std::size_t y = 0; y < patch[1]; ++y) {
        const T* row = src + ((origin[0] + x) * ext[1] + origin[1] + y) * ext[2] + origin[2];
        dst = std::copy(row, row + patch[2], dst);
      }
    }
  }
  return out;
}

template Tensor crop(const Tensor&, const Extent3&, const Extent3&);
template TensorD crop(const TensorD&, const Extent3&, const Extent3&);
template LabelTensor crop(const LabelTensor&, const Extent3&, const Extent3&);

PatchSet extract_patches(const Tensor& image, const Extent3& patch, PatchMode mode, Rng* rng,
                         std::size_t count) {
  if (image.rank() != 4) {
    throw ShapeError("extract_patches: image must be [C, H, W, D], got " +
                     shape_str(image.shape()));
  }
  const Extent3 ext{image.dim(1), image.dim(2), image.dim(3)};
  check_patch_fits(ext, patch);
  PatchSet out;
  if (mode == PatchMode::Eval) {
    out.origins = tile_origins(ext, patch);
  } else {
    if (!rng) throw ConfigError("extract_patches: train mode needs an rng");
    for (std::size_t i = 0; i < count; ++i) out.origins.push_back(random_origin(ext, patch, *rng));
  }
  for (const auto& o : out.origins) out.patches.push_back(crop(image, o, patch));
  return out;
}

Tensor stitch_patches(const std::vector<Tensor>& patches, const std::vector<Extent3>& origins,
                      const Shape& full) {
  if (patches.size() != origins.size() || patches.empty()) {
    throw ShapeError("stitch_patches: need one origin per patch");
  }
  if (full.size() != 4) throw ShapeError("stitch_patches: full shape must be [K, H, W, D]");
  const std::size_t K = full[0];
  const Extent3 ext{full[1], full[2], full[3]};
  const std::size_t voxels = ext[0] * ext[1] * ext[2];
  std::vector<double> sum(K * voxels, 0.0);
  std::vector<std::uint32_t> hits(voxels, 0);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const Tensor& p = patches[i];
    const Extent3& o = origins[i];
    if (p.rank() != 4 || p.dim(0) != K) {
      throw ShapeError("stitch_patches: patch " + shape_str(p.shape()) + " has the wrong layout");
    }
    const Extent3 pe{p.dim(1), p.dim(2), p.dim(3)};
    for (std::size_t a = 0; a < 3; ++a) {
      if (o[a] + pe[a] > ext[a]) throw ShapeError("stitch_patches: patch exceeds the volume");
    }
    for (std::size_t x = 0; x < pe[0]; ++x) {
      for (std::size_t y = 0; y < pe[1]; ++y) {
        for (std::size_t z = 0; z < pe[2]; ++z) {
          const std::size_t v = ((o[0] + x) * ext[1] + o[1] + y) * ext[2] + o[2] + z;
          const std::size_t q = (x * pe[1] + y) * pe[2] + z;
          ++hits[v];
          for (std::size_t k = 0; k < K; ++k) sum[k * voxels + v] += p[k * p.size() / K + q];
        }
      }
    }
  }
  Tensor out(full);
  for (std::size_t v = 0; v < voxels; ++v) {
    if (hits[v] == 0) throw ShapeError("stitch_patches: voxel not covered by any patch");
    for (std::size_t k = 0; k < K; ++k) {
      out[k * voxels + v] = static_cast<float>(sum[k * voxels + v] / hits[v]);
    }
  }
  return out;
}

}  // namespace sscaps
