#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sscaps/ops.hpp"
#include "sscaps/tensor.hpp"

namespace sscaps {

/// One labeled volume: image [C, H, W, D] and labels [H, W, D].
struct LabeledVolume {
  std::string id;
  Tensor image;
  LabelTensor labels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm, informational only

  std::size_t channels() const { return image.dim(0); }
  Extent3 extents() const { return {labels.dim(0), labels.dim(1), labels.dim(2)}; }

  /// Throws FormatError if shapes disagree or a label id is >= num_classes.
  void validate(std::size_t num_classes) const;
};

inline constexpr const char* kVolumeFormat = "sscaps-volume";
inline constexpr int kVolumeFormatVersion = 1;
inline constexpr const char* kImageDtype = "f32le";
inline constexpr const char* kLabelDtype = "u8";

/// Writes `<header>` (JSON) plus `<stem>.img` (little-endian float32, C-major
/// then H, W, D) and `<stem>.lbl` (uint8) next to it.
void write_volume(const LabeledVolume& v, const std::filesystem::path& header);
LabeledVolume read_volume(const std::filesystem::path& header);

enum class ShapeFamily { Sphere, Shell, Tube };

std::string to_string(ShapeFamily f);
ShapeFamily parse_shape_family(const std::string& s);

enum class PhantomTier { Easy, Hard };

std::string to_string(PhantomTier t);
PhantomTier parse_phantom_tier(const std::string& s);

/// Recipe for synthetic volumes. Class 0 is background; every other class
/// is painted as instances of its shape family, later classes over earlier.
struct PhantomSpec {
  Extent3 extents{32, 32, 32};
  std::size_t num_classes = 2;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  PhantomTier tier = PhantomTier::Easy;

  /// Per foreground class (index k - 1).
  std::vector<ShapeFamily> families;
  /// Per class, per channel.
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> stds;

  std::size_t min_instances = 1;
  std::size_t max_instances = 3;
  /// Shell wall and tube radius, in voxels.
  double shell_thickness = 3.0;
  double tube_radius = 2.5;

  /// Well separated class means (unit spacing), noise std 0.1, thick shapes.
  static PhantomSpec easy(Extent3 extents, std::size_t num_classes, std::size_t channels,
                          std::uint64_t seed);
  /// Unit mean spacing under std 0.6 noise (voxelwise thresholding misclassifies
  /// ~20% of voxels), thin shells and tubes, more instances.
  static PhantomSpec hard(Extent3 extents, std::size_t num_classes, std::size_t channels,
                          std::uint64_t seed);
  static PhantomSpec for_tier(PhantomTier tier, Extent3 extents, std::size_t num_classes,
                              std::size_t channels, std::uint64_t seed);

  /// Same geometry, zero intensity noise.
  PhantomSpec noiseless() const;

  void validate() const;
};

/// Volume `index` depends only on (spec, index): geometry and noise come
/// from separate streams, so noiseless() reproduces the same labels.
LabeledVolume generate_phantom(const PhantomSpec& spec, std::size_t index);
std::vector<LabeledVolume> generate_phantoms(const PhantomSpec& spec, std::size_t count);

/// Nearest class-mean classification of every voxel. On a noiseless
/// phantom this reproduces the labels exactly.
LabelTensor threshold_oracle(const Tensor& image, const PhantomSpec& spec);

/// A directory of volumes plus `manifest.json`.
struct Dataset {
  std::size_t num_classes = 2;
  std::size_t channels = 1;
  std::vector<LabeledVolume> volumes;

  std::vector<std::string> ids() const;
};

inline constexpr const char* kDatasetFormat = "sscaps-dataset";

/// Writes each volume as `<id>.json` and a manifest listing the ids under
/// split "all". `generator` (JSON text, may be empty) records how the data was made.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir,
                   const std::string& generator = {});
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace sscaps
