#pragma once

// Closed-form fixtures behind the frozen files in tests/golden. Nothing here
// touches an RNG, so the bytes only change if the file formats change.
//
// Regenerate (after an intentional format change) with
//   SSCAPS_REGEN_GOLDEN=1 ctest -R golden

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sscaps/checkpoint.hpp"
#include "sscaps/data.hpp"

namespace sscaps::golden {

inline const char* kVolumeHeader = "volume.json";
inline const char* kVolumeImage = "volume.img";
inline const char* kVolumeLabels = "volume.lbl";
inline const char* kCheckpointFile = "micro.ckpt";

inline LabeledVolume formula_volume() {
  LabeledVolume v;
  v.id = "volume";
  v.spacing = {1.0, 1.25, 0.5};
  const std::size_t C = 2, H = 16, W = 16, D = 16;
  v.image = Tensor({C, H, W, D});
  v.labels = LabelTensor({H, W, D});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t x = 0; x < H; ++x)
      for (std::size_t y = 0; y < W; ++y)
        for (std::size_t z = 0; z < D; ++z) {
          // Exactly representable values: multiples of 1/64 in [-4, 4).
          const int k = static_cast<int>((c * 131 + x * 17 + y * 7 + z * 3) % 512) - 256;
          v.image.at({c, x, y, z}) = static_cast<float>(k) / 64.0f;
        }
  for (std::size_t x = 0; x < H; ++x)
    for (std::size_t y = 0; y < W; ++y)
      for (std::size_t z = 0; z < D; ++z) {
        const long dx = long(x) - 8, dy = long(y) - 8, dz = long(z) - 8;
        const long r2 = dx * dx + dy * dy + dz * dz;
        v.labels.at({x, y, z}) = r2 < 16 ? 2 : (r2 < 36 ? 1 : 0);
      }
  return v;
}

inline Checkpoint formula_checkpoint() {
  Checkpoint c;
  c.arch = ArchSpec::micro(1, 2);
  c.params = Network<float>(c.arch).init_params(0);
  std::size_t n = 0;
  for (auto& p : c.params.params()) {
    for (auto& v : p.value.storage()) v = static_cast<float>(static_cast<int>(n++ % 97) - 48) / 32.0f;
  }
  for (auto& b : c.params.buffers()) {
    for (auto& v : b.storage()) v = static_cast<float>(n++ % 13) / 8.0f;
  }
  c.meta = {{"kind", "model"}, {"note", "formula fixture"}, {"best_step", 12}};
  return c;
}

inline std::vector<char> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline bool regenerate_requested() {
  const char* e = std::getenv("SSCAPS_REGEN_GOLDEN");
  return e && std::string(e) == "1";
}

inline void write_golden(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_volume(formula_volume(), dir / kVolumeHeader);
  save_checkpoint(formula_checkpoint(), dir / kCheckpointFile);
}

}  // namespace sscaps::golden
