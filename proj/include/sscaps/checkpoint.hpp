#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "sscaps/network.hpp"

namespace sscaps {

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'C', 'A', 'P', 'S', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Architecture, parameter values (gradients are not stored), batch-norm
/// buffers and free-form metadata.
///
/// Layout: 8-byte magic, u32 version, u32 manifest length, the JSON
/// manifest (arch, meta and one {name, kind, shape, dtype, offset} entry per
/// tensor), then the tensors as little-endian float32 in manifest order.
struct Checkpoint {
  ArchSpec arch;
  NetworkParams<float> params;
  nlohmann::json meta = nlohmann::json::object();
};

nlohmann::json arch_to_json(const ArchSpec& a);
ArchSpec arch_from_json(const nlohmann::json& j);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace sscaps
