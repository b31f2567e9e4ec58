#include "sscaps/checkpoint.hpp"

#include <cstring>

#include "binio.hpp"

namespace sscaps {

using nlohmann::json;

json arch_to_json(const ArchSpec& a) {
  return json{{"in_channels", a.in_channels},
              {"num_classes", a.num_classes},
              {"use_stem", a.use_stem},
              {"stem_channels", a.stem_channels},
              {"stem_kernel", a.stem_kernel},
              {"stem_dilations", a.stem_dilations},
              {"caps_types", a.caps_types},
              {"caps_dims", a.caps_dims},
              {"caps_strides", a.caps_strides},
              {"caps_kernel", a.caps_kernel},
              {"routing_iterations", a.routing_iterations},
              {"decoder_channels", a.decoder_channels},
              {"decoder_kernel", a.decoder_kernel},
              {"recon_channels", a.recon_channels}};
}

ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  try {
    j.at("in_channels").get_to(a.in_channels);
    j.at("num_classes").get_to(a.num_classes);
    j.at("use_stem").get_to(a.use_stem);
    j.at("stem_channels").get_to(a.stem_channels);
    j.at("stem_kernel").get_to(a.stem_kernel);
    j.at("stem_dilations").get_to(a.stem_dilations);
    j.at("caps_types").get_to(a.caps_types);
    j.at("caps_dims").get_to(a.caps_dims);
    j.at("caps_strides").get_to(a.caps_strides);
    j.at("caps_kernel").get_to(a.caps_kernel);
    j.at("routing_iterations").get_to(a.routing_iterations);
    j.at("decoder_channels").get_to(a.decoder_channels);
    j.at("decoder_kernel").get_to(a.decoder_kernel);
    j.at("recon_channels").get_to(a.recon_channels);
  } catch (const json::exception& e) {
    throw FormatError(std::string("architecture record: ") + e.what());
  }
  a.validate();
  return a;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  json tensors = json::array();
  std::size_t offset = 0;
  auto describe = [&](const std::string& name, const char* kind, const Tensor& t) {
    tensors.push_back(
        {{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"dtype", "f32le"},
         {"offset", offset}});
    offset += 4 * t.size();
  };
  const auto& p = c.params;
  for (std::size_t i = 0; i < p.params().size(); ++i) {
    describe(p.param_names()[i], "param", p.params()[i].value);
  }
  for (std::size_t i = 0; i < p.buffers().size(); ++i) {
    describe(p.buffer_names()[i], "buffer", p.buffers()[i]);
  }
  const json manifest{{"arch", arch_to_json(c.arch)}, {"meta", c.meta}, {"tensors", tensors}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& gp : p.params()) detail::put_f32(out, gp.value.data());
  for (const auto& b : p.buffers()) detail::put_f32(out, b.data());
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = detail::get_u32(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t len = detail::get_u32(bytes.data() + 12);
  if (bytes.size() < 16 + std::size_t{len}) throw FormatError("checkpoint manifest truncated");
  const std::size_t base = 16 + std::size_t{len};

  Checkpoint c;
  try {
    const json m = json::parse(bytes.begin() + 16, bytes.begin() + static_cast<long>(base));
    c.arch = arch_from_json(m.at("arch"));
    c.meta = m.at("meta");
    std::size_t expected = 0;
    for (const auto& t : m.at("tensors")) {
      if (t.at("dtype").get<std::string>() != "f32le") {
        throw FormatError("checkpoint tensor " + t.at("name").get<std::string>() +
                          ": unknown dtype " + t.at("dtype").dump());
      }
      const auto shape = t.at("shape").get<Shape>();
      const auto off = t.at("offset").get<std::size_t>();
      const std::size_t n = shape_numel(shape);
      if (off != expected || base + off + 4 * n > bytes.size()) {
        throw FormatError("size mismatch: checkpoint payload for " +
                          t.at("name").get<std::string>() + " is out of range");
      }
      expected += 4 * n;
      Tensor value(shape);
      detail::get_f32(bytes.data() + base + off, value.data());
      const auto kind = t.at("kind").get<std::string>();
      if (kind == "param") {
        c.params.add_param(t.at("name").get<std::string>(), std::move(value));
      } else if (kind == "buffer") {
        c.params.add_buffer(t.at("name").get<std::string>(), std::move(value));
      } else {
        throw FormatError("checkpoint tensor kind '" + kind + "' is unknown");
      }
    }
    if (base + expected != bytes.size()) {
      throw FormatError("size mismatch: checkpoint has " + std::to_string(bytes.size() - base) +
                        " payload bytes, manifest implies " + std::to_string(expected));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }

  // The stored tensors must be exactly what this architecture would create.
  const auto fresh = Network<float>(c.arch).init_params(0);
  if (fresh.param_names() != c.params.param_names() ||
      fresh.buffer_names() != c.params.buffer_names()) {
    throw FormatError("checkpoint tensors do not match its architecture");
  }
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    if (fresh.params()[i].value.shape() != c.params.params()[i].value.shape()) {
      throw FormatError("checkpoint tensor " + fresh.param_names()[i] + " has the wrong shape");
    }
  }
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  detail::write_bytes(path, encode_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_bytes(path));
}

}  // namespace sscaps
