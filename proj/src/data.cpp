#include "sscaps/data.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "binio.hpp"
#include "sscaps/error.hpp"
#include "sscaps/random.hpp"

namespace sscaps {

namespace fs = std::filesystem;
using nlohmann::json;

void LabeledVolume::validate(std::size_t num_classes) const {
  if (image.rank() != 4 || labels.rank() != 3) {
    throw FormatError("volume " + id + ": image must be [C,H,W,D] and labels [H,W,D], got " +
                      shape_str(image.shape()) + " and " + shape_str(labels.shape()));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (image.dim(a + 1) != labels.dim(a)) {
      throw FormatError("volume " + id + ": image " + shape_str(image.shape()) +
                        " and labels " + shape_str(labels.shape()) + " disagree");
    }
  }
  for (auto l : labels.storage()) {
    if (l >= num_classes) {
      throw FormatError("volume " + id + ": label " + std::to_string(l) + " >= num_classes " +
                        std::to_string(num_classes));
    }
  }
}

void write_volume(const LabeledVolume& v, const fs::path& header) {
  if (v.image.rank() != 4 || v.labels.rank() != 3) {
    throw FormatError("write_volume: malformed volume " + v.id);
  }
  const std::string stem = header.stem().string();
  const fs::path dir = header.parent_path();
  json h;
  h["format"] = kVolumeFormat;
  h["version"] = kVolumeFormatVersion;
  h["id"] = v.id;
  h["shape"] = {v.labels.dim(0), v.labels.dim(1), v.labels.dim(2)};
  h["channels"] = v.image.dim(0);
  h["spacing"] = v.spacing;
  h["dtype"] = kImageDtype;
  h["image_file"] = stem + ".img";
  h["label_dtype"] = kLabelDtype;
  h["label_file"] = stem + ".lbl";

  std::vector<std::uint8_t> img;
  detail::put_f32(img, v.image.data());
  detail::write_bytes(dir / (stem + ".img"), img);
  detail::write_bytes(dir / (stem + ".lbl"), v.labels.data());
  detail::write_text(header, h.dump(2) + "\n");
}

LabeledVolume read_volume(const fs::path& header) {
  json h;
  try {
    h = json::parse(detail::read_text(header));
  } catch (const json::exception& e) {
    throw FormatError("volume header " + header.string() + ": " + e.what());
  }
  try {
    if (h.at("format").get<std::string>() != kVolumeFormat) {
      throw FormatError("volume header " + header.string() + ": not a " + kVolumeFormat +
                        " file");
    }
    if (h.at("version").get<int>() != kVolumeFormatVersion) {
      throw FormatError("volume header " + header.string() + ": unsupported version " +
                        h.at("version").dump());
    }
    const auto dtype = h.at("dtype").get<std::string>();
    if (dtype != kImageDtype) {
      throw FormatError("volume header " + header.string() + ": unknown image dtype '" + dtype +
                        "'");
    }
    const auto ldtype = h.at("label_dtype").get<std::string>();
    if (ldtype != kLabelDtype) {
      throw FormatError("volume header " + header.string() + ": unknown label dtype '" +
                        ldtype + "'");
    }
    const auto shape = h.at("shape").get<std::vector<std::size_t>>();
    const auto channels = h.at("channels").get<std::size_t>();
    if (shape.size() != 3 || channels == 0 ||
        std::any_of(shape.begin(), shape.end(), [](auto e) { return e == 0; })) {
      throw FormatError("volume header " + header.string() + ": bad shape or channel count");
    }

    LabeledVolume v;
    v.id = h.at("id").get<std::string>();
    v.spacing = h.at("spacing").get<std::array<double, 3>>();
    const fs::path dir = header.parent_path();
    const std::size_t voxels = shape[0] * shape[1] * shape[2];

    const auto img_path = dir / h.at("image_file").get<std::string>();
    const auto img = detail::read_bytes(img_path);
    if (img.size() != 4 * channels * voxels) {
      throw FormatError("size mismatch: " + img_path.string() + " has " +
                        std::to_string(img.size()) + " bytes, header implies " +
                        std::to_string(4 * channels * voxels));
    }
    v.image = Tensor({channels, shape[0], shape[1], shape[2]});
    detail::get_f32(img.data(), v.image.data());

    const auto lbl_path = dir / h.at("label_file").get<std::string>();
    auto lbl = detail::read_bytes(lbl_path);
    if (lbl.size() != voxels) {
      throw FormatError("size mismatch: " + lbl_path.string() + " has " +
                        std::to_string(lbl.size()) + " bytes, header implies " +
                        std::to_string(voxels));
    }
    v.labels = LabelTensor({shape[0], shape[1], shape[2]}, std::move(lbl));
    return v;
  } catch (const json::exception& e) {
    throw FormatError("volume header " + header.string() + ": " + e.what());
  }
}

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::Sphere: return "sphere";
    case ShapeFamily::Shell: return "shell";
    case ShapeFamily::Tube: return "tube";
  }
  return "?";
}

ShapeFamily parse_shape_family(const std::string& s) {
  if (s == "sphere") return ShapeFamily::Sphere;
  if (s == "shell") return ShapeFamily::Shell;
  if (s == "tube") return ShapeFamily::Tube;
  throw ConfigError("unknown shape family '" + s + "' (expected sphere, shell or tube)");
}

std::string to_string(PhantomTier t) { return t == PhantomTier::Easy ? "easy" : "hard"; }

PhantomTier parse_phantom_tier(const std::string& s) {
  if (s == "easy") return PhantomTier::Easy;
  if (s == "hard") return PhantomTier::Hard;
  throw ConfigError("unknown phantom tier '" + s + "' (expected easy or hard)");
}

namespace {

// Class k, channel c mean = sep * k * (1 + c / 2): distinct in every channel.
std::vector<std::vector<double>> class_means(std::size_t K, std::size_t C, double sep) {
  std::vector<std::vector<double>> m(K, std::vector<double>(C));
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t c = 0; c < C; ++c) m[k][c] = sep * double(k) * (1.0 + 0.5 * double(c));
  }
  return m;
}

std::vector<ShapeFamily> cycle_families(std::size_t K, std::vector<ShapeFamily> order) {
  std::vector<ShapeFamily> f;
  for (std::size_t k = 1; k < K; ++k) f.push_back(order[(k - 1) % order.size()]);
  return f;
}

}  // namespace

PhantomSpec PhantomSpec::easy(Extent3 extents, std::size_t num_classes, std::size_t channels,
                              std::uint64_t seed) {
  PhantomSpec s;
  s.extents = extents;
  s.num_classes = num_classes;
  s.channels = channels;
  s.seed = seed;
  s.tier = PhantomTier::Easy;
  s.families = cycle_families(num_classes,
                              {ShapeFamily::Sphere, ShapeFamily::Shell, ShapeFamily::Tube});
  s.means = class_means(num_classes, channels, 1.0);
  s.stds.assign(num_classes, std::vector<double>(channels, 0.1));
  s.min_instances = 1;
  s.max_instances = 3;
  s.shell_thickness = 3.0;
  s.tube_radius = 2.5;
  return s;
}

PhantomSpec PhantomSpec::hard(Extent3 extents, std::size_t num_classes, std::size_t channels,
                              std::uint64_t seed) {
  PhantomSpec s;
  s.extents = extents;
  s.num_classes = num_classes;
  s.channels = channels;
  s.seed = seed;
  s.tier = PhantomTier::Hard;
  s.families = cycle_families(num_classes,
                              {ShapeFamily::Shell, ShapeFamily::Tube, ShapeFamily::Sphere});
  s.means = class_means(num_classes, channels, 1.0);
  s.stds.assign(num_classes, std::vector<double>(channels, 0.6));
  s.min_instances = 2;
  s.max_instances = 4;
  s.shell_thickness = 2.0;
  s.tube_radius = 1.5;
  return s;
}

PhantomSpec PhantomSpec::for_tier(PhantomTier tier, Extent3 extents, std::size_t num_classes,
                                  std::size_t channels, std::uint64_t seed) {
  return tier == PhantomTier::Easy ? easy(extents, num_classes, channels, seed)
                                   : hard(extents, num_classes, channels, seed);
}

PhantomSpec PhantomSpec::noiseless() const {
  PhantomSpec s = *this;
  for (auto& row : s.stds) std::fill(row.begin(), row.end(), 0.0);
  return s;
}

void PhantomSpec::validate() const {
  for (auto e : extents) {
    if (e < 16 || e % 8 != 0) {
      throw ConfigError("phantom extents must be >= 16 and multiples of 8, got " +
                        std::to_string(e));
    }
  }
  if (num_classes < 2 || num_classes > 255) throw ConfigError("num_classes must be in [2, 255]");
  if (channels == 0) throw ConfigError("channels must be >= 1");
  if (families.size() != num_classes - 1) {
    throw ConfigError("need one shape family per foreground class");
  }
  if (means.size() != num_classes || stds.size() != num_classes) {
    throw ConfigError("need intensity means and stds for every class");
  }
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (means[k].size() != channels || stds[k].size() != channels) {
      throw ConfigError("class intensity rows must have one entry per channel");
    }
    for (double s : stds[k]) {
      if (!(s >= 0)) throw ConfigError("intensity stds must be >= 0");
    }
  }
  std::set<std::vector<double>> distinct(means.begin(), means.end());
  if (distinct.size() != num_classes) {
    throw ConfigError("class mean vectors must be distinct (labels would not be recoverable)");
  }
  if (min_instances == 0 || min_instances > max_instances) {
    throw ConfigError("instance range must satisfy 1 <= min <= max");
  }
  if (!(shell_thickness > 0) || !(tube_radius > 0)) {
    throw ConfigError("shell thickness and tube radius must be positive");
  }
}

namespace {

struct Vec3 {
  double x, y, z;
};

double dist2(const Vec3& a, const Vec3& b) {
  return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z);
}

// Squared distance from p to segment [a, b].
double segment_dist2(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab{b.x - a.x, b.y - a.y, b.z - a.z};
  const double len2 = ab.x * ab.x + ab.y * ab.y + ab.z * ab.z;
  double t = len2 > 0 ? ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y + (p.z - a.z) * ab.z) / len2 : 0;
  t = std::clamp(t, 0.0, 1.0);
  return dist2(p, {a.x + t * ab.x, a.y + t * ab.y, a.z + t * ab.z});
}

// Paints `cls` on voxels inside [lo, hi] satisfying `inside`.
template <typename F>
void paint(LabelTensor& labels, std::uint8_t cls, const Vec3& lo, const Vec3& hi, F inside) {
  const Extent3 e{labels.dim(0), labels.dim(1), labels.dim(2)};
  auto range = [](double a, double b, std::size_t n) {
    const auto first = static_cast<long>(std::max(0.0, std::ceil(a)));
    const auto last = static_cast<long>(std::min(double(n) - 1, std::floor(b)));
    return std::pair<long, long>{first, last};
  };
  const auto [x0, x1] = range(lo.x, hi.x, e[0]);
  const auto [y0, y1] = range(lo.y, hi.y, e[1]);
  const auto [z0, z1] = range(lo.z, hi.z, e[2]);
  for (long x = x0; x <= x1; ++x) {
    for (long y = y0; y <= y1; ++y) {
      for (long z = z0; z <= z1; ++z) {
        if (inside(Vec3{double(x), double(y), double(z)})) {
          labels[(std::size_t(x) * e[1] + std::size_t(y)) * e[2] + std::size_t(z)] = cls;
        }
      }
    }
  }
}

Vec3 random_point(Rng& rng, const Extent3& e, double margin) {
  auto coord = [&](std::size_t n) {
    const double lo = std::min(margin, double(n) / 2);
    return rng.uniform(lo, double(n) - 1 - lo);
  };
  const double x = coord(e[0]);
  const double y = coord(e[1]);
  const double z = coord(e[2]);
  return {x, y, z};
}

}  // namespace

LabeledVolume generate_phantom(const PhantomSpec& spec, std::size_t index) {
  spec.validate();
  const Extent3& e = spec.extents;
  const double emin = double(*std::min_element(e.begin(), e.end()));
  Rng geo(spec.seed, 2 * index);
  Rng noise(spec.seed, 2 * index + 1);

  LabeledVolume v;
  v.id = "phantom_" + std::to_string(spec.seed) + "_" + std::to_string(index);
  v.labels = LabelTensor({e[0], e[1], e[2]}, std::uint8_t{0});

  for (std::size_t k = 1; k < spec.num_classes; ++k) {
    const auto cls = static_cast<std::uint8_t>(k);
    const std::size_t n =
        spec.min_instances + geo.below(spec.max_instances - spec.min_instances + 1);
    for (std::size_t i = 0; i < n; ++i) {
      switch (spec.families[k - 1]) {
        case ShapeFamily::Sphere: {
          const double r = geo.uniform(std::max(2.5, emin / 8), std::max(3.0, emin / 4));
          const Vec3 c = random_point(geo, e, r);
          paint(v.labels, cls, {c.x - r, c.y - r, c.z - r}, {c.x + r, c.y + r, c.z + r},
                [&](const Vec3& p) { return dist2(p, c) <= r * r; });
          break;
        }
        case ShapeFamily::Shell: {
          const double t = spec.shell_thickness;
          const double r = geo.uniform(std::max(t + 1.5, emin / 6), std::max(t + 2.0, emin / 3.5));
          const double ri = r - t;
          const Vec3 c = random_point(geo, e, r);
          paint(v.labels, cls, {c.x - r, c.y - r, c.z - r}, {c.x + r, c.y + r, c.z + r},
                [&](const Vec3& p) {
                  const double d = dist2(p, c);
                  return d <= r * r && d > ri * ri;
                });
          break;
        }
        case ShapeFamily::Tube: {
          const double r = spec.tube_radius;
          const Vec3 a = random_point(geo, e, 0);
          const Vec3 b = random_point(geo, e, 0);
          paint(v.labels, cls,
                {std::min(a.x, b.x) - r, std::min(a.y, b.y) - r, std::min(a.z, b.z) - r},
                {std::max(a.x, b.x) + r, std::max(a.y, b.y) + r, std::max(a.z, b.z) + r},
                [&](const Vec3& p) { return segment_dist2(p, a, b) <= r * r; });
          break;
        }
      }
    }
  }

  const std::size_t voxels = v.labels.size();
  v.image = Tensor({spec.channels, e[0], e[1], e[2]});
  for (std::size_t c = 0; c < spec.channels; ++c) {
    float* out = v.image.raw() + c * voxels;
    for (std::size_t i = 0; i < voxels; ++i) {
      const std::size_t k = v.labels[i];
      const double sd = spec.stds[k][c];
      const double value = sd > 0 ? noise.normal(spec.means[k][c], sd) : spec.means[k][c];
      out[i] = static_cast<float>(value);
    }
  }
  return v;
}

std::vector<LabeledVolume> generate_phantoms(const PhantomSpec& spec, std::size_t count) {
  std::vector<LabeledVolume> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_phantom(spec, i));
  return out;
}

LabelTensor threshold_oracle(const Tensor& image, const PhantomSpec& spec) {
  if (image.rank() != 4 || image.dim(0) != spec.channels) {
    throw ShapeError("threshold_oracle: image must be [" + std::to_string(spec.channels) +
                     ", H, W, D], got " + shape_str(image.shape()));
  }
  const std::size_t voxels = image.size() / spec.channels;
  LabelTensor out({image.dim(1), image.dim(2), image.dim(3)});
  for (std::size_t i = 0; i < voxels; ++i) {
    double best = INFINITY;
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      double d = 0;
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const double diff = double(image[c * voxels + i]) - spec.means[k][c];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        out[i] = static_cast<std::uint8_t>(k);
      }
    }
  }
  return out;
}

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  for (const auto& v : volumes) out.push_back(v.id);
  return out;
}

void write_dataset(const Dataset& ds, const fs::path& dir, const std::string& generator) {
  fs::create_directories(dir);
  json m;
  m["format"] = kDatasetFormat;
  m["version"] = 1;
  m["num_classes"] = ds.num_classes;
  m["channels"] = ds.channels;
  m["splits"]["all"] = ds.ids();
  if (!generator.empty()) m["generator"] = json::parse(generator);
  for (const auto& v : ds.volumes) {
    v.validate(ds.num_classes);
    if (v.channels() != ds.channels) {
      throw FormatError("volume " + v.id + " has " + std::to_string(v.channels()) +
                        " channels, dataset has " + std::to_string(ds.channels));
    }
    write_volume(v, dir / (v.id + ".json"));
  }
  detail::write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  json m;
  try {
    m = json::parse(detail::read_text(path));
  } catch (const json::exception& e) {
    throw FormatError("dataset manifest " + path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (m.at("format").get<std::string>() != kDatasetFormat) {
      throw FormatError(path.string() + " is not a dataset manifest");
    }
    ds.num_classes = m.at("num_classes").get<std::size_t>();
    ds.channels = m.at("channels").get<std::size_t>();
    for (const auto& id : m.at("splits").at("all").get<std::vector<std::string>>()) {
      LabeledVolume v = read_volume(dir / (id + ".json"));
      v.validate(ds.num_classes);
      if (v.channels() != ds.channels) {
        throw FormatError("volume " + id + " channel count disagrees with the manifest");
      }
      ds.volumes.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw FormatError("dataset manifest " + path.string() + ": " + e.what());
  }
  if (ds.volumes.empty()) throw FormatError("dataset " + dir.string() + " lists no volumes");
  return ds;
}

}  // namespace sscaps
