#include "sscaps/ssl.hpp"

#include <algorithm>
#include <cmath>

#include "sscaps/losses.hpp"
#include "sscaps/optim.hpp"
#include "sscaps/patches.hpp"

namespace sscaps {

using nlohmann::json;

namespace {

const char* kind_name(TransformKind k) {
  switch (k) {
    case TransformKind::Identity: return "identity";
    case TransformKind::ZeroChannel: return "zero_channel";
    case TransformKind::SwapPatches: return "swap_patches";
    case TransformKind::Blur: return "blur";
    case TransformKind::Noise: return "noise";
  }
  return "?";
}

TransformKind parse_kind(const std::string& s) {
  for (auto k : {TransformKind::Identity, TransformKind::ZeroChannel, TransformKind::SwapPatches,
                 TransformKind::Blur, TransformKind::Noise}) {
    if (s == kind_name(k)) return k;
  }
  throw FormatError("unknown transform kind '" + s + "'");
}

void check_volume(const Tensor& v) {
  if (v.rank() != 4) {
    throw ShapeError("transform input must be [C, H, W, D], got " + shape_str(v.shape()));
  }
}

// 2 * count disjoint cubes of edge `size`, drawn from `seed`.
std::vector<Extent3> swap_corners(const Extent3& e, std::size_t count, std::size_t size,
                                  std::uint64_t seed) {
  Rng rng(seed);
  const Extent3 cube{size, size, size};
  std::vector<Extent3> out;
  auto overlaps = [&](const Extent3& a, const Extent3& b) {
    for (std::size_t ax = 0; ax < 3; ++ax) {
      if (a[ax] + size <= b[ax] || b[ax] + size <= a[ax]) return false;
    }
    return true;
  };
  for (std::size_t attempt = 0; out.size() < 2 * count; ++attempt) {
    if (attempt > 100000) {
      throw ConfigError("swap_patches: cannot place " + std::to_string(2 * count) +
                        " disjoint patches of edge " + std::to_string(size));
    }
    const Extent3 o = random_origin(e, cube, rng);
    if (std::none_of(out.begin(), out.end(), [&](const Extent3& p) { return overlaps(o, p); })) {
      out.push_back(o);
    }
  }
  return out;
}

void blur_axis(std::vector<float>& data, const Shape& s, std::size_t axis,
               const std::vector<double>& kernel) {
  const long radius = static_cast<long>(kernel.size() / 2);
  const std::size_t n = s[axis];
  std::size_t stride = 1;
  for (std::size_t a = axis + 1; a < s.size(); ++a) stride *= s[a];
  const std::size_t outer = shape_numel(s) / (n * stride);
  std::vector<float> line(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < stride; ++in) {
      float* base = data.data() + o * n * stride + in;
      for (std::size_t i = 0; i < n; ++i) line[i] = base[i * stride];
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (long k = -radius; k <= radius; ++k) {
          const long idx = std::clamp<long>(static_cast<long>(i) + k, 0, static_cast<long>(n) - 1);
          acc += kernel[static_cast<std::size_t>(k + radius)] * line[static_cast<std::size_t>(idx)];
        }
        base[i * stride] = static_cast<float>(acc);
      }
    }
  }
}

}  // namespace

std::string TransformSpec::name() const {
  switch (kind) {
    case TransformKind::ZeroChannel: return "zero_channel(" + std::to_string(channel) + ")";
    default: return kind_name(kind);
  }
}

json TransformSpec::to_json() const {
  return json{{"kind", kind_name(kind)}, {"channel", channel}, {"count", count},
              {"size", size},            {"sigma", sigma},     {"seed", seed}};
}

TransformSpec TransformSpec::from_json(const json& j) {
  TransformSpec t;
  try {
    t.kind = parse_kind(j.at("kind").get<std::string>());
    j.at("channel").get_to(t.channel);
    j.at("count").get_to(t.count);
    j.at("size").get_to(t.size);
    j.at("sigma").get_to(t.sigma);
    j.at("seed").get_to(t.seed);
  } catch (const json::exception& e) {
    throw FormatError(std::string("transform record: ") + e.what());
  }
  return t;
}

TransformSpec transform_for_index(std::size_t index, const TransformContext& ctx,
                                  std::uint64_t seed) {
  if (ctx.channels == 0) throw ConfigError("transform context needs >= 1 channel");
  TransformSpec t;
  switch (index) {
    case 0: break;
    case 1:
    case 2:
    case 3:
      t.kind = TransformKind::ZeroChannel;
      t.channel = (index - 1) % ctx.channels;
      break;
    case 4:
      t.kind = TransformKind::SwapPatches;
      t.count = kSwapPatchPairs;
      t.size = std::max<std::size_t>(1, *std::min_element(ctx.extents.begin(), ctx.extents.end()) / 4);
      t.seed = seed;
      break;
    case 5:
      t.kind = TransformKind::Blur;
      t.sigma = kBlurSigma;
      break;
    case 6:
      t.kind = TransformKind::Noise;
      t.sigma = kNoiseFraction * ctx.intensity_std;
      t.seed = seed;
      break;
    default:
      throw ConfigError("transform index must be in [0, 6], got " + std::to_string(index));
  }
  return t;
}

Tensor apply_transform(const Tensor& v, const TransformSpec& t) {
  check_volume(v);
  const std::size_t C = v.dim(0);
  const Extent3 e{v.dim(1), v.dim(2), v.dim(3)};
  const std::size_t voxels = e[0] * e[1] * e[2];
  Tensor out = v;
  switch (t.kind) {
    case TransformKind::Identity: break;
    case TransformKind::ZeroChannel:
      if (t.channel >= C) {
        throw ConfigError("zero_channel(" + std::to_string(t.channel) + ") on a " +
                          std::to_string(C) + "-channel volume");
      }
      std::fill_n(out.raw() + t.channel * voxels, voxels, 0.0f);
      break;
    case TransformKind::SwapPatches: {
      const Extent3 cube{t.size, t.size, t.size};
      check_patch_fits(e, cube);
      const auto corners = swap_corners(e, t.count, t.size, t.seed);
      for (std::size_t p = 0; p < t.count; ++p) {
        const Extent3& a = corners[2 * p];
        const Extent3& b = corners[2 * p + 1];
        for (std::size_t c = 0; c < C; ++c) {
          float* base = out.raw() + c * voxels;
          for (std::size_t x = 0; x < t.size; ++x) {
            for (std::size_t y = 0; y < t.size; ++y) {
              float* ra = base + ((a[0] + x) * e[1] + a[1] + y) * e[2] + a[2];
              float* rb = base + ((b[0] + x) * e[1] + b[1] + y) * e[2] + b[2];
              std::swap_ranges(ra, ra + t.size, rb);
            }
          }
        }
      }
      break;
    }
    case TransformKind::Blur: {
      if (!(t.sigma > 0)) throw ConfigError("blur sigma must be positive");
      const auto radius = static_cast<std::size_t>(std::ceil(3 * t.sigma));
      std::vector<double> kernel(2 * radius + 1);
      double total = 0;
      for (std::size_t i = 0; i < kernel.size(); ++i) {
        const double d = double(i) - double(radius);
        kernel[i] = std::exp(-d * d / (2 * t.sigma * t.sigma));
        total += kernel[i];
      }
      for (auto& k : kernel) k /= total;
      for (std::size_t axis = 1; axis <= 3; ++axis) {
        blur_axis(out.storage(), out.shape(), axis, kernel);
      }
      break;
    }
    case TransformKind::Noise: {
      if (!(t.sigma >= 0)) throw ConfigError("noise sigma must be >= 0");
      Rng rng(t.seed);
      for (auto& x : out.storage()) x = static_cast<float>(x + t.sigma * rng.normal());
      break;
    }
  }
  return out;
}

TransformPair sample_transform_pair(Rng& rng, const TransformContext& ctx) {
  TransformPair p;
  p.i = rng.below(kNumTransforms);
  p.j = rng.below(kNumTransforms);
  p.ti = transform_for_index(p.i, ctx, rng.next());
  p.tj = transform_for_index(p.j, ctx, rng.next());
  return p;
}

CollapseReading collapse_monitor(const Tensor& features, double threshold) {
  if (features.rank() < 2) {
    throw ShapeError("collapse_monitor: features must be [N, C, ...], got " +
                     shape_str(features.shape()));
  }
  const std::size_t N = features.dim(0);
  const std::size_t C = features.dim(1);
  const std::size_t inner = features.size() / (N * C);
  double total = 0;
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const float* p = features.raw() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) mean += p[i];
    }
    mean /= double(N * inner);
    double var = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const float* p = features.raw() + (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) var += (p[i] - mean) * (p[i] - mean);
    }
    total += var / double(N * inner);
  }
  CollapseReading r;
  r.variance = total / double(C);
  r.collapsed = r.variance < threshold;
  return r;
}

json PretextBatchRecord::to_json() const {
  return json{{"step", step},         {"i", i},
              {"j", j},               {"loss", loss},
              {"variance", variance}, {"collapsed", collapsed}};
}

void PretrainConfig::validate() const {
  if (steps == 0) throw ConfigError("pretrain steps must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("pretrain learning rate must be > 0");
  if (batch_size == 0) throw ConfigError("pretrain batch size must be >= 1");
  for (const auto& [i, j] : fixed_pairs) {
    if (i >= kNumTransforms || j >= kNumTransforms) {
      throw ConfigError("fixed transform pairs must use indices 0..6");
    }
  }
}

nlohmann::json PretrainConfig::to_json() const {
  return nlohmann::json{{"steps", steps},
                        {"learning_rate", learning_rate},
                        {"batch_size", batch_size},
                        {"patch", patch},
                        {"seed", seed},
                        {"collapse_threshold", collapse_threshold},
                        {"fixed_pairs", fixed_pairs}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  try {
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    take("steps", c.steps);
    take("learning_rate", c.learning_rate);
    take("batch_size", c.batch_size);
    take("patch", c.patch);
    take("seed", c.seed);
    take("collapse_threshold", c.collapse_threshold);
    take("fixed_pairs", c.fixed_pairs);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  return c;
}

namespace {

double tensor_std(const Tensor& t) {
  double mean = 0;
  for (float x : t.storage()) mean += x;
  mean /= double(t.size());
  double var = 0;
  for (float x : t.storage()) var += (x - mean) * (x - mean);
  return std::sqrt(var / double(t.size()));
}

// Stacks [C, ...] samples into [N, C, ...].
Tensor stack(const std::vector<Tensor>& samples) {
  Shape s = samples.front().shape();
  s.insert(s.begin(), samples.size());
  Tensor out(s);
  float* dst = out.raw();
  for (const auto& t : samples) dst = std::copy(t.storage().begin(), t.storage().end(), dst);
  return out;
}

}  // namespace

PretrainResult pretrain(const Network<float>& net, NetworkParams<float> params,
                        const std::vector<Tensor>& images, const PretrainConfig& config,
                        const std::function<void(const PretextBatchRecord&)>& on_record) {
  config.validate();
  if (images.empty()) throw ConfigError("pretrain needs at least one volume");
  if (!net.arch().use_stem) throw ConfigError("pretrain needs an architecture with a stem");
  for (const auto& img : images) {
    check_volume(img);
    if (img.dim(0) != net.arch().in_channels) {
      throw ShapeError("pretrain: volume channel count does not match the architecture");
    }
    check_patch_fits({img.dim(1), img.dim(2), img.dim(3)}, config.patch);
  }

  Rng rng(config.seed, 0x5e1f);
  Adam adam(params, {}, [](const std::string& n) { return n.rfind("stem.", 0) == 0; });
  PretrainResult result;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<Tensor> raw;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Tensor& img = images[rng.below(images.size())];
      const Extent3 e{img.dim(1), img.dim(2), img.dim(3)};
      raw.push_back(crop(img, random_origin(e, config.patch, rng), config.patch));
    }
    const Tensor batch = stack(raw);
    const TransformContext ctx{batch.dim(1), config.patch, tensor_std(batch)};

    TransformPair pair;
    if (config.fixed_pairs.empty()) {
      pair = sample_transform_pair(rng, ctx);
    } else {
      const auto& [i, j] = config.fixed_pairs[(step - 1) % config.fixed_pairs.size()];
      pair.i = i;
      pair.j = j;
      pair.ti = transform_for_index(i, ctx, rng.next());
      pair.tj = transform_for_index(j, ctx, rng.next());
    }

    std::vector<Tensor> vi, vj;
    for (const auto& s : raw) {
      vi.push_back(apply_transform(s, pair.ti));
      vj.push_back(apply_transform(s, pair.tj));
    }
    StemCache<float> ci, cj;
    const Tensor fi = net.stem_forward(stack(vi), params, &ci);
    const Tensor fj = net.stem_forward(stack(vj), params, &cj);

    PretextBatchRecord rec;
    rec.step = step;
    rec.i = pair.i;
    rec.j = pair.j;
    rec.loss = pretext_loss_batch(fi, fj);
    const auto reading = collapse_monitor(concat<float>(std::vector<Tensor>{fi, fj}, 0),
                                          config.collapse_threshold);
    rec.variance = reading.variance;
    rec.collapsed = reading.collapsed;
    result.history.push_back(rec);
    if (on_record) on_record(rec);
    if (!std::isfinite(rec.loss)) {
      throw PretrainAborted("pretext loss is non-finite at step " + std::to_string(step) +
                                " (pair " + std::to_string(pair.i) + ", " +
                                std::to_string(pair.j) + ")",
                            std::move(result.history));
    }

    params.zero_grad();
    Tensor gi = pretext_loss_batch_backward(fi, fj);
    Tensor gj = gi;
    for (auto& g : gj.storage()) g = -g;
    net.stem_backward(gi, ci, params);
    net.stem_backward(gj, cj, params);
    adam.step(params, config.learning_rate);
  }
  result.params = std::move(params);
  return result;
}

}  // namespace sscaps
