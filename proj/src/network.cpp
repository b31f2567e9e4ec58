#include "sscaps/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

namespace sscaps {

namespace {

constexpr double kCapsInitGain = 1.75;

constexpr std::size_t kEntrySkip = static_cast<std::size_t>(-1);

std::string idx(const char* prefix, std::size_t i, const char* suffix) {
  return std::string(prefix) + "." + std::to_string(i) + "." + suffix;
}

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

Extent3 spatial5(const Shape& s) { return {s[2], s[3], s[4]}; }

template <typename T>
BasicTensor<T> grid_to_channels_first(const CapsuleGrid<T>& g) {
  return channels_last_to_first(flatten_to_tensor(g));
}

}  // namespace

ArchSpec ArchSpec::standard(std::size_t in_channels, std::size_t num_classes) {
  ArchSpec a;
  a.in_channels = in_channels;
  a.num_classes = num_classes;
  a.caps_types = {16, 16, 16, 8, 8, num_classes};
  return a;
}

ArchSpec ArchSpec::micro(std::size_t in_channels, std::size_t num_classes) {
  ArchSpec a;
  a.in_channels = in_channels;
  a.num_classes = num_classes;
  a.stem_channels = {4, 8, 16};
  a.caps_types = {4, 4, 4, 2, 2, num_classes};
  a.caps_dims = {4, 4, 4, 4, 4, 4};
  a.decoder_channels = {16, 8, 4};
  a.recon_channels = {16, 32};
  return a;
}

ArchSpec ArchSpec::with_reduced_first_caps() const {
  ArchSpec a = *this;
  a.caps_types.at(0) = std::max<std::size_t>(1, a.caps_types[0] / 4);
  return a;
}

ArchSpec ArchSpec::without_stem() const {
  ArchSpec a = *this;
  a.use_stem = false;
  return a;
}

void ArchSpec::validate() const {
  if (in_channels == 0) throw ConfigError("in_channels must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (use_stem) {
    if (stem_channels.empty() || stem_channels.size() != stem_dilations.size()) {
      throw ConfigError("stem_channels and stem_dilations must be non-empty and equal length");
    }
    if (stem_kernel % 2 == 0) throw ConfigError("stem_kernel must be odd");
    for (auto c : stem_channels) {
      if (c == 0) throw ConfigError("stem channel counts must be >= 1");
    }
  }
  const std::size_t L = caps_types.size();
  if (L == 0 || caps_dims.size() != L || caps_strides.size() != L) {
    throw ConfigError("caps_types, caps_dims and caps_strides must have equal non-zero length");
  }
  if (caps_types.back() != num_classes) {
    throw ConfigError("last encoder layer must have num_classes (" + std::to_string(num_classes) +
                      ") capsule types, got " + std::to_string(caps_types.back()));
  }
  for (std::size_t l = 0; l < L; ++l) {
    if (caps_types[l] == 0 || caps_dims[l] == 0) throw ConfigError("capsule counts must be >= 1");
    if (caps_strides[l] != 1 && caps_strides[l] != 2) {
      throw ConfigError("encoder strides must be 1 or 2");
    }
  }
  if (caps_kernel % 2 == 0) throw ConfigError("caps_kernel must be odd");
  if (routing_iterations == 0) throw ConfigError("routing_iterations must be >= 1");
  if (decoder_channels.size() != skip_layers().size()) {
    throw ConfigError("decoder has " + std::to_string(decoder_channels.size()) +
                      " stages but the encoder has " + std::to_string(skip_layers().size()) +
                      " stride-2 layers");
  }
  if (decoder_kernel % 2 == 0) throw ConfigError("decoder_kernel must be odd");
  if (recon_channels.empty()) throw ConfigError("recon_channels must be non-empty");
}

std::size_t ArchSpec::entry_dim() const {
  return use_stem ? stem_channels.back() : in_channels;
}

std::size_t ArchSpec::downsample_factor() const {
  std::size_t f = 1;
  for (auto s : caps_strides) f *= s;
  return f;
}

std::size_t ArchSpec::min_extent() const {
  std::size_t rf = 1;
  if (use_stem) {
    for (auto d : stem_dilations) rf = std::max(rf, d * (stem_kernel - 1) + 1);
  }
  return std::max(rf, downsample_factor());
}

std::vector<std::size_t> ArchSpec::skip_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < caps_strides.size(); ++l) {
    if (caps_strides[l] == 2) out.push_back(l);
  }
  return out;
}

template <typename T>
void NetworkParams<T>::add_param(const std::string& name, BasicTensor<T> value) {
  if (param_index_.count(name)) throw ConfigError("duplicate parameter " + name);
  param_index_[name] = params_.size();
  param_names_.push_back(name);
  params_.emplace_back(std::move(value));
}

template <typename T>
void NetworkParams<T>::add_buffer(const std::string& name, BasicTensor<T> value) {
  if (buffer_index_.count(name)) throw ConfigError("duplicate buffer " + name);
  buffer_index_[name] = buffers_.size();
  buffer_names_.push_back(name);
  buffers_.push_back(std::move(value));
}

template <typename T>
GradPair<T>& NetworkParams<T>::param(const std::string& name) {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second];
}

template <typename T>
const GradPair<T>& NetworkParams<T>::param(const std::string& name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second];
}

template <typename T>
BasicTensor<T>& NetworkParams<T>::buffer(const std::string& name) {
  auto it = buffer_index_.find(name);
  if (it == buffer_index_.end()) throw ConfigError("unknown buffer " + name);
  return buffers_[it->second];
}

template <typename T>
const BasicTensor<T>& NetworkParams<T>::buffer(const std::string& name) const {
  auto it = buffer_index_.find(name);
  if (it == buffer_index_.end()) throw ConfigError("unknown buffer " + name);
  return buffers_[it->second];
}

template <typename T>
void NetworkParams<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
std::size_t NetworkParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
bool NetworkParams<T>::all_finite() const {
  for (const auto& p : params_) {
    if (!p.value.all_finite()) return false;
  }
  for (const auto& b : buffers_) {
    if (!b.all_finite()) return false;
  }
  return true;
}

template <typename T>
std::size_t transplant_stem(const NetworkParams<T>& src, NetworkParams<T>& dst) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < src.param_names().size(); ++i) {
    const std::string& name = src.param_names()[i];
    if (name.rfind("stem.", 0) != 0) continue;
    GradPair<T>& target = dst.param(name);
    if (target.value.shape() != src.params()[i].value.shape()) {
      throw ShapeError("transplant_stem: shape mismatch for " + name);
    }
    target.value = src.params()[i].value;
    ++n;
  }
  return n;
}

template <typename T>
Network<T>::Network(ArchSpec arch) : arch_(std::move(arch)) {
  arch_.validate();
}

template <typename T>
CapsConvSpec Network<T>::caps_spec(std::size_t layer) const {
  const std::size_t in_types = layer == 0 ? 1 : arch_.caps_types[layer - 1];
  const std::size_t in_dim = layer == 0 ? arch_.entry_dim() : arch_.caps_dims[layer - 1];
  return CapsConvSpec::make(in_types, in_dim, arch_.caps_types[layer], arch_.caps_dims[layer],
                            arch_.caps_kernel, arch_.caps_strides[layer],
                            arch_.routing_iterations);
}

namespace {

ConvSpec stem_spec(const ArchSpec& a, std::size_t i) {
  const std::size_t in = i == 0 ? a.in_channels : a.stem_channels[i - 1];
  return ConvSpec::same(in, a.stem_channels[i], a.stem_kernel, a.stem_dilations[i]);
}

std::size_t grid_channels(const ArchSpec& a, std::size_t skip_source) {
  if (skip_source == kEntrySkip) return a.entry_dim();
  return a.caps_types[skip_source] * a.caps_dims[skip_source];
}

// Encoder output index feeding each decoder stage, deepest first.
std::vector<std::size_t> skip_sources(const ArchSpec& a) {
  std::vector<std::size_t> out;
  for (auto l : a.skip_layers()) out.push_back(l == 0 ? kEntrySkip : l - 1);
  std::reverse(out.begin(), out.end());
  return out;
}

ConvSpec up_spec(const ArchSpec& a, std::size_t s) {
  const std::size_t in = s == 0 ? a.caps_types.back() * a.caps_dims.back()
                                : a.decoder_channels[s - 1];
  return ConvSpec::cube(in, a.decoder_channels[s], 2, 2);
}

ConvSpec stage_conv_spec(const ArchSpec& a, std::size_t s) {
  const std::size_t skip = grid_channels(a, skip_sources(a)[s]);
  return ConvSpec::same(a.decoder_channels[s] + skip, a.decoder_channels[s], a.decoder_kernel);
}

ConvSpec head_spec(const ArchSpec& a) {
  return ConvSpec::cube(a.decoder_channels.back(), a.num_classes, 1);
}

ConvSpec recon_spec(const ArchSpec& a, std::size_t i) {
  const std::size_t n = a.recon_channels.size();
  const std::size_t in = i == 0 ? a.decoder_channels.back() : a.recon_channels[i - 1];
  const std::size_t out = i == n ? a.in_channels : a.recon_channels[i];
  return ConvSpec::cube(in, out, 1);
}

Shape conv_weight_shape(const ConvSpec& s) {
  return {s.out_channels, s.in_channels, s.kernel[0], s.kernel[1], s.kernel[2]};
}

Shape deconv_weight_shape(const ConvSpec& s) {
  return {s.in_channels, s.out_channels, s.kernel[0], s.kernel[1], s.kernel[2]};
}

}  // namespace

template <typename T>
NetworkParams<T> Network<T>::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  NetworkParams<T> p;
  const ArchSpec& a = arch_;
  if (a.use_stem) {
    for (std::size_t i = 0; i < a.stem_channels.size(); ++i) {
      const ConvSpec s = stem_spec(a, i);
      const double fan_in = static_cast<double>(s.in_channels * s.kernel_volume());
      p.add_param(idx("stem", i, "weight"),
                  normal_tensor<T>(conv_weight_shape(s), std::sqrt(2.0 / fan_in), rng));
      p.add_param(idx("stem", i, "bias"), BasicTensor<T>({s.out_channels}));
    }
  }
  for (std::size_t l = 0; l < a.caps_types.size(); ++l) {
    // With uniform couplings a parent sums in_types votes at weight
    // 1 / out_types. This scale makes |s| ~ kCapsInitGain |u|, which keeps
    // capsule lengths near a stable fixed point of squash instead of
    // collapsing through s|s| layer after layer.
    const CapsConvSpec cs = caps_spec(l);
    const double k3 = static_cast<double>(cs.kernel[0] * cs.kernel[1] * cs.kernel[2]);
    const double stddev = kCapsInitGain * static_cast<double>(cs.out_types) /
                          std::sqrt(static_cast<double>(cs.out_dim * cs.in_types) * k3);
    p.add_param(idx("encoder", l, "weight"), normal_tensor<T>(cs.weight_shape(), stddev, rng));
  }
  for (std::size_t s = 0; s < a.decoder_channels.size(); ++s) {
    const ConvSpec up = up_spec(a, s);
    const double up_fan = static_cast<double>(up.in_channels);
    p.add_param(idx("decoder", s, "up.weight"),
                normal_tensor<T>(deconv_weight_shape(up), std::sqrt(2.0 / up_fan), rng));
    p.add_param(idx("decoder", s, "up.bias"), BasicTensor<T>({up.out_channels}));
    const ConvSpec c = stage_conv_spec(a, s);
    const double fan = static_cast<double>(c.in_channels * c.kernel_volume());
    p.add_param(idx("decoder", s, "conv.weight"),
                normal_tensor<T>(conv_weight_shape(c), std::sqrt(2.0 / fan), rng));
    p.add_param(idx("decoder", s, "conv.bias"), BasicTensor<T>({c.out_channels}));
    p.add_param(idx("decoder", s, "bn.gamma"), BasicTensor<T>({c.out_channels}, T{1}));
    p.add_param(idx("decoder", s, "bn.beta"), BasicTensor<T>({c.out_channels}));
    p.add_buffer(idx("decoder", s, "bn.running_mean"), BasicTensor<T>({c.out_channels}));
    p.add_buffer(idx("decoder", s, "bn.running_var"), BasicTensor<T>({c.out_channels}, T{1}));
  }
  const ConvSpec h = head_spec(a);
  p.add_param("head.weight",
              normal_tensor<T>(conv_weight_shape(h), std::sqrt(1.0 / h.in_channels), rng));
  p.add_param("head.bias", BasicTensor<T>({h.out_channels}));
  for (std::size_t i = 0; i <= a.recon_channels.size(); ++i) {
    const ConvSpec r = recon_spec(a, i);
    const double gain = i == a.recon_channels.size() ? 1.0 : 2.0;
    p.add_param(idx("recon", i, "weight"),
                normal_tensor<T>(conv_weight_shape(r), std::sqrt(gain / r.in_channels), rng));
    p.add_param(idx("recon", i, "bias"), BasicTensor<T>({r.out_channels}));
  }
  return p;
}

template <typename T>
ShapePlan Network<T>::plan(std::size_t batch, const Extent3& ext) const {
  const ArchSpec& a = arch_;
  const std::size_t f = a.downsample_factor();
  for (int i = 0; i < 3; ++i) {
    if (ext[i] < a.min_extent() || ext[i] % f != 0) {
      throw ShapeError("input extent " + std::to_string(ext[i]) + " must be >= " +
                       std::to_string(a.min_extent()) + " and divisible by " + std::to_string(f));
    }
  }
  ShapePlan plan;
  plan.features = {batch, a.entry_dim(), ext[0], ext[1], ext[2]};
  Extent3 cur = ext;
  std::vector<Shape> outs;
  Shape entry{batch, ext[0], ext[1], ext[2], 1, a.entry_dim()};
  for (std::size_t l = 0; l < a.caps_types.size(); ++l) {
    cur = caps_spec(l).output_extents(cur);
    outs.push_back({batch, cur[0], cur[1], cur[2], a.caps_types[l], a.caps_dims[l]});
  }
  plan.caps_grids = outs;
  for (auto src : skip_sources(a)) plan.skips.push_back(src == kEntrySkip ? entry : outs[src]);
  plan.lengths = {batch, cur[0], cur[1], cur[2], a.num_classes};
  plan.logits = {batch, a.num_classes, ext[0], ext[1], ext[2]};
  plan.reconstruction = {batch, a.in_channels, ext[0], ext[1], ext[2]};
  return plan;
}

template <typename T>
BasicTensor<T> Network<T>::stem_forward(const BasicTensor<T>& volume, const NetworkParams<T>& p,
                                        StemCache<T>* cache) const {
  const ArchSpec& a = arch_;
  if (volume.rank() != 5 || volume.dim(1) != a.in_channels) {
    throw ShapeError("stem: expected [N, " + std::to_string(a.in_channels) + ", H, W, D], got " +
                     shape_str(volume.shape()));
  }
  if (!a.use_stem) return volume;
  const std::size_t need = a.min_extent();
  for (int i = 0; i < 3; ++i) {
    if (volume.dim(2 + i) < need) {
      throw ShapeError("stem: spatial extent " + std::to_string(volume.dim(2 + i)) +
                       " is below the minimum of " + std::to_string(need));
    }
  }
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  BasicTensor<T> x = volume;
  for (std::size_t i = 0; i < a.stem_channels.size(); ++i) {
    BasicTensor<T> pre = conv3d_forward(x, p.param(idx("stem", i, "weight")).value,
                                        p.param(idx("stem", i, "bias")).value, stem_spec(a, i));
    BasicTensor<T> act = relu_forward(pre);
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->pre.push_back(std::move(pre));
    }
    x = std::move(act);
  }
  return x;
}

template <typename T>
BasicTensor<T> Network<T>::stem_backward(const BasicTensor<T>& grad_features,
                                         const StemCache<T>& cache, NetworkParams<T>& p) const {
  const ArchSpec& a = arch_;
  if (!a.use_stem) return grad_features;
  BasicTensor<T> g = grad_features;
  for (std::size_t i = a.stem_channels.size(); i-- > 0;) {
    g = relu_backward(g, cache.pre[i]);
    const std::string w = idx("stem", i, "weight");
    ConvGrads<T> cg = conv3d_backward(g, cache.inputs[i], p.param(w).value, stem_spec(a, i));
    add_inplace(p.param(w).grad, cg.weights);
    add_inplace(p.param(idx("stem", i, "bias")).grad, cg.bias);
    g = std::move(cg.input);
  }
  return g;
}

template <typename T>
EncoderOutput<T> Network<T>::encoder_forward(const BasicTensor<T>& features,
                                             const NetworkParams<T>& p,
                                             EncoderCache<T>* cache) const {
  const ArchSpec& a = arch_;
  if (features.rank() != 5 || features.dim(1) != a.entry_dim()) {
    throw ShapeError("encoder: expected feature channel extent " + std::to_string(a.entry_dim()) +
                     ", got " + shape_str(features.shape()));
  }
  const std::size_t f = a.downsample_factor();
  for (int i = 0; i < 3; ++i) {
    if (features.dim(2 + i) % f != 0) {
      throw ShapeError("encoder: spatial extent " + std::to_string(features.dim(2 + i)) +
                       " is not divisible by " + std::to_string(f));
    }
  }
  CapsuleGrid<T> raw = from_tensor(channels_first_to_last(features), 1, a.entry_dim());
  CapsuleGrid<T> entry(squash_last_axis(raw.tensor()));
  std::vector<CapsuleGrid<T>> outs;
  std::vector<CapsConvCache<T>> caches(a.caps_types.size());
  const CapsuleGrid<T>* cur = &entry;
  for (std::size_t l = 0; l < a.caps_types.size(); ++l) {
    outs.push_back(caps_conv3d_forward(*cur, p.param(idx("encoder", l, "weight")).value,
                                       caps_spec(l), cache ? &caches[l] : nullptr));
    cur = &outs.back();
  }
  EncoderOutput<T> result;
  for (auto src : skip_sources(a)) result.skips.push_back(src == kEntrySkip ? entry : outs[src]);
  result.final_grid = outs.back();
  if (cache) {
    cache->entry_raw = std::move(raw.tensor());
    cache->entry = std::move(entry);
    cache->outputs = std::move(outs);
    cache->layers = std::move(caches);
  }
  return result;
}

template <typename T>
BasicTensor<T> Network<T>::decoder_forward(const CapsuleGrid<T>& final_grid,
                                           const std::vector<CapsuleGrid<T>>& skips,
                                           const NetworkParams<T>& p, Mode mode,
                                           DecoderCache<T>* cache,
                                           BasicTensor<T>* features_out) const {
  const ArchSpec& a = arch_;
  if (skips.size() != a.decoder_channels.size()) {
    throw ShapeError("decoder: " + std::to_string(skips.size()) + " skips for " +
                     std::to_string(a.decoder_channels.size()) + " stages");
  }
  if (cache) cache->stages.assign(a.decoder_channels.size(), {});
  BasicTensor<T> x = grid_to_channels_first(final_grid);
  for (std::size_t s = 0; s < a.decoder_channels.size(); ++s) {
    const ConvSpec up = up_spec(a, s);
    BasicTensor<T> u = deconv3d_forward(x, p.param(idx("decoder", s, "up.weight")).value,
                                        p.param(idx("decoder", s, "up.bias")).value, up);
    BasicTensor<T> skip = grid_to_channels_first(skips[s]);
    if (spatial5(skip.shape()) != spatial5(u.shape()) || skip.dim(0) != u.dim(0)) {
      throw ShapeError("decoder stage " + std::to_string(s) + ": skip " +
                       shape_str(skip.shape()) + " does not align with " + shape_str(u.shape()));
    }
    const std::size_t up_ch = u.dim(1), skip_ch = skip.dim(1);
    const BasicTensor<T> parts[] = {std::move(u), std::move(skip)};
    BasicTensor<T> cat = concat(std::span<const BasicTensor<T>>(parts), 1);
    const ConvSpec cs = stage_conv_spec(a, s);
    BasicTensor<T> conv = conv3d_forward(cat, p.param(idx("decoder", s, "conv.weight")).value,
                                         p.param(idx("decoder", s, "conv.bias")).value, cs);
    const BatchNormStats<T> running{p.buffer(idx("decoder", s, "bn.running_mean")),
                                    p.buffer(idx("decoder", s, "bn.running_var"))};
    BatchNormCache<T> bnc;
    BasicTensor<T> bn = batchnorm_forward(conv, p.param(idx("decoder", s, "bn.gamma")).value,
                                          p.param(idx("decoder", s, "bn.beta")).value, running,
                                          mode, &bnc);
    BasicTensor<T> act = relu_forward(bn);
    if (cache) {
      auto& st = cache->stages[s];
      st.deconv_in = std::move(x);
      st.concat_out = std::move(cat);
      st.up_channels = up_ch;
      st.skip_channels = skip_ch;
      st.conv_out = std::move(conv);
      st.bn = std::move(bnc);
      st.bn_out = std::move(bn);
    }
    x = std::move(act);
  }
  BasicTensor<T> logits =
      conv3d_forward(x, p.param("head.weight").value, p.param("head.bias").value, head_spec(a));
  if (cache) cache->features = x;
  if (features_out) *features_out = std::move(x);
  return logits;
}

template <typename T>
BasicTensor<T> Network<T>::reconstruction_branch(const BasicTensor<T>& decoder_features,
                                                 const NetworkParams<T>& p,
                                                 ReconCache<T>* cache) const {
  const ArchSpec& a = arch_;
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  BasicTensor<T> x = decoder_features;
  const std::size_t n = a.recon_channels.size();
  for (std::size_t i = 0; i <= n; ++i) {
    BasicTensor<T> pre = conv3d_forward(x, p.param(idx("recon", i, "weight")).value,
                                        p.param(idx("recon", i, "bias")).value, recon_spec(a, i));
    BasicTensor<T> out = i == n ? pre : relu_forward(pre);
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->pre.push_back(std::move(pre));
    }
    x = std::move(out);
  }
  return x;
}

template <typename T>
ForwardOutputs<T> Network<T>::forward(const BasicTensor<T>& volume, const NetworkParams<T>& p,
                                      Mode mode, ForwardCache<T>* cache) const {
  if (volume.rank() != 5) {
    throw ShapeError("forward: volume must be [N, C, H, W, D], got " + shape_str(volume.shape()));
  }
  plan(volume.dim(0), spatial5(volume.shape()));  // validates extents
  BasicTensor<T> features = stem_forward(volume, p, cache ? &cache->stem : nullptr);
  EncoderOutput<T> enc = encoder_forward(features, p, cache ? &cache->encoder : nullptr);
  ForwardOutputs<T> out;
  BasicTensor<T> dec_features;
  out.logits = decoder_forward(enc.final_grid, enc.skips, p, mode,
                               cache ? &cache->decoder : nullptr, &dec_features);
  out.reconstruction =
      reconstruction_branch(dec_features, p, cache ? &cache->recon : nullptr);
  out.encoder_lengths = capsule_lengths(enc.final_grid);
  if (cache) {
    cache->mode = mode;
    cache->input_shape = volume.shape();
    cache->skip_sources = skip_sources(arch_);
    cache->lengths = out.encoder_lengths;
  }
  return out;
}

template <typename T>
void Network<T>::backward(const ForwardCache<T>& cache, const OutputGrads<T>& grads,
                          NetworkParams<T>& p) const {
  const ArchSpec& a = arch_;
  const auto& dec = cache.decoder;
  const std::size_t L = a.caps_types.size();
  const CapsuleGrid<T>& final_grid = cache.encoder.outputs.back();

  // Head and reconstruction branch both read the last decoder feature map.
  BasicTensor<T> g_feat(dec.features.shape());
  if (!grads.logits.empty()) {
    ConvGrads<T> cg = conv3d_backward(grads.logits, dec.features, p.param("head.weight").value,
                                      head_spec(a));
    add_inplace(p.param("head.weight").grad, cg.weights);
    add_inplace(p.param("head.bias").grad, cg.bias);
    add_inplace(g_feat, cg.input);
  }
  if (!grads.reconstruction.empty()) {
    BasicTensor<T> g = grads.reconstruction;
    const std::size_t n = a.recon_channels.size();
    for (std::size_t i = n + 1; i-- > 0;) {
      if (i != n) g = relu_backward(g, cache.recon.pre[i]);
      const std::string w = idx("recon", i, "weight");
      ConvGrads<T> cg = conv3d_backward(g, cache.recon.inputs[i], p.param(w).value,
                                        recon_spec(a, i));
      add_inplace(p.param(w).grad, cg.weights);
      add_inplace(p.param(idx("recon", i, "bias")).grad, cg.bias);
      g = std::move(cg.input);
    }
    add_inplace(g_feat, g);
  }

  // Encoder output gradients, indexed like cache.encoder.outputs; entry separately.
  std::vector<BasicTensor<T>> g_out(L);
  for (std::size_t l = 0; l < L; ++l) {
    g_out[l] = BasicTensor<T>(cache.encoder.outputs[l].tensor().shape());
  }
  BasicTensor<T> g_entry(cache.encoder.entry.tensor().shape());

  BasicTensor<T> g = std::move(g_feat);
  for (std::size_t s = a.decoder_channels.size(); s-- > 0;) {
    const auto& st = dec.stages[s];
    g = relu_backward(g, st.bn_out);
    BatchNormGrads<T> bg = batchnorm_backward(g, p.param(idx("decoder", s, "bn.gamma")).value,
                                              st.bn);
    add_inplace(p.param(idx("decoder", s, "bn.gamma")).grad, bg.gamma);
    add_inplace(p.param(idx("decoder", s, "bn.beta")).grad, bg.beta);
    const std::string cw = idx("decoder", s, "conv.weight");
    ConvGrads<T> cg = conv3d_backward(bg.input, st.concat_out, p.param(cw).value,
                                      stage_conv_spec(a, s));
    add_inplace(p.param(cw).grad, cg.weights);
    add_inplace(p.param(idx("decoder", s, "conv.bias")).grad, cg.bias);
    const std::size_t sizes[] = {st.up_channels, st.skip_channels};
    std::vector<BasicTensor<T>> parts =
        split(cg.input, 1, std::span<const std::size_t>(sizes));
    const std::size_t src = cache.skip_sources[s];
    BasicTensor<T> g_skip = channels_first_to_last(parts[1]);
    BasicTensor<T>& target = src == kEntrySkip ? g_entry : g_out[src];
    add_inplace(target, g_skip.reshaped(target.shape()));
    const std::string uw = idx("decoder", s, "up.weight");
    ConvGrads<T> ug = deconv3d_backward(parts[0], st.deconv_in, p.param(uw).value, up_spec(a, s));
    add_inplace(p.param(uw).grad, ug.weights);
    add_inplace(p.param(idx("decoder", s, "up.bias")).grad, ug.bias);
    g = std::move(ug.input);
  }
  // g is the gradient of the flattened final grid, channels first.
  add_inplace(g_out[L - 1], channels_first_to_last(g).reshaped(g_out[L - 1].shape()));
  if (!grads.encoder_lengths.empty()) {
    add_inplace(g_out[L - 1],
                capsule_lengths_backward(grads.encoder_lengths, final_grid, cache.lengths));
  }

  for (std::size_t l = L; l-- > 0;) {
    const std::string w = idx("encoder", l, "weight");
    CapsConvGrads<T> cg =
        caps_conv3d_backward(g_out[l], p.param(w).value, caps_spec(l), cache.encoder.layers[l]);
    add_inplace(p.param(w).grad, cg.weights);
    add_inplace(l == 0 ? g_entry : g_out[l - 1], cg.input);
  }

  if (a.use_stem) {
    const Shape& es = g_entry.shape();
    const BasicTensor<T> g_raw = squash_last_axis_backward(g_entry, cache.encoder.entry_raw);
    BasicTensor<T> g_features =
        channels_last_to_first(g_raw.reshaped({es[0], es[1], es[2], es[3], es[4] * es[5]}));
    stem_backward(g_features, cache.stem, p);
  }
}

template <typename T>
void Network<T>::commit_batchnorm_stats(const ForwardCache<T>& cache, NetworkParams<T>& p) const {
  if (cache.mode != Mode::Train) return;
  for (std::size_t s = 0; s < cache.decoder.stages.size(); ++s) {
    BatchNormStats<T> running{p.buffer(idx("decoder", s, "bn.running_mean")),
                              p.buffer(idx("decoder", s, "bn.running_var"))};
    update_running_stats(running, cache.decoder.stages[s].bn);
    p.buffer(idx("decoder", s, "bn.running_mean")) = std::move(running.mean);
    p.buffer(idx("decoder", s, "bn.running_var")) = std::move(running.var);
  }
}

template class NetworkParams<float>;
template class NetworkParams<double>;
template class Network<float>;
template class Network<double>;
template std::size_t transplant_stem(const NetworkParams<float>&, NetworkParams<float>&);
template std::size_t transplant_stem(const NetworkParams<double>&, NetworkParams<double>&);

}  // namespace sscaps
