#include "sscaps/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace sscaps {

namespace {

const char* kAxisNames[3] = {"H", "W", "D"};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using BlockC = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using BlockM = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

// im2col working buffers are capped at this many elements; the output is
// processed in slabs of whole H-planes.
constexpr std::size_t kMaxColElements = std::size_t{1} << 22;

// Geometry of one correlation from a "big" grid (in) to a "small" grid (out).
struct Geometry {
  std::size_t channels;  // channels of the big grid
  Extent3 in;
  Extent3 out;
  Extent3 k;
  Extent3 s;
  Extent3 d;
  Extent3 p;

  std::size_t kvol() const { return k[0] * k[1] * k[2]; }
  std::size_t rows() const { return channels * kvol(); }
  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::size_t out_plane() const { return out[1] * out[2]; }
  std::size_t out_volume() const { return out[0] * out_plane(); }
  std::size_t planes_per_slab() const {
    std::size_t per_plane = rows() * out_plane();
    return std::max<std::size_t>(1, kMaxColElements / std::max<std::size_t>(1, per_plane));
  }
};

Geometry make_geometry(const ConvSpec& spec, std::size_t channels, const Extent3& big,
                       const Extent3& small) {
  return Geometry{channels, big, small, spec.kernel, spec.stride, spec.dilation, spec.padding};
}

// cols[r, q] for rows r = (c, kh, kw, kd) and output positions q in planes [o0, o1).
template <typename T>
void im2col(const T* in, const Geometry& g, std::size_t o0, std::size_t o1, T* cols) {
  const std::size_t P = (o1 - o0) * g.out_plane();
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t a = 0; a < g.k[0]; ++a) {
      for (std::size_t b = 0; b < g.k[1]; ++b) {
        for (std::size_t e = 0; e < g.k[2]; ++e, ++r) {
          T* dst = cols + r * P;
          for (std::size_t ox = o0; ox < o1; ++ox) {
            const std::int64_t ix = static_cast<std::int64_t>(ox * g.s[0] + a * g.d[0]) -
                                    static_cast<std::int64_t>(g.p[0]);
            if (ix < 0 || ix >= static_cast<std::int64_t>(g.in[0])) {
              std::fill(dst, dst + g.out_plane(), T{0});
              dst += g.out_plane();
              continue;
            }
            for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
              const std::int64_t iy = static_cast<std::int64_t>(oy * g.s[1] + b * g.d[1]) -
                                      static_cast<std::int64_t>(g.p[1]);
              if (iy < 0 || iy >= static_cast<std::int64_t>(g.in[1])) {
                std::fill(dst, dst + g.out[2], T{0});
                dst += g.out[2];
                continue;
              }
              const T* src = in + ((c * g.in[0] + ix) * g.in[1] + iy) * g.in[2];
              for (std::size_t oz = 0; oz < g.out[2]; ++oz) {
                const std::int64_t iz = static_cast<std::int64_t>(oz * g.s[2] + e * g.d[2]) -
                                        static_cast<std::int64_t>(g.p[2]);
                *dst++ = (iz < 0 || iz >= static_cast<std::int64_t>(g.in[2])) ? T{0} : src[iz];
              }
            }
          }
        }
      }
    }
  }
}

// Scatter-add of im2col.
template <typename T>
void col2im(const T* cols, const Geometry& g, std::size_t o0, std::size_t o1, T* in) {
  const std::size_t P = (o1 - o0) * g.out_plane();
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t a = 0; a < g.k[0]; ++a) {
      for (std::size_t b = 0; b < g.k[1]; ++b) {
        for (std::size_t e = 0; e < g.k[2]; ++e, ++r) {
          const T* src = cols + r * P;
          for (std::size_t ox = o0; ox < o1; ++ox) {
            const std::int64_t ix = static_cast<std::int64_t>(ox * g.s[0] + a * g.d[0]) -
                                    static_cast<std::int64_t>(g.p[0]);
            if (ix < 0 || ix >= static_cast<std::int64_t>(g.in[0])) {
              src += g.out_plane();
              continue;
            }
            for (std::size_t oy = 0; oy < g.out[1]; ++oy) {
              const std::int64_t iy = static_cast<std::int64_t>(oy * g.s[1] + b * g.d[1]) -
                                      static_cast<std::int64_t>(g.p[1]);
              if (iy < 0 || iy >= static_cast<std::int64_t>(g.in[1])) {
                src += g.out[2];
                continue;
              }
              T* dst = in + ((c * g.in[0] + ix) * g.in[1] + iy) * g.in[2];
              for (std::size_t oz = 0; oz < g.out[2]; ++oz, ++src) {
                const std::int64_t iz = static_cast<std::int64_t>(oz * g.s[2] + e * g.d[2]) -
                                        static_cast<std::int64_t>(g.p[2]);
                if (iz >= 0 && iz < static_cast<std::int64_t>(g.in[2])) dst[iz] += *src;
              }
            }
          }
        }
      }
    }
  }
}

Extent3 spatial_of(const Shape& s) { return {s[2], s[3], s[4]}; }

template <typename T>
void check_conv_operands(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                         const BasicTensor<T>& bias, const ConvSpec& spec,
                         std::size_t input_channels, std::size_t w0, std::size_t w1,
                         std::size_t bias_len, const char* what) {
  spec.validate();
  if (input.rank() != 5) {
    throw ShapeError(std::string(what) + ": input must be rank 5 [N,C,H,W,D], got " +
                     shape_str(input.shape()));
  }
  if (input.dim(1) != input_channels) {
    throw ShapeError(std::string(what) + ": channel axis has " + std::to_string(input.dim(1)) +
                     " but spec expects " + std::to_string(input_channels));
  }
  const Shape expected{w0, w1, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  if (weights.shape() != expected) {
    throw ShapeError(std::string(what) + ": weights shape " + shape_str(weights.shape()) +
                     " does not match expected " + shape_str(expected));
  }
  if (!bias.empty() && bias.shape() != Shape{bias_len}) {
    throw ShapeError(std::string(what) + ": bias shape " + shape_str(bias.shape()) +
                     " does not match [" + std::to_string(bias_len) + "]");
  }
}

template <typename T>
void add_bias(BasicTensor<T>& out, const BasicTensor<T>& bias) {
  if (bias.empty()) return;
  const std::size_t N = out.dim(0), C = out.dim(1), V = out.stride(1);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      T* p = out.raw() + (n * C + c) * V;
      const T b = bias[c];
      for (std::size_t i = 0; i < V; ++i) p[i] += b;
    }
  }
}

template <typename T>
BasicTensor<T> channel_sums(const BasicTensor<T>& t) {
  const std::size_t N = t.dim(0), C = t.dim(1), V = t.stride(1);
  BasicTensor<T> out({C});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = t.raw() + (n * C + c) * V;
      T acc{0};
      for (std::size_t i = 0; i < V; ++i) acc += p[i];
      out[c] += acc;
    }
  }
  return out;
}

// small[n] = W (rows_out x rows) * im2col(big[n]); W is [out_ch, channels * kvol].
template <typename T>
void correlate(const T* big, const T* weights, std::size_t out_ch, const Geometry& g, T* small,
               std::vector<T>& cols) {
  const std::size_t K = g.rows();
  const std::size_t P = g.out_volume();
  MapC<T> W(weights, static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(K));
  const std::size_t step = g.planes_per_slab();
  for (std::size_t o0 = 0; o0 < g.out[0]; o0 += step) {
    const std::size_t o1 = std::min(g.out[0], o0 + step);
    const std::size_t Ps = (o1 - o0) * g.out_plane();
    cols.resize(K * Ps);
    im2col(big, g, o0, o1, cols.data());
    MapC<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(Ps));
    BlockM<T> out(small + o0 * g.out_plane(), static_cast<Eigen::Index>(out_ch),
                  static_cast<Eigen::Index>(Ps), Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
    out.noalias() = W * C;
  }
}

// big[n] += col2im(W^T small[n]).
template <typename T>
void correlate_transpose(const T* small, const T* weights, std::size_t out_ch,
                         const Geometry& g, T* big, std::vector<T>& cols) {
  const std::size_t K = g.rows();
  const std::size_t P = g.out_volume();
  MapC<T> W(weights, static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(K));
  const std::size_t step = g.planes_per_slab();
  for (std::size_t o0 = 0; o0 < g.out[0]; o0 += step) {
    const std::size_t o1 = std::min(g.out[0], o0 + step);
    const std::size_t Ps = (o1 - o0) * g.out_plane();
    cols.resize(K * Ps);
    BlockC<T> s(small + o0 * g.out_plane(), static_cast<Eigen::Index>(out_ch),
                static_cast<Eigen::Index>(Ps), Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
    MapM<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(Ps));
    C.noalias() = W.transpose() * s;
    col2im(cols.data(), g, o0, o1, big);
  }
}

// grad_w += small[n] * im2col(big[n])^T.
template <typename T>
void correlate_weight_grad(const T* big, const T* small, std::size_t out_ch, const Geometry& g,
                           T* grad_w, std::vector<T>& cols) {
  const std::size_t K = g.rows();
  const std::size_t P = g.out_volume();
  MapM<T> GW(grad_w, static_cast<Eigen::Index>(out_ch), static_cast<Eigen::Index>(K));
  const std::size_t step = g.planes_per_slab();
  for (std::size_t o0 = 0; o0 < g.out[0]; o0 += step) {
    const std::size_t o1 = std::min(g.out[0], o0 + step);
    const std::size_t Ps = (o1 - o0) * g.out_plane();
    cols.resize(K * Ps);
    im2col(big, g, o0, o1, cols.data());
    MapC<T> C(cols.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(Ps));
    BlockC<T> s(small + o0 * g.out_plane(), static_cast<Eigen::Index>(out_ch),
                static_cast<Eigen::Index>(Ps), Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
    GW.noalias() += s * C.transpose();
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t len;
  std::size_t inner;
};

template <typename T>
AxisSplit split_axis(const BasicTensor<T>& t, std::size_t axis, const char* what) {
  if (axis >= t.rank()) {
    throw ShapeError(std::string(what) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(t.rank()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= t.dim(i);
  return {outer, t.dim(axis), t.stride(axis)};
}

}  // namespace

ConvSpec ConvSpec::cube(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                        std::size_t dilation, std::size_t padding) {
  ConvSpec s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = {k, k, k};
  s.stride = {stride, stride, stride};
  s.dilation = {dilation, dilation, dilation};
  s.padding = {padding, padding, padding};
  return s;
}

ConvSpec ConvSpec::same(std::size_t in, std::size_t out, std::size_t k, std::size_t dilation) {
  return cube(in, out, k, 1, dilation, dilation * (k - 1) / 2);
}

void ConvSpec::validate() const {
  if (in_channels == 0 || out_channels == 0) throw ShapeError("conv channel counts must be >= 1");
  for (int i = 0; i < 3; ++i) {
    if (kernel[i] == 0 || stride[i] == 0 || dilation[i] == 0) {
      throw ShapeError(std::string("conv kernel, stride and dilation must be >= 1 on axis ") +
                       kAxisNames[i]);
    }
  }
}

Extent3 ConvSpec::output_extents(const Extent3& in) const {
  Extent3 out{};
  for (int i = 0; i < 3; ++i) {
    const std::int64_t span = static_cast<std::int64_t>(in[i] + 2 * padding[i]) -
                              static_cast<std::int64_t>(dilation[i] * (kernel[i] - 1)) - 1;
    if (span < 0) {
      throw ShapeError(std::string("receptive field exceeds padded input on axis ") +
                       kAxisNames[i] + " (extent " + std::to_string(in[i]) + ")");
    }
    out[i] = static_cast<std::size_t>(span) / stride[i] + 1;
  }
  return out;
}

Extent3 ConvSpec::transposed_extents(const Extent3& in) const {
  Extent3 out{};
  for (int i = 0; i < 3; ++i) {
    const std::int64_t o = static_cast<std::int64_t>((in[i] - 1) * stride[i] +
                                                     dilation[i] * (kernel[i] - 1) + 1) -
                           static_cast<std::int64_t>(2 * padding[i]);
    if (o < 1) {
      throw ShapeError(std::string("transposed conv output is empty on axis ") + kAxisNames[i]);
    }
    out[i] = static_cast<std::size_t>(o);
  }
  return out;
}

template <typename T>
BasicTensor<T> conv3d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                              const BasicTensor<T>& bias, const ConvSpec& spec) {
  check_conv_operands(input, weights, bias, spec, spec.in_channels, spec.out_channels,
                      spec.in_channels, spec.out_channels, "conv3d");
  const Extent3 in = spatial_of(input.shape());
  const Extent3 out = spec.output_extents(in);
  const std::size_t N = input.dim(0);
  BasicTensor<T> result({N, spec.out_channels, out[0], out[1], out[2]});
  const Geometry g = make_geometry(spec, spec.in_channels, in, out);
  std::vector<T> cols;
  for (std::size_t n = 0; n < N; ++n) {
    correlate(input.raw() + n * input.stride(0), weights.raw(), spec.out_channels, g,
              result.raw() + n * result.stride(0), cols);
  }
  add_bias(result, bias);
  return result;
}

template <typename T>
ConvGrads<T> conv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weights, const ConvSpec& spec) {
  check_conv_operands(input, weights, BasicTensor<T>{}, spec, spec.in_channels,
                      spec.out_channels, spec.in_channels, spec.out_channels, "conv3d_backward");
  const Extent3 in = spatial_of(input.shape());
  const Extent3 out = spec.output_extents(in);
  const std::size_t N = input.dim(0);
  const Shape expected{N, spec.out_channels, out[0], out[1], out[2]};
  if (grad_out.shape() != expected) {
    throw ShapeError("conv3d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                     " does not match forward output " + shape_str(expected));
  }
  ConvGrads<T> g{BasicTensor<T>(input.shape()), BasicTensor<T>(weights.shape()),
                 channel_sums(grad_out)};
  const Geometry geo = make_geometry(spec, spec.in_channels, in, out);
  std::vector<T> cols;
  for (std::size_t n = 0; n < N; ++n) {
    const T* go = grad_out.raw() + n * grad_out.stride(0);
    correlate_weight_grad(input.raw() + n * input.stride(0), go, spec.out_channels, geo,
                          g.weights.raw(), cols);
    correlate_transpose(go, weights.raw(), spec.out_channels, geo,
                        g.input.raw() + n * input.stride(0), cols);
  }
  return g;
}

template <typename T>
BasicTensor<T> deconv3d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                                const BasicTensor<T>& bias, const ConvSpec& spec) {
  check_conv_operands(input, weights, bias, spec, spec.in_channels, spec.in_channels,
                      spec.out_channels, spec.out_channels, "deconv3d");
  const Extent3 in = spatial_of(input.shape());
  const Extent3 out = spec.transposed_extents(in);
  if (spec.output_extents(out) != in) {
    throw ShapeError("deconv3d: geometry is not invertible for this input extent");
  }
  const std::size_t N = input.dim(0);
  BasicTensor<T> result({N, spec.out_channels, out[0], out[1], out[2]});
  // The transposed conv is the adjoint of a conv from the (big) output grid
  // with out_channels to the (small) input grid with in_channels.
  const Geometry g = make_geometry(spec, spec.out_channels, out, in);
  std::vector<T> cols;
  for (std::size_t n = 0; n < N; ++n) {
    correlate_transpose(input.raw() + n * input.stride(0), weights.raw(), spec.in_channels, g,
                        result.raw() + n * result.stride(0), cols);
  }
  add_bias(result, bias);
  return result;
}

template <typename T>
ConvGrads<T> deconv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                               const BasicTensor<T>& weights, const ConvSpec& spec) {
  check_conv_operands(input, weights, BasicTensor<T>{}, spec, spec.in_channels, spec.in_channels,
                      spec.out_channels, spec.out_channels, "deconv3d_backward");
  const Extent3 in = spatial_of(input.shape());
  const Extent3 out = spec.transposed_extents(in);
  const std::size_t N = input.dim(0);
  const Shape expected{N, spec.out_channels, out[0], out[1], out[2]};
  if (grad_out.shape() != expected) {
    throw ShapeError("deconv3d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                     " does not match forward output " + shape_str(expected));
  }
  ConvGrads<T> g{BasicTensor<T>(input.shape()), BasicTensor<T>(weights.shape()),
                 channel_sums(grad_out)};
  const Geometry geo = make_geometry(spec, spec.out_channels, out, in);
  std::vector<T> cols;
  for (std::size_t n = 0; n < N; ++n) {
    const T* go = grad_out.raw() + n * grad_out.stride(0);
    correlate(go, weights.raw(), spec.in_channels, geo, g.input.raw() + n * input.stride(0),
              cols);
    correlate_weight_grad(go, input.raw() + n * input.stride(0), spec.in_channels, geo,
                          g.weights.raw(), cols);
  }
  return g;
}

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                                 const BasicTensor<T>& beta, const BatchNormStats<T>& running,
                                 Mode mode, BatchNormCache<T>* cache) {
  if (input.rank() < 2) throw ShapeError("batchnorm: input must be [N, C, ...]");
  const std::size_t N = input.dim(0), C = input.dim(1), V = input.stride(1);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("batchnorm: gamma/beta length must equal channel count " +
                     std::to_string(C));
  }
  const std::size_t M = N * V;
  std::vector<T> mean(C), var(C), inv_std(C);
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.raw() + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(M);
      double sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.raw() + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      mean[c] = static_cast<T>(mu);
      var[c] = static_cast<T>(sq / static_cast<double>(M));
    }
  } else {
    if (running.mean.shape() != Shape{C} || running.var.shape() != Shape{C}) {
      throw ShapeError("batchnorm: running statistics do not match channel count");
    }
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = running.mean[c];
      var[c] = running.var[c];
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    inv_std[c] = T{1} / std::sqrt(var[c] + static_cast<T>(kBatchNormEps));
  }
  BasicTensor<T> xhat(input.shape());
  BasicTensor<T> out(input.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) {
        const T h = (input[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = gamma[c] * h + beta[c];
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->batch_mean = mean;
    cache->batch_var.assign(C, T{0});
    if (mode == Mode::Train) {
      const T unbias = M > 1 ? static_cast<T>(M) / static_cast<T>(M - 1) : T{1};
      for (std::size_t c = 0; c < C; ++c) cache->batch_var[c] = var[c] * unbias;
    }
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& gamma,
                                     const BatchNormCache<T>& cache) {
  if (grad_out.shape() != cache.xhat.shape()) {
    throw ShapeError("batchnorm_backward: grad_out shape " + shape_str(grad_out.shape()) +
                     " does not match forward input " + shape_str(cache.xhat.shape()));
  }
  const std::size_t N = grad_out.dim(0), C = grad_out.dim(1), V = grad_out.stride(1);
  const T M = static_cast<T>(N * V);
  BatchNormGrads<T> g{BasicTensor<T>(grad_out.shape()), BasicTensor<T>({C}),
                      BasicTensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    T sum_g{0}, sum_gx{0};
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) {
        sum_g += grad_out[off + i];
        sum_gx += grad_out[off + i] * cache.xhat[off + i];
      }
    }
    g.beta[c] = sum_g;
    g.gamma[c] = sum_gx;
    const T scale = gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * V;
      for (std::size_t i = 0; i < V; ++i) {
        if (cache.mode == Mode::Train) {
          g.input[off + i] =
              scale / M * (M * grad_out[off + i] - sum_g - cache.xhat[off + i] * sum_gx);
        } else {
          g.input[off + i] = scale * grad_out[off + i];
        }
      }
    }
  }
  return g;
}

template <typename T>
void update_running_stats(BatchNormStats<T>& running, const BatchNormCache<T>& cache) {
  if (cache.mode != Mode::Train) return;
  const T m = static_cast<T>(kBatchNormMomentum);
  for (std::size_t c = 0; c < running.mean.size(); ++c) {
    running.mean[c] = (T{1} - m) * running.mean[c] + m * cache.batch_mean[c];
    running.var[c] = (T{1} - m) * running.var[c] + m * cache.batch_var[c];
  }
}

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.storage()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x) {
  if (grad_out.shape() != x.shape()) throw ShapeError("relu_backward: shape mismatch");
  BasicTensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > T{0})) g[i] = T{0};
  }
  return g;
}

template <typename T>
BasicTensor<T> softmax_forward(const BasicTensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x, axis, "softmax");
  BasicTensor<T> y(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = x[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, x[base + k * s.inner]);
      T sum{0};
      for (std::size_t k = 0; k < s.len; ++k) {
        const T e = std::exp(x[base + k * s.inner] - mx);
        y[base + k * s.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) y[base + k * s.inner] /= sum;
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& y,
                                std::size_t axis) {
  if (grad_out.shape() != y.shape()) throw ShapeError("softmax_backward: shape mismatch");
  const AxisSplit s = split_axis(y, axis, "softmax_backward");
  BasicTensor<T> g(y.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T dot{0};
      for (std::size_t k = 0; k < s.len; ++k) {
        dot += grad_out[base + k * s.inner] * y[base + k * s.inner];
      }
      for (std::size_t k = 0; k < s.len; ++k) {
        const std::size_t i = base + k * s.inner;
        g[i] = y[i] * (grad_out[i] - dot);
      }
    }
  }
  return g;
}

namespace {
Shape without_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}
}  // namespace

template <typename T>
BasicTensor<T> l2_norm_forward(const BasicTensor<T>& x, std::size_t axis) {
  const AxisSplit s = split_axis(x, axis, "l2_norm");
  BasicTensor<T> y(without_axis(x.shape(), axis));
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T sq{0};
      for (std::size_t k = 0; k < s.len; ++k) sq += x[base + k * s.inner] * x[base + k * s.inner];
      y[o * s.inner + in] = std::sqrt(sq);
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> l2_norm_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x,
                                const BasicTensor<T>& y, std::size_t axis) {
  const AxisSplit s = split_axis(x, axis, "l2_norm_backward");
  if (grad_out.shape() != y.shape() || y.size() != s.outer * s.inner) {
    throw ShapeError("l2_norm_backward: shape mismatch");
  }
  BasicTensor<T> g(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const T norm = y[o * s.inner + in];
      if (norm == T{0}) continue;
      const T scale = grad_out[o * s.inner + in] / norm;
      const std::size_t base = o * s.len * s.inner + in;
      for (std::size_t k = 0; k < s.len; ++k) g[base + k * s.inner] = scale * x[base + k * s.inner];
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) + ": " +
                         shape_str(p.shape()) + " vs " + shape_str(ref));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  BasicTensor<T> out(out_shape);
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  const std::size_t out_chunk = out.stride(axis) * out_shape[axis];
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.stride(axis) * p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.raw() + o * chunk, chunk, out.raw() + o * out_chunk + offset);
    }
    offset += chunk;
  }
  return out;
}

template <typename T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& t, std::size_t axis,
                                  std::span<const std::size_t> sizes) {
  const AxisSplit s = split_axis(t, axis, "split");
  std::size_t total = 0;
  for (auto v : sizes) total += v;
  if (total != s.len) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis has " +
                     std::to_string(s.len));
  }
  std::vector<BasicTensor<T>> out;
  std::size_t offset = 0;
  for (auto len : sizes) {
    Shape sh = t.shape();
    sh[axis] = len;
    BasicTensor<T> part(sh);
    const std::size_t chunk = len * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(t.raw() + o * s.len * s.inner + offset, chunk, part.raw() + o * chunk);
    }
    offset += chunk;
    out.push_back(std::move(part));
  }
  return out;
}

std::vector<std::size_t> inverse_axes(std::span<const std::size_t> axes) {
  std::vector<std::size_t> inv(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inv.at(axes[i]) = i;
  return inv;
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& t, std::span<const std::size_t> axes) {
  const std::size_t r = t.rank();
  if (axes.size() != r) throw ShapeError("permute: axis count does not match rank");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] >= r || seen[axes[i]]) throw ShapeError("permute: invalid axis permutation");
    seen[axes[i]] = true;
    out_shape[i] = t.dim(axes[i]);
  }
  BasicTensor<T> out(out_shape);
  // Source stride for each output axis.
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = t.stride(axes[i]);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  const std::size_t last = r - 1;
  const std::size_t inner_len = out_shape[last];
  const std::size_t inner_stride = src_stride[last];
  for (std::size_t dst = 0; dst < out.size(); dst += inner_len) {
    const T* sp = t.raw() + src;
    T* dp = out.raw() + dst;
    for (std::size_t k = 0; k < inner_len; ++k) dp[k] = sp[k * inner_stride];
    // advance the multi-index over all but the last axis
    for (std::int64_t a = static_cast<std::int64_t>(last) - 1; a >= 0; --a) {
      if (++idx[a] < out_shape[a]) {
        src += src_stride[a];
        break;
      }
      src -= (out_shape[a] - 1) * src_stride[a];
      idx[a] = 0;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> downsample_labels(const BasicTensor<T>& labels, std::size_t factor) {
  if (factor == 0) throw ShapeError("downsample_labels: factor must be >= 1");
  const std::size_t r = labels.rank();
  if (r < 3) throw ShapeError("downsample_labels: need at least three spatial axes");
  Shape out_shape = labels.shape();
  for (std::size_t a = r - 3; a < r; ++a) {
    if (out_shape[a] % factor != 0) {
      throw ShapeError("downsample_labels: extent " + std::to_string(out_shape[a]) +
                       " on axis " + std::to_string(a) + " not divisible by " +
                       std::to_string(factor));
    }
    out_shape[a] /= factor;
  }
  BasicTensor<T> out(out_shape);
  const std::size_t H = labels.dim(r - 3), W = labels.dim(r - 2), D = labels.dim(r - 1);
  const std::size_t h = out_shape[r - 3], w = out_shape[r - 2], d = out_shape[r - 1];
  const std::size_t lead = labels.size() / (H * W * D);
  for (std::size_t l = 0; l < lead; ++l) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        for (std::size_t k = 0; k < d; ++k) {
          out[((l * h + i) * w + j) * d + k] =
              labels[((l * H + i * factor) * W + j * factor) * D + k * factor];
        }
      }
    }
  }
  return out;
}

template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("add: shape " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

#define SSCAPS_INSTANTIATE_OPS(T)                                                            \
  template BasicTensor<T> conv3d_forward(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                         const BasicTensor<T>&, const ConvSpec&);             \
  template ConvGrads<T> conv3d_backward(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                        const BasicTensor<T>&, const ConvSpec&);              \
  template BasicTensor<T> deconv3d_forward(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                           const BasicTensor<T>&, const ConvSpec&);           \
  template ConvGrads<T> deconv3d_backward(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                          const BasicTensor<T>&, const ConvSpec&);            \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                            const BasicTensor<T>&, const BatchNormStats<T>&,  \
                                            Mode, BatchNormCache<T>*);                        \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                const BatchNormCache<T>&);                    \
  template void update_running_stats(BatchNormStats<T>&, const BatchNormCache<T>&);           \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);        \
  template BasicTensor<T> softmax_forward(const BasicTensor<T>&, std::size_t);                \
  template BasicTensor<T> softmax_backward(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                           std::size_t);                                      \
  template BasicTensor<T> l2_norm_forward(const BasicTensor<T>&, std::size_t);                \
  template BasicTensor<T> l2_norm_backward(const BasicTensor<T>&, const BasicTensor<T>&,      \
                                           const BasicTensor<T>&, std::size_t);               \
  template void add_inplace(BasicTensor<T>&, const BasicTensor<T>&);

SSCAPS_INSTANTIATE_OPS(float)
SSCAPS_INSTANTIATE_OPS(double)

#define SSCAPS_INSTANTIATE_LAYOUT(T)                                                          \
  template BasicTensor<T> concat(std::span<const BasicTensor<T>>, std::size_t);               \
  template std::vector<BasicTensor<T>> split(const BasicTensor<T>&, std::size_t,              \
                                             std::span<const std::size_t>);                   \
  template BasicTensor<T> permute(const BasicTensor<T>&, std::span<const std::size_t>);       \
  template BasicTensor<T> downsample_labels(const BasicTensor<T>&, std::size_t);

SSCAPS_INSTANTIATE_LAYOUT(float)
SSCAPS_INSTANTIATE_LAYOUT(double)
SSCAPS_INSTANTIATE_LAYOUT(std::uint8_t)

}  // namespace sscaps
