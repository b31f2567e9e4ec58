#include "sscaps/capsules.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <type_traits>

namespace sscaps {

namespace {

template <typename T>
void squash_raw(const T* s, std::size_t n, T* out) {
  T sq{0};
  for (std::size_t a = 0; a < n; ++a) sq += s[a] * s[a];
  const T norm = std::sqrt(sq + static_cast<T>(kSquashEps));
  const T f = sq / ((T{1} + sq) * norm);
  for (std::size_t a = 0; a < n; ++a) out[a] = f * s[a];
}

// grad_s = f g + 2 s f'(q) (g . s), f(q) = q / ((1 + q) sqrt(q + eps)).
template <typename T>
void squash_backward_raw(const T* s, const T* g, std::size_t n, T* grad_s) {
  T q{0}, gs{0};
  for (std::size_t a = 0; a < n; ++a) {
    q += s[a] * s[a];
    gs += g[a] * s[a];
  }
  const T qe = q + static_cast<T>(kSquashEps);
  const T root = std::sqrt(qe);
  const T f = q / ((T{1} + q) * root);
  const T fprime = (qe - q * (T{1} + q) / T{2}) / ((T{1} + q) * (T{1} + q) * qe * root);
  const T k = T{2} * fprime * gs;
  for (std::size_t a = 0; a < n; ++a) grad_s[a] = f * g[a] + k * s[a];
}

// Scratch for one routing problem of I children, J parents, A dims.
template <typename T>
struct RoutingWork {
  std::vector<T> b, c, s, v;  // current round
  std::vector<T> cs, ss, vs;  // all rounds (backward only)
  std::vector<T> gb, gv, gs, gc;
};

// u: [I, J, A]. Writes v [J, A]. If `rounds` is set, stores c, s, v of every round.
template <typename T>
void route_raw(const T* u, std::size_t I, std::size_t J, std::size_t A, std::size_t R, T* v_out,
               RoutingWork<T>& w, bool keep_rounds,
               std::type_identity_t<std::vector<BasicTensor<T>>>* trace) {
  w.b.assign(I * J, T{0});
  w.c.resize(I * J);
  w.s.resize(J * A);
  w.v.resize(J * A);
  if (keep_rounds) {
    w.cs.resize(R * I * J);
    w.ss.resize(R * J * A);
    w.vs.resize(R * J * A);
  }
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t i = 0; i < I; ++i) {
      const T* bi = w.b.data() + i * J;
      T* ci = w.c.data() + i * J;
      T mx = bi[0];
      for (std::size_t j = 1; j < J; ++j) mx = std::max(mx, bi[j]);
      T sum{0};
      for (std::size_t j = 0; j < J; ++j) {
        ci[j] = std::exp(bi[j] - mx);
        sum += ci[j];
      }
      for (std::size_t j = 0; j < J; ++j) ci[j] /= sum;
    }
    if (trace) trace->emplace_back(Shape{I, J}, w.c);
    std::fill(w.s.begin(), w.s.end(), T{0});
    for (std::size_t i = 0; i < I; ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        const T cij = w.c[i * J + j];
        const T* uij = u + (i * J + j) * A;
        T* sj = w.s.data() + j * A;
        for (std::size_t a = 0; a < A; ++a) sj[a] += cij * uij[a];
      }
    }
    for (std::size_t j = 0; j < J; ++j) squash_raw(w.s.data() + j * A, A, w.v.data() + j * A);
    if (keep_rounds) {
      std::copy(w.c.begin(), w.c.end(), w.cs.begin() + r * I * J);
      std::copy(w.s.begin(), w.s.end(), w.ss.begin() + r * J * A);
      std::copy(w.v.begin(), w.v.end(), w.vs.begin() + r * J * A);
    }
    if (r + 1 < R) {
      for (std::size_t i = 0; i < I; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
          const T* uij = u + (i * J + j) * A;
          const T* vj = w.v.data() + j * A;
          T agree{0};
          for (std::size_t a = 0; a < A; ++a) agree += uij[a] * vj[a];
          w.b[i * J + j] += agree;
        }
      }
    }
  }
  std::copy(w.v.begin(), w.v.end(), v_out);
}

// Accumulates dL/du into gu given dL/dv for the final round.
template <typename T>
void route_backward_raw(const T* u, const T* gv_out, std::size_t I, std::size_t J, std::size_t A,
                        std::size_t R, T* gu, RoutingWork<T>& w) {
  std::vector<T> scratch(J * A);
  route_raw(u, I, J, A, R, scratch.data(), w, true, nullptr);
  w.gb.assign(I * J, T{0});  // dL/db_{r+1}
  w.gv.resize(J * A);
  w.gs.resize(J * A);
  w.gc.resize(I * J);
  for (std::size_t rr = R; rr-- > 0;) {
    const T* c = w.cs.data() + rr * I * J;
    const T* s = w.ss.data() + rr * J * A;
    const T* v = w.vs.data() + rr * J * A;
    if (rr + 1 == R) {
      std::copy(gv_out, gv_out + J * A, w.gv.begin());
    } else {
      // b_{r+1} = b_r + u . v_r
      std::fill(w.gv.begin(), w.gv.end(), T{0});
      for (std::size_t i = 0; i < I; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
          const T gbij = w.gb[i * J + j];
          const T* uij = u + (i * J + j) * A;
          T* guij = gu + (i * J + j) * A;
          const T* vj = v + j * A;
          T* gvj = w.gv.data() + j * A;
          for (std::size_t a = 0; a < A; ++a) {
            gvj[a] += gbij * uij[a];
            guij[a] += gbij * vj[a];
          }
        }
      }
    }
    for (std::size_t j = 0; j < J; ++j) {
      squash_backward_raw(s + j * A, w.gv.data() + j * A, A, w.gs.data() + j * A);
    }
    // s_j = sum_i c_ij u_ij
    for (std::size_t i = 0; i < I; ++i) {
      for (std::size_t j = 0; j < J; ++j) {
        const T cij = c[i * J + j];
        const T* uij = u + (i * J + j) * A;
        T* guij = gu + (i * J + j) * A;
        const T* gsj = w.gs.data() + j * A;
        T dot{0};
        for (std::size_t a = 0; a < A; ++a) {
          guij[a] += cij * gsj[a];
          dot += uij[a] * gsj[a];
        }
        w.gc[i * J + j] = dot;
      }
    }
    // c = softmax(b_r); b_r feeds b_{r+1} through the identity as well.
    for (std::size_t i = 0; i < I; ++i) {
      T dot{0};
      for (std::size_t j = 0; j < J; ++j) dot += w.gc[i * J + j] * c[i * J + j];
      for (std::size_t j = 0; j < J; ++j) {
        w.gb[i * J + j] += c[i * J + j] * (w.gc[i * J + j] - dot);
      }
    }
  }
}

template <typename T>
void check_predictions(const BasicTensor<T>& predictions, std::size_t iterations,
                       const char* what) {
  if (predictions.rank() != 3) {
    throw ShapeError(std::string(what) + ": predictions must be [children, parents, dim], got " +
                     shape_str(predictions.shape()));
  }
  if (iterations == 0) throw ConfigError(std::string(what) + ": iterations must be >= 1");
  if (!predictions.all_finite()) {
    throw NumericError(std::string(what) + ": predictions contain non-finite values");
  }
}

}  // namespace

template <typename T>
CapsuleGrid<T>::CapsuleGrid(BasicTensor<T> tensor) : tensor_(std::move(tensor)) {
  if (tensor_.rank() != 6) {
    throw ShapeError("capsule grid tensor must be [N,H,W,D,C,A], got " +
                     shape_str(tensor_.shape()));
  }
}

template <typename T>
CapsuleGrid<T> CapsuleGrid<T>::zeros(std::size_t batch, const Extent3& spatial, std::size_t types,
                                     std::size_t dim) {
  return CapsuleGrid(BasicTensor<T>({batch, spatial[0], spatial[1], spatial[2], types, dim}));
}

template <typename T>
std::vector<T> squash(std::span<const T> v) {
  std::vector<T> out(v.size());
  squash_raw(v.data(), v.size(), out.data());
  return out;
}

template <typename T>
std::vector<T> squash_backward(std::span<const T> v, std::span<const T> grad_out) {
  if (v.size() != grad_out.size()) throw ShapeError("squash_backward: length mismatch");
  std::vector<T> out(v.size());
  squash_backward_raw(v.data(), grad_out.data(), v.size(), out.data());
  return out;
}

template <typename T>
BasicTensor<T> squash_last_axis(const BasicTensor<T>& t) {
  BasicTensor<T> out(t.shape());
  const std::size_t A = t.dim(t.rank() - 1);
  for (std::size_t off = 0; off < t.size(); off += A) squash_raw(t.raw() + off, A, out.raw() + off);
  return out;
}

template <typename T>
BasicTensor<T> squash_last_axis_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& t) {
  if (grad_out.shape() != t.shape()) throw ShapeError("squash_last_axis_backward: shape mismatch");
  BasicTensor<T> out(t.shape());
  const std::size_t A = t.dim(t.rank() - 1);
  for (std::size_t off = 0; off < t.size(); off += A) {
    squash_backward_raw(t.raw() + off, grad_out.raw() + off, A, out.raw() + off);
  }
  return out;
}

template <typename T>
BasicTensor<T> dynamic_routing(const BasicTensor<T>& predictions, std::size_t iterations,
                               std::vector<BasicTensor<T>>* trace, RoutingState<T>* state) {
  check_predictions(predictions, iterations, "dynamic_routing");
  const std::size_t I = predictions.dim(0), J = predictions.dim(1), A = predictions.dim(2);
  BasicTensor<T> v({J, A});
  RoutingWork<T> w;
  route_raw(predictions.raw(), I, J, A, iterations, v.raw(), w, false, trace);
  if (state) {
    state->logits = BasicTensor<T>({I, J}, w.b);
    state->couplings = BasicTensor<T>({I, J}, w.c);
    state->iterations = iterations;
  }
  return v;
}

template <typename T>
BasicTensor<T> dynamic_routing_backward(const BasicTensor<T>& grad_out,
                                        const BasicTensor<T>& predictions,
                                        std::size_t iterations) {
  check_predictions(predictions, iterations, "dynamic_routing_backward");
  const std::size_t I = predictions.dim(0), J = predictions.dim(1), A = predictions.dim(2);
  if (grad_out.shape() != Shape{J, A}) {
    throw ShapeError("dynamic_routing_backward: grad_out must be [parents, dim]");
  }
  BasicTensor<T> gu(predictions.shape());
  RoutingWork<T> w;
  route_backward_raw(predictions.raw(), grad_out.raw(), I, J, A, iterations, gu.raw(), w);
  return gu;
}

CapsConvSpec CapsConvSpec::make(std::size_t in_types, std::size_t in_dim, std::size_t out_types,
                                std::size_t out_dim, std::size_t k, std::size_t stride,
                                std::size_t iterations) {
  CapsConvSpec s;
  s.in_types = in_types;
  s.in_dim = in_dim;
  s.out_types = out_types;
  s.out_dim = out_dim;
  s.kernel = {k, k, k};
  s.stride = {stride, stride, stride};
  const std::size_t pad = (k - 1) / 2;
  s.padding = {pad, pad, pad};
  s.routing_iterations = iterations;
  return s;
}

void CapsConvSpec::validate() const {
  if (in_types == 0 || in_dim == 0 || out_types == 0 || out_dim == 0) {
    throw ConfigError("capsule layer counts must all be >= 1");
  }
  if (routing_iterations == 0) throw ConfigError("routing_iterations must be >= 1");
  vote_conv().validate();
}

ConvSpec CapsConvSpec::vote_conv() const {
  ConvSpec c;
  c.in_channels = in_dim;
  c.out_channels = out_types * out_dim;
  c.kernel = kernel;
  c.stride = stride;
  c.dilation = {1, 1, 1};
  c.padding = padding;
  return c;
}

Shape CapsConvSpec::weight_shape() const {
  return {in_types, out_types * out_dim, in_dim, kernel[0], kernel[1], kernel[2]};
}

template <typename T>
CapsuleGrid<T> caps_conv3d_forward(const CapsuleGrid<T>& input, const BasicTensor<T>& weights,
                                   const CapsConvSpec& spec, CapsConvCache<T>* cache) {
  spec.validate();
  if (input.caps_types() != spec.in_types || input.caps_dim() != spec.in_dim) {
    throw ShapeError("caps_conv3d: input grid has C=" + std::to_string(input.caps_types()) +
                     ", A=" + std::to_string(input.caps_dim()) + " but spec expects C=" +
                     std::to_string(spec.in_types) + ", A=" + std::to_string(spec.in_dim));
  }
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("caps_conv3d: weights shape " + shape_str(weights.shape()) +
                     " does not match " + shape_str(spec.weight_shape()));
  }
  const ConvSpec vote = spec.vote_conv();
  const Extent3 in = input.spatial();
  const Extent3 out = vote.output_extents(in);
  const std::size_t N = input.batch();
  const std::size_t I = spec.in_types, J = spec.out_types, A = spec.out_dim, Ain = spec.in_dim;
  const std::size_t L_in = input.locations();
  const std::size_t L = out[0] * out[1] * out[2];
  const std::size_t JA = J * A;
  const std::size_t per_type_w = JA * Ain * vote.kernel_volume();

  BasicTensor<T> preds({N, out[0], out[1], out[2], I, J, A});
  std::vector<BasicTensor<T>> children;
  children.reserve(I);
  const BasicTensor<T>& g = input.tensor();
  for (std::size_t ci = 0; ci < I; ++ci) {
    BasicTensor<T> child({N, Ain, in[0], in[1], in[2]});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t l = 0; l < L_in; ++l) {
        const T* src = g.raw() + ((n * L_in + l) * I + ci) * Ain;
        for (std::size_t a = 0; a < Ain; ++a) child[(n * Ain + a) * L_in + l] = src[a];
      }
    }
    BasicTensor<T> w({JA, Ain, vote.kernel[0], vote.kernel[1], vote.kernel[2]},
                     std::vector<T>(weights.raw() + ci * per_type_w,
                                    weights.raw() + (ci + 1) * per_type_w));
    const BasicTensor<T> votes = conv3d_forward(child, w, BasicTensor<T>{}, vote);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < JA; ++k) {
        const T* src = votes.raw() + (n * JA + k) * L;
        for (std::size_t l = 0; l < L; ++l) preds[((n * L + l) * I + ci) * JA + k] = src[l];
      }
    }
    children.push_back(std::move(child));
  }

  auto result = CapsuleGrid<T>::zeros(N, out, J, A);
  RoutingWork<T> work;
  for (std::size_t nl = 0; nl < N * L; ++nl) {
    route_raw(preds.raw() + nl * I * JA, I, J, A, spec.routing_iterations,
              result.tensor().raw() + nl * JA, work, false, nullptr);
  }
  if (cache) {
    cache->children = std::move(children);
    cache->predictions = std::move(preds);
  }
  return result;
}

template <typename T>
CapsConvGrads<T> caps_conv3d_backward(const BasicTensor<T>& grad_out,
                                      const BasicTensor<T>& weights, const CapsConvSpec& spec,
                                      const CapsConvCache<T>& cache) {
  spec.validate();
  const BasicTensor<T>& preds = cache.predictions;
  if (preds.rank() != 7 || cache.children.size() != spec.in_types) {
    throw ShapeError("caps_conv3d_backward: cache does not match spec");
  }
  const std::size_t N = preds.dim(0);
  const Extent3 out{preds.dim(1), preds.dim(2), preds.dim(3)};
  const std::size_t I = spec.in_types, J = spec.out_types, A = spec.out_dim, Ain = spec.in_dim;
  const Shape expected{N, out[0], out[1], out[2], J, A};
  if (grad_out.shape() != expected) {
    throw ShapeError("caps_conv3d_backward: grad_out shape " + shape_str(grad_out.shape()) +
                     " does not match " + shape_str(expected));
  }
  const ConvSpec vote = spec.vote_conv();
  const std::size_t L = out[0] * out[1] * out[2];
  const std::size_t JA = J * A;
  const std::size_t per_type_w = JA * Ain * vote.kernel_volume();

  BasicTensor<T> gpreds(preds.shape());
  RoutingWork<T> work;
  for (std::size_t nl = 0; nl < N * L; ++nl) {
    route_backward_raw(preds.raw() + nl * I * JA, grad_out.raw() + nl * JA, I, J, A,
                       spec.routing_iterations, gpreds.raw() + nl * I * JA, work);
  }

  const Extent3 in{cache.children[0].dim(2), cache.children[0].dim(3), cache.children[0].dim(4)};
  const std::size_t L_in = in[0] * in[1] * in[2];
  CapsConvGrads<T> grads{BasicTensor<T>({N, in[0], in[1], in[2], I, Ain}),
                         BasicTensor<T>(weights.shape())};
  for (std::size_t ci = 0; ci < I; ++ci) {
    BasicTensor<T> gvotes({N, JA, out[0], out[1], out[2]});
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t k = 0; k < JA; ++k) {
        T* dst = gvotes.raw() + (n * JA + k) * L;
        for (std::size_t l = 0; l < L; ++l) dst[l] = gpreds[((n * L + l) * I + ci) * JA + k];
      }
    }
    BasicTensor<T> w({JA, Ain, vote.kernel[0], vote.kernel[1], vote.kernel[2]},
                     std::vector<T>(weights.raw() + ci * per_type_w,
                                    weights.raw() + (ci + 1) * per_type_w));
    const ConvGrads<T> cg = conv3d_backward(gvotes, cache.children[ci], w, vote);
    std::copy(cg.weights.raw(), cg.weights.raw() + per_type_w,
              grads.weights.raw() + ci * per_type_w);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t l = 0; l < L_in; ++l) {
        T* dst = grads.input.raw() + ((n * L_in + l) * I + ci) * Ain;
        for (std::size_t a = 0; a < Ain; ++a) dst[a] = cg.input[(n * Ain + a) * L_in + l];
      }
    }
  }
  return grads;
}

template <typename T>
BasicTensor<T> flatten_to_tensor(const CapsuleGrid<T>& grid) {
  const Shape& s = grid.tensor().shape();
  return grid.tensor().reshaped({s[0], s[1], s[2], s[3], s[4] * s[5]});
}

template <typename T>
CapsuleGrid<T> from_tensor(const BasicTensor<T>& t, std::size_t types) {
  if (t.rank() != 5) {
    throw ShapeError("from_tensor: expected [N,H,W,D,K], got " + shape_str(t.shape()));
  }
  if (types == 0 || t.dim(4) % types != 0) {
    throw ShapeError("from_tensor: channel extent " + std::to_string(t.dim(4)) +
                     " is not divisible by capsule types " + std::to_string(types));
  }
  const Shape& s = t.shape();
  return CapsuleGrid<T>(t.reshaped({s[0], s[1], s[2], s[3], types, s[4] / types}));
}

template <typename T>
CapsuleGrid<T> from_tensor(const BasicTensor<T>& t, std::size_t types, std::size_t dim) {
  if (t.rank() != 5 || t.dim(4) != types * dim) {
    throw ShapeError("from_tensor: channel extent of " + shape_str(t.shape()) + " is not C*A = " +
                     std::to_string(types) + "*" + std::to_string(dim));
  }
  return from_tensor(t, types);
}

template <typename T>
BasicTensor<T> capsule_lengths(const CapsuleGrid<T>& grid) {
  return l2_norm_forward(grid.tensor(), 5);
}

template <typename T>
BasicTensor<T> capsule_lengths_backward(const BasicTensor<T>& grad_out, const CapsuleGrid<T>& grid,
                                        const BasicTensor<T>& lengths) {
  return l2_norm_backward(grad_out, grid.tensor(), lengths, 5);
}

template <typename T>
BasicTensor<T> channels_last_to_first(const BasicTensor<T>& t) {
  static constexpr std::size_t axes[] = {0, 4, 1, 2, 3};
  return permute(t, std::span<const std::size_t>(axes));
}

template <typename T>
BasicTensor<T> channels_first_to_last(const BasicTensor<T>& t) {
  static constexpr std::size_t axes[] = {0, 2, 3, 4, 1};
  return permute(t, std::span<const std::size_t>(axes));
}

#define SSCAPS_INSTANTIATE_CAPS(T)                                                              \
  template class CapsuleGrid<T>;                                                                \
  template std::vector<T> squash(std::span<const T>);                                          \
  template std::vector<T> squash_backward(std::span<const T>, std::span<const T>);             \
  template BasicTensor<T> squash_last_axis(const BasicTensor<T>&);                              \
  template BasicTensor<T> squash_last_axis_backward(const BasicTensor<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> dynamic_routing(const BasicTensor<T>&, std::size_t,                   \
                                          std::vector<BasicTensor<T>>*, RoutingState<T>*);      \
  template BasicTensor<T> dynamic_routing_backward(const BasicTensor<T>&, const BasicTensor<T>&, \
                                                   std::size_t);                                \
  template CapsuleGrid<T> caps_conv3d_forward(const CapsuleGrid<T>&, const BasicTensor<T>&,     \
                                              const CapsConvSpec&, CapsConvCache<T>*);          \
  template CapsConvGrads<T> caps_conv3d_backward(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                                 const CapsConvSpec&, const CapsConvCache<T>&); \
  template BasicTensor<T> flatten_to_tensor(const CapsuleGrid<T>&);                             \
  template CapsuleGrid<T> from_tensor(const BasicTensor<T>&, std::size_t);                      \
  template CapsuleGrid<T> from_tensor(const BasicTensor<T>&, std::size_t, std::size_t);         \
  template BasicTensor<T> capsule_lengths(const CapsuleGrid<T>&);                               \
  template BasicTensor<T> capsule_lengths_backward(const BasicTensor<T>&, const CapsuleGrid<T>&, \
                                                   const BasicTensor<T>&);                      \
  template BasicTensor<T> channels_last_to_first(const BasicTensor<T>&);                        \
  template BasicTensor<T> channels_first_to_last(const BasicTensor<T>&);

SSCAPS_INSTANTIATE_CAPS(float)
SSCAPS_INSTANTIATE_CAPS(double)

}  // namespace sscaps
