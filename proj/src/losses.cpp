#include "sscaps/losses.hpp"

#include <algorithm>
#include <cmath>

namespace sscaps {

namespace {

template <typename A, typename B>
void require_same(const BasicTensor<A>& a, const BasicTensor<B>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void check_ce(const BasicTensor<T>& logits, const LabelTensor& labels,
              std::span<const double> w) {
  if (logits.rank() < 2) throw ShapeError("weighted_cross_entropy: logits must be [N, K, ...]");
  const std::size_t K = logits.dim(1);
  Shape expect{logits.dim(0)};
  for (std::size_t a = 2; a < logits.rank(); ++a) expect.push_back(logits.dim(a));
  if (labels.shape() != expect) {
    throw ShapeError("weighted_cross_entropy: labels shape " + shape_str(labels.shape()) +
                     " does not match " + shape_str(expect));
  }
  if (w.size() != K) {
    throw ShapeError("weighted_cross_entropy: " + std::to_string(w.size()) +
                     " class weights for " + std::to_string(K) + " classes");
  }
  for (double v : w) {
    if (!(v > 0)) throw ConfigError("weighted_cross_entropy: class weights must be > 0");
  }
  for (auto l : labels.storage()) {
    if (l >= K) {
      throw ShapeError("weighted_cross_entropy: label id " + std::to_string(l) +
                       " >= class count " + std::to_string(K));
    }
  }
}

}  // namespace

template <typename T>
T margin_loss(const BasicTensor<T>& lengths, const BasicTensor<T>& onehot) {
  require_same(lengths, onehot, "margin_loss");
  double acc = 0;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const double y = lengths[i], t = onehot[i];
    const double pos = std::max(0.0, kMarginPositive - y);
    const double neg = std::max(0.0, y - kMarginNegative);
    acc += t * pos * pos + kMarginDownWeight * (1.0 - t) * neg * neg;
  }
  return static_cast<T>(acc / static_cast<double>(lengths.size()));
}

template <typename T>
BasicTensor<T> margin_loss_backward(const BasicTensor<T>& lengths, const BasicTensor<T>& onehot) {
  require_same(lengths, onehot, "margin_loss_backward");
  BasicTensor<T> g(lengths.shape());
  const T inv = T{1} / static_cast<T>(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const T y = lengths[i], t = onehot[i];
    const T pos = std::max(T{0}, static_cast<T>(kMarginPositive) - y);
    const T neg = std::max(T{0}, y - static_cast<T>(kMarginNegative));
    g[i] = inv * (-T{2} * t * pos + T{2} * static_cast<T>(kMarginDownWeight) * (T{1} - t) * neg);
  }
  return g;
}

template <typename T>
T weighted_cross_entropy(const BasicTensor<T>& logits, const LabelTensor& labels,
                         std::span<const double> class_weights) {
  check_ce(logits, labels, class_weights);
  const std::size_t N = logits.dim(0), K = logits.dim(1), V = logits.stride(1);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = logits.raw() + n * K * V;
    for (std::size_t v = 0; v < V; ++v) {
      double mx = base[v];
      for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(base[k * V + v]));
      double sum = 0;
      for (std::size_t k = 0; k < K; ++k) sum += std::exp(base[k * V + v] - mx);
      const std::size_t y = labels[n * V + v];
      const double logp = base[y * V + v] - mx - std::log(sum);
      acc += -class_weights[y] * logp;
    }
  }
  return static_cast<T>(acc / static_cast<double>(N * V));
}

template <typename T>
BasicTensor<T> weighted_cross_entropy_backward(const BasicTensor<T>& logits,
                                               const LabelTensor& labels,
                                               std::span<const double> class_weights) {
  check_ce(logits, labels, class_weights);
  const std::size_t N = logits.dim(0), K = logits.dim(1), V = logits.stride(1);
  BasicTensor<T> g(logits.shape());
  const T inv = T{1} / static_cast<T>(N * V);
  std::vector<T> p(K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* base = logits.raw() + n * K * V;
    T* gb = g.raw() + n * K * V;
    for (std::size_t v = 0; v < V; ++v) {
      T mx = base[v];
      for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, base[k * V + v]);
      T sum{0};
      for (std::size_t k = 0; k < K; ++k) {
        p[k] = std::exp(base[k * V + v] - mx);
        sum += p[k];
      }
      const std::size_t y = labels[n * V + v];
      const T w = static_cast<T>(class_weights[y]);
      for (std::size_t k = 0; k < K; ++k) {
        gb[k * V + v] = inv * w * (p[k] / sum - (k == y ? T{1} : T{0}));
      }
    }
  }
  return g;
}

template <typename T>
T masked_reconstruction_loss(const BasicTensor<T>& recon, const BasicTensor<T>& original,
                             const BasicTensor<T>& mask) {
  require_same(recon, original, "masked_reconstruction_loss");
  require_same(recon, mask, "masked_reconstruction_loss");
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    if (mask[i] != T{0}) {
      const double d = static_cast<double>(recon[i]) - original[i];
      acc += d * d;
      ++count;
    }
  }
  return count ? static_cast<T>(acc / static_cast<double>(count)) : T{0};
}

template <typename T>
BasicTensor<T> masked_reconstruction_loss_backward(const BasicTensor<T>& recon,
                                                   const BasicTensor<T>& original,
                                                   const BasicTensor<T>& mask) {
  require_same(recon, original, "masked_reconstruction_loss_backward");
  require_same(recon, mask, "masked_reconstruction_loss_backward");
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) count += mask[i] != T{0};
  BasicTensor<T> g(recon.shape());
  if (count == 0) return g;
  const T scale = T{2} / static_cast<T>(count);
  for (std::size_t i = 0; i < recon.size(); ++i) {
    if (mask[i] != T{0}) g[i] = scale * (recon[i] - original[i]);
  }
  return g;
}

template <typename T>
T pretext_loss(const BasicTensor<T>& feat_i, const BasicTensor<T>& feat_j) {
  require_same(feat_i, feat_j, "pretext_loss");
  double acc = 0;
  for (std::size_t i = 0; i < feat_i.size(); ++i) {
    const double d = static_cast<double>(feat_i[i]) - feat_j[i];
    acc += d * d;
  }
  return static_cast<T>(std::sqrt(acc));
}

template <typename T>
BasicTensor<T> pretext_loss_backward(const BasicTensor<T>& feat_i, const BasicTensor<T>& feat_j) {
  require_same(feat_i, feat_j, "pretext_loss_backward");
  const T norm = pretext_loss(feat_i, feat_j);
  BasicTensor<T> g(feat_i.shape());
  if (norm == T{0}) return g;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (feat_i[i] - feat_j[i]) / norm;
  return g;
}

template <typename T>
T pretext_loss_batch(const BasicTensor<T>& feat_i, const BasicTensor<T>& feat_j) {
  require_same(feat_i, feat_j, "pretext_loss_batch");
  const std::size_t N = feat_i.dim(0), S = feat_i.stride(0);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    double sq = 0;
    for (std::size_t k = 0; k < S; ++k) {
      const double d = static_cast<double>(feat_i[n * S + k]) - feat_j[n * S + k];
      sq += d * d;
    }
    acc += std::sqrt(sq);
  }
  return static_cast<T>(acc / static_cast<double>(N));
}

template <typename T>
BasicTensor<T> pretext_loss_batch_backward(const BasicTensor<T>& feat_i,
                                           const BasicTensor<T>& feat_j) {
  require_same(feat_i, feat_j, "pretext_loss_batch_backward");
  const std::size_t N = feat_i.dim(0), S = feat_i.stride(0);
  BasicTensor<T> g(feat_i.shape());
  for (std::size_t n = 0; n < N; ++n) {
    double sq = 0;
    for (std::size_t k = 0; k < S; ++k) {
      const double d = static_cast<double>(feat_i[n * S + k]) - feat_j[n * S + k];
      sq += d * d;
    }
    if (sq == 0) continue;
    const T scale = static_cast<T>(1.0 / (std::sqrt(sq) * static_cast<double>(N)));
    for (std::size_t k = 0; k < S; ++k) {
      g[n * S + k] = scale * (feat_i[n * S + k] - feat_j[n * S + k]);
    }
  }
  return g;
}

LossBreakdown total_downstream_loss(double margin, double cross_entropy, double reconstruction) {
  if (!std::isfinite(margin)) throw NumericError("margin loss term is not finite");
  if (!std::isfinite(cross_entropy)) throw NumericError("cross-entropy loss term is not finite");
  if (!std::isfinite(reconstruction)) {
    throw NumericError("reconstruction loss term is not finite");
  }
  return {margin, cross_entropy, reconstruction, margin + cross_entropy + reconstruction};
}

template <typename T>
BasicTensor<T> one_hot_last(const LabelTensor& labels, std::size_t classes) {
  Shape s = labels.shape();
  s.push_back(classes);
  BasicTensor<T> out(s);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw ShapeError("one_hot: label id " + std::to_string(labels[i]) + " >= " +
                       std::to_string(classes));
    }
    out[i * classes + labels[i]] = T{1};
  }
  return out;
}

#define SSCAPS_INSTANTIATE_LOSSES(T)                                                          \
  template T margin_loss(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> margin_loss_backward(const BasicTensor<T>&, const BasicTensor<T>&); \
  template T weighted_cross_entropy(const BasicTensor<T>&, const LabelTensor&,               \
                                    std::span<const double>);                                 \
  template BasicTensor<T> weighted_cross_entropy_backward(                                    \
      const BasicTensor<T>&, const LabelTensor&, std::span<const double>);                    \
  template T masked_reconstruction_loss(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                        const BasicTensor<T>&);                               \
  template BasicTensor<T> masked_reconstruction_loss_backward(                                \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template T pretext_loss(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template BasicTensor<T> pretext_loss_backward(const BasicTensor<T>&, const BasicTensor<T>&); \
  template T pretext_loss_batch(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> pretext_loss_batch_backward(const BasicTensor<T>&,                  \
                                                      const BasicTensor<T>&);                 \
  template BasicTensor<T> one_hot_last(const LabelTensor&, std::size_t);

SSCAPS_INSTANTIATE_LOSSES(float)
SSCAPS_INSTANTIATE_LOSSES(double)

}  // namespace sscaps
