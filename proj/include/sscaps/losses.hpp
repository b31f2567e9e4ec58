#pragma once

#include <span>
#include <string>

#include "sscaps/tensor.hpp"

namespace sscaps {

inline constexpr double kMarginPositive = 0.9;
inline constexpr double kMarginNegative = 0.1;
inline constexpr double kMarginDownWeight = 0.5;

/// Mean over all entries of
///   y* max(0, 0.9 - y)^2 + 0.5 (1 - y*) max(0, y - 0.1)^2.
template <typename T>
T margin_loss(const BasicTensor<T>& lengths, const BasicTensor<T>& onehot);
template <typename T>
BasicTensor<T> margin_loss_backward(const BasicTensor<T>& lengths, const BasicTensor<T>& onehot);

/// Softmax cross-entropy over the class axis (axis 1 of [N, K, ...]) with
/// per-class weights, averaged over voxels: mean_v w[y_v] * -log p_v[y_v].
/// labels are [N, ...] matching the non-class axes of logits.
template <typename T>
T weighted_cross_entropy(const BasicTensor<T>& logits, const LabelTensor& labels,
                         std::span<const double> class_weights);
template <typename T>
BasicTensor<T> weighted_cross_entropy_backward(const BasicTensor<T>& logits,
                                               const LabelTensor& labels,
                                               std::span<const double> class_weights);

/// Mean squared error over entries where mask == 1; 0 for an empty mask.
template <typename T>
T masked_reconstruction_loss(const BasicTensor<T>& recon, const BasicTensor<T>& original,
                             const BasicTensor<T>& mask);
template <typename T>
BasicTensor<T> masked_reconstruction_loss_backward(const BasicTensor<T>& recon,
                                                   const BasicTensor<T>& original,
                                                   const BasicTensor<T>& mask);

/// ||a - b||_2 over all entries.
template <typename T>
T pretext_loss(const BasicTensor<T>& feat_i, const BasicTensor<T>& feat_j);
/// d/d feat_i; the gradient w.r.t. feat_j is its negation. Zero when a == b.
template <typename T>
BasicTensor<T> pretext_loss_backward(const BasicTensor<T>& feat_i, const BasicTensor<T>& feat_j);

/// Per-sample norm over axis 0 of [N, ...], averaged over the batch.
template <typename T>
T pretext_loss_batch(const BasicTensor<T>& feat_i, const BasicTensor<T>& feat_j);
template <typename T>
BasicTensor<T> pretext_loss_batch_backward(const BasicTensor<T>& feat_i,
                                           const BasicTensor<T>& feat_j);

struct LossBreakdown {
  double margin = 0;
  double cross_entropy = 0;
  double reconstruction = 0;
  double total = 0;
};

/// Unweighted sum of the three downstream terms. Throws NumericError naming
/// the first non-finite term.
LossBreakdown total_downstream_loss(double margin, double cross_entropy, double reconstruction);

/// One-hot encoding along a new trailing axis: [..] -> [.., classes].
template <typename T>
BasicTensor<T> one_hot_last(const LabelTensor& labels, std::size_t classes);

}  // namespace sscaps
