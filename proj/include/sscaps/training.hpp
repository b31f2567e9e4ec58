#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sscaps/data.hpp"
#include "sscaps/losses.hpp"
#include "sscaps/metrics.hpp"
#include "sscaps/network.hpp"
#include "sscaps/ssl.hpp"

namespace sscaps {

struct LossToggles {
  bool margin = true;
  bool cross_entropy = true;
  bool reconstruction = true;

  bool any() const { return margin || cross_entropy || reconstruction; }
};

/// Downstream optimization settings. Iteration budgets are given at full
/// scale and multiplied by `scale` (0.01 turns 50,000 into 500).
struct TrainConfig {
  double learning_rate = 1e-4;
  double decay_factor = 0.05;
  std::uint64_t plateau_patience_iters = 50'000;
  std::uint64_t early_stop_iters = 250'000;
  double scale = 1.0;
  Extent3 patch{64, 64, 64};
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  LossToggles losses;
  /// Validation every this many (scaled) iterations; 0 picks patience / 5.
  std::uint64_t eval_every = 0;
  /// Per-class cross-entropy weights; empty means inverse class frequency
  /// of the training volumes.
  std::vector<double> class_weights;
  /// Abort threshold on the total loss.
  double divergence_limit = 1e6;

  std::uint64_t patience() const;
  std::uint64_t max_iters() const;
  std::uint64_t eval_interval() const;
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// One evaluation: loss is the mean training loss since the previous row.
struct MetricsRow {
  std::uint64_t step = 0;
  std::string split;
  double loss = 0;
  double lr = 0;
  Metrics metrics;

  nlohmann::json to_json() const;
};

struct TrainResult {
  NetworkParams<float> best_params;
  double best_val_dice = -1;
  std::uint64_t best_step = 0;
  std::uint64_t iterations = 0;
  std::uint64_t skipped_steps = 0;
  std::vector<MetricsRow> history;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, std::vector<MetricsRow> history)
      : NumericError(what), history_(std::move(history)) {}
  const std::vector<MetricsRow>& history() const { return history_; }

 private:
  std::vector<MetricsRow> history_;
};

/// w_k = total / (K * count_k); classes absent from the data get weight 1.
std::vector<double> inverse_frequency_weights(const std::vector<LabeledVolume>& volumes,
                                              std::size_t num_classes);

/// One forward/backward pass on a batch ([N, C, p, p, p] images with
/// [N, p, p, p] labels). Gradients are left in `params` (zeroed first) and
/// batch-norm running statistics are updated.
LossBreakdown downstream_step(const Network<float>& net, NetworkParams<float>& params,
                              const Tensor& images, const LabelTensor& labels,
                              const std::vector<double>& class_weights,
                              const LossToggles& toggles);

/// Sliding-window inference (eval mode, 50% overlap, logits averaged).
Tensor predict_logits(const Network<float>& net, const NetworkParams<float>& params,
                      const Tensor& image, const Extent3& patch);
LabelTensor predict_labels(const Network<float>& net, const NetworkParams<float>& params,
                           const Tensor& image, const Extent3& patch);

/// Pooled metrics over every volume.
Metrics evaluate(const Network<float>& net, const NetworkParams<float>& params,
                 const std::vector<LabeledVolume>& volumes, const Extent3& patch);

/// Adam with plateau decay on random training patches, validating every
/// eval_interval() iterations and keeping the best validation checkpoint.
/// With no validation volumes the training volumes are scored instead.
TrainResult train_downstream(const Network<float>& net, NetworkParams<float> params,
                             const std::vector<LabeledVolume>& train,
                             const std::vector<LabeledVolume>& val, const TrainConfig& config,
                             const std::function<void(const MetricsRow&)>& on_row = {});

struct FoldPlan {
  std::size_t k = 0;
  std::map<std::string, std::size_t> assignments;

  std::vector<std::string> test_ids(std::size_t fold) const;
  std::vector<std::string> train_ids(std::size_t fold) const;
};

/// Shuffles ids with `seed` and deals them round-robin into k folds.
FoldPlan kfold_split(const std::vector<std::string>& ids, std::size_t k, std::uint64_t seed);

/// Holds out round(fraction * n) ids (at least 1 when n >= 2) for validation.
std::pair<std::vector<std::string>, std::vector<std::string>> train_val_split(
    const std::vector<std::string>& ids, double val_fraction, std::uint64_t seed);

/// One configuration of the ablation grid.
struct AblationRow {
  std::string name;
  std::string description;
  bool reduce_first_caps = false;
  bool use_stem = true;
  bool pretext = true;
  LossToggles losses;
};

/// In table order: caps4, no_stem, no_margin, no_recon, no_pretext, full.
std::vector<AblationRow> table4_rows();
/// with_pretext and without_pretext.
std::vector<AblationRow> table5_rows();

struct AblationConfig {
  TrainConfig train;
  PretrainConfig pretrain;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t folds = 4;
  /// Run only the first `max_folds` folds of each split (0 = all).
  std::size_t max_folds = 0;
  double val_fraction = 0.2;
  /// Architecture before row modifiers (in/out channel counts are taken
  /// from the dataset).
  bool micro = true;

  void validate() const;
  nlohmann::json to_json() const;
  static AblationConfig from_json(const nlohmann::json& j);
};

struct AblationResult {
  std::string row;
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  Metrics test;
  double best_val_dice = 0;
  std::uint64_t iterations = 0;
  /// Last pretext batch of the split, for rows that use pretraining.
  double pretext_variance = 0;
  bool pretext_collapsed = false;

  nlohmann::json to_json() const;
};

/// Per-row means over every (seed, fold) result, in row order.
struct AblationSummary {
  std::string row;
  std::size_t runs = 0;
  double dice = 0;
  double precision = 0;
  double recall = 0;
};

ArchSpec row_arch(const AblationRow& row, const Dataset& ds, bool micro);

/// For each seed and fold, every row starts from the same initial
/// parameters and sees the same patches, so rows are paired.
std::vector<AblationResult> run_ablation(
    const Dataset& ds, const std::vector<AblationRow>& rows, const AblationConfig& config,
    const std::function<void(const AblationResult&)>& on_result = {},
    const std::function<void(std::uint64_t seed, std::size_t fold, const PretextBatchRecord&)>&
        on_pretext = {});

std::vector<AblationSummary> summarize(const std::vector<AblationResult>& results,
                                       const std::vector<AblationRow>& rows);

/// Tab-separated: row, runs, dice, precision, recall (4 decimals).
std::string summary_tsv(const std::vector<AblationSummary>& s);
/// Tab-separated, one line per (row, seed, fold).
std::string results_tsv(const std::vector<AblationResult>& r);

}  // namespace sscaps
