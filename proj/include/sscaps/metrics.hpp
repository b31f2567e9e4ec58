#pragma once

#include <cstdint>
#include <vector>

#include "sscaps/tensor.hpp"

namespace sscaps {

struct ClassMetrics {
  double dice = 0;
  double precision = 0;
  double recall = 0;
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  /// From voxel counts. If the class is absent from both masks all three
  /// scores are 1; if it is absent from exactly one they are 0.
  static ClassMetrics from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn);
};

/// Per-class scores plus their macro average over the foreground classes
/// (1..K-1; with K = 2 that is the single foreground class).
struct Metrics {
  std::vector<ClassMetrics> per_class;
  double dice = 0;
  double precision = 0;
  double recall = 0;
};

double dice_score(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls);
double precision_score(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls);
double recall_score(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls);

/// Voxel counts pooled over any number of volumes, so that every reported
/// per-class triple satisfies dice = 2pr / (p + r) exactly.
class ConfusionCounter {
 public:
  explicit ConfusionCounter(std::size_t num_classes);
  void add(const LabelTensor& pred, const LabelTensor& gt);
  Metrics metrics() const;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> tp_, fp_, fn_;
};

Metrics compute_metrics(const LabelTensor& pred, const LabelTensor& gt, std::size_t num_classes);

}  // namespace sscaps
