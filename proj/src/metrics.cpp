#include "sscaps/metrics.hpp"

namespace sscaps {

ClassMetrics ClassMetrics::from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  ClassMetrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  const std::uint64_t pred = tp + fp;
  const std::uint64_t gt = tp + fn;
  if (pred == 0 && gt == 0) {
    m.dice = m.precision = m.recall = 1.0;
  } else if (pred == 0 || gt == 0) {
    m.dice = m.precision = m.recall = 0.0;
  } else {
    m.precision = double(tp) / double(pred);
    m.recall = double(tp) / double(gt);
    m.dice = 2.0 * double(tp) / double(pred + gt);
  }
  return m;
}

namespace {

ClassMetrics class_metrics(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("metrics: prediction " + shape_str(pred.shape()) + " and ground truth " +
                     shape_str(gt.shape()) + " differ in shape");
  }
  std::uint64_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == cls;
    const bool g = gt[i] == cls;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  return ClassMetrics::from_counts(tp, fp, fn);
}

}  // namespace

double dice_score(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls) {
  return class_metrics(pred, gt, cls).dice;
}
double precision_score(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls) {
  return class_metrics(pred, gt, cls).precision;
}
double recall_score(const LabelTensor& pred, const LabelTensor& gt, std::uint8_t cls) {
  return class_metrics(pred, gt, cls).recall;
}

ConfusionCounter::ConfusionCounter(std::size_t num_classes)
    : classes_(num_classes), tp_(num_classes), fp_(num_classes), fn_(num_classes) {}

void ConfusionCounter::add(const LabelTensor& pred, const LabelTensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ShapeError("metrics: prediction " + shape_str(pred.shape()) + " and ground truth " +
                     shape_str(gt.shape()) + " differ in shape");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::size_t p = pred[i];
    const std::size_t g = gt[i];
    if (p >= classes_ || g >= classes_) throw ShapeError("metrics: class id out of range");
    if (p == g) {
      ++tp_[p];
    } else {
      ++fp_[p];
      ++fn_[g];
    }
  }
}

Metrics ConfusionCounter::metrics() const {
  Metrics m;
  for (std::size_t k = 0; k < classes_; ++k) {
    m.per_class.push_back(ClassMetrics::from_counts(tp_[k], fp_[k], fn_[k]));
  }
  const std::size_t first = classes_ > 1 ? 1 : 0;
  for (std::size_t k = first; k < classes_; ++k) {
    m.dice += m.per_class[k].dice;
    m.precision += m.per_class[k].precision;
    m.recall += m.per_class[k].recall;
  }
  const double n = double(classes_ - first);
  m.dice /= n;
  m.precision /= n;
  m.recall /= n;
  return m;
}

Metrics compute_metrics(const LabelTensor& pred, const LabelTensor& gt, std::size_t num_classes) {
  ConfusionCounter c(num_classes);
  c.add(pred, gt);
  return c.metrics();
}

}  // namespace sscaps
