#pragma once

// Confusion-matrix accumulation and the evaluation metrics: per-class IoU,
// mIoU, per-class F1, mF1 and overall accuracy. A class absent from both
// ground truth and prediction has an undefined IoU (0/0) and is excluded
// from the means; reports carry percentages rounded to two decimals.

#include <cstdint>
#include <string>
#include <vector>

#include "pbseg/data.hpp"

namespace pbseg {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }
  std::uint64_t total() const;

  void accumulate(const IndexArray& gt, const IndexArray& pred);
  void merge(const ConfusionMatrix& other);

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;  // row = ground truth, column = prediction
};

struct MetricsReport {
  std::vector<double> per_class_iou;  // fractions; NaN for excluded classes
  std::vector<double> per_class_f1;
  double miou = 0.0;
  double mf1 = 0.0;
  double oa = 0.0;
};

MetricsReport compute_metrics(const ConfusionMatrix& cm);

// {"per_class_iou": [...], "miou": x, "per_class_f1": [...], "mf1": x, "oa": x}
// as percentages with two decimals; excluded classes serialize as null
std::string metrics_json(const MetricsReport& report);

double percent2(double fraction);  // fraction -> percentage rounded to 2 decimals

}  // namespace pbseg
