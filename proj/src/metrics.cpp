#include "pbseg/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace pbseg {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {
  if (classes == 0) throw std::invalid_argument("ConfusionMatrix: need at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

void ConfusionMatrix::accumulate(const IndexArray& gt, const IndexArray& pred) {
  if (gt.rows != pred.rows || gt.cols != pred.cols) {
    throw std::invalid_argument("ConfusionMatrix: raster shapes differ, " + std::to_string(gt.rows) + "x" +
                                std::to_string(gt.cols) + " vs " + std::to_string(pred.rows) + "x" +
                                std::to_string(pred.cols));
  }
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::int64_t g = gt.v[i], p = pred.v[i];
    if (g < 0 || p < 0 || g >= static_cast<std::int64_t>(classes_) || p >= static_cast<std::int64_t>(classes_)) {
      throw std::out_of_range("ConfusionMatrix: class value out of range [0, " + std::to_string(classes_) + ")");
    }
    ++counts_[static_cast<std::size_t>(g) * classes_ + static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class count mismatch in merge");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("compute_metrics: empty confusion matrix");
  const std::size_t c = cm.classes();
  MetricsReport rep;
  rep.per_class_iou.assign(c, std::numeric_limits<double>::quiet_NaN());
  rep.per_class_f1.assign(c, std::numeric_limits<double>::quiet_NaN());

  std::uint64_t trace = 0;
  double iou_sum = 0.0, f1_sum = 0.0;
  std::size_t included = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t tp = cm.at(k, k), fp = 0, fn = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == k) continue;
      fn += cm.at(k, j);
      fp += cm.at(j, k);
    }
    trace += tp;
    const std::uint64_t unionc = tp + fp + fn;
    if (unionc == 0) continue;  // absent from both ground truth and prediction
    const double iou = static_cast<double>(tp) / static_cast<double>(unionc);
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    rep.per_class_iou[k] = iou;
    rep.per_class_f1[k] = f1;
    iou_sum += iou;
    f1_sum += f1;
    ++included;
  }
  rep.miou = iou_sum / static_cast<double>(included);
  rep.mf1 = f1_sum / static_cast<double>(included);
  rep.oa = static_cast<double>(trace) / static_cast<double>(total);
  return rep;
}

double percent2(double fraction) { return std::round(fraction * 10000.0) / 100.0; }

std::string metrics_json(const MetricsReport& report) {
  nlohmann::json j;
  auto percent_array = [](const std::vector<double>& vals) {
    nlohmann::json arr = nlohmann::json::array();
    for (double v : vals) {
      if (std::isnan(v)) {
        arr.push_back(nullptr);
      } else {
        arr.push_back(percent2(v));
      }
    }
    return arr;
  };
  j["per_class_iou"] = percent_array(report.per_class_iou);
  j["miou"] = percent2(report.miou);
  j["per_class_f1"] = percent_array(report.per_class_f1);
  j["mf1"] = percent2(report.mf1);
  j["oa"] = percent2(report.oa);
  return j.dump(2);
}

}  // namespace pbseg
