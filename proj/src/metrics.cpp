#include "wsiscreen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "wsiscreen/error.hpp"

namespace wsiscreen::metrics {

namespace {

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts count_classes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DataError("scores/labels length mismatch");
  if (scores.empty()) throw DataError("empty score list");
  ClassCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw DataError("scores must be finite");
    labels[i] == 1 ? ++c.pos : ++c.neg;
  }
  return c;
}

void require_both_classes(const ClassCounts& c) {
  if (c.pos == 0 || c.neg == 0) throw DataError("both classes must be present");
}

std::vector<std::size_t> order_by_score_asc(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = count_classes(scores, labels);
  require_both_classes(c);
  const auto order = order_by_score_asc(scores);

  // Numerator in half-units: 2 * correctly-ordered pairs + tied pairs.
  std::uint64_t num2 = 0;
  std::uint64_t neg_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::uint64_t pos_in_group = 0, neg_in_group = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      labels[order[j]] == 1 ? ++pos_in_group : ++neg_in_group;
      ++j;
    }
    num2 += pos_in_group * (2 * neg_below + neg_in_group);
    neg_below += neg_in_group;
    i = j;
  }
  return double(num2) / (2.0 * double(c.pos) * double(c.neg));
}

RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = count_classes(scores, labels);
  require_both_classes(c);
  auto order = order_by_score_asc(scores);
  std::reverse(order.begin(), order.end());  // descending

  RocCurve curve;
  curve.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      labels[order[i]] == 1 ? ++tp : ++fp;
      ++i;
    }
    curve.points.push_back({double(fp) / double(c.neg), double(tp) / double(c.pos), t});
  }
  return curve;
}

double roc_area(const RocCurve& curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto& a = curve.points[i - 1];
    const auto& b = curve.points[i];
    area += (b.fpr - a.fpr) * (a.tpr + b.tpr) * 0.5;
  }
  return area;
}

MetricsReport confusion_at_threshold(std::span<const double> scores, std::span<const int> labels,
                                     double threshold) {
  count_classes(scores, labels);
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1)
      pred ? ++tp : ++fn;
    else
      pred ? ++fp : ++tn;
  }
  MetricsReport r;
  r.threshold = threshold;
  r.sensitivity = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
  r.specificity = tn + fp > 0 ? double(tn) / double(tn + fp) : 0.0;
  if (tp + fp > 0) {
    r.precision = double(tp) / double(tp + fp);
  } else {
    r.precision = 0.0;
    r.precision_undefined = true;
  }
  r.f1 = r.precision + r.sensitivity > 0.0
             ? 2.0 * r.precision * r.sensitivity / (r.precision + r.sensitivity)
             : 0.0;
  r.accuracy = double(tp + tn) / double(scores.size());
  return r;
}

MetricsReport spec_at_min_sens(std::span<const double> scores, std::span<const int> labels,
                               double min_sensitivity) {
  const ClassCounts c = count_classes(scores, labels);
  require_both_classes(c);
  std::vector<double> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  // Sensitivity is nondecreasing as the threshold falls, so the first
  // admissible candidate in one descending walk is the largest.
  std::size_t tp = 0;
  auto order = order_by_score_asc(scores);
  std::reverse(order.begin(), order.end());
  std::size_t k = 0;
  for (double t : thresholds) {
    while (k < order.size() && scores[order[k]] == t) {
      if (labels[order[k]] == 1) ++tp;
      ++k;
    }
    const double sens = double(tp) / double(c.pos);
    if (sens >= min_sensitivity) {
      MetricsReport r = confusion_at_threshold(scores, labels, t);
      r.min_sensitivity_constraint = min_sensitivity;
      return r;
    }
  }
  MetricsReport r =
      confusion_at_threshold(scores, labels, -std::numeric_limits<double>::infinity());
  r.min_sensitivity_constraint = min_sensitivity;
  r.constraint_unmet = true;
  return r;
}

}  // namespace wsiscreen::metrics
