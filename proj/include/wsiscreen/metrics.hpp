#pragma once

#include <optional>
#include <span>
#include <vector>

namespace wsiscreen::metrics {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // nondecreasing, endpoints (0,0) and (1,1)
};

struct MetricsReport {
  std::optional<double> auc;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
  double threshold = 0.0;
  std::optional<double> min_sensitivity_constraint;
  bool precision_undefined = false;  // no positive predictions; precision reported as 0
  bool constraint_unmet = false;     // no threshold reached the sensitivity floor
};

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counted one half. O(n log n); equals brute-force pair
/// counting exactly (both compute the same integer numerator).
double auc(std::span<const double> scores, std::span<const int> labels);

/// One point per distinct score (predict positive iff score >= threshold),
/// prefixed with (0,0) at threshold +infinity.
RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels);

double roc_area(const RocCurve& curve);  // trapezoidal

MetricsReport confusion_at_threshold(std::span<const double> scores, std::span<const int> labels,
                                     double threshold);

/// Largest threshold whose sensitivity meets the floor; confusion metrics
/// reported at it. Candidates are the distinct observed scores.
MetricsReport spec_at_min_sens(std::span<const double> scores, std::span<const int> labels,
                               double min_sensitivity);

}  // namespace wsiscreen::metrics
