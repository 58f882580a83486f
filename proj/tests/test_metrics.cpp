#include "wsiscreen/metrics.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"

using namespace wsiscreen;
using namespace wsiscreen::metrics;

TEST_CASE("auc is 1 for perfectly separated scores and 0.5 for all ties") {
  const std::vector<double> sep = {0.9, 0.8, 0.2, 0.1};
  const std::vector<int> labels = {1, 1, 0, 0};
  CHECK(auc(sep, labels) == 1.0);

  const std::vector<double> ties = {0.4, 0.4, 0.4, 0.4};
  CHECK(auc(ties, labels) == 0.5);
}

TEST_CASE("auc matches the worked pair-counting example") {
  const std::vector<double> scores = {0.8, 0.4, 0.6, 0.2};
  const std::vector<int> labels = {1, 1, 0, 0};
  CHECK(auc(scores, labels) == 0.75);  // 3 of 4 pairs ordered correctly
}

TEST_CASE("auc rejects single-class inputs and empty lists") {
  CHECK_THROWS_AS(auc(std::vector<double>{0.5, 0.6}, std::vector<int>{1, 1}), DataError);
  CHECK_THROWS_AS(auc(std::vector<double>{}, std::vector<int>{}), DataError);
}

TEST_CASE("auc equals brute-force pair counting exactly, ties included") {
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.uniform_int(60);
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
      // Quantized scores force plenty of ties.
      scores.push_back(double(rng.uniform_int(12)) / 12.0);
      labels.push_back(rng.uniform() < 0.4 ? 1 : 0);
    }
    labels[0] = 1;
    labels[1] = 0;
    CHECK(auc(scores, labels) == testutil::auc_bruteforce(scores, labels));
  }
}

TEST_CASE("auc is invariant under strictly increasing transforms") {
  Rng rng(17);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 80; ++i) {
    scores.push_back(rng.uniform());
    labels.push_back(i % 3 == 0 ? 1 : 0);
  }
  std::vector<double> warped;
  for (double s : scores) warped.push_back(std::exp(3.0 * s) - 7.0);
  CHECK(auc(scores, labels) == auc(warped, labels));
}

TEST_CASE("roc curve starts at (0,0), ends at (1,1), and marches monotonically") {
  SUBCASE("one positive above one negative passes through (0,1)") {
    const std::vector<double> scores = {0.9, 0.1};
    const std::vector<int> labels = {1, 0};
    const auto curve = roc_curve(scores, labels);
    REQUIRE(curve.points.size() == 3);
    CHECK(curve.points.front().fpr == 0.0);
    CHECK(curve.points.front().tpr == 0.0);
    CHECK(curve.points[1].fpr == 0.0);
    CHECK(curve.points[1].tpr == 1.0);
    CHECK(curve.points.back().fpr == 1.0);
    CHECK(curve.points.back().tpr == 1.0);
  }
  SUBCASE("all ties collapse to the diagonal segment") {
    const std::vector<double> scores = {0.4, 0.4, 0.4};
    const std::vector<int> labels = {1, 0, 1};
    const auto curve = roc_curve(scores, labels);
    REQUIRE(curve.points.size() == 2);
    CHECK(curve.points.back().fpr == 1.0);
    CHECK(curve.points.back().tpr == 1.0);
    CHECK(roc_area(curve) == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("random curves are monotone and their area equals auc") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng rng(1000 + seed);
      std::vector<double> scores;
      std::vector<int> labels;
      for (int i = 0; i < 100; ++i) {
        scores.push_back(double(rng.uniform_int(25)) / 25.0);
        labels.push_back(rng.uniform() < 0.5 ? 1 : 0);
      }
      labels[0] = 1;
      labels[1] = 0;
      const auto curve = roc_curve(scores, labels);
      for (std::size_t i = 1; i < curve.points.size(); ++i) {
        CHECK(curve.points[i].fpr >= curve.points[i - 1].fpr);
        CHECK(curve.points[i].tpr >= curve.points[i - 1].tpr);
      }
      CHECK(std::abs(roc_area(curve) - auc(scores, labels)) < 1e-9);
    }
  }
}

TEST_CASE("confusion metrics at extreme thresholds") {
  const std::vector<double> scores = {0.9, 0.8, 0.3, 0.7, 0.2};
  const std::vector<int> labels = {1, 1, 1, 0, 0};

  const auto low = confusion_at_threshold(scores, labels, 0.0);
  CHECK(low.sensitivity == 1.0);
  CHECK(low.specificity == 0.0);
  CHECK_FALSE(low.precision_undefined);

  const auto high = confusion_at_threshold(scores, labels, 1.5);
  CHECK(high.sensitivity == 0.0);
  CHECK(high.specificity == 1.0);
  CHECK(high.precision == 0.0);
  CHECK(high.precision_undefined);
}

TEST_CASE("confusion metrics match a hand-counted confusion matrix") {
  // positives {0.9, 0.8, 0.3}, negatives {0.7, 0.2}
  const std::vector<double> scores = {0.9, 0.8, 0.3, 0.7, 0.2};
  const std::vector<int> labels = {1, 1, 1, 0, 0};

  SUBCASE("threshold 0.75: predicted positive = {0.9, 0.8}, both true positives") {
    const auto r = confusion_at_threshold(scores, labels, 0.75);
    CHECK(r.sensitivity == doctest::Approx(2.0 / 3.0));
    CHECK(r.specificity == doctest::Approx(1.0));  // no negative reaches 0.75
    CHECK(r.precision == doctest::Approx(1.0));
    CHECK(r.accuracy == doctest::Approx(4.0 / 5.0));
  }
  SUBCASE("threshold 0.5: the 0.7 negative becomes a false positive") {
    const auto r = confusion_at_threshold(scores, labels, 0.5);
    CHECK(r.sensitivity == doctest::Approx(2.0 / 3.0));
    CHECK(r.specificity == doctest::Approx(0.5));
    CHECK(r.precision == doctest::Approx(2.0 / 3.0));
    CHECK(r.accuracy == doctest::Approx(3.0 / 5.0));
    const double f1 = 2.0 * (2.0 / 3.0) * (2.0 / 3.0) / ((2.0 / 3.0) + (2.0 / 3.0));
    CHECK(r.f1 == doctest::Approx(f1));
  }
}

TEST_CASE("sensitivity-constrained operating point follows the enumeration oracle") {
  const std::vector<double> scores = {0.9, 0.8, 0.3, 0.7, 0.2};
  const std::vector<int> labels = {1, 1, 1, 0, 0};

  SUBCASE("s_min 0.9 forces capturing every positive") {
    const auto r = spec_at_min_sens(scores, labels, 0.9);
    CHECK(r.threshold == 0.3);
    CHECK(r.sensitivity == 1.0);
    CHECK(r.specificity == doctest::Approx(0.5));
    CHECK(r.precision == doctest::Approx(0.75));
    CHECK_FALSE(r.constraint_unmet);
  }
  SUBCASE("s_min 0.6 admits the larger threshold 0.8") {
    const auto r = spec_at_min_sens(scores, labels, 0.6);
    CHECK(r.threshold == 0.8);
    CHECK(r.sensitivity == doctest::Approx(2.0 / 3.0));
    CHECK(r.specificity == 1.0);
  }
  SUBCASE("s_min 0 picks the top score, giving specificity 1 when it is a positive") {
    const auto r = spec_at_min_sens(scores, labels, 0.0);
    CHECK(r.threshold == 0.9);
    CHECK(r.specificity == 1.0);
  }
}

TEST_CASE("specificity under the constraint is monotone in the sensitivity floor") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(2000 + seed);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 60; ++i) {
      scores.push_back(rng.uniform() + (i % 2 ? 0.3 : 0.0));
      labels.push_back(i % 2);
    }
    const auto r90 = spec_at_min_sens(scores, labels, 0.90);
    const auto r95 = spec_at_min_sens(scores, labels, 0.95);
    CHECK(r95.specificity <= r90.specificity);
  }
}
