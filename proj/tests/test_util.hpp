#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wsiscreen/contrastive.hpp"
#include "wsiscreen/dataset.hpp"
#include "wsiscreen/mp_filter.hpp"
#include "wsiscreen/rng.hpp"

namespace testutil {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    const auto base = std::filesystem::temp_directory_path();
    path_ = base / ("wsiscreen_test_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// --- independent oracles (deliberately naive; no shared code with the
//     implementations they check) ---

/// AUC by explicit pair counting, ties worth one half. Same integer
/// numerator construction as the fast path, so equality can be exact.
inline double auc_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::uint64_t num2 = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] == 1) continue;
      if (scores[i] > scores[j]) num2 += 2;
      else if (scores[i] == scores[j]) num2 += 1;
    }
  }
  for (int l : labels) neg += l == 0 ? 1 : 0;
  return double(num2) / (2.0 * double(pos) * double(neg));
}

/// Top-k by full sort with the stable tie rule (score desc, index asc).
inline std::vector<std::uint32_t> topk_fullsort(const std::vector<double>& scores,
                                                std::size_t k) {
  std::vector<std::uint32_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(std::min(k, order.size()));
  return order;
}

/// InfoNCE by direct double loops over the definition, no log-sum-exp.
inline double infonce_double_loop(const wsiscreen::Mat& z,
                                  const std::vector<std::size_t>& pairing, double tau) {
  const std::size_t n = z.rows();
  auto sim = [&](std::size_t a, std::size_t b) {
    double uv = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t d = 0; d < z.cols(); ++d) {
      uv += z(a, d) * z(b, d);
      uu += z(a, d) * z(a, d);
      vv += z(b, d) * z(b, d);
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
  };
  double loss = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double denom = 0.0;
    for (std::size_t m = 0; m < n; ++m)
      if (m != j) denom += std::exp(sim(j, m) / tau);
    loss += -std::log(std::exp(sim(j, pairing[j]) / tau) / denom);
  }
  return loss / double(n);
}

/// True when every analytic gradient coordinate clears `floor`. Central
/// differences at eps = 1e-3 carry only ~1e-6 of absolute signal, so a
/// finite-difference comparison is meaningful only at points where the true
/// gradient is comfortably above that noise; callers resample (seeded) until
/// this holds.
inline bool gradients_above(std::span<const wsiscreen::TensorView> grads, double floor) {
  for (const auto& g : grads)
    for (double v : g.data)
      if (std::abs(v) < floor) return false;
  return true;
}

// --- data builders ---

inline wsiscreen::Mat random_mat(wsiscreen::Rng& rng, std::size_t rows, std::size_t cols,
                                 double scale = 1.0) {
  wsiscreen::Mat m(rows, cols);
  for (double& v : m.flat()) v = scale * rng.normal();
  return m;
}

inline wsiscreen::data::Bag make_bag(const std::string& id, const wsiscreen::Mat& values,
                                     int label) {
  wsiscreen::data::Bag bag;
  bag.bag_id = id;
  bag.embeddings = wsiscreen::data::from_mat(values);
  bag.label = label;
  return bag;
}

inline wsiscreen::data::SyntheticSpec small_benchmark_spec(std::uint64_t seed) {
  wsiscreen::data::SyntheticSpec spec;
  spec.n_bags = 40;
  spec.instances_min = 12;
  spec.instances_max = 18;
  spec.dim = 8;
  spec.positive_bag_fraction = 0.5;
  spec.planted_min = 2;
  spec.planted_max = 4;
  spec.separation = 3.0;
  spec.noise_sigma = 1.0;
  spec.seed = seed;
  return spec;
}

}  // namespace testutil
