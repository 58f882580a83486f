#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "wsiscreen/error.hpp"

namespace wsiscreen {

/// Dense row-major double matrix. All training math runs in double;
/// float32 appears only at the file-format boundary.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return v_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v_[r * cols_ + c]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }

  std::span<double> flat() { return {v_.data(), v_.size()}; }
  std::span<const double> flat() const { return {v_.data(), v_.size()}; }

  std::span<double> row(std::size_t r) { return {v_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {v_.data() + r * cols_, cols_}; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(double x) { v_.assign(v_.size(), x); }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> v_;
};

using Vec = std::vector<double>;

/// Named, shaped view over a flat parameter buffer. Optimizers consume the
/// data span; checkpoint IO consumes name and shape as well.
struct TensorView {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::span<double> data;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// C = A * B^T, A: n x k, B: m x k  ->  n x m
Mat matmul_nt(const Mat& a, const Mat& b);
// C = A^T * B, A: n x p, B: n x q  ->  p x q
Mat matmul_tn(const Mat& a, const Mat& b);
// C = A * B, A: n x k, B: k x m  ->  n x m
Mat matmul(const Mat& a, const Mat& b);

void check_shape(bool cond, const std::string& what);

}  // namespace wsiscreen
