#include "wsiscreen/mat.hpp"

namespace wsiscreen {

void check_shape(bool cond, const std::string& what) {
  if (!cond) throw DataError("shape mismatch: " + what);
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  check_shape(a.cols() == b.cols(), "matmul_nt inner dims");
  Mat c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * a.cols();
    double* ci = c.data() + i * c.cols();
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* bj = b.data() + j * b.cols();
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
      ci[j] = s;
    }
  }
  return c;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  check_shape(a.rows() == b.rows(), "matmul_tn inner dims");
  Mat c(a.cols(), b.cols());
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const double* an = a.data() + n * a.cols();
    const double* bn = b.data() + n * b.cols();
    for (std::size_t p = 0; p < a.cols(); ++p) {
      double* cp = c.data() + p * c.cols();
      const double apn = an[p];
      if (apn == 0.0) continue;
      for (std::size_t q = 0; q < b.cols(); ++q) cp[q] += apn * bn[q];
    }
  }
  return c;
}

Mat matmul(const Mat& a, const Mat& b) {
  check_shape(a.cols() == b.rows(), "matmul inner dims");
  Mat c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* ai = a.data() + i * a.cols();
    double* ci = c.data() + i * c.cols();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b.data() + k * b.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

}  // namespace wsiscreen
