#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wsiscreen/mat.hpp"
#include "wsiscreen/rng.hpp"

namespace wsiscreen::nn {

/// Affine map y = x W^T + b with weight D_out x D_in.
struct LinearParams {
  Mat weight;
  Vec bias;

  static LinearParams zeros(std::size_t d_out, std::size_t d_in);
  /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weight and bias.
  static LinearParams init(Rng& rng, std::size_t d_out, std::size_t d_in);

  std::size_t d_out() const { return weight.rows(); }
  std::size_t d_in() const { return weight.cols(); }
  void validate() const;
  std::vector<TensorView> views(const std::string& prefix = "");
};

Mat linear_forward(const LinearParams& p, const Mat& x);  // n x d_in -> n x d_out

/// Accumulates parameter gradients into `grad` and, when d_x is non-null,
/// writes the input gradient.
void linear_backward(const LinearParams& p, const Mat& x, const Mat& d_out, LinearParams& grad,
                     Mat* d_x = nullptr);

double sigmoid(double x);
Mat sigmoid(const Mat& x);
Mat tanh_mat(const Mat& x);
Mat relu(const Mat& x);
Mat softmax_rows(const Mat& x);
Vec softmax(std::span<const double> x);

// Backward passes take the forward *output* y and upstream gradient d_y.
Mat sigmoid_backward(const Mat& y, const Mat& d_y);
Mat tanh_backward(const Mat& y, const Mat& d_y);
Mat relu_backward(const Mat& y, const Mat& d_y);
Vec softmax_backward(std::span<const double> y, std::span<const double> d_y);

struct BceResult {
  double loss;
  double d_y_hat;
};

/// Standard binary cross-entropy -(y log p + (1-y) log(1-p)) with the
/// prediction clamped into [eps, 1-eps], eps = 1e-7.
BceResult bce_loss(double y_hat, int y);

/// lr_min + 0.5 * (lr0 - lr_min) * (1 + cos(pi t / T)).
double cosine_anneal(double lr0, std::size_t step, std::size_t total, double lr_min = 0.0);

/// Classical (non-Nesterov) momentum with coupled L2:
///   v <- mu v + (g + wd * theta);  theta <- theta - lr * v
struct SgdMomentum {
  double lr = 0.0;
  double momentum = 0.0;
  double weight_decay = 0.0;

  SgdMomentum() = default;
  SgdMomentum(double lr_, double momentum_, double weight_decay_)
      : lr(lr_), momentum(momentum_), weight_decay(weight_decay_) {}

  void step(std::span<TensorView> params, std::span<const TensorView> grads);

 private:
  std::vector<Vec> velocity_;
};

/// Adam with bias correction; weight decay added to the gradient before the
/// moment updates (coupled L2).
struct Adam {
  double lr = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void step(std::span<TensorView> params, std::span<const TensorView> grads);

 private:
  std::uint64_t t_ = 0;
  std::vector<Vec> m_, v_;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
};

/// Central finite differences per coordinate of every tensor in `params`,
/// compared against the matching `analytic` spans. `loss` is re-evaluated at
/// perturbed points, so it must read the parameters through the same views.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<TensorView> params,
                           std::span<const TensorView> analytic, double eps = 1e-3);

}  // namespace wsiscreen::nn
