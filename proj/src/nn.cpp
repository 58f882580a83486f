#include "wsiscreen/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "wsiscreen/error.hpp"

namespace wsiscreen::nn {

LinearParams LinearParams::zeros(std::size_t d_out, std::size_t d_in) {
  LinearParams p;
  p.weight = Mat(d_out, d_in);
  p.bias.assign(d_out, 0.0);
  return p;
}

LinearParams LinearParams::init(Rng& rng, std::size_t d_out, std::size_t d_in) {
  LinearParams p = zeros(d_out, d_in);
  const double bound = 1.0 / std::sqrt(double(d_in));
  for (double& w : p.weight.flat()) w = rng.uniform(-bound, bound);
  for (double& b : p.bias) b = rng.uniform(-bound, bound);
  return p;
}

void LinearParams::validate() const {
  if (bias.size() != weight.rows()) throw DataError("linear params: bias/weight shape mismatch");
  for (double w : weight.flat())
    if (!std::isfinite(w)) throw NumericError("linear params: non-finite weight");
  for (double b : bias)
    if (!std::isfinite(b)) throw NumericError("linear params: non-finite bias");
}

std::vector<TensorView> LinearParams::views(const std::string& prefix) {
  return {
      {prefix + "weight", weight.rows(), weight.cols(), weight.flat()},
      {prefix + "bias", 1, bias.size(), {bias.data(), bias.size()}},
  };
}

Mat linear_forward(const LinearParams& p, const Mat& x) {
  check_shape(x.cols() == p.d_in(), "linear_forward input dim");
  Mat y = matmul_nt(x, p.weight);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += p.bias[j];
  return y;
}

void linear_backward(const LinearParams& p, const Mat& x, const Mat& d_out, LinearParams& grad,
                     Mat* d_x) {
  check_shape(d_out.rows() == x.rows() && d_out.cols() == p.d_out(), "linear_backward shapes");
  const Mat dw = matmul_tn(d_out, x);  // d_out^T x -> (d_out x d_in)
  for (std::size_t i = 0; i < dw.size(); ++i) grad.weight.data()[i] += dw.data()[i];
  for (std::size_t i = 0; i < d_out.rows(); ++i)
    for (std::size_t j = 0; j < d_out.cols(); ++j) grad.bias[j] += d_out(i, j);
  if (d_x) *d_x = matmul(d_out, p.weight);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Mat sigmoid(const Mat& x) {
  Mat y = x;
  for (double& v : y.flat()) v = sigmoid(v);
  return y;
}

Mat tanh_mat(const Mat& x) {
  Mat y = x;
  for (double& v : y.flat()) v = std::tanh(v);
  return y;
}

Mat relu(const Mat& x) {
  Mat y = x;
  for (double& v : y.flat()) v = v > 0.0 ? v : 0.0;
  return y;
}

Vec softmax(std::span<const double> x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  Vec y(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (double& v : y) v /= sum;
  return y;
}

Mat softmax_rows(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const Vec r = softmax(x.row(i));
    std::copy(r.begin(), r.end(), y.row(i).begin());
  }
  return y;
}

Mat sigmoid_backward(const Mat& y, const Mat& d_y) {
  Mat dx = d_y;
  for (std::size_t i = 0; i < dx.size(); ++i)
    dx.data()[i] *= y.data()[i] * (1.0 - y.data()[i]);
  return dx;
}

Mat tanh_backward(const Mat& y, const Mat& d_y) {
  Mat dx = d_y;
  for (std::size_t i = 0; i < dx.size(); ++i)
    dx.data()[i] *= 1.0 - y.data()[i] * y.data()[i];
  return dx;
}

Mat relu_backward(const Mat& y, const Mat& d_y) {
  Mat dx = d_y;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (y.data()[i] <= 0.0) dx.data()[i] = 0.0;
  return dx;
}

Vec softmax_backward(std::span<const double> y, std::span<const double> d_y) {
  double inner = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) inner += y[i] * d_y[i];
  Vec dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (d_y[i] - inner);
  return dx;
}

BceResult bce_loss(double y_hat, int y) {
  constexpr double eps = 1e-7;
  if (y != 0 && y != 1) throw DataError("bce_loss: label must be 0 or 1");
  const double p = std::clamp(y_hat, eps, 1.0 - eps);
  const double loss = -(y * std::log(p) + (1 - y) * std::log(1.0 - p));
  const double grad = (p - double(y)) / (p * (1.0 - p));
  return {loss, grad};
}

double cosine_anneal(double lr0, std::size_t step, std::size_t total, double lr_min) {
  if (total < 1) throw ConfigError("cosine_anneal: total steps must be >= 1");
  if (step > total) throw ConfigError("cosine_anneal: step beyond schedule end");
  const double c = std::cos(std::numbers::pi * double(step) / double(total));
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + c);
}

namespace {
void check_step_shapes(std::span<TensorView> params, std::span<const TensorView> grads) {
  check_shape(params.size() == grads.size(), "optimizer tensor count");
  for (std::size_t i = 0; i < params.size(); ++i)
    check_shape(params[i].data.size() == grads[i].data.size(), "optimizer tensor " +
                                                                   params[i].name);
}
}  // namespace

void SgdMomentum::step(std::span<TensorView> params, std::span<const TensorView> grads) {
  check_step_shapes(params, grads);
  if (velocity_.empty())
    for (const auto& p : params) velocity_.emplace_back(p.data.size(), 0.0);
  check_shape(velocity_.size() == params.size(), "sgd state tensor count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = velocity_[i];
    auto theta = params[i].data;
    const auto g = grads[i].data;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = momentum * v[k] + (g[k] + weight_decay * theta[k]);
      theta[k] -= lr * v[k];
    }
  }
}

void Adam::step(std::span<TensorView> params, std::span<const TensorView> grads) {
  check_step_shapes(params, grads);
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.data.size(), 0.0);
      v_.emplace_back(p.data.size(), 0.0);
    }
  }
  check_shape(m_.size() == params.size(), "adam state tensor count");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, double(t_));
  const double bc2 = 1.0 - std::pow(beta2, double(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].data;
    const auto g = grads[i].data;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = g[k] + weight_decay * theta[k];
      m_[i][k] = beta1 * m_[i][k] + (1.0 - beta1) * gk;
      v_[i][k] = beta2 * v_[i][k] + (1.0 - beta2) * gk * gk;
      const double mhat = m_[i][k] / bc1;
      const double vhat = v_[i][k] / bc2;
      theta[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

GradCheckReport grad_check(const std::function<double()>& loss, std::span<TensorView> params,
                           std::span<const TensorView> analytic, double eps) {
  check_shape(params.size() == analytic.size(), "grad_check tensor count");
  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].data;
    const auto ga = analytic[i].data;
    check_shape(data.size() == ga.size(), "grad_check tensor " + params[i].name);
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double saved = data[k];
      data[k] = saved + eps;
      const double f_plus = loss();
      data[k] = saved - eps;
      const double f_minus = loss();
      data[k] = saved;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
        throw NumericError("grad_check: non-finite loss at perturbed point");
      const double gn = (f_plus - f_minus) / (2.0 * eps);
      const double rel =
          std::abs(ga[k] - gn) / std::max({std::abs(ga[k]), std::abs(gn), 1e-8});
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_tensor = params[i].name;
        report.worst_index = k;
      }
    }
  }
  return report;
}

}  // namespace wsiscreen::nn
