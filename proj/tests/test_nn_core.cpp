#include "wsiscreen/nn.hpp"

#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "wsiscreen/checkpoint.hpp"
#include "wsiscreen/io_util.hpp"

using namespace wsiscreen;
using namespace wsiscreen::nn;

TEST_CASE("linear forward with identity weights is the identity") {
  LinearParams p = LinearParams::zeros(3, 3);
  p.weight = Mat::identity(3);
  Rng rng(0);
  const Mat x = testutil::random_mat(rng, 4, 3);
  const Mat y = linear_forward(p, x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("linear forward with zero weights broadcasts the bias") {
  LinearParams p = LinearParams::zeros(2, 3);
  p.bias = {1.5, -2.0};
  Rng rng(1);
  const Mat y = linear_forward(p, testutil::random_mat(rng, 5, 3));
  for (std::size_t i = 0; i < y.rows(); ++i) {
    CHECK(y(i, 0) == 1.5);
    CHECK(y(i, 1) == -2.0);
  }
}

TEST_CASE("linear forward matches a naive triple-loop oracle") {
  Rng rng(2);
  LinearParams p = LinearParams::init(rng, 2, 4);
  const Mat x = testutil::random_mat(rng, 3, 4);
  const Mat y = linear_forward(p, x);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double expect = p.bias[j];
      for (std::size_t k = 0; k < 4; ++k) expect += x(i, k) * p.weight(j, k);
      CHECK(y(i, j) == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  CHECK_THROWS_AS(linear_forward(p, testutil::random_mat(rng, 3, 5)), DataError);
}

TEST_CASE("activations match their defining values") {
  Mat x(1, 1, 0.0);
  CHECK(sigmoid(x)(0, 0) == doctest::Approx(0.5));

  Mat row(1, 4, 3.25);
  const Mat sm = softmax_rows(row);
  for (std::size_t j = 0; j < 4; ++j) CHECK(sm(0, j) == doctest::Approx(0.25));

  Mat big(1, 2);
  big(0, 0) = 25.0;
  big(0, 1) = -25.0;
  const Mat t = tanh_mat(big);
  CHECK(t(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(t(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));

  Mat r(1, 3);
  r(0, 0) = -1.0;
  r(0, 1) = 0.0;
  r(0, 2) = 2.0;
  const Mat rr = relu(r);
  CHECK(rr(0, 0) == 0.0);
  CHECK(rr(0, 1) == 0.0);
  CHECK(rr(0, 2) == 2.0);
}

TEST_CASE("softmax rows sum to one on random inputs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Mat x = testutil::random_mat(rng, 3, 7, 4.0);
    const Mat y = softmax_rows(x);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) {
        sum += y(i, j);
        CHECK(y(i, j) >= 0.0);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("bce loss matches analytic values and stays nonnegative") {
  CHECK(bce_loss(0.5, 1).loss == doctest::Approx(std::log(2.0)));
  CHECK(bce_loss(1.0 - 1e-7, 1).loss == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(bce_loss(0.73, 0).loss == doctest::Approx(-std::log(0.27)));
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const double p = rng.uniform();
    CHECK(bce_loss(p, 0).loss >= 0.0);
    CHECK(bce_loss(p, 1).loss >= 0.0);
  }
  CHECK_THROWS_AS(bce_loss(0.5, 2), DataError);
}

namespace {

std::vector<TensorView> single_view(Vec& theta) {
  return {{"theta", 1, theta.size(), {theta.data(), theta.size()}}};
}

}  // namespace

TEST_CASE("sgd momentum leaves parameters alone when nothing pushes them") {
  Vec theta = {1.0, -2.0};
  Vec grad = {0.0, 0.0};
  SgdMomentum opt(0.5, 0.9, 0.0);
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  opt.step(pv, gv);
  CHECK(theta[0] == 1.0);
  CHECK(theta[1] == -2.0);
}

TEST_CASE("sgd without momentum or decay is plain gradient descent") {
  Vec theta = {1.0};
  Vec grad = {0.5};
  SgdMomentum opt(0.1, 0.0, 0.0);
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  opt.step(pv, gv);
  CHECK(theta[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-12));
}

TEST_CASE("two sgd momentum steps match the hand-unrolled recurrence") {
  Vec theta = {1.0};
  Vec grad = {0.5};
  SgdMomentum opt(0.1, 0.9, 0.0);
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  opt.step(pv, gv);
  opt.step(pv, gv);
  // v1 = g; t1 = t0 - lr v1; v2 = mu v1 + g; t2 = t1 - lr v2
  const double v1 = 0.5;
  const double t1 = 1.0 - 0.1 * v1;
  const double v2 = 0.9 * v1 + 0.5;
  const double t2 = t1 - 0.1 * v2;
  CHECK(theta[0] == doctest::Approx(t2).epsilon(1e-9));
}

TEST_CASE("sgd weight decay enters the velocity like a gradient term") {
  Vec theta = {2.0};
  Vec grad = {0.0};
  SgdMomentum opt(0.1, 0.0, 0.01);
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  opt.step(pv, gv);
  CHECK(theta[0] == doctest::Approx(2.0 - 0.1 * (0.01 * 2.0)).epsilon(1e-12));
}

TEST_CASE("adam is a no-op on zero gradients without decay") {
  Vec theta = {3.0, -1.0};
  Vec grad = {0.0, 0.0};
  Adam opt;
  opt.lr = 0.1;
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  opt.step(pv, gv);
  CHECK(theta[0] == 3.0);
  CHECK(theta[1] == -1.0);
}

TEST_CASE("adam's first step moves each coordinate by about the learning rate") {
  Vec theta = {1.0, 2.0};
  Vec grad = {0.5, -0.25};
  Adam opt;
  opt.lr = 1e-3;
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  opt.step(pv, gv);
  CHECK(std::abs(theta[0] - 1.0) == doctest::Approx(1e-3).epsilon(1e-3));
  CHECK(std::abs(theta[1] - 2.0) == doctest::Approx(1e-3).epsilon(1e-3));
  CHECK(theta[0] < 1.0);  // moves against the gradient
  CHECK(theta[1] > 2.0);
}

TEST_CASE("three adam steps match an independently coded reference recurrence") {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.001;
  const Vec grads = {0.4, -0.3, 0.2};

  Vec theta = {1.0};
  Adam opt;
  opt.lr = lr;
  opt.weight_decay = wd;
  auto pv = single_view(theta);
  for (double g : grads) {
    Vec grad = {g};
    const auto gv = single_view(grad);
    opt.step(pv, gv);
  }

  // Reference recurrence, written out directly.
  double ref = 1.0, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1] + wd * ref;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mhat = m / (1 - std::pow(b1, double(t)));
    const double vhat = v / (1 - std::pow(b2, double(t)));
    ref -= lr * mhat / (std::sqrt(vhat) + eps);
  }
  CHECK(theta[0] == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("optimizer steps are deterministic functions of their inputs") {
  auto run = [] {
    Vec theta = {0.3, -0.7, 1.1};
    SgdMomentum opt(0.05, 0.9, 1e-4);
    auto pv = single_view(theta);
    for (int i = 0; i < 5; ++i) {
      Vec grad = {0.1 * i, -0.2, 0.05 * i};
      const auto gv = single_view(grad);
      opt.step(pv, gv);
    }
    return theta;
  };
  CHECK(run() == run());
}

TEST_CASE("cosine annealing hits its endpoints and midpoint") {
  CHECK(cosine_anneal(0.6, 0, 100) == doctest::Approx(0.6));
  CHECK(cosine_anneal(0.6, 100, 100) == doctest::Approx(0.0));
  CHECK(cosine_anneal(0.6, 50, 100) == doctest::Approx(0.3));
  CHECK(cosine_anneal(0.6, 50, 100, 0.1) == doctest::Approx(0.35));
  CHECK_THROWS_AS(cosine_anneal(0.6, 101, 100), ConfigError);
  CHECK_THROWS_AS(cosine_anneal(0.6, 0, 0), ConfigError);
}

TEST_CASE("gradient check is near-exact on a quadratic") {
  Vec theta = {0.5, -1.5, 2.0};
  Vec grad = theta;  // d/dtheta of 0.5*|theta|^2
  auto pv = single_view(theta);
  const auto gv = single_view(grad);
  const auto report = grad_check(
      [&] {
        double s = 0.0;
        for (double t : theta) s += 0.5 * t * t;
        return s;
      },
      pv, gv, 1e-3);
  CHECK(report.max_rel_error < 1e-8);
}

TEST_CASE("bce of a sigmoid-linear model passes the finite-difference check") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    LinearParams p = LinearParams::init(rng, 1, 5);
    const Mat x = testutil::random_mat(rng, 1, 5);
    const int label = seed % 2 == 0 ? 1 : 0;

    LinearParams grad = LinearParams::zeros(1, 5);
    {
      const Mat logits = linear_forward(p, x);
      const Mat probs = sigmoid(logits);
      const auto bce = bce_loss(probs(0, 0), label);
      Mat d_prob(1, 1, bce.d_y_hat);
      const Mat d_logit = sigmoid_backward(probs, d_prob);
      linear_backward(p, x, d_logit, grad);
    }
    auto pv = p.views();
    const auto gv = grad.views();
    const auto report = grad_check(
        [&] {
          const Mat probs = sigmoid(linear_forward(p, x));
          return bce_loss(probs(0, 0), label).loss;
        },
        pv, gv, 1e-3);
    CHECK(report.max_rel_error < 1e-4);
  }
}

TEST_CASE("activation backward passes agree with finite differences through a scalar loss") {
  // Loss = sum(c .* act(x W^T + b)) exercised per activation.
  enum class Kind { sigmoid_k, tanh_k, softmax_k };
  for (Kind kind : {Kind::sigmoid_k, Kind::tanh_k, Kind::softmax_k}) {
    for (std::uint64_t seed = 0; seed < 7; ++seed) {
      Rng rng(100 + seed);
      LinearParams p = LinearParams::init(rng, 4, 3);
      const Mat x = testutil::random_mat(rng, 2, 3);
      const Mat c = testutil::random_mat(rng, 2, 4);

      auto forward_act = [&](const Mat& z) {
        switch (kind) {
          case Kind::sigmoid_k: return sigmoid(z);
          case Kind::tanh_k: return tanh_mat(z);
          default: return softmax_rows(z);
        }
      };
      auto loss_fn = [&] {
        const Mat y = forward_act(linear_forward(p, x));
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += c.data()[i] * y.data()[i];
        return s;
      };

      LinearParams grad = LinearParams::zeros(4, 3);
      {
        const Mat z = linear_forward(p, x);
        const Mat y = forward_act(z);
        Mat dz;
        switch (kind) {
          case Kind::sigmoid_k: dz = sigmoid_backward(y, c); break;
          case Kind::tanh_k: dz = tanh_backward(y, c); break;
          default: {
            dz = Mat(y.rows(), y.cols());
            for (std::size_t i = 0; i < y.rows(); ++i) {
              const Vec row = softmax_backward(y.row(i), c.row(i));
              std::copy(row.begin(), row.end(), dz.row(i).begin());
            }
          }
        }
        linear_backward(p, x, dz, grad);
      }
      auto pv = p.views();
      const auto gv = grad.views();
      CHECK(grad_check(loss_fn, pv, gv, 1e-3).max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("checkpoints round-trip parameter views through float32") {
  testutil::TempDir tmp;
  Rng rng(7);
  LinearParams p = LinearParams::init(rng, 3, 4);
  const auto path = tmp.path() / "params.prm";
  save_views(path, p.views());

  LinearParams q = LinearParams::zeros(3, 4);
  load_views(path, q.views());
  for (std::size_t i = 0; i < p.weight.size(); ++i)
    CHECK(q.weight.data()[i] == double(float(p.weight.data()[i])));
  for (std::size_t i = 0; i < p.bias.size(); ++i)
    CHECK(q.bias[i] == double(float(p.bias[i])));

  SUBCASE("missing tensors are reported") {
    LinearParams wrong = LinearParams::zeros(3, 4);
    auto views = wrong.views("other.");
    CHECK_THROWS_WITH_AS(load_views(path, views), doctest::Contains("missing"), DataError);
  }
  SUBCASE("shape mismatches are reported") {
    LinearParams wrong = LinearParams::zeros(4, 3);
    auto views = wrong.views();
    CHECK_THROWS_WITH_AS(load_views(path, views), doctest::Contains("shape"), DataError);
  }
  SUBCASE("bad magic is reported") {
    write_text_file(path, "nope");
    CHECK_THROWS_AS(read_checkpoint(path), DataError);
  }
}
