#include "wsiscreen/mil.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "wsiscreen/checkpoint.hpp"

namespace wsiscreen::mil {

namespace fs = std::filesystem;

AttentionParams AttentionParams::zeros(std::size_t hidden, std::size_t dim) {
  AttentionParams p;
  p.v = Mat(hidden, dim);
  p.u = Mat(hidden, dim);
  p.w.assign(hidden, 0.0);
  p.classifier = nn::LinearParams::zeros(1, dim);
  return p;
}

AttentionParams AttentionParams::init(Rng& rng, std::size_t hidden, std::size_t dim) {
  AttentionParams p = zeros(hidden, dim);
  const double bd = 1.0 / std::sqrt(double(dim));
  const double bl = 1.0 / std::sqrt(double(hidden));
  for (double& x : p.v.flat()) x = rng.uniform(-bd, bd);
  for (double& x : p.u.flat()) x = rng.uniform(-bd, bd);
  for (double& x : p.w) x = rng.uniform(-bl, bl);
  p.classifier = nn::LinearParams::init(rng, 1, dim);
  return p;
}

void AttentionParams::validate() const {
  if (!v.same_shape(u) || w.size() != v.rows())
    throw DataError("attention params: inconsistent hidden width");
  if (classifier.d_in() != v.cols() || classifier.d_out() != 1)
    throw DataError("attention params: classifier shape mismatch");
}

std::vector<TensorView> AttentionParams::views() {
  std::vector<TensorView> out = {
      {"attention.V", v.rows(), v.cols(), v.flat()},
      {"attention.U", u.rows(), u.cols(), u.flat()},
      {"attention.w", 1, w.size(), {w.data(), w.size()}},
  };
  auto c = classifier.views("classifier.");
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

std::string head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::mean_pool: return "mean_pool";
    case HeadKind::max_pool: return "max_pool";
    case HeadKind::gated_attention: return "gated_attention";
  }
  throw ConfigError("unknown head kind enum value");
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "mean_pool") return HeadKind::mean_pool;
  if (s == "max_pool") return HeadKind::max_pool;
  if (s == "gated_attention") return HeadKind::gated_attention;
  throw ConfigError("unknown MIL head kind: '" + s + "'");
}

std::size_t MilHead::dim() const {
  if (const auto* lin = std::get_if<nn::LinearParams>(&params)) return lin->d_in();
  return std::get<AttentionParams>(params).dim();
}

std::vector<TensorView> MilHead::views() {
  if (auto* lin = std::get_if<nn::LinearParams>(&params)) return lin->views("classifier.");
  return std::get<AttentionParams>(params).views();
}

void MilHead::save(const fs::path& path) {
  auto tensor_views = views();
  std::vector<nn::NamedTensor> tensors;
  for (const auto& v : tensor_views) tensors.push_back(nn::to_named_tensor(v));
  nn::NamedTensor tag;
  tag.name = "meta.head_kind";
  tag.rows = tag.cols = 1;
  tag.values = {float(static_cast<int>(kind))};
  tensors.push_back(std::move(tag));
  nn::write_checkpoint(path, std::move(tensors));
}

MilHead load_mil_head(const fs::path& path) {
  const auto tensors = nn::read_checkpoint(path);
  auto find = [&](const std::string& name) -> const nn::NamedTensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  };
  const auto* tag = find("meta.head_kind");
  if (!tag || tag->values.size() != 1)
    throw DataError("MIL head checkpoint missing head-kind tag: " + path.string());
  MilHead head;
  head.kind = static_cast<HeadKind>(static_cast<int>(tag->values[0]));
  if (head.kind != HeadKind::mean_pool && head.kind != HeadKind::max_pool &&
      head.kind != HeadKind::gated_attention)
    throw DataError("MIL head checkpoint has invalid head-kind tag: " + path.string());

  auto load_linear = [&](const std::string& prefix) {
    const auto* w = find(prefix + "weight");
    const auto* b = find(prefix + "bias");
    if (!w || !b) throw DataError("MIL head checkpoint missing " + prefix + " tensors");
    nn::LinearParams p = nn::LinearParams::zeros(w->rows, w->cols);
    for (std::size_t i = 0; i < w->values.size(); ++i) p.weight.data()[i] = w->values[i];
    for (std::size_t i = 0; i < b->values.size() && i < p.bias.size(); ++i)
      p.bias[i] = b->values[i];
    return p;
  };

  if (head.kind == HeadKind::gated_attention) {
    const auto* tv = find("attention.V");
    const auto* tu = find("attention.U");
    const auto* tw = find("attention.w");
    if (!tv || !tu || !tw)
      throw DataError("MIL head checkpoint missing attention tensors: " + path.string());
    AttentionParams p = AttentionParams::zeros(tv->rows, tv->cols);
    for (std::size_t i = 0; i < tv->values.size(); ++i) p.v.data()[i] = tv->values[i];
    for (std::size_t i = 0; i < tu->values.size(); ++i) p.u.data()[i] = tu->values[i];
    for (std::size_t i = 0; i < tw->values.size() && i < p.w.size(); ++i) p.w[i] = tw->values[i];
    p.classifier = load_linear("classifier.");
    p.validate();
    head.params = std::move(p);
  } else {
    head.params = load_linear("classifier.");
  }
  return head;
}

namespace {

void check_bag(const Mat& z) {
  if (z.rows() < 1) throw DataError("MIL head: empty bag");
}

Vec column_mean(const Mat& z) {
  Vec m(z.cols(), 0.0);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t d = 0; d < z.cols(); ++d) m[d] += z(i, d);
  for (double& x : m) x /= double(z.rows());
  return m;
}

Vec column_max(const Mat& z) {
  Vec m(z.row(0).begin(), z.row(0).end());
  for (std::size_t i = 1; i < z.rows(); ++i)
    for (std::size_t d = 0; d < z.cols(); ++d) m[d] = std::max(m[d], z(i, d));
  return m;
}

double classify_vector(const nn::LinearParams& classifier, const Vec& x) {
  check_shape(classifier.d_in() == x.size() && classifier.d_out() == 1,
              "MIL classifier dims");
  double logit = classifier.bias[0];
  for (std::size_t d = 0; d < x.size(); ++d) logit += classifier.weight(0, d) * x[d];
  return nn::sigmoid(logit);
}

/// dL/dlogit for BCE on a sigmoid probability, via the module backwards.
double loss_and_dlogit(double probability, int label, double* loss) {
  const auto bce = nn::bce_loss(probability, label);
  *loss = bce.loss;
  return bce.d_y_hat * probability * (1.0 - probability);
}

void pooled_loss_grad(const nn::LinearParams& classifier, const Vec& pooled, int label,
                      nn::LinearParams& grad, double* loss_out) {
  const double p = classify_vector(classifier, pooled);
  double loss;
  const double dlogit = loss_and_dlogit(p, label, &loss);
  for (std::size_t d = 0; d < pooled.size(); ++d) grad.weight(0, d) += dlogit * pooled[d];
  grad.bias[0] += dlogit;
  *loss_out = loss;
}

}  // namespace

double mean_pool_forward(const nn::LinearParams& classifier, const Mat& z) {
  check_bag(z);
  return classify_vector(classifier, column_mean(z));
}

double max_pool_forward(const nn::LinearParams& classifier, const Mat& z) {
  check_bag(z);
  return classify_vector(classifier, column_max(z));
}

GatedAttentionOutput gated_attention_forward(const AttentionParams& params, const Mat& z) {
  check_bag(z);
  params.validate();
  check_shape(params.dim() == z.cols(), "gated attention input dim");
  const Mat tv = nn::tanh_mat(matmul_nt(z, params.v));    // n x L
  const Mat su = nn::sigmoid(matmul_nt(z, params.u));     // n x L
  Vec e(z.rows(), 0.0);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t l = 0; l < params.hidden(); ++l)
      e[i] += params.w[l] * tv(i, l) * su(i, l);
  const Vec a = nn::softmax(e);
  Vec bag(z.cols(), 0.0);
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t d = 0; d < z.cols(); ++d) bag[d] += a[i] * z(i, d);
  GatedAttentionOutput out;
  out.probability = classify_vector(params.classifier, bag);
  out.attention = a;
  return out;
}

double mean_pool_loss_grad(const nn::LinearParams& classifier, const Mat& z, int label,
                           nn::LinearParams& grad) {
  check_bag(z);
  double loss;
  pooled_loss_grad(classifier, column_mean(z), label, grad, &loss);
  return loss;
}

double max_pool_loss_grad(const nn::LinearParams& classifier, const Mat& z, int label,
                          nn::LinearParams& grad) {
  check_bag(z);
  double loss;
  pooled_loss_grad(classifier, column_max(z), label, grad, &loss);
  return loss;
}

double gated_attention_loss_grad(const AttentionParams& params, const Mat& z, int label,
                                 AttentionParams& grad) {
  check_bag(z);
  params.validate();
  check_shape(params.dim() == z.cols(), "gated attention input dim");
  const std::size_t n = z.rows(), hidden = params.hidden(), dim = z.cols();

  const Mat tv = nn::tanh_mat(matmul_nt(z, params.v));
  const Mat su = nn::sigmoid(matmul_nt(z, params.u));
  Vec e(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t l = 0; l < hidden; ++l) e[i] += params.w[l] * tv(i, l) * su(i, l);
  const Vec a = nn::softmax(e);
  Vec bag(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) bag[d] += a[i] * z(i, d);
  const double p = classify_vector(params.classifier, bag);

  double loss;
  const double dlogit = loss_and_dlogit(p, label, &loss);

  // Classifier and bag-embedding gradients.
  Vec d_bag(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    grad.classifier.weight(0, d) += dlogit * bag[d];
    d_bag[d] = dlogit * params.classifier.weight(0, d);
  }
  grad.classifier.bias[0] += dlogit;

  // Through the attention-weighted sum and the softmax.
  Vec d_a(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dim; ++d) d_a[i] += d_bag[d] * z(i, d);
  const Vec d_e = nn::softmax_backward(a, d_a);

  // Through the gating.
  Mat d_pre_v(n, hidden), d_pre_u(n, hidden);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < hidden; ++l) {
      grad.w[l] += d_e[i] * tv(i, l) * su(i, l);
      const double d_tv = d_e[i] * params.w[l] * su(i, l);
      const double d_su = d_e[i] * params.w[l] * tv(i, l);
      d_pre_v(i, l) = d_tv * (1.0 - tv(i, l) * tv(i, l));
      d_pre_u(i, l) = d_su * su(i, l) * (1.0 - su(i, l));
    }
  }
  const Mat dv = matmul_tn(d_pre_v, z);
  const Mat du = matmul_tn(d_pre_u, z);
  for (std::size_t i = 0; i < dv.size(); ++i) grad.v.data()[i] += dv.data()[i];
  for (std::size_t i = 0; i < du.size(); ++i) grad.u.data()[i] += du.data()[i];
  return loss;
}

Prediction predict(const MilHead& head, const Mat& z) {
  check_bag(z);
  Prediction out;
  switch (head.kind) {
    case HeadKind::mean_pool:
      out.probability = mean_pool_forward(std::get<nn::LinearParams>(head.params), z);
      break;
    case HeadKind::max_pool:
      out.probability = max_pool_forward(std::get<nn::LinearParams>(head.params), z);
      break;
    case HeadKind::gated_attention: {
      auto r = gated_attention_forward(std::get<AttentionParams>(head.params), z);
      out.probability = r.probability;
      out.attention = std::move(r.attention);
      break;
    }
  }
  return out;
}

Prediction predict(const MilHead& head, const data::Bag& bag) {
  return predict(head, bag.embeddings.to_mat());
}

MilTrainResult train_mil(const std::vector<data::Bag>& train_bags, const MilTrainConfig& config) {
  if (train_bags.empty()) throw ConfigError("MIL training needs at least one bag");
  const std::size_t dim = train_bags.front().embeddings.cols;
  bool has_pos = false, has_neg = false;
  for (const auto& b : train_bags) {
    if (b.embeddings.cols != dim) throw DataError("inconsistent embedding dims across bags");
    (b.label == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw ConfigError("MIL training set must contain both classes");

  Rng rng(config.seed);
  MilTrainResult result;
  result.head.kind = config.kind;
  if (config.kind == HeadKind::gated_attention)
    result.head.params = AttentionParams::init(rng, config.attention_hidden, dim);
  else
    result.head.params = nn::LinearParams::init(rng, 1, dim);

  std::vector<Mat> features;
  features.reserve(train_bags.size());
  for (const auto& b : train_bags) features.push_back(b.embeddings.to_mat());

  nn::Adam opt;
  opt.lr = config.lr;
  opt.weight_decay = config.weight_decay;

  MilHead best = result.head;
  double best_loss = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(train_bags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr_now = nn::cosine_anneal(config.lr, epoch - 1, config.epochs, config.lr_min);
    opt.lr = lr_now;
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      double loss = 0.0;
      if (config.kind == HeadKind::gated_attention) {
        auto& p = std::get<AttentionParams>(result.head.params);
        AttentionParams grad = AttentionParams::zeros(p.hidden(), dim);
        loss = gated_attention_loss_grad(p, features[idx], train_bags[idx].label, grad);
        auto pv = p.views();
        const auto gv = grad.views();
        opt.step(pv, gv);
      } else {
        auto& p = std::get<nn::LinearParams>(result.head.params);
        nn::LinearParams grad = nn::LinearParams::zeros(1, dim);
        loss = config.kind == HeadKind::mean_pool
                   ? mean_pool_loss_grad(p, features[idx], train_bags[idx].label, grad)
                   : max_pool_loss_grad(p, features[idx], train_bags[idx].label, grad);
        auto pv = p.views("classifier.");
        const auto gv = grad.views("classifier.");
        opt.step(pv, gv);
      }
      if (!std::isfinite(loss)) throw NumericError("MIL training loss is non-finite");
      loss_sum += loss;
    }
    const double mean_loss = loss_sum / double(train_bags.size());
    result.log.push_back({epoch, mean_loss, lr_now});
    if (mean_loss < best_loss) {
      best_loss = mean_loss;
      best = result.head;
    }
  }
  result.head = best;
  return result;
}

}  // namespace wsiscreen::mil
