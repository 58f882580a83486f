#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "wsiscreen/dataset.hpp"
#include "wsiscreen/nn.hpp"

namespace wsiscreen::mil {

/// Gated-attention pooling parameters: e_i = w^T(tanh(V z_i) * sigmoid(U z_i)),
/// attention = softmax(e), bag embedding = sum a_i z_i, then a linear
/// classifier on the bag embedding.
struct AttentionParams {
  Mat v;             // L x D
  Mat u;             // L x D
  Vec w;             // L
  nn::LinearParams classifier;  // 1 x D

  static AttentionParams init(Rng& rng, std::size_t hidden, std::size_t dim);
  static AttentionParams zeros(std::size_t hidden, std::size_t dim);
  std::size_t dim() const { return v.cols(); }
  std::size_t hidden() const { return v.rows(); }
  void validate() const;
  std::vector<TensorView> views();
};

enum class HeadKind { mean_pool, max_pool, gated_attention };

std::string head_kind_name(HeadKind k);
HeadKind parse_head_kind(const std::string& s);

struct MilHead {
  HeadKind kind = HeadKind::mean_pool;
  std::variant<nn::LinearParams, AttentionParams> params;

  std::size_t dim() const;
  std::vector<TensorView> views();
  void save(const std::filesystem::path& path);
};

MilHead load_mil_head(const std::filesystem::path& path);

struct Prediction {
  double probability = 0.0;
  std::optional<Vec> attention;  // gated attention only
};

double mean_pool_forward(const nn::LinearParams& classifier, const Mat& z);
double max_pool_forward(const nn::LinearParams& classifier, const Mat& z);

struct GatedAttentionOutput {
  double probability = 0.0;
  Vec attention;
};
GatedAttentionOutput gated_attention_forward(const AttentionParams& params, const Mat& z);

/// BCE loss of one bag plus parameter gradients, shared by training and the
/// finite-difference suites. Feature gradients are not needed (inputs are
/// frozen embeddings) and are not computed.
double mean_pool_loss_grad(const nn::LinearParams& classifier, const Mat& z, int label,
                           nn::LinearParams& grad);
double max_pool_loss_grad(const nn::LinearParams& classifier, const Mat& z, int label,
                          nn::LinearParams& grad);
double gated_attention_loss_grad(const AttentionParams& params, const Mat& z, int label,
                                 AttentionParams& grad);

Prediction predict(const MilHead& head, const Mat& z);
Prediction predict(const MilHead& head, const data::Bag& bag);

struct MilTrainConfig {
  HeadKind kind = HeadKind::gated_attention;
  std::size_t epochs = 50;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t attention_hidden = 128;
  double lr_min = 0.0;
  std::uint64_t seed = 0;
};

struct MilEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct MilTrainResult {
  MilHead head;  // best-train-loss checkpoint
  std::vector<MilEpochLog> log;
};

/// Adam, one optimizer step per bag, bag order reshuffled per epoch, learning
/// rate cosine-annealed per epoch. Keeps the epoch checkpoint with the best
/// mean training loss.
MilTrainResult train_mil(const std::vector<data::Bag>& train_bags, const MilTrainConfig& config);

}  // namespace wsiscreen::mil
