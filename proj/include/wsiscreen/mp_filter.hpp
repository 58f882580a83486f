#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wsiscreen/dataset.hpp"
#include "wsiscreen/nn.hpp"

namespace wsiscreen::filter {

/// Per-instance risk score, sigmoid probability of the instance logit.
struct ScoredPatch {
  std::string bag_id;
  std::uint32_t instance_index = 0;
  double score = 0.0;
};

enum class Strategy { mp_topk, random, all };

std::string strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

/// The flattened high-risk patch dataset feeding contrastive training.
struct FilterCorpus {
  struct Item {
    std::string bag_id;
    std::uint32_t instance_index = 0;
    double score = 0.0;     // selection score; NaN when the strategy has none
    bool has_score = false;
  };
  std::vector<Item> items;
  std::vector<std::pair<std::string, std::uint32_t>> k_used;  // per contributing bag
  double source_fraction = 1.0;
  Strategy strategy = Strategy::mp_topk;
  std::uint32_t k = 0;
  std::uint64_t seed = 0;

  void validate() const;  // no duplicate (bag, index) pairs
};

struct MpTrainConfig {
  std::size_t epochs = 200;
  double lr = 1.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  // Early stop once the relative loss improvement stays below tol.
  std::size_t patience = 10;
  double tol = 1e-7;
};

/// Full-batch training of the mean-pooling instance classifier: the bag
/// logit is the mean of instance logits, squashed once for the BCE loss.
nn::LinearParams train_mp_classifier(const std::vector<data::Bag>& train_bags,
                                     const MpTrainConfig& config);

std::vector<ScoredPatch> score_patches(const nn::LinearParams& params, const data::Bag& bag);

/// Bag probability as used at training time: sigmoid of the mean logit.
double bag_score(const nn::LinearParams& params, const data::Bag& bag);
/// Probability-pooled variant: arithmetic mean of instance probabilities.
double bag_score_prob_pooled(const nn::LinearParams& params, const data::Bag& bag);

/// Indices of the k highest scores, ties broken by lower instance index;
/// result ordered by descending score then ascending index.
std::vector<std::uint32_t> select_topk(const std::vector<ScoredPatch>& scores, std::size_t k);

/// min(k, bag_size) distinct indices, uniform without replacement.
std::vector<std::uint32_t> select_random(std::size_t bag_size, std::size_t k, std::uint64_t seed);

/// Builds the contrastive-training corpus from a per-class fraction of the
/// train split. Test-split bags are never touched.
FilterCorpus build_filter_corpus(const data::DatasetManifest& manifest,
                                 const nn::LinearParams* params, std::size_t k, Strategy strategy,
                                 double source_fraction, std::uint64_t seed);

void write_corpus(const std::filesystem::path& path, const FilterCorpus& corpus);
FilterCorpus read_corpus(const std::filesystem::path& path);

}  // namespace wsiscreen::filter
