#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wsiscreen/dataset.hpp"
#include "wsiscreen/mp_filter.hpp"
#include "wsiscreen/nn.hpp"

namespace wsiscreen::contrastive {

/// The trainable square affine map appended after the frozen encoder.
struct AdapterParams {
  nn::LinearParams map;  // D -> D

  static AdapterParams identity(std::size_t dim);
  std::size_t dim() const { return map.d_in(); }
  void validate() const;
  std::vector<TensorView> views() { return map.views("adapter."); }
};

/// Two-layer projection head with a rectifier, used only during stage-2
/// training and discarded for feature extraction.
struct ProjectionParams {
  nn::LinearParams hidden;  // D -> D_h
  nn::LinearParams output;  // D_h -> D'

  static ProjectionParams init(Rng& rng, std::size_t dim, std::size_t hidden_dim,
                               std::size_t out_dim);
  void validate() const;
  std::vector<TensorView> views();
};

/// Two stochastic embedding-space views of one corpus item.
struct ViewPair {
  Vec view_a;
  Vec view_b;
  std::string bag_id;
  std::uint32_t instance_index = 0;
};

struct AugmentConfig {
  double noise_sigma = 0.05;  // relative to the input RMS
  double dropout_rate = 0.1;
  double scale_min = 0.8;
  double scale_max = 1.2;
};

struct ContrastiveConfig {
  double temperature = 0.5;
  std::size_t batch_size = 1024;
  double lr = 0.6;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  std::size_t epochs = 100;
  AugmentConfig aug;
  std::size_t projection_hidden = 0;  // 0 = same as embedding dim
  std::size_t projection_dim = 128;
  double lr_min = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per view: additive Gaussian noise at noise_sigma * RMS(x), coordinate
/// dropout, then a global scale drawn uniformly from the scale range.
ViewPair augment_views(std::span<const double> embedding, const AugmentConfig& config, Rng& rng);

double cosine_sim(std::span<const double> u, std::span<const double> v);

struct InfoNceResult {
  double loss = 0.0;
  Mat d_projections;             // gradient wrt each projection row
  double positive_pair_mean_sim = 0.0;
};

/// Normalized-temperature cross-entropy over 2M projections. `pairing` must
/// be a fixed-point-free involution mapping each sample to its counterpart.
InfoNceResult info_nce_loss(const Mat& projections, const std::vector<std::size_t>& pairing,
                            double temperature);

/// Forward G(adapter(view)) for a whole batch plus analytic gradients of the
/// InfoNCE loss for every trainable block. Shared by training and the
/// gradient-check suites.
double contrastive_batch_loss(const AdapterParams& adapter, ProjectionParams& projection,
                              const Mat& views, const std::vector<std::size_t>& pairing,
                              double temperature, AdapterParams& adapter_grad,
                              ProjectionParams& projection_grad, double* positive_pair_mean_sim);

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double positive_pair_mean_sim = 0.0;
};

struct AdapterTrainResult {
  AdapterParams adapter;
  ProjectionParams projection;
  std::vector<EpochLog> log;  // first row is the pre-training evaluation
};

/// Stage-2 training over the filter corpus: each batch of M embeddings is
/// expanded to 2M augmented views; SGD with momentum and per-epoch cosine
/// annealing updates the adapter and projection head only.
AdapterTrainResult train_adapter(const filter::FilterCorpus& corpus,
                                 const data::DatasetManifest& manifest,
                                 const ContrastiveConfig& config);

/// Same optimization on externally produced paired views (no augmentation).
AdapterTrainResult train_adapter_on_views(const std::vector<ViewPair>& pairs,
                                          const ContrastiveConfig& config);

/// Paired-views CSV: `bag_id,instance_index,view_a_path,view_b_path,row`,
/// each path an embedding file, `row` the instance row within both files.
std::vector<ViewPair> read_paired_views(const std::filesystem::path& csv_path);

/// Maps every instance row of every bag through the frozen adapter and
/// writes adapted embedding files plus a derived manifest (manifest.csv in
/// out_dir). Bags are independent; `threads` caps the workers.
data::DatasetManifest extract_features(const AdapterParams& adapter,
                                       const data::DatasetManifest& manifest,
                                       const std::filesystem::path& out_dir, int threads = 1);

void save_adapter_checkpoint(const std::filesystem::path& path, AdapterParams& adapter,
                             ProjectionParams& projection);
void load_adapter_checkpoint(const std::filesystem::path& path, AdapterParams& adapter,
                             ProjectionParams* projection);
/// Reads just the adapter block, inferring its dimension from the file.
AdapterParams load_adapter(const std::filesystem::path& path);

}  // namespace wsiscreen::contrastive
