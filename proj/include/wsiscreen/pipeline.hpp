#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wsiscreen/config.hpp"
#include "wsiscreen/metrics.hpp"

namespace wsiscreen::pipeline {

// Canonical artifact names inside a work dir.
namespace artifact {
inline constexpr const char* stage1_checkpoint = "stage1_classifier.prm";
inline constexpr const char* scores = "scores.csv";
inline constexpr const char* corpus = "corpus.csv";
inline constexpr const char* adapter_checkpoint = "adapter.prm";
inline constexpr const char* stage2_log = "train_log_stage2.csv";
inline constexpr const char* features_dir = "features";
inline constexpr const char* mil_checkpoint = "mil_head.prm";
inline constexpr const char* stage3_log = "train_log_stage3.csv";
inline constexpr const char* predictions = "predictions.csv";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* roc = "roc.csv";
inline constexpr const char* run_manifest = "run_manifest.csv";
}  // namespace artifact

/// Per-stage seeds derived from the global seed so stages stay independent.
struct StageSeeds {
  std::uint64_t stage1 = 0;
  std::uint64_t filter = 0;
  std::uint64_t stage2 = 0;
  std::uint64_t stage3 = 0;
};
StageSeeds derive_stage_seeds(std::uint64_t global_seed);

struct PredictionRow {
  std::string bag_id;
  double score = 0.0;
  int label = 0;
};

void write_predictions(const std::filesystem::path& path,
                       const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> read_predictions(const std::filesystem::path& path);

/// Evaluation summary: AUC, confusion metrics at a fixed threshold, and one
/// constrained operating point per requested minimum sensitivity.
struct EvalSummary {
  double auc = 0.0;
  metrics::MetricsReport at_threshold;
  std::vector<metrics::MetricsReport> constrained;  // order follows the request
};

EvalSummary evaluate_predictions(const std::vector<PredictionRow>& rows,
                                 const std::vector<double>& min_sensitivities, double threshold);
void write_metrics_csv(const std::filesystem::path& path, const EvalSummary& summary);
void write_roc_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows);

// --- standalone stage commands (each reads its inputs from disk) ---
std::filesystem::path run_synth(const std::filesystem::path& spec_path,
                                const std::filesystem::path& out_dir,
                                std::optional<std::uint64_t> seed_override);
void run_split(const std::filesystem::path& manifest_path, const std::filesystem::path& out_path,
               double train_fraction, std::uint64_t seed);
void run_train_filter(const config::PipelineConfig& cfg);
void run_score(const config::PipelineConfig& cfg);
void run_filter(const config::PipelineConfig& cfg);
void run_train_adapter(const config::PipelineConfig& cfg,
                       const std::optional<std::filesystem::path>& paired_views = {});
void run_extract(const config::PipelineConfig& cfg);
void run_train_mil(const config::PipelineConfig& cfg);
EvalSummary run_eval(const std::filesystem::path& predictions_path,
                     const std::vector<double>& min_sensitivities, double threshold,
                     const std::filesystem::path& out_metrics,
                     const std::filesystem::path& out_roc);

/// Full three-stage run: train filter classifier, build corpus, train
/// adapter, extract features, train MIL head, evaluate the test split.
/// Every artifact lands under cfg.work_dir; the run manifest records seeds,
/// a config hash and artifact checksums.
EvalSummary run_pipeline(const config::PipelineConfig& cfg);

struct SweepRow {
  std::size_t k = 0;
  double auc = 0.0;
  double spec90 = 0.0;
  double spec95 = 0.0;
};

/// One pipeline run per k (stage-1 checkpoint trained once and reused),
/// emitting CSV `k,auc,spec90,spec95`.
std::vector<SweepRow> run_sweep_k(const config::PipelineConfig& cfg,
                                  const std::vector<std::size_t>& k_values,
                                  const std::filesystem::path& out_csv);

/// Canonical serialization of the effective config; its FNV-1a hash lands in
/// the run manifest.
std::string canonical_config_string(const config::PipelineConfig& cfg);

}  // namespace wsiscreen::pipeline
