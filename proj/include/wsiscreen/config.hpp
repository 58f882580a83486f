#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wsiscreen/contrastive.hpp"
#include "wsiscreen/dataset.hpp"
#include "wsiscreen/mil.hpp"
#include "wsiscreen/mp_filter.hpp"

namespace wsiscreen::config {

/// Strict `key = value` file: full-line # comments, one assignment per line.
/// Every key must be consumed by a getter; leftovers are reported with their
/// line numbers (typo guard).
class KeyValueFile {
 public:
  static KeyValueFile parse_file(const std::filesystem::path& path);
  static KeyValueFile parse_string(const std::string& text, const std::string& origin);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key);
  std::string get_string(const std::string& key, const std::string& fallback);
  double get_double(const std::string& key);
  double get_double(const std::string& key, double fallback);
  std::int64_t get_int(const std::string& key);
  std::int64_t get_int(const std::string& key, std::int64_t fallback);
  std::uint64_t get_uint64(const std::string& key);
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback);
  std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback);

  /// Throws ConfigError if any parsed key was never consumed.
  void reject_unknown_keys() const;
  const std::string& origin() const { return origin_; }

 private:
  struct Entry {
    std::string value;
    std::size_t line = 0;
  };
  std::string origin_;
  std::vector<std::pair<std::string, Entry>> entries_;
  std::set<std::string> consumed_;

  const Entry* find(const std::string& key) const;
  std::string require(const std::string& key);
};

struct Stage1Config {
  std::size_t epochs = 200;
  double lr = 1.0;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct FilterConfig {
  filter::Strategy strategy = filter::Strategy::mp_topk;
  std::size_t k = 50;
  double source_fraction = 0.8;
};

struct Stage3Config {
  mil::HeadKind head = mil::HeadKind::gated_attention;
  std::size_t epochs = 50;
  double lr = 2e-4;
  double weight_decay = 1e-5;
  std::size_t attention_hidden = 128;
};

struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path work_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  Stage1Config stage1;
  FilterConfig filter;
  contrastive::ContrastiveConfig stage2;  // seed filled per stage at run time
  Stage3Config stage3;
  std::vector<double> min_sensitivities = {0.90, 0.95};
  double eval_threshold = 0.5;
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);

struct SynthesisRequest {
  data::SyntheticSpec spec;
  double train_fraction = 0.7;
};

SynthesisRequest load_synthetic_spec(const std::filesystem::path& path);

}  // namespace wsiscreen::config
