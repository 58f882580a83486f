#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsiscreen/error.hpp"
#include "wsiscreen/mat.hpp"

namespace wsiscreen::data {

/// Frozen-encoder outputs for one bag: n instances by D dimensions,
/// row-major float32 (the on-disk precision).
struct EmbeddingMatrix {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;

  float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  void validate() const;  // finite values, rows/cols >= 1, size agreement
  Mat to_mat() const;     // widen to double for math
};

EmbeddingMatrix from_mat(const Mat& m);

/// One whole-slide image as a labeled bag of instance embeddings.
/// instance_labels exist only for synthetic data and are reserved for
/// evaluation oracles; no training path reads them.
struct Bag {
  std::string bag_id;
  EmbeddingMatrix embeddings;
  int label = 0;
  std::optional<std::vector<int>> instance_labels;

  void validate() const;
};

enum class Split { train, test };

std::string split_name(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string bag_id;
  std::string path;  // relative to the manifest's directory unless absolute
  int label = 0;
  Split split = Split::train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  int version = 1;
  std::filesystem::path base_dir;  // resolution root, not serialized

  void validate() const;  // unique bag ids, labels in {0,1}
  std::filesystem::path resolve(const ManifestEntry& e) const;
  std::vector<std::size_t> indices_of(Split s) const;
};

/// Parameters of the planted-anomaly synthetic generator. Normal instances
/// are drawn at the normal mean; lesion instances are displaced by
/// separation * noise_sigma along a seed-determined unit direction.
struct SyntheticSpec {
  std::uint32_t n_bags = 0;
  std::uint32_t instances_min = 0, instances_max = 0;
  std::uint32_t dim = 0;
  double positive_bag_fraction = 0.0;
  std::uint32_t planted_min = 1, planted_max = 1;
  double separation = 0.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// --- binary embedding file (magic EMB1, u32le rows, u32le cols,
//     rows*cols float32le, no padding or trailing bytes) ---
void write_embedding_file(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix read_embedding_file(const std::filesystem::path& path);

// --- instance-label sidecar (CSV `instance_index,y`), synthetic data only ---
std::filesystem::path sidecar_path(const std::filesystem::path& embedding_path);
void write_instance_labels(const std::filesystem::path& path, const std::vector<int>& y);
std::vector<int> read_instance_labels(const std::filesystem::path& path);

// --- manifest (CSV `bag_id,path,label,split`) ---
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Loads one bag. Instance labels are attached only when explicitly asked
/// for (evaluation oracles); training code paths load without them.
Bag load_bag(const DatasetManifest& m, const ManifestEntry& e, bool with_instance_labels = false);

std::vector<Bag> load_split(const DatasetManifest& m, Split s, bool with_instance_labels = false);

/// Writes one embedding file per bag under out_dir/embeddings plus label
/// sidecars, and returns the manifest (all entries marked train; call
/// split_dataset to assign splits). Byte-identical for identical specs.
DatasetManifest generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Per-class stratified split. Total train count is llround(fraction * N)
/// apportioned across classes by largest remainder, clamped so every class
/// keeps at least one bag on each side.
DatasetManifest split_dataset(const DatasetManifest& m, double train_fraction, std::uint64_t seed);

}  // namespace wsiscreen::data
