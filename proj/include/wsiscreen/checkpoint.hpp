#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wsiscreen/mat.hpp"

namespace wsiscreen::nn {

/// One tensor of a parameter checkpoint, stored float32 like embedding files.
struct NamedTensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<float> values;
};

/// Checkpoint layout: magic PRM1, then per tensor a u32le name length,
/// the UTF-8 name, u32le rows, u32le cols and float32le values. Tensors are
/// written sorted by name; the file ends after the last tensor.
void write_checkpoint(const std::filesystem::path& path, std::vector<NamedTensor> tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

NamedTensor to_named_tensor(const TensorView& view);
/// Copies a checkpoint tensor into a parameter view, checking name and shape.
void load_into(const NamedTensor& t, const TensorView& view);

/// Convenience save/load for a whole view list (shapes must already match).
void save_views(const std::filesystem::path& path, const std::vector<TensorView>& views);
void load_views(const std::filesystem::path& path, const std::vector<TensorView>& views);

}  // namespace wsiscreen::nn
