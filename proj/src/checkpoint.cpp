#include "wsiscreen/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "wsiscreen/error.hpp"

namespace wsiscreen::nn {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'P', 'R', 'M', '1'};

void put_u32le(std::ostream& out, std::uint32_t x) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(x & 0xff),
      static_cast<unsigned char>((x >> 8) & 0xff),
      static_cast<unsigned char>((x >> 16) & 0xff),
      static_cast<unsigned char>((x >> 24) & 0xff),
  };
  out.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32le(std::istream& in, std::uint32_t& x) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  x = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
      (std::uint32_t(b[3]) << 24);
  return true;
}

}  // namespace

void write_checkpoint(const fs::path& path, std::vector<NamedTensor> tensors) {
  std::sort(tensors.begin(), tensors.end(),
            [](const NamedTensor& a, const NamedTensor& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < tensors.size(); ++i)
    if (tensors[i].name == tensors[i - 1].name)
      throw DataError("checkpoint has duplicate tensor name: " + tensors[i].name);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, 4);
  for (const auto& t : tensors) {
    if (t.values.size() != std::size_t(t.rows) * t.cols)
      throw DataError("checkpoint tensor size mismatch: " + t.name);
    put_u32le(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32le(out, t.rows);
    put_u32le(out, t.cols);
    for (float v : t.values) put_u32le(out, std::bit_cast<std::uint32_t>(v));
  }
  if (!out) throw DataError("write failed for checkpoint: " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("bad magic bytes in checkpoint: " + path.string());
  std::vector<NamedTensor> tensors;
  while (true) {
    std::uint32_t name_len;
    if (!get_u32le(in, name_len)) break;  // clean EOF
    if (name_len == 0 || name_len > 4096)
      throw DataError("implausible tensor name length in checkpoint: " + path.string());
    NamedTensor t;
    t.name.resize(name_len);
    if (!in.read(t.name.data(), name_len))
      throw DataError("truncated tensor name in checkpoint: " + path.string());
    if (!get_u32le(in, t.rows) || !get_u32le(in, t.cols))
      throw DataError("truncated tensor header in checkpoint: " + path.string());
    const std::uint64_t count = std::uint64_t(t.rows) * t.cols;
    if (count > (std::uint64_t(1) << 31))
      throw DataError("implausible tensor size in checkpoint: " + path.string());
    t.values.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint32_t bits;
      if (!get_u32le(in, bits))
        throw DataError("truncated tensor payload in checkpoint: " + path.string());
      t.values[i] = std::bit_cast<float>(bits);
    }
    tensors.push_back(std::move(t));
  }
  return tensors;
}

NamedTensor to_named_tensor(const TensorView& view) {
  NamedTensor t;
  t.name = view.name;
  t.rows = static_cast<std::uint32_t>(view.rows);
  t.cols = static_cast<std::uint32_t>(view.cols);
  t.values.reserve(view.data.size());
  for (double v : view.data) t.values.push_back(static_cast<float>(v));
  return t;
}

void load_into(const NamedTensor& t, const TensorView& view) {
  if (t.name != view.name)
    throw DataError("checkpoint tensor name mismatch: expected " + view.name + ", got " + t.name);
  if (t.rows != view.rows || t.cols != view.cols || t.values.size() != view.data.size())
    throw DataError("checkpoint tensor shape mismatch for " + t.name);
  for (std::size_t i = 0; i < t.values.size(); ++i) view.data[i] = t.values[i];
}

void save_views(const fs::path& path, const std::vector<TensorView>& views) {
  std::vector<NamedTensor> tensors;
  tensors.reserve(views.size());
  for (const auto& v : views) tensors.push_back(to_named_tensor(v));
  write_checkpoint(path, std::move(tensors));
}

void load_views(const fs::path& path, const std::vector<TensorView>& views) {
  const auto tensors = read_checkpoint(path);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (const auto& v : views) {
    const auto it = by_name.find(v.name);
    if (it == by_name.end())
      throw DataError("checkpoint " + path.string() + " is missing tensor " + v.name);
    load_into(*it->second, v);
  }
}

}  // namespace wsiscreen::nn
