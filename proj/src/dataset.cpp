#include "wsiscreen/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "wsiscreen/io_util.hpp"
#include "wsiscreen/rng.hpp"

namespace wsiscreen::data {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::uint64_t kMaxElements = std::uint64_t(1) << 31;

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

void put_f32le(std::ostream& out, float f) { put_u32le(out, std::bit_cast<std::uint32_t>(f)); }

bool get_f32le(std::istream& in, float& f) {
  std::uint32_t x;
  if (!get_u32le(in, x)) return false;
  f = std::bit_cast<float>(x);
  return true;
}

}  // namespace

void EmbeddingMatrix::validate() const {
  if (rows < 1 || cols < 1)
    throw DataError("embedding matrix dims must be >= 1, got " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  if (values.size() != std::size_t(rows) * cols)
    throw DataError("embedding matrix value count does not match declared dims");
  for (float v : values)
    if (!std::isfinite(v)) throw DataError("embedding matrix contains a non-finite value");
}

Mat EmbeddingMatrix::to_mat() const {
  Mat m(rows, cols);
  for (std::size_t i = 0; i < values.size(); ++i) m.data()[i] = values[i];
  return m;
}

EmbeddingMatrix from_mat(const Mat& m) {
  EmbeddingMatrix e;
  e.rows = static_cast<std::uint32_t>(m.rows());
  e.cols = static_cast<std::uint32_t>(m.cols());
  e.values.resize(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) e.values[i] = static_cast<float>(m.data()[i]);
  return e;
}

void Bag::validate() const {
  embeddings.validate();
  if (label != 0 && label != 1) throw DataError("bag label must be 0 or 1: " + bag_id);
  if (instance_labels) {
    if (instance_labels->size() != embeddings.rows)
      throw DataError("instance label count does not match bag size: " + bag_id);
    int any = 0;
    for (int y : *instance_labels) {
      if (y != 0 && y != 1) throw DataError("instance label must be 0 or 1: " + bag_id);
      any |= y;
    }
    if (any != label)
      throw DataError("bag label must equal OR of instance labels: " + bag_id);
  }
}

std::string split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw DataError("unknown split value: '" + s + "'");
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& e : entries) {
    if (!ids.insert(e.bag_id).second) throw DataError("duplicate bag_id in manifest: " + e.bag_id);
    if (e.label != 0 && e.label != 1)
      throw DataError("manifest label must be 0 or 1 for bag " + e.bag_id);
  }
}

fs::path DatasetManifest::resolve(const ManifestEntry& e) const {
  fs::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::size_t> DatasetManifest::indices_of(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].split == s) out.push_back(i);
  return out;
}

void SyntheticSpec::validate() const {
  if (n_bags < 1) throw ConfigError("synthetic spec: n_bags must be >= 1");
  if (dim < 1) throw ConfigError("synthetic spec: dim must be >= 1");
  if (instances_min < 1 || instances_min > instances_max)
    throw ConfigError("synthetic spec: invalid instances_per_bag range");
  if (planted_min < 1 || planted_min > planted_max)
    throw ConfigError("synthetic spec: planted_per_positive lower bound must be >= 1");
  if (instances_min < planted_max)
    throw ConfigError(
        "synthetic spec: instances_per_bag lower bound must be >= planted_per_positive upper "
        "bound");
  if (positive_bag_fraction < 0.0 || positive_bag_fraction > 1.0)
    throw ConfigError("synthetic spec: positive_bag_fraction must be in [0,1]");
  if (!(noise_sigma > 0.0)) throw ConfigError("synthetic spec: noise_sigma must be > 0");
  if (separation < 0.0) throw ConfigError("synthetic spec: separation must be >= 0");
}

void write_embedding_file(const EmbeddingMatrix& m, const fs::path& path) {
  m.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open embedding file for writing: " + path.string());
  out.write(kMagic, 4);
  put_u32le(out, m.rows);
  put_u32le(out, m.cols);
  for (float v : m.values) put_f32le(out, v);
  if (!out) throw DataError("write failed for embedding file: " + path.string());
}

EmbeddingMatrix read_embedding_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding file: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("bad magic bytes in embedding file: " + path.string());
  EmbeddingMatrix m;
  if (!get_u32le(in, m.rows) || !get_u32le(in, m.cols))
    throw DataError("truncated header in embedding file: " + path.string());
  if (m.rows < 1 || m.cols < 1)
    throw DataError("embedding file declares zero dimension: " + path.string());
  const std::uint64_t count = std::uint64_t(m.rows) * m.cols;
  if (count > kMaxElements)
    throw DataError("embedding file declares implausible size: " + path.string());
  m.values.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    if (!get_f32le(in, m.values[i]))
      throw DataError("truncated payload in embedding file: " + path.string());
    if (!std::isfinite(m.values[i]))
      throw DataError("non-finite value in embedding file: " + path.string());
  }
  if (in.peek() != std::ifstream::traits_type::eof())
    throw DataError("trailing bytes in embedding file: " + path.string());
  return m;
}

fs::path sidecar_path(const fs::path& embedding_path) {
  return fs::path(embedding_path.string() + ".labels.csv");
}

void write_instance_labels(const fs::path& path, const std::vector<int>& y) {
  std::ostringstream out;
  out << "instance_index,y\n";
  for (std::size_t i = 0; i < y.size(); ++i) out << i << "," << y[i] << "\n";
  write_text_file(path, out.str());
}

std::vector<int> read_instance_labels(const fs::path& path) {
  const auto lines = split_lines(read_text_file(path));
  if (lines.empty() || lines[0] != "instance_index,y")
    throw DataError("bad instance-label header in " + path.string());
  std::vector<int> y;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 2) throw DataError("bad instance-label row in " + path.string());
    if (std::stoull(f[0]) != y.size())
      throw DataError("instance-label rows out of order in " + path.string());
    const int v = std::stoi(f[1]);
    if (v != 0 && v != 1) throw DataError("instance label must be 0 or 1 in " + path.string());
    y.push_back(v);
  }
  return y;
}

void write_manifest(const DatasetManifest& m, const fs::path& path) {
  m.validate();
  std::ostringstream out;
  out << "bag_id,path,label,split\n";
  for (const auto& e : m.entries)
    out << e.bag_id << "," << e.path << "," << e.label << "," << split_name(e.split) << "\n";
  write_text_file(path, out.str());
}

DatasetManifest read_manifest(const fs::path& path) {
  const auto lines = split_lines(read_text_file(path));
  std::size_t i = 0;
  while (i < lines.size() && (lines[i].empty() || lines[i][0] == '#')) ++i;
  if (i >= lines.size() || lines[i] != "bag_id,path,label,split")
    throw DataError("bad manifest header in " + path.string());
  DatasetManifest m;
  m.base_dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  for (++i; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 4)
      throw DataError("bad manifest row at line " + std::to_string(i + 1) + " in " + path.string());
    ManifestEntry e;
    e.bag_id = f[0];
    e.path = f[1];
    if (f[2] != "0" && f[2] != "1")
      throw DataError("bad label at line " + std::to_string(i + 1) + " in " + path.string());
    e.label = f[2] == "1" ? 1 : 0;
    e.split = parse_split(f[3]);
    m.entries.push_back(std::move(e));
  }
  m.validate();
  for (const auto& e : m.entries) {
    const fs::path p = m.resolve(e);
    if (!fs::exists(p)) throw DataError("manifest references missing file: " + p.string());
  }
  return m;
}

Bag load_bag(const DatasetManifest& m, const ManifestEntry& e, bool with_instance_labels) {
  Bag bag;
  bag.bag_id = e.bag_id;
  bag.label = e.label;
  bag.embeddings = read_embedding_file(m.resolve(e));
  if (with_instance_labels) {
    const fs::path sc = sidecar_path(m.resolve(e));
    if (fs::exists(sc)) bag.instance_labels = read_instance_labels(sc);
  }
  bag.validate();
  return bag;
}

std::vector<Bag> load_split(const DatasetManifest& m, Split s, bool with_instance_labels) {
  std::vector<Bag> bags;
  for (std::size_t i : m.indices_of(s))
    bags.push_back(load_bag(m, m.entries[i], with_instance_labels));
  return bags;
}

DatasetManifest generate_synthetic(const SyntheticSpec& spec, const fs::path& out_dir) {
  spec.validate();
  const fs::path emb_dir = out_dir / "embeddings";
  fs::create_directories(emb_dir);

  Rng rng(spec.seed);

  // Unit displacement direction for lesion instances.
  Vec direction(spec.dim);
  double norm = 0.0;
  do {
    for (auto& d : direction) d = rng.normal();
    norm = norm2(direction);
  } while (norm == 0.0);
  for (auto& d : direction) d /= norm;

  const auto n_pos =
      static_cast<std::uint32_t>(std::llround(spec.positive_bag_fraction * spec.n_bags));
  std::vector<int> labels(spec.n_bags, 0);
  std::fill(labels.begin(), labels.begin() + n_pos, 1);
  rng.shuffle(labels);

  int width = 4;
  for (std::uint32_t v = spec.n_bags; v > 9999; v /= 10) ++width;

  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  for (std::uint32_t b = 0; b < spec.n_bags; ++b) {
    const std::uint32_t n_inst =
        spec.instances_min +
        static_cast<std::uint32_t>(rng.uniform_int(spec.instances_max - spec.instances_min + 1));
    std::vector<int> inst_labels(n_inst, 0);
    if (labels[b] == 1) {
      const std::uint32_t planted =
          spec.planted_min +
          static_cast<std::uint32_t>(rng.uniform_int(spec.planted_max - spec.planted_min + 1));
      std::vector<std::uint32_t> order(n_inst);
      for (std::uint32_t i = 0; i < n_inst; ++i) order[i] = i;
      rng.shuffle(order);
      for (std::uint32_t i = 0; i < planted; ++i) inst_labels[order[i]] = 1;
    }

    EmbeddingMatrix emb;
    emb.rows = n_inst;
    emb.cols = spec.dim;
    emb.values.resize(std::size_t(n_inst) * spec.dim);
    const double shift = spec.separation * spec.noise_sigma;
    for (std::uint32_t i = 0; i < n_inst; ++i) {
      for (std::uint32_t d = 0; d < spec.dim; ++d) {
        const double mean = inst_labels[i] ? shift * direction[d] : 0.0;
        emb.values[std::size_t(i) * spec.dim + d] =
            static_cast<float>(mean + spec.noise_sigma * rng.normal());
      }
    }

    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "bag_%0*u", width, b);
    const std::string bag_id(idbuf);
    const std::string rel = "embeddings/" + bag_id + ".emb";
    write_embedding_file(emb, out_dir / rel);
    write_instance_labels(sidecar_path(out_dir / rel), inst_labels);

    manifest.entries.push_back({bag_id, rel, labels[b], Split::train});
  }
  return manifest;
}

DatasetManifest split_dataset(const DatasetManifest& m, double train_fraction,
                              std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must be in (0, 1)");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < m.entries.size(); ++i)
    by_class[m.entries[i].label].push_back(i);
  for (int c = 0; c < 2; ++c)
    if (by_class[c].size() < 2)
      throw DataError("stratified split needs at least 2 bags of class " + std::to_string(c));

  const std::size_t n = m.entries.size();
  auto total_train = static_cast<std::size_t>(std::llround(train_fraction * double(n)));
  total_train = std::clamp<std::size_t>(total_train, 2, n - 2);

  // Largest-remainder apportionment across the two classes.
  double quota[2];
  std::size_t take[2];
  for (int c = 0; c < 2; ++c) {
    quota[c] = double(total_train) * double(by_class[c].size()) / double(n);
    take[c] = static_cast<std::size_t>(quota[c]);
  }
  std::size_t rem = total_train - take[0] - take[1];
  const double r0 = quota[0] - double(take[0]);
  const double r1 = quota[1] - double(take[1]);
  while (rem > 0) {
    const int c = (r1 > r0 && take[1] < by_class[1].size()) ? 1 : 0;
    ++take[c];
    --rem;
  }
  // Keep at least one bag of each class on each side.
  for (int c = 0; c < 2; ++c) {
    const int o = 1 - c;
    while (take[c] < 1 && take[o] > 1) {
      --take[o];
      ++take[c];
    }
    while (take[c] > by_class[c].size() - 1 && take[o] < by_class[o].size() - 1) {
      --take[c];
      ++take[o];
    }
  }

  DatasetManifest out = m;
  Rng rng(seed);
  for (int c = 0; c < 2; ++c) {
    auto order = by_class[c];
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); ++i)
      out.entries[order[i]].split = i < take[c] ? Split::train : Split::test;
  }
  return out;
}

}  // namespace wsiscreen::data
