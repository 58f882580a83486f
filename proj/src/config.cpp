#include "wsiscreen/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

#include "wsiscreen/io_util.hpp"

namespace wsiscreen::config {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

KeyValueFile KeyValueFile::parse_file(const std::filesystem::path& path) {
  return parse_string(read_text_file(path), path.string());
}

KeyValueFile KeyValueFile::parse_string(const std::string& text, const std::string& origin) {
  KeyValueFile kv;
  kv.origin_ = origin;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string line = trim(lines[i]);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(i + 1) + ": expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(i + 1) + ": empty key");
    for (const auto& [k, e] : kv.entries_)
      if (k == key)
        throw ConfigError(origin + ":" + std::to_string(i + 1) + ": duplicate key '" + key +
                          "' (first at line " + std::to_string(e.line) + ")");
    kv.entries_.emplace_back(key, Entry{value, i + 1});
  }
  return kv;
}

const KeyValueFile::Entry* KeyValueFile::find(const std::string& key) const {
  for (const auto& [k, e] : entries_)
    if (k == key) return &e;
  return nullptr;
}

bool KeyValueFile::has(const std::string& key) const { return find(key) != nullptr; }

std::string KeyValueFile::require(const std::string& key) {
  const Entry* e = find(key);
  if (!e) throw ConfigError(origin_ + ": missing required key '" + key + "'");
  consumed_.insert(key);
  return e->value;
}

std::string KeyValueFile::get_string(const std::string& key) { return require(key); }

std::string KeyValueFile::get_string(const std::string& key, const std::string& fallback) {
  consumed_.insert(key);
  const Entry* e = find(key);
  return e ? e->value : fallback;
}

double KeyValueFile::get_double(const std::string& key) {
  const std::string v = require(key);
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "' is not a number: '" + v + "'");
  }
}

double KeyValueFile::get_double(const std::string& key, double fallback) {
  return has(key) ? get_double(key) : (consumed_.insert(key), fallback);
}

std::int64_t KeyValueFile::get_int(const std::string& key) {
  const std::string v = require(key);
  std::int64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" + v + "'");
  return x;
}

std::int64_t KeyValueFile::get_int(const std::string& key, std::int64_t fallback) {
  return has(key) ? get_int(key) : (consumed_.insert(key), fallback);
}

std::uint64_t KeyValueFile::get_uint64(const std::string& key) {
  const std::string v = require(key);
  std::uint64_t x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(origin_ + ": key '" + key + "' is not an unsigned integer: '" + v + "'");
  return x;
}

std::uint64_t KeyValueFile::get_uint64(const std::string& key, std::uint64_t fallback) {
  return has(key) ? get_uint64(key) : (consumed_.insert(key), fallback);
}

std::vector<double> KeyValueFile::get_double_list(const std::string& key,
                                                  const std::vector<double>& fallback) {
  if (!has(key)) {
    consumed_.insert(key);
    return fallback;
  }
  const std::string v = require(key);
  std::vector<double> out;
  std::istringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "' has a non-numeric element: '" + tok + "'");
    }
  }
  if (out.empty()) throw ConfigError(origin_ + ": key '" + key + "' is an empty list");
  return out;
}

void KeyValueFile::reject_unknown_keys() const {
  std::string complaints;
  for (const auto& [k, e] : entries_) {
    if (!consumed_.contains(k)) {
      if (!complaints.empty()) complaints += "; ";
      complaints += "'" + k + "' (line " + std::to_string(e.line) + ")";
    }
  }
  if (!complaints.empty())
    throw ConfigError(origin_ + ": unknown keys: " + complaints);
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  KeyValueFile kv = KeyValueFile::parse_file(path);
  PipelineConfig cfg;
  const auto base = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  cfg.manifest = resolve(kv.get_string("manifest"));
  cfg.work_dir = resolve(kv.get_string("work_dir"));
  cfg.seed = kv.get_uint64("seed");
  cfg.threads = static_cast<int>(kv.get_int("threads", 1));
  if (cfg.threads < 1) throw ConfigError(path.string() + ": threads must be >= 1");

  cfg.stage1.epochs = static_cast<std::size_t>(kv.get_int("stage1.epochs", 200));
  cfg.stage1.lr = kv.get_double("stage1.lr", 1.0);
  cfg.stage1.momentum = kv.get_double("stage1.momentum", 0.9);
  cfg.stage1.weight_decay = kv.get_double("stage1.weight_decay", 0.0);

  cfg.filter.strategy = filter::parse_strategy(kv.get_string("filter.strategy", "mp_topk"));
  const auto k = kv.get_int("filter.k", 50);
  if (k < 1) throw ConfigError(path.string() + ": filter.k must be >= 1");
  cfg.filter.k = static_cast<std::size_t>(k);
  cfg.filter.source_fraction = kv.get_double("filter.source_fraction", 0.8);

  cfg.stage2.epochs = static_cast<std::size_t>(kv.get_int("stage2.epochs", 100));
  cfg.stage2.batch_size = static_cast<std::size_t>(kv.get_int("stage2.batch_size", 1024));
  cfg.stage2.lr = kv.get_double("stage2.lr", 0.6);
  cfg.stage2.momentum = kv.get_double("stage2.momentum", 0.9);
  cfg.stage2.weight_decay = kv.get_double("stage2.weight_decay", 1e-6);
  cfg.stage2.temperature = kv.get_double("stage2.temperature", 0.5);
  cfg.stage2.aug.noise_sigma = kv.get_double("stage2.aug_noise_sigma", 0.05);
  cfg.stage2.aug.dropout_rate = kv.get_double("stage2.aug_dropout_rate", 0.1);
  cfg.stage2.aug.scale_min = kv.get_double("stage2.aug_scale_min", 0.8);
  cfg.stage2.aug.scale_max = kv.get_double("stage2.aug_scale_max", 1.2);
  cfg.stage2.projection_hidden =
      static_cast<std::size_t>(kv.get_int("stage2.projection_hidden", 0));
  cfg.stage2.projection_dim = static_cast<std::size_t>(kv.get_int("stage2.projection_dim", 128));
  cfg.stage2.lr_min = kv.get_double("stage2.lr_min", 0.0);

  cfg.stage3.head = mil::parse_head_kind(kv.get_string("stage3.head", "gated_attention"));
  cfg.stage3.epochs = static_cast<std::size_t>(kv.get_int("stage3.epochs", 50));
  cfg.stage3.lr = kv.get_double("stage3.lr", 2e-4);
  cfg.stage3.weight_decay = kv.get_double("stage3.weight_decay", 1e-5);
  cfg.stage3.attention_hidden =
      static_cast<std::size_t>(kv.get_int("stage3.attention_hidden", 128));

  cfg.min_sensitivities = kv.get_double_list("eval.min_sensitivities", {0.90, 0.95});
  for (double s : cfg.min_sensitivities)
    if (s < 0.0 || s > 1.0)
      throw ConfigError(path.string() + ": eval.min_sensitivities entries must be in [0,1]");
  cfg.eval_threshold = kv.get_double("eval.threshold", 0.5);

  kv.reject_unknown_keys();
  cfg.stage2.validate();
  return cfg;
}

SynthesisRequest load_synthetic_spec(const std::filesystem::path& path) {
  KeyValueFile kv = KeyValueFile::parse_file(path);
  SynthesisRequest req;
  auto& s = req.spec;
  s.n_bags = static_cast<std::uint32_t>(kv.get_uint64("n_bags"));
  s.instances_min = static_cast<std::uint32_t>(kv.get_uint64("instances_min"));
  s.instances_max = static_cast<std::uint32_t>(kv.get_uint64("instances_max"));
  s.dim = static_cast<std::uint32_t>(kv.get_uint64("dim"));
  s.positive_bag_fraction = kv.get_double("positive_bag_fraction");
  s.planted_min = static_cast<std::uint32_t>(kv.get_uint64("planted_min"));
  s.planted_max = static_cast<std::uint32_t>(kv.get_uint64("planted_max"));
  s.separation = kv.get_double("separation");
  s.noise_sigma = kv.get_double("noise_sigma");
  s.seed = kv.get_uint64("seed");
  req.train_fraction = kv.get_double("train_fraction", 0.7);
  kv.reject_unknown_keys();
  s.validate();
  return req;
}

}  // namespace wsiscreen::config
