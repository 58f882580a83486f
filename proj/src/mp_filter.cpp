#include "wsiscreen/mp_filter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "wsiscreen/io_util.hpp"
#include "wsiscreen/rng.hpp"

namespace wsiscreen::filter {

namespace fs = std::filesystem;

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::mp_topk: return "mp_topk";
    case Strategy::random: return "random";
    case Strategy::all: return "all";
  }
  throw ConfigError("unknown strategy enum value");
}

Strategy parse_strategy(const std::string& s) {
  if (s == "mp_topk") return Strategy::mp_topk;
  if (s == "random") return Strategy::random;
  if (s == "all") return Strategy::all;
  throw ConfigError("unknown filter strategy: '" + s + "'");
}

void FilterCorpus::validate() const {
  std::set<std::pair<std::string, std::uint32_t>> seen;
  for (const auto& it : items)
    if (!seen.insert({it.bag_id, it.instance_index}).second)
      throw DataError("duplicate corpus item: " + it.bag_id + "#" +
                      std::to_string(it.instance_index));
}

namespace {

Vec bag_mean(const data::Bag& bag) {
  const auto& e = bag.embeddings;
  Vec mean(e.cols, 0.0);
  for (std::size_t i = 0; i < e.rows; ++i)
    for (std::size_t d = 0; d < e.cols; ++d) mean[d] += e.at(i, d);
  for (double& v : mean) v /= double(e.rows);
  return mean;
}

double mean_logit(const nn::LinearParams& p, const Vec& mean) {
  double z = p.bias[0];
  for (std::size_t d = 0; d < mean.size(); ++d) z += p.weight(0, d) * mean[d];
  return z;
}

}  // namespace

nn::LinearParams train_mp_classifier(const std::vector<data::Bag>& train_bags,
                                     const MpTrainConfig& config) {
  if (train_bags.empty()) throw ConfigError("mp filter training needs at least one bag");
  const std::size_t dim = train_bags.front().embeddings.cols;
  bool has_pos = false, has_neg = false;
  std::vector<Vec> means;
  means.reserve(train_bags.size());
  for (const auto& b : train_bags) {
    if (b.embeddings.cols != dim) throw DataError("inconsistent embedding dims across bags");
    (b.label == 1 ? has_pos : has_neg) = true;
    means.push_back(bag_mean(b));
  }
  if (!has_pos || !has_neg)
    throw ConfigError("mp filter training set must contain both classes");

  Rng rng(config.seed);
  nn::LinearParams params = nn::LinearParams::init(rng, 1, dim);
  nn::SgdMomentum opt{config.lr, config.momentum, config.weight_decay};

  double prev_loss = std::numeric_limits<double>::infinity();
  std::size_t flat_epochs = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    nn::LinearParams grad = nn::LinearParams::zeros(1, dim);
    double loss = 0.0;
    for (std::size_t b = 0; b < train_bags.size(); ++b) {
      const double z = mean_logit(params, means[b]);
      const double p = nn::sigmoid(z);
      const auto bce = nn::bce_loss(p, train_bags[b].label);
      loss += bce.loss;
      const double dz = bce.d_y_hat * p * (1.0 - p) / double(train_bags.size());
      for (std::size_t d = 0; d < dim; ++d) grad.weight(0, d) += dz * means[b][d];
      grad.bias[0] += dz;
    }
    loss /= double(train_bags.size());
    if (!std::isfinite(loss)) throw NumericError("mp filter training loss is non-finite");

    auto pviews = params.views();
    const auto gviews = grad.views();
    opt.step(pviews, gviews);

    if (std::abs(prev_loss - loss) <= config.tol * std::max(1.0, std::abs(prev_loss))) {
      if (++flat_epochs >= config.patience) break;
    } else {
      flat_epochs = 0;
    }
    prev_loss = loss;
  }
  return params;
}

std::vector<ScoredPatch> score_patches(const nn::LinearParams& params, const data::Bag& bag) {
  check_shape(params.d_in() == bag.embeddings.cols && params.d_out() == 1,
              "score_patches classifier dims");
  std::vector<ScoredPatch> scores;
  scores.reserve(bag.embeddings.rows);
  for (std::uint32_t i = 0; i < bag.embeddings.rows; ++i) {
    double z = params.bias[0];
    for (std::size_t d = 0; d < bag.embeddings.cols; ++d)
      z += params.weight(0, d) * bag.embeddings.at(i, d);
    scores.push_back({bag.bag_id, i, nn::sigmoid(z)});
  }
  return scores;
}

double bag_score(const nn::LinearParams& params, const data::Bag& bag) {
  check_shape(params.d_in() == bag.embeddings.cols, "bag_score classifier dims");
  return nn::sigmoid(mean_logit(params, bag_mean(bag)));
}

double bag_score_prob_pooled(const nn::LinearParams& params, const data::Bag& bag) {
  const auto scores = score_patches(params, bag);
  double s = 0.0;
  for (const auto& sp : scores) s += sp.score;
  return s / double(scores.size());
}

std::vector<std::uint32_t> select_topk(const std::vector<ScoredPatch>& scores, std::size_t k) {
  if (scores.empty()) throw DataError("select_topk: empty score list");
  if (k < 1) throw ConfigError("select_topk: k must be >= 1");
  std::vector<std::uint32_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a].score != scores[b].score) return scores[a].score > scores[b].score;
    return scores[a].instance_index < scores[b].instance_index;
  });
  order.resize(std::min(k, order.size()));
  std::vector<std::uint32_t> indices;
  indices.reserve(order.size());
  for (std::uint32_t o : order) indices.push_back(scores[o].instance_index);
  return indices;
}

std::vector<std::uint32_t> select_random(std::size_t bag_size, std::size_t k,
                                         std::uint64_t seed) {
  if (bag_size == 0) throw DataError("select_random: empty bag");
  if (k < 1) throw ConfigError("select_random: k must be >= 1");
  std::vector<std::uint32_t> order(bag_size);
  for (std::size_t i = 0; i < bag_size; ++i) order[i] = static_cast<std::uint32_t>(i);
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(std::min(k, bag_size));
  return order;
}

FilterCorpus build_filter_corpus(const data::DatasetManifest& manifest,
                                 const nn::LinearParams* params, std::size_t k, Strategy strategy,
                                 double source_fraction, std::uint64_t seed) {
  if (k < 1) throw ConfigError("filter corpus: k must be >= 1");
  if (!(source_fraction > 0.0 && source_fraction <= 1.0))
    throw ConfigError("filter corpus: source_fraction must be in (0, 1]");
  if (strategy == Strategy::mp_topk && params == nullptr)
    throw ConfigError("filter corpus: mp_topk strategy needs trained classifier params");

  const auto train_idx = manifest.indices_of(data::Split::train);

  // Per-class subset of train bags; selection order stays manifest order.
  std::vector<std::size_t> chosen;
  {
    Rng subset_rng(mix_seed(seed, 0x5ba9));
    for (int cls = 0; cls < 2; ++cls) {
      std::vector<std::size_t> members;
      for (std::size_t i : train_idx)
        if (manifest.entries[i].label == cls) members.push_back(i);
      if (members.empty()) continue;
      auto take = static_cast<std::size_t>(std::llround(source_fraction * double(members.size())));
      take = std::clamp<std::size_t>(take, 1, members.size());
      subset_rng.shuffle(members);
      chosen.insert(chosen.end(), members.begin(), members.begin() + take);
    }
    std::sort(chosen.begin(), chosen.end());
  }

  FilterCorpus corpus;
  corpus.strategy = strategy;
  corpus.k = static_cast<std::uint32_t>(k);
  corpus.seed = seed;
  corpus.source_fraction = source_fraction;

  for (std::size_t pos = 0; pos < chosen.size(); ++pos) {
    const auto& entry = manifest.entries[chosen[pos]];
    const data::Bag bag = data::load_bag(manifest, entry);
    const std::size_t n = bag.embeddings.rows;

    std::vector<ScoredPatch> scores;
    if (strategy == Strategy::mp_topk) scores = score_patches(*params, bag);

    std::vector<std::uint32_t> picked;
    switch (strategy) {
      case Strategy::mp_topk:
        picked = select_topk(scores, k);
        break;
      case Strategy::random:
        picked = select_random(n, k, mix_seed(seed, chosen[pos]));
        break;
      case Strategy::all:
        picked.resize(n);
        for (std::size_t i = 0; i < n; ++i) picked[i] = static_cast<std::uint32_t>(i);
        break;
    }

    for (std::uint32_t idx : picked) {
      FilterCorpus::Item item;
      item.bag_id = entry.bag_id;
      item.instance_index = idx;
      if (strategy == Strategy::mp_topk) {
        item.score = scores[idx].score;
        item.has_score = true;
      } else {
        item.score = std::numeric_limits<double>::quiet_NaN();
      }
      corpus.items.push_back(std::move(item));
    }
    corpus.k_used.emplace_back(entry.bag_id, static_cast<std::uint32_t>(picked.size()));
  }

  if (corpus.items.empty()) throw DataError("filter corpus is empty");
  corpus.validate();
  return corpus;
}

void write_corpus(const fs::path& path, const FilterCorpus& corpus) {
  corpus.validate();
  std::ostringstream out;
  out << "# k=" << corpus.k << " strategy=" << strategy_name(corpus.strategy)
      << " seed=" << corpus.seed << " source_fraction=" << fmt_double(corpus.source_fraction)
      << "\n";
  out << "bag_id,instance_index,score,strategy\n";
  for (const auto& it : corpus.items) {
    out << it.bag_id << "," << it.instance_index << ","
        << (it.has_score ? fmt_double(it.score) : std::string()) << ","
        << strategy_name(corpus.strategy) << "\n";
  }
  write_text_file(path, out.str());
}

FilterCorpus read_corpus(const fs::path& path) {
  const auto lines = split_lines(read_text_file(path));
  if (lines.size() < 2 || lines[0].empty() || lines[0][0] != '#')
    throw DataError("corpus file missing metadata line: " + path.string());

  FilterCorpus corpus;
  {
    std::istringstream meta(lines[0].substr(1));
    std::string tok;
    while (meta >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw DataError("bad corpus metadata in " + path.string());
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "k") corpus.k = static_cast<std::uint32_t>(std::stoul(val));
      else if (key == "strategy") corpus.strategy = parse_strategy(val);
      else if (key == "seed") corpus.seed = std::stoull(val);
      else if (key == "source_fraction") corpus.source_fraction = std::stod(val);
      else throw DataError("unknown corpus metadata key '" + key + "' in " + path.string());
    }
  }
  if (lines[1] != "bag_id,instance_index,score,strategy")
    throw DataError("bad corpus header in " + path.string());
  std::string prev_bag;
  std::uint32_t bag_count = 0;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 4) throw DataError("bad corpus row in " + path.string());
    FilterCorpus::Item item;
    item.bag_id = f[0];
    item.instance_index = static_cast<std::uint32_t>(std::stoul(f[1]));
    if (!f[2].empty()) {
      item.score = std::stod(f[2]);
      item.has_score = true;
    } else {
      item.score = std::numeric_limits<double>::quiet_NaN();
    }
    if (item.bag_id != prev_bag) {
      if (!prev_bag.empty()) corpus.k_used.emplace_back(prev_bag, bag_count);
      prev_bag = item.bag_id;
      bag_count = 0;
    }
    ++bag_count;
    corpus.items.push_back(std::move(item));
  }
  if (!prev_bag.empty()) corpus.k_used.emplace_back(prev_bag, bag_count);
  if (corpus.items.empty()) throw DataError("corpus file has no items: " + path.string());
  corpus.validate();
  return corpus;
}

}  // namespace wsiscreen::filter
