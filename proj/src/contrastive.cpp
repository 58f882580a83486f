#include "wsiscreen/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <thread>

#include "wsiscreen/checkpoint.hpp"
#include "wsiscreen/io_util.hpp"

namespace wsiscreen::contrastive {

namespace fs = std::filesystem;

AdapterParams AdapterParams::identity(std::size_t dim) {
  AdapterParams a;
  a.map.weight = Mat::identity(dim);
  a.map.bias.assign(dim, 0.0);
  return a;
}

void AdapterParams::validate() const {
  map.validate();
  if (map.d_in() != map.d_out()) throw DataError("adapter map must be square");
}

ProjectionParams ProjectionParams::init(Rng& rng, std::size_t dim, std::size_t hidden_dim,
                                        std::size_t out_dim) {
  ProjectionParams p;
  p.hidden = nn::LinearParams::init(rng, hidden_dim, dim);
  p.output = nn::LinearParams::init(rng, out_dim, hidden_dim);
  return p;
}

void ProjectionParams::validate() const {
  hidden.validate();
  output.validate();
  if (output.d_in() != hidden.d_out()) throw DataError("projection head shapes do not chain");
}

std::vector<TensorView> ProjectionParams::views() {
  auto v = hidden.views("proj1.");
  auto w = output.views("proj2.");
  v.insert(v.end(), w.begin(), w.end());
  return v;
}

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive temperature must be > 0");
  if (batch_size < 1) throw ConfigError("contrastive batch size must be >= 1");
  if (projection_dim < 1) throw ConfigError("projection output dim must be >= 1");
  if (aug.dropout_rate < 0.0 || aug.dropout_rate >= 1.0)
    throw ConfigError("augmentation dropout rate must be in [0, 1)");
  if (aug.noise_sigma < 0.0) throw ConfigError("augmentation noise sigma must be >= 0");
  if (aug.scale_min > aug.scale_max) throw ConfigError("augmentation scale range is inverted");
  if (lr < 0.0 || lr_min < 0.0) throw ConfigError("learning rate must be >= 0");
}

namespace {

Vec augment_one(std::span<const double> x, double sigma_abs, const AugmentConfig& cfg, Rng& rng) {
  Vec out(x.size());
  for (std::size_t d = 0; d < x.size(); ++d) out[d] = x[d] + sigma_abs * rng.normal();
  for (std::size_t d = 0; d < x.size(); ++d)
    if (rng.uniform() < cfg.dropout_rate) out[d] = 0.0;
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  for (double& v : out) v *= scale;
  return out;
}

}  // namespace

ViewPair augment_views(std::span<const double> embedding, const AugmentConfig& config, Rng& rng) {
  double rms = 0.0;
  for (double v : embedding) rms += v * v;
  rms = std::sqrt(rms / double(embedding.size()));
  const double sigma_abs = config.noise_sigma * rms;
  ViewPair pair;
  pair.view_a = augment_one(embedding, sigma_abs, config, rng);
  pair.view_b = augment_one(embedding, sigma_abs, config, rng);
  return pair;
}

double cosine_sim(std::span<const double> u, std::span<const double> v) {
  check_shape(u.size() == v.size(), "cosine_sim vector lengths");
  const double nu = norm2(u), nv = norm2(v);
  if (nu == 0.0 || nv == 0.0) throw NumericError("cosine_sim: zero-norm input");
  return dot(u, v) / (nu * nv);
}

InfoNceResult info_nce_loss(const Mat& projections, const std::vector<std::size_t>& pairing,
                            double temperature) {
  const std::size_t n = projections.rows();
  if (!(temperature > 0.0)) throw ConfigError("info_nce: temperature must be > 0");
  if (n < 2 || n % 2 != 0) throw DataError("info_nce: needs an even batch of at least 2 views");
  if (pairing.size() != n) throw DataError("info_nce: pairing size mismatch");
  for (std::size_t j = 0; j < n; ++j) {
    if (pairing[j] >= n || pairing[j] == j || pairing[pairing[j]] != j)
      throw DataError("info_nce: pairing must be a fixed-point-free involution");
  }

  // Row-normalize; cosine similarities become plain dot products.
  Mat zhat = projections;
  Vec norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    norms[j] = norm2(zhat.row(j));
    if (norms[j] == 0.0) throw NumericError("info_nce: zero-norm projection");
    for (double& v : zhat.row(j)) v /= norms[j];
  }
  const Mat sim = matmul_nt(zhat, zhat);

  InfoNceResult result;
  const double inv_2m = 1.0 / double(n);
  Mat grad_s(n, n);  // dL/d sim(j,m), row-major, diagonal unused
  for (std::size_t j = 0; j < n; ++j) {
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < n; ++m)
      if (m != j) row_max = std::max(row_max, sim(j, m) / temperature);
    double denom = 0.0;
    for (std::size_t m = 0; m < n; ++m)
      if (m != j) denom += std::exp(sim(j, m) / temperature - row_max);
    const double lse = row_max + std::log(denom);
    const double pos = sim(j, pairing[j]) / temperature;
    result.loss += inv_2m * (lse - pos);
    result.positive_pair_mean_sim += inv_2m * sim(j, pairing[j]);
    for (std::size_t m = 0; m < n; ++m) {
      if (m == j) continue;
      const double p = std::exp(sim(j, m) / temperature - lse);
      const double indicator = m == pairing[j] ? 1.0 : 0.0;
      grad_s(j, m) = inv_2m / temperature * (p - indicator);
    }
  }

  // Symmetrize: sim(j,m) and sim(m,j) are the same variable.
  Mat h(n, n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t m = 0; m < n; ++m) h(j, m) = grad_s(j, m) + grad_s(m, j);

  const Mat hz = matmul(h, zhat);
  result.d_projections = Mat(n, projections.cols());
  for (std::size_t j = 0; j < n; ++j) {
    double radial = 0.0;
    for (std::size_t m = 0; m < n; ++m) radial += h(j, m) * sim(j, m);
    for (std::size_t d = 0; d < projections.cols(); ++d)
      result.d_projections(j, d) = (hz(j, d) - radial * zhat(j, d)) / norms[j];
  }
  return result;
}

double contrastive_batch_loss(const AdapterParams& adapter, ProjectionParams& projection,
                              const Mat& views, const std::vector<std::size_t>& pairing,
                              double temperature, AdapterParams& adapter_grad,
                              ProjectionParams& projection_grad, double* positive_pair_mean_sim) {
  const Mat adapted = nn::linear_forward(adapter.map, views);
  const Mat hidden_pre = nn::linear_forward(projection.hidden, adapted);
  const Mat hidden = nn::relu(hidden_pre);
  const Mat projected = nn::linear_forward(projection.output, hidden);

  const InfoNceResult nce = info_nce_loss(projected, pairing, temperature);
  if (positive_pair_mean_sim) *positive_pair_mean_sim = nce.positive_pair_mean_sim;

  Mat d_hidden;
  nn::linear_backward(projection.output, hidden, nce.d_projections, projection_grad.output,
                      &d_hidden);
  const Mat d_hidden_pre = nn::relu_backward(hidden, d_hidden);
  Mat d_adapted;
  nn::linear_backward(projection.hidden, adapted, d_hidden_pre, projection_grad.hidden,
                      &d_adapted);
  nn::linear_backward(adapter.map, views, d_adapted, adapter_grad.map);
  return nce.loss;
}

namespace {

struct ViewSource {
  // Exactly one of the two is set.
  const Mat* embeddings = nullptr;              // corpus rows, augmented per epoch
  const std::vector<ViewPair>* pairs = nullptr;  // fixed externally built views
  const AugmentConfig* aug = nullptr;

  std::size_t count() const { return embeddings ? embeddings->rows() : pairs->size(); }
  std::size_t dim() const { return embeddings ? embeddings->cols() : (*pairs)[0].view_a.size(); }

  void emit(std::size_t item, Rng& rng, std::span<double> row_a, std::span<double> row_b) const {
    if (embeddings) {
      ViewPair p = augment_views(embeddings->row(item), *aug, rng);
      std::copy(p.view_a.begin(), p.view_a.end(), row_a.begin());
      std::copy(p.view_b.begin(), p.view_b.end(), row_b.begin());
    } else {
      const ViewPair& p = (*pairs)[item];
      std::copy(p.view_a.begin(), p.view_a.end(), row_a.begin());
      std::copy(p.view_b.begin(), p.view_b.end(), row_b.begin());
    }
  }
};

struct BatchStats {
  double loss_sum = 0.0;
  double sim_sum = 0.0;
  double weight = 0.0;
};

AdapterTrainResult train_core(const ViewSource& source, const ContrastiveConfig& config) {
  config.validate();
  const std::size_t n = source.count();
  if (n < 2) throw ConfigError("contrastive training needs at least 2 corpus items");
  const std::size_t dim = source.dim();
  const std::size_t hidden_dim = config.projection_hidden == 0 ? dim : config.projection_hidden;

  Rng rng(config.seed);
  AdapterTrainResult result;
  result.adapter = AdapterParams::identity(dim);
  result.projection = ProjectionParams::init(rng, dim, hidden_dim, config.projection_dim);

  nn::SgdMomentum opt{config.lr, config.momentum, config.weight_decay};

  auto run_epoch = [&](const std::vector<std::size_t>& order, Rng& view_rng, bool update,
                       double lr_now) {
    BatchStats stats;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t b = std::min(config.batch_size, order.size() - start);
      if (b < config.batch_size && b < 2) break;  // single leftover item cannot contrast
      Mat views(2 * b, dim);
      std::vector<std::size_t> pairing(2 * b);
      for (std::size_t i = 0; i < b; ++i) {
        source.emit(order[start + i], view_rng, views.row(2 * i), views.row(2 * i + 1));
        pairing[2 * i] = 2 * i + 1;
        pairing[2 * i + 1] = 2 * i;
      }
      AdapterParams a_grad;
      a_grad.map = nn::LinearParams::zeros(dim, dim);
      ProjectionParams p_grad;
      p_grad.hidden = nn::LinearParams::zeros(hidden_dim, dim);
      p_grad.output = nn::LinearParams::zeros(config.projection_dim, hidden_dim);
      double pos_sim = 0.0;
      const double loss =
          contrastive_batch_loss(result.adapter, result.projection, views, pairing,
                                 config.temperature, a_grad, p_grad, &pos_sim);
      if (!std::isfinite(loss)) throw NumericError("contrastive training loss is non-finite");
      if (update) {
        opt.lr = lr_now;
        auto params = result.adapter.views();
        auto proj_params = result.projection.views();
        params.insert(params.end(), proj_params.begin(), proj_params.end());
        auto grads = a_grad.views();
        auto proj_grads = p_grad.views();
        grads.insert(grads.end(), proj_grads.begin(), proj_grads.end());
        opt.step(params, grads);
      }
      stats.loss_sum += loss * double(2 * b);
      stats.sim_sum += pos_sim * double(2 * b);
      stats.weight += double(2 * b);
    }
    return stats;
  };

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  // Pre-training reference point for the log.
  {
    Rng eval_rng(mix_seed(config.seed, 0xe0a1));
    const BatchStats s = run_epoch(order, eval_rng, false, 0.0);
    result.log.push_back({0, s.loss_sum / s.weight, 0.0, s.sim_sum / s.weight});
  }

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const double lr_now = nn::cosine_anneal(config.lr, epoch - 1, config.epochs, config.lr_min);
    rng.shuffle(order);
    const BatchStats s = run_epoch(order, rng, true, lr_now);
    result.log.push_back({epoch, s.loss_sum / s.weight, lr_now, s.sim_sum / s.weight});
  }
  return result;
}

}  // namespace

AdapterTrainResult train_adapter(const filter::FilterCorpus& corpus,
                                 const data::DatasetManifest& manifest,
                                 const ContrastiveConfig& config) {
  if (corpus.items.empty()) throw DataError("contrastive training corpus is empty");

  std::map<std::string, std::size_t> entry_by_id;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i)
    entry_by_id[manifest.entries[i].bag_id] = i;

  // Load each referenced bag once, in corpus order.
  std::map<std::string, Mat> bag_cache;
  Mat items;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) {
    const auto& item = corpus.items[i];
    auto it = bag_cache.find(item.bag_id);
    if (it == bag_cache.end()) {
      const auto idx = entry_by_id.find(item.bag_id);
      if (idx == entry_by_id.end())
        throw DataError("corpus references unknown bag: " + item.bag_id);
      const data::Bag bag = data::load_bag(manifest, manifest.entries[idx->second]);
      it = bag_cache.emplace(item.bag_id, bag.embeddings.to_mat()).first;
    }
    const Mat& emb = it->second;
    if (items.empty()) items = Mat(corpus.items.size(), emb.cols());
    check_shape(emb.cols() == items.cols(), "corpus embedding dims");
    if (item.instance_index >= emb.rows())
      throw DataError("corpus instance index out of range for bag " + item.bag_id);
    std::copy(emb.row(item.instance_index).begin(), emb.row(item.instance_index).end(),
              items.row(i).begin());
  }

  ViewSource source;
  source.embeddings = &items;
  source.aug = &config.aug;
  return train_core(source, config);
}

AdapterTrainResult train_adapter_on_views(const std::vector<ViewPair>& pairs,
                                          const ContrastiveConfig& config) {
  if (pairs.empty()) throw DataError("paired-view training set is empty");
  for (const auto& p : pairs)
    if (p.view_a.size() != pairs[0].view_a.size() || p.view_b.size() != p.view_a.size())
      throw DataError("paired views have inconsistent dims");
  ViewSource source;
  source.pairs = &pairs;
  return train_core(source, config);
}

std::vector<ViewPair> read_paired_views(const fs::path& csv_path) {
  const auto lines = split_lines(read_text_file(csv_path));
  if (lines.empty() || lines[0] != "bag_id,instance_index,view_a_path,view_b_path,row")
    throw DataError("bad paired-views header in " + csv_path.string());
  const fs::path base = csv_path.has_parent_path() ? csv_path.parent_path() : fs::path(".");
  std::map<std::string, data::EmbeddingMatrix> cache;
  auto fetch = [&](const std::string& rel) -> const data::EmbeddingMatrix& {
    auto it = cache.find(rel);
    if (it == cache.end()) {
      fs::path p(rel);
      it = cache.emplace(rel, data::read_embedding_file(p.is_absolute() ? p : base / p)).first;
    }
    return it->second;
  };
  std::vector<ViewPair> pairs;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 5) throw DataError("bad paired-views row in " + csv_path.string());
    ViewPair pair;
    pair.bag_id = f[0];
    pair.instance_index = static_cast<std::uint32_t>(std::stoul(f[1]));
    const auto& ea = fetch(f[2]);
    const auto& eb = fetch(f[3]);
    const auto row = static_cast<std::uint32_t>(std::stoul(f[4]));
    if (row >= ea.rows || row >= eb.rows)
      throw DataError("paired-views row index out of range in " + csv_path.string());
    if (ea.cols != eb.cols) throw DataError("paired views differ in dim in " + csv_path.string());
    pair.view_a.resize(ea.cols);
    pair.view_b.resize(eb.cols);
    for (std::size_t d = 0; d < ea.cols; ++d) {
      pair.view_a[d] = ea.at(row, d);
      pair.view_b[d] = eb.at(row, d);
    }
    pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) throw DataError("paired-views file has no rows: " + csv_path.string());
  return pairs;
}

data::DatasetManifest extract_features(const AdapterParams& adapter,
                                       const data::DatasetManifest& manifest,
                                       const fs::path& out_dir, int threads) {
  data::DatasetManifest out = manifest;
  out.base_dir = out_dir;

  // Normalize output paths and create directories up front (single-threaded).
  for (auto& e : out.entries) {
    fs::path p(e.path);
    if (p.is_absolute()) p = p.filename();
    e.path = p.generic_string();
    const fs::path target = out_dir / p;
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
  }

  const std::size_t n = out.entries.size();
  const int workers = std::clamp(threads, 1, 64);
  std::vector<std::string> errors(n);
  auto work = [&](std::size_t begin) {
    for (std::size_t i = begin; i < n; i += std::size_t(workers)) {
      try {
        const data::Bag bag = data::load_bag(manifest, manifest.entries[i]);
        check_shape(bag.embeddings.cols == adapter.dim(), "adapter dim vs embedding dim");
        const Mat adapted = nn::linear_forward(adapter.map, bag.embeddings.to_mat());
        data::write_embedding_file(data::from_mat(adapted), out_dir / out.entries[i].path);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work, std::size_t(t));
    for (auto& t : pool) t.join();
  }
  for (const auto& err : errors)
    if (!err.empty()) throw DataError("feature extraction failed: " + err);

  data::write_manifest(out, out_dir / "manifest.csv");
  return out;
}

void save_adapter_checkpoint(const fs::path& path, AdapterParams& adapter,
                             ProjectionParams& projection) {
  auto views = adapter.views();
  auto pv = projection.views();
  views.insert(views.end(), pv.begin(), pv.end());
  nn::save_views(path, views);
}

namespace {
const nn::NamedTensor& find_tensor(const std::vector<nn::NamedTensor>& tensors,
                                   const std::string& name, const fs::path& path) {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw DataError("checkpoint " + path.string() + " is missing tensor " + name);
}

nn::LinearParams tensor_pair_to_linear(const std::vector<nn::NamedTensor>& tensors,
                                       const std::string& prefix, const fs::path& path) {
  const auto& w = find_tensor(tensors, prefix + "weight", path);
  const auto& b = find_tensor(tensors, prefix + "bias", path);
  nn::LinearParams p = nn::LinearParams::zeros(w.rows, w.cols);
  for (std::size_t i = 0; i < w.values.size(); ++i) p.weight.data()[i] = w.values[i];
  if (b.values.size() != w.rows)
    throw DataError("checkpoint bias shape mismatch for " + prefix + "bias");
  for (std::size_t i = 0; i < b.values.size(); ++i) p.bias[i] = b.values[i];
  return p;
}
}  // namespace

void load_adapter_checkpoint(const fs::path& path, AdapterParams& adapter,
                             ProjectionParams* projection) {
  const auto tensors = nn::read_checkpoint(path);
  adapter.map = tensor_pair_to_linear(tensors, "adapter.", path);
  adapter.validate();
  if (projection) {
    projection->hidden = tensor_pair_to_linear(tensors, "proj1.", path);
    projection->output = tensor_pair_to_linear(tensors, "proj2.", path);
    projection->validate();
  }
}

AdapterParams load_adapter(const fs::path& path) {
  AdapterParams a;
  load_adapter_checkpoint(path, a, nullptr);
  return a;
}

}  // namespace wsiscreen::contrastive
