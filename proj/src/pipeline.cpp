#include "wsiscreen/pipeline.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "wsiscreen/checkpoint.hpp"
#include "wsiscreen/io_util.hpp"
#include "wsiscreen/rng.hpp"

namespace wsiscreen::pipeline {

namespace fs = std::filesystem;

StageSeeds derive_stage_seeds(std::uint64_t global_seed) {
  StageSeeds s;
  s.stage1 = mix_seed(global_seed, 0x5701);
  s.filter = mix_seed(global_seed, 0x5702);
  s.stage2 = mix_seed(global_seed, 0x5703);
  s.stage3 = mix_seed(global_seed, 0x5704);
  return s;
}

void write_predictions(const fs::path& path, const std::vector<PredictionRow>& rows) {
  std::ostringstream out;
  out << "bag_id,score,label\n";
  for (const auto& r : rows)
    out << r.bag_id << "," << fmt_double(r.score) << "," << r.label << "\n";
  write_text_file(path, out.str());
}

std::vector<PredictionRow> read_predictions(const fs::path& path) {
  const auto lines = split_lines(read_text_file(path));
  if (lines.empty() || lines[0] != "bag_id,score,label")
    throw DataError("bad predictions header in " + path.string());
  std::vector<PredictionRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 3)
      throw DataError("bad predictions row at line " + std::to_string(i + 1) + " in " +
                      path.string());
    PredictionRow r;
    r.bag_id = f[0];
    try {
      r.score = std::stod(f[1]);
    } catch (const std::exception&) {
      throw DataError("bad score at line " + std::to_string(i + 1) + " in " + path.string());
    }
    if (f[2] != "0" && f[2] != "1")
      throw DataError("bad label at line " + std::to_string(i + 1) + " in " + path.string());
    r.label = f[2] == "1" ? 1 : 0;
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError("predictions file has no rows: " + path.string());
  return rows;
}

EvalSummary evaluate_predictions(const std::vector<PredictionRow>& rows,
                                 const std::vector<double>& min_sensitivities, double threshold) {
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(rows.size());
  labels.reserve(rows.size());
  for (const auto& r : rows) {
    scores.push_back(r.score);
    labels.push_back(r.label);
  }
  EvalSummary s;
  s.auc = metrics::auc(scores, labels);
  s.at_threshold = metrics::confusion_at_threshold(scores, labels, threshold);
  s.at_threshold.auc = s.auc;
  for (double m : min_sensitivities)
    s.constrained.push_back(metrics::spec_at_min_sens(scores, labels, m));
  return s;
}

namespace {

std::string fmt_metric(double v) { return fmt_double(v, 10); }

void append_report(std::ostringstream& out, const metrics::MetricsReport& r,
                   const std::string& constraint) {
  out << "sensitivity," << fmt_metric(r.sensitivity) << "," << constraint << "\n";
  out << "specificity," << fmt_metric(r.specificity) << "," << constraint << "\n";
  out << "precision," << fmt_metric(r.precision) << "," << constraint << "\n";
  out << "f1," << fmt_metric(r.f1) << "," << constraint << "\n";
  out << "accuracy," << fmt_metric(r.accuracy) << "," << constraint << "\n";
  out << "threshold," << fmt_metric(r.threshold) << "," << constraint << "\n";
  if (r.precision_undefined) out << "precision_undefined,1," << constraint << "\n";
  if (r.constraint_unmet) out << "constraint_unmet,1," << constraint << "\n";
}

}  // namespace

void write_metrics_csv(const fs::path& path, const EvalSummary& summary) {
  std::ostringstream out;
  out << "metric,value,constraint\n";
  out << "auc," << fmt_metric(summary.auc) << ",\n";
  append_report(out, summary.at_threshold,
                "threshold=" + fmt_metric(summary.at_threshold.threshold));
  for (const auto& r : summary.constrained)
    append_report(out, r, "min_sens=" + fmt_metric(r.min_sensitivity_constraint.value()));
  write_text_file(path, out.str());
}

void write_roc_csv(const fs::path& path, const std::vector<PredictionRow>& rows) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : rows) {
    scores.push_back(r.score);
    labels.push_back(r.label);
  }
  const auto curve = metrics::roc_curve(scores, labels);
  std::ostringstream out;
  out << "fpr,tpr,threshold\n";
  for (const auto& p : curve.points)
    out << fmt_metric(p.fpr) << "," << fmt_metric(p.tpr) << "," << fmt_metric(p.threshold)
        << "\n";
  write_text_file(path, out.str());
}

namespace {

/// Progressive `key,value` record of seeds, config hash and artifact
/// checksums; rewritten after each addition so a failed run keeps the rows
/// for every artifact that was completed.
class RunRecord {
 public:
  RunRecord() = default;
  RunRecord(fs::path path, const config::PipelineConfig& cfg) : path_(std::move(path)) {
    const std::string canon = canonical_config_string(cfg);
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016" PRIx64, fnv1a64(canon.data(), canon.size()));
    const StageSeeds seeds = derive_stage_seeds(cfg.seed);
    rows_.emplace_back("config_hash", hex);
    rows_.emplace_back("seed", std::to_string(cfg.seed));
    rows_.emplace_back("seed.stage1", std::to_string(seeds.stage1));
    rows_.emplace_back("seed.filter", std::to_string(seeds.filter));
    rows_.emplace_back("seed.stage2", std::to_string(seeds.stage2));
    rows_.emplace_back("seed.stage3", std::to_string(seeds.stage3));
    flush();
  }

  void add_artifact(const std::string& name, const fs::path& file) {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016" PRIx64, file_checksum(file));
    rows_.emplace_back("artifact." + name + ".path", file.filename().string());
    rows_.emplace_back("artifact." + name + ".fnv64", hex);
    last_artifact_ = file;
    flush();
  }

  const fs::path& last_artifact() const { return last_artifact_; }
  bool active() const { return !path_.empty(); }

 private:
  void flush() const {
    std::ostringstream out;
    out << "key,value\n";
    for (const auto& [k, v] : rows_) out << k << "," << v << "\n";
    write_text_file(path_, out.str());
  }

  fs::path path_;
  std::vector<std::pair<std::string, std::string>> rows_;
  fs::path last_artifact_;
};

/// Runs one stage, decorating any failure with the stage name and the last
/// artifact that was written successfully.
void run_stage(const std::string& name, const RunRecord* record,
               const std::function<void()>& body) {
  auto decorate = [&](const std::string& what) {
    std::string msg = "stage " + name + " failed: " + what;
    if (record && record->active() && !record->last_artifact().empty())
      msg += " (last good artifact: " + record->last_artifact().string() + ")";
    return msg;
  };
  try {
    body();
  } catch (const ConfigError& e) {
    throw ConfigError(decorate(e.what()));
  } catch (const DataError& e) {
    throw DataError(decorate(e.what()));
  } catch (const NumericError& e) {
    throw NumericError(decorate(e.what()));
  }
}

filter::MpTrainConfig stage1_train_config(const config::PipelineConfig& cfg) {
  filter::MpTrainConfig tc;
  tc.epochs = cfg.stage1.epochs;
  tc.lr = cfg.stage1.lr;
  tc.momentum = cfg.stage1.momentum;
  tc.weight_decay = cfg.stage1.weight_decay;
  tc.seed = derive_stage_seeds(cfg.seed).stage1;
  return tc;
}

nn::LinearParams load_stage1_checkpoint(const fs::path& path) {
  const auto tensors = nn::read_checkpoint(path);
  const nn::NamedTensor* w = nullptr;
  const nn::NamedTensor* b = nullptr;
  for (const auto& t : tensors) {
    if (t.name == "weight") w = &t;
    if (t.name == "bias") b = &t;
  }
  if (!w || !b) throw DataError("stage-1 checkpoint missing tensors: " + path.string());
  nn::LinearParams p = nn::LinearParams::zeros(w->rows, w->cols);
  for (std::size_t i = 0; i < w->values.size(); ++i) p.weight.data()[i] = w->values[i];
  for (std::size_t i = 0; i < b->values.size() && i < p.bias.size(); ++i)
    p.bias[i] = b->values[i];
  return p;
}

void write_epoch_log_stage2(const fs::path& path,
                            const std::vector<contrastive::EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,loss,lr,positive_pair_mean_sim\n";
  for (const auto& row : log)
    out << row.epoch << "," << fmt_double(row.loss) << "," << fmt_double(row.lr) << ","
        << fmt_double(row.positive_pair_mean_sim) << "\n";
  write_text_file(path, out.str());
}

void write_epoch_log_stage3(const fs::path& path, const std::vector<mil::MilEpochLog>& log) {
  std::ostringstream out;
  out << "epoch,loss,lr\n";
  for (const auto& row : log)
    out << row.epoch << "," << fmt_double(row.loss) << "," << fmt_double(row.lr) << "\n";
  write_text_file(path, out.str());
}

void do_train_filter(const config::PipelineConfig& cfg, RunRecord* record) {
  const auto manifest = data::read_manifest(cfg.manifest);
  const auto bags = data::load_split(manifest, data::Split::train);
  auto params = filter::train_mp_classifier(bags, stage1_train_config(cfg));
  const fs::path out = cfg.work_dir / artifact::stage1_checkpoint;
  nn::save_views(out, params.views());
  if (record) record->add_artifact("stage1_checkpoint", out);
}

void do_filter(const config::PipelineConfig& cfg, RunRecord* record) {
  const auto manifest = data::read_manifest(cfg.manifest);
  std::optional<nn::LinearParams> params;
  if (cfg.filter.strategy == filter::Strategy::mp_topk)
    params = load_stage1_checkpoint(cfg.work_dir / artifact::stage1_checkpoint);
  const auto corpus = filter::build_filter_corpus(
      manifest, params ? &*params : nullptr, cfg.filter.k, cfg.filter.strategy,
      cfg.filter.source_fraction, derive_stage_seeds(cfg.seed).filter);
  const fs::path out = cfg.work_dir / artifact::corpus;
  filter::write_corpus(out, corpus);
  if (record) record->add_artifact("corpus", out);
}

void do_train_adapter(const config::PipelineConfig& cfg, RunRecord* record,
                      const std::optional<fs::path>& paired_views) {
  contrastive::ContrastiveConfig sc = cfg.stage2;
  sc.seed = derive_stage_seeds(cfg.seed).stage2;
  contrastive::AdapterTrainResult result;
  if (paired_views) {
    result = contrastive::train_adapter_on_views(contrastive::read_paired_views(*paired_views),
                                                 sc);
  } else {
    const auto manifest = data::read_manifest(cfg.manifest);
    const auto corpus = filter::read_corpus(cfg.work_dir / artifact::corpus);
    result = contrastive::train_adapter(corpus, manifest, sc);
  }
  const fs::path ckpt = cfg.work_dir / artifact::adapter_checkpoint;
  contrastive::save_adapter_checkpoint(ckpt, result.adapter, result.projection);
  const fs::path log = cfg.work_dir / artifact::stage2_log;
  write_epoch_log_stage2(log, result.log);
  if (record) {
    record->add_artifact("adapter_checkpoint", ckpt);
    record->add_artifact("stage2_log", log);
  }
}

void do_extract(const config::PipelineConfig& cfg, RunRecord* record) {
  const auto manifest = data::read_manifest(cfg.manifest);
  const auto adapter = contrastive::load_adapter(cfg.work_dir / artifact::adapter_checkpoint);
  const fs::path out_dir = cfg.work_dir / artifact::features_dir;
  contrastive::extract_features(adapter, manifest, out_dir, cfg.threads);
  if (record) record->add_artifact("features_manifest", out_dir / "manifest.csv");
}

void do_train_mil(const config::PipelineConfig& cfg, RunRecord* record) {
  const auto adapted =
      data::read_manifest(cfg.work_dir / artifact::features_dir / "manifest.csv");
  const auto train_bags = data::load_split(adapted, data::Split::train);

  mil::MilTrainConfig mc;
  mc.kind = cfg.stage3.head;
  mc.epochs = cfg.stage3.epochs;
  mc.lr = cfg.stage3.lr;
  mc.weight_decay = cfg.stage3.weight_decay;
  mc.attention_hidden = cfg.stage3.attention_hidden;
  mc.seed = derive_stage_seeds(cfg.seed).stage3;
  auto result = mil::train_mil(train_bags, mc);

  const fs::path ckpt = cfg.work_dir / artifact::mil_checkpoint;
  result.head.save(ckpt);
  const fs::path log = cfg.work_dir / artifact::stage3_log;
  write_epoch_log_stage3(log, result.log);

  // Score the held-out split with the freshly saved head (reload keeps the
  // on-disk float32 quantization identical between this path and a later
  // standalone predict).
  const mil::MilHead head = mil::load_mil_head(ckpt);
  std::vector<PredictionRow> rows;
  for (std::size_t i : adapted.indices_of(data::Split::test)) {
    const auto bag = data::load_bag(adapted, adapted.entries[i]);
    rows.push_back({bag.bag_id, mil::predict(head, bag).probability, bag.label});
  }
  if (rows.empty()) throw DataError("adapted manifest has no test split to score");
  const fs::path pred = cfg.work_dir / artifact::predictions;
  write_predictions(pred, rows);

  if (record) {
    record->add_artifact("mil_checkpoint", ckpt);
    record->add_artifact("stage3_log", log);
    record->add_artifact("predictions", pred);
  }
}

EvalSummary do_eval(const config::PipelineConfig& cfg, RunRecord* record) {
  const auto rows = read_predictions(cfg.work_dir / artifact::predictions);
  const EvalSummary summary =
      evaluate_predictions(rows, cfg.min_sensitivities, cfg.eval_threshold);
  const fs::path mpath = cfg.work_dir / artifact::metrics;
  const fs::path rpath = cfg.work_dir / artifact::roc;
  write_metrics_csv(mpath, summary);
  write_roc_csv(rpath, rows);
  if (record) {
    record->add_artifact("metrics", mpath);
    record->add_artifact("roc", rpath);
  }
  return summary;
}

}  // namespace

std::filesystem::path run_synth(const fs::path& spec_path, const fs::path& out_dir,
                                std::optional<std::uint64_t> seed_override) {
  auto req = config::load_synthetic_spec(spec_path);
  if (seed_override) req.spec.seed = *seed_override;
  fs::create_directories(out_dir);
  auto manifest = data::generate_synthetic(req.spec, out_dir);
  manifest = data::split_dataset(manifest, req.train_fraction, mix_seed(req.spec.seed, 0x5711));
  const fs::path out = out_dir / "manifest.csv";
  data::write_manifest(manifest, out);
  return out;
}

void run_split(const fs::path& manifest_path, const fs::path& out_path, double train_fraction,
               std::uint64_t seed) {
  const auto manifest = data::read_manifest(manifest_path);
  auto split = data::split_dataset(manifest, train_fraction, seed);
  // Keep entry paths resolvable from the new location.
  if (out_path.parent_path() != manifest_path.parent_path()) {
    for (auto& e : split.entries) {
      const fs::path abs = fs::absolute(manifest.resolve(e));
      e.path = abs.generic_string();
    }
  }
  data::write_manifest(split, out_path);
}

void run_train_filter(const config::PipelineConfig& cfg) {
  fs::create_directories(cfg.work_dir);
  run_stage("train-filter", nullptr, [&] { do_train_filter(cfg, nullptr); });
}

void run_score(const config::PipelineConfig& cfg) {
  fs::create_directories(cfg.work_dir);
  run_stage("score", nullptr, [&] {
    const auto manifest = data::read_manifest(cfg.manifest);
    const auto params = load_stage1_checkpoint(cfg.work_dir / artifact::stage1_checkpoint);
    std::ostringstream out;
    out << "bag_id,instance_index,score\n";
    for (const auto& entry : manifest.entries) {
      const auto bag = data::load_bag(manifest, entry);
      for (const auto& sp : filter::score_patches(params, bag))
        out << sp.bag_id << "," << sp.instance_index << "," << fmt_double(sp.score) << "\n";
    }
    write_text_file(cfg.work_dir / artifact::scores, out.str());
  });
}

void run_filter(const config::PipelineConfig& cfg) {
  fs::create_directories(cfg.work_dir);
  run_stage("filter", nullptr, [&] { do_filter(cfg, nullptr); });
}

void run_train_adapter(const config::PipelineConfig& cfg,
                       const std::optional<fs::path>& paired_views) {
  fs::create_directories(cfg.work_dir);
  run_stage("train-adapter", nullptr, [&] { do_train_adapter(cfg, nullptr, paired_views); });
}

void run_extract(const config::PipelineConfig& cfg) {
  fs::create_directories(cfg.work_dir);
  run_stage("extract", nullptr, [&] { do_extract(cfg, nullptr); });
}

void run_train_mil(const config::PipelineConfig& cfg) {
  fs::create_directories(cfg.work_dir);
  run_stage("train-mil", nullptr, [&] { do_train_mil(cfg, nullptr); });
}

EvalSummary run_eval(const fs::path& predictions_path,
                     const std::vector<double>& min_sensitivities, double threshold,
                     const fs::path& out_metrics, const fs::path& out_roc) {
  const auto rows = read_predictions(predictions_path);
  const EvalSummary summary = evaluate_predictions(rows, min_sensitivities, threshold);
  write_metrics_csv(out_metrics, summary);
  write_roc_csv(out_roc, rows);
  return summary;
}

EvalSummary run_pipeline(const config::PipelineConfig& cfg) {
  fs::create_directories(cfg.work_dir);
  RunRecord record(cfg.work_dir / artifact::run_manifest, cfg);
  run_stage("train-filter", &record, [&] { do_train_filter(cfg, &record); });
  run_stage("filter", &record, [&] { do_filter(cfg, &record); });
  run_stage("train-adapter", &record, [&] { do_train_adapter(cfg, &record, {}); });
  run_stage("extract", &record, [&] { do_extract(cfg, &record); });
  run_stage("train-mil", &record, [&] { do_train_mil(cfg, &record); });
  EvalSummary summary;
  run_stage("eval", &record, [&] { summary = do_eval(cfg, &record); });
  return summary;
}

std::vector<SweepRow> run_sweep_k(const config::PipelineConfig& cfg,
                                  const std::vector<std::size_t>& k_values,
                                  const fs::path& out_csv) {
  if (k_values.empty()) throw ConfigError("sweep-k needs at least one k value");
  for (std::size_t k : k_values)
    if (k < 1) throw ConfigError("sweep-k: every k must be >= 1");

  fs::create_directories(cfg.work_dir);
  const fs::path stage1 = cfg.work_dir / artifact::stage1_checkpoint;
  if (!fs::exists(stage1))
    run_stage("train-filter", nullptr, [&] { do_train_filter(cfg, nullptr); });

  std::vector<SweepRow> rows;
  for (std::size_t k : k_values) {
    config::PipelineConfig sub = cfg;
    sub.filter.k = k;
    sub.work_dir = cfg.work_dir / ("sweep_k" + std::to_string(k));
    fs::create_directories(sub.work_dir);
    fs::copy_file(stage1, sub.work_dir / artifact::stage1_checkpoint,
                  fs::copy_options::overwrite_existing);
    run_stage("filter", nullptr, [&] { do_filter(sub, nullptr); });
    run_stage("train-adapter", nullptr, [&] { do_train_adapter(sub, nullptr, {}); });
    run_stage("extract", nullptr, [&] { do_extract(sub, nullptr); });
    run_stage("train-mil", nullptr, [&] { do_train_mil(sub, nullptr); });

    const auto preds = read_predictions(sub.work_dir / artifact::predictions);
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& r : preds) {
      scores.push_back(r.score);
      labels.push_back(r.label);
    }
    SweepRow row;
    row.k = k;
    row.auc = metrics::auc(scores, labels);
    row.spec90 = metrics::spec_at_min_sens(scores, labels, 0.90).specificity;
    row.spec95 = metrics::spec_at_min_sens(scores, labels, 0.95).specificity;
    rows.push_back(row);
  }

  std::ostringstream out;
  out << "k,auc,spec90,spec95\n";
  for (const auto& r : rows)
    out << r.k << "," << fmt_double(r.auc, 10) << "," << fmt_double(r.spec90, 10) << ","
        << fmt_double(r.spec95, 10) << "\n";
  write_text_file(out_csv, out.str());
  return rows;
}

std::string canonical_config_string(const config::PipelineConfig& cfg) {
  std::ostringstream out;
  out << "manifest=" << cfg.manifest.generic_string() << "\n";
  out << "work_dir=" << cfg.work_dir.generic_string() << "\n";
  out << "seed=" << cfg.seed << "\n";
  out << "threads=" << cfg.threads << "\n";
  out << "stage1.epochs=" << cfg.stage1.epochs << "\n";
  out << "stage1.lr=" << fmt_double(cfg.stage1.lr) << "\n";
  out << "stage1.momentum=" << fmt_double(cfg.stage1.momentum) << "\n";
  out << "stage1.weight_decay=" << fmt_double(cfg.stage1.weight_decay) << "\n";
  out << "filter.strategy=" << filter::strategy_name(cfg.filter.strategy) << "\n";
  out << "filter.k=" << cfg.filter.k << "\n";
  out << "filter.source_fraction=" << fmt_double(cfg.filter.source_fraction) << "\n";
  out << "stage2.epochs=" << cfg.stage2.epochs << "\n";
  out << "stage2.batch_size=" << cfg.stage2.batch_size << "\n";
  out << "stage2.lr=" << fmt_double(cfg.stage2.lr) << "\n";
  out << "stage2.momentum=" << fmt_double(cfg.stage2.momentum) << "\n";
  out << "stage2.weight_decay=" << fmt_double(cfg.stage2.weight_decay) << "\n";
  out << "stage2.temperature=" << fmt_double(cfg.stage2.temperature) << "\n";
  out << "stage2.aug_noise_sigma=" << fmt_double(cfg.stage2.aug.noise_sigma) << "\n";
  out << "stage2.aug_dropout_rate=" << fmt_double(cfg.stage2.aug.dropout_rate) << "\n";
  out << "stage2.aug_scale_min=" << fmt_double(cfg.stage2.aug.scale_min) << "\n";
  out << "stage2.aug_scale_max=" << fmt_double(cfg.stage2.aug.scale_max) << "\n";
  out << "stage2.projection_hidden=" << cfg.stage2.projection_hidden << "\n";
  out << "stage2.projection_dim=" << cfg.stage2.projection_dim << "\n";
  out << "stage2.lr_min=" << fmt_double(cfg.stage2.lr_min) << "\n";
  out << "stage3.head=" << mil::head_kind_name(cfg.stage3.head) << "\n";
  out << "stage3.epochs=" << cfg.stage3.epochs << "\n";
  out << "stage3.lr=" << fmt_double(cfg.stage3.lr) << "\n";
  out << "stage3.weight_decay=" << fmt_double(cfg.stage3.weight_decay) << "\n";
  out << "stage3.attention_hidden=" << cfg.stage3.attention_hidden << "\n";
  out << "eval.min_sensitivities=";
  for (std::size_t i = 0; i < cfg.min_sensitivities.size(); ++i)
    out << (i ? "," : "") << fmt_double(cfg.min_sensitivities[i]);
  out << "\n";
  out << "eval.threshold=" << fmt_double(cfg.eval_threshold) << "\n";
  return out.str();
}

}  // namespace wsiscreen::pipeline
