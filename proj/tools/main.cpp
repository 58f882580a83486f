// Command-line front end for the WSI screening pipeline. Every stage is also
// runnable standalone so a failed run can be debugged from its artifacts.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wsiscreen/config.hpp"
#include "wsiscreen/io_util.hpp"
#include "wsiscreen/pipeline.hpp"

namespace ws = wsiscreen;

namespace {

struct GlobalOpts {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

ws::config::PipelineConfig load_config(const std::string& path, const GlobalOpts& g) {
  auto cfg = ws::config::load_pipeline_config(path);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) {
    if (*g.threads < 1) throw ws::ConfigError("--threads must be >= 1");
    cfg.threads = *g.threads;
  }
  return cfg;
}

void print_summary(const ws::pipeline::EvalSummary& s) {
  std::printf("auc %.6f\n", s.auc);
  for (const auto& r : s.constrained)
    std::printf("spec@sens>=%.2f %.6f (threshold %.6g)\n", r.min_sensitivity_constraint.value(),
                r.specificity, r.threshold);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised WSI screening over patch embeddings"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts global;
  std::uint64_t seed_opt = 0;
  int threads_opt = 0;
  auto* seed_flag =
      app.add_option("--seed", seed_opt, "Override the config seed everywhere");
  auto* threads_flag = app.add_option("--threads", threads_opt, "Cap worker threads");

  std::string spec_path, out_path, config_path, manifest_path, predictions_path;
  std::string views_path, metrics_path, roc_path, klist;
  double train_fraction = 0.7;
  std::uint64_t split_seed = 0;
  double eval_threshold = 0.5;
  std::vector<double> min_sens = {0.90, 0.95};

  auto* synth = app.add_subcommand("synth", "Generate a synthetic embedding dataset");
  synth->add_option("--spec", spec_path, "Synthetic spec file")->required();
  synth->add_option("--out", out_path, "Output dataset directory")->required();

  auto* split = app.add_subcommand("split", "Re-assign train/test splits in a manifest");
  split->add_option("--manifest", manifest_path)->required();
  split->add_option("--out", out_path, "Output manifest path")->required();
  split->add_option("--train-fraction", train_fraction, "Default 0.7");
  split->add_option("--split-seed", split_seed, "Shuffle seed")->required();

  auto* train_filter =
      app.add_subcommand("train-filter", "Stage 1: train the mean-pooling filter classifier");
  train_filter->add_option("--config", config_path)->required();

  auto* score = app.add_subcommand("score", "Dump per-patch scores for every bag");
  score->add_option("--config", config_path)->required();

  auto* filter_cmd = app.add_subcommand("filter", "Build the high-risk patch corpus");
  filter_cmd->add_option("--config", config_path)->required();

  auto* train_adapter =
      app.add_subcommand("train-adapter", "Stage 2: contrastive adapter training");
  train_adapter->add_option("--config", config_path)->required();
  train_adapter->add_option("--views", views_path,
                            "Optional paired-views CSV (skips embedding-space augmentation)");

  auto* extract = app.add_subcommand("extract", "Extract adapted features for every bag");
  extract->add_option("--config", config_path)->required();

  auto* train_mil = app.add_subcommand("train-mil", "Stage 3: train the MIL head");
  train_mil->add_option("--config", config_path)->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a predictions CSV");
  eval->add_option("--predictions", predictions_path)->required();
  eval->add_option("--min-sens", min_sens, "Minimum required sensitivities")
      ->delimiter(',');
  eval->add_option("--threshold", eval_threshold, "Fixed threshold, default 0.5");
  eval->add_option("--out-metrics", metrics_path, "Default: metrics.csv beside predictions");
  eval->add_option("--out-roc", roc_path, "Default: roc.csv beside predictions");

  auto* pipeline = app.add_subcommand("pipeline", "Run all stages end to end");
  pipeline->add_option("--config", config_path)->required();

  auto* sweep = app.add_subcommand("sweep-k", "Pipeline sweep over filter sizes k");
  sweep->add_option("--config", config_path)->required();
  sweep->add_option("--k-list", klist, "Comma-separated k values")->required();
  sweep->add_option("--out", out_path, "Output CSV, default <work_dir>/sweep.csv");

  try {
    app.parse(argc, argv);
    if (*seed_flag) global.seed = seed_opt;
    if (*threads_flag) global.threads = threads_opt;

    if (*synth) {
      const auto manifest = ws::pipeline::run_synth(spec_path, out_path, global.seed);
      std::printf("manifest %s\n", manifest.string().c_str());
    } else if (*split) {
      ws::pipeline::run_split(manifest_path, out_path, train_fraction,
                              global.seed.value_or(split_seed));
      std::printf("manifest %s\n", out_path.c_str());
    } else if (*train_filter) {
      ws::pipeline::run_train_filter(load_config(config_path, global));
    } else if (*score) {
      ws::pipeline::run_score(load_config(config_path, global));
    } else if (*filter_cmd) {
      ws::pipeline::run_filter(load_config(config_path, global));
    } else if (*train_adapter) {
      std::optional<std::filesystem::path> views;
      if (!views_path.empty()) views = views_path;
      ws::pipeline::run_train_adapter(load_config(config_path, global), views);
    } else if (*extract) {
      ws::pipeline::run_extract(load_config(config_path, global));
    } else if (*train_mil) {
      ws::pipeline::run_train_mil(load_config(config_path, global));
    } else if (*eval) {
      const std::filesystem::path pred(predictions_path);
      const auto dir = pred.has_parent_path() ? pred.parent_path() : std::filesystem::path(".");
      const std::filesystem::path mp = metrics_path.empty() ? dir / "metrics.csv" : std::filesystem::path(metrics_path);
      const std::filesystem::path rp = roc_path.empty() ? dir / "roc.csv" : std::filesystem::path(roc_path);
      const auto summary =
          ws::pipeline::run_eval(pred, min_sens, eval_threshold, mp, rp);
      print_summary(summary);
    } else if (*pipeline) {
      const auto cfg = load_config(config_path, global);
      const auto summary = ws::pipeline::run_pipeline(cfg);
      print_summary(summary);
      std::printf("metrics %s\n",
                  (cfg.work_dir / ws::pipeline::artifact::metrics).string().c_str());
    } else if (*sweep) {
      const auto cfg = load_config(config_path, global);
      std::vector<std::size_t> ks;
      for (const auto& tok : ws::split_csv_line(klist)) {
        if (tok.empty()) continue;
        ks.push_back(std::stoull(tok));
      }
      const std::filesystem::path out =
          out_path.empty() ? cfg.work_dir / "sweep.csv" : std::filesystem::path(out_path);
      const auto rows = ws::pipeline::run_sweep_k(cfg, ks, out);
      for (const auto& r : rows)
        std::printf("k=%zu auc=%.6f spec90=%.6f spec95=%.6f\n", r.k, r.auc, r.spec90, r.spec95);
      std::printf("sweep %s\n", out.string().c_str());
    }
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const ws::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const ws::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const ws::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
