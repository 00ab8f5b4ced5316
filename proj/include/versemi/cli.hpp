#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "versemi/config.hpp"
#include "versemi/trainer.hpp"

namespace versemi::cli {

namespace fs = std::filesystem;

// precedence: config file < VERSEMI_RUN_DIR < --run-dir flag
inline std::string resolve_run_dir(const std::string& from_config,
                                   const std::string& from_flag) {
  if (!from_flag.empty()) return from_flag;
  if (const char* env = std::getenv("VERSEMI_RUN_DIR"); env != nullptr && *env != '\0')
    return (fs::path(env) / fs::path(from_config).filename()).string();
  return from_config;
}

inline std::string manifest_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.corpus_root) / "manifest.json").string();
}
inline std::string split_path(const ExperimentConfig& cfg) {
  return (fs::path(cfg.corpus_root) / "split.json").string();
}

// ---------------------------------------------------------------------------

inline int cmd_synth_data(const std::string& config_path, bool force,
                          const std::string& root_flag) {
  auto cfg = load_experiment_config(config_path);
  if (!root_flag.empty()) cfg.corpus_root = root_flag;
  const auto registry = cfg.registry();

  if (fs::exists(cfg.corpus_root) && !fs::is_empty(cfg.corpus_root) && !force)
    fail(ErrorCode::invalid_argument,
         "target directory " + cfg.corpus_root + " is not empty (use --force to overwrite)");
  fs::create_directories(cfg.corpus_root);

  const auto manifest = generate_synthetic_corpus(cfg.corpus_root, cfg.corpus, registry);
  save_manifest(manifest_path(cfg), manifest);
  const auto split = split_corpus(manifest, cfg.labeled_fraction, cfg.split_seed);
  save_split(split_path(cfg), split);

  std::printf("corpus written to %s\n", cfg.corpus_root.c_str());
  std::printf("%-10s %6s %9s %9s %9s %9s %8s\n", "task", "n", "labeled", "unlab", "val", "test",
              "fg-frac");
  for (int k = 1; k <= registry.pertinent_count(); ++k) {
    const auto& ts = split.of_task(k);
    double fmin = 1.0, fmax = 0.0;
    for (const auto& e : manifest.entries) {
      if (e.task_index != k) continue;
      const double f =
          foreground_fraction(load_mask((fs::path(cfg.corpus_root) / e.mask_path).string()));
      fmin = std::min(fmin, f);
      fmax = std::max(fmax, f);
    }
    std::printf("%-10s %6d %9zu %9zu %9zu %9zu %.3f-%.3f\n", registry.name_of(k).c_str(),
                cfg.corpus.n_per_task, ts.labeled.size(), ts.unlabeled.size(),
                ts.validation.size(), ts.test.size(), fmin, fmax);
  }
  return 0;
}

struct TrainOverrides {
  std::int64_t max_steps = -1;
  std::int64_t seed = -1;
  int threads = -1;
  std::string run_dir;
  bool resume = false;
};

inline int cmd_train(const std::string& config_path, const TrainOverrides& ov) {
  auto cfg = load_experiment_config(config_path);
  if (ov.max_steps >= 0) cfg.train.max_steps = ov.max_steps;
  if (ov.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(ov.seed);
  if (ov.threads >= 0) cfg.train.n_threads = ov.threads;
  const auto run_dir = resolve_run_dir(cfg.run_dir, ov.run_dir);
  cfg.train.validate();

  const auto manifest = load_manifest(manifest_path(cfg));
  require(manifest.task_names == cfg.tasks, ErrorCode::invalid_argument,
          "corpus task names do not match the config");
  const auto split = load_split(split_path(cfg));
  const auto registry = cfg.registry();
  const auto pools = load_pools(cfg.corpus_root, manifest, split, registry);

  auto state = init_model<float>(cfg.model, cfg.tasks);
  fs::create_directories(run_dir);
  save_experiment_config((fs::path(run_dir) / "config.json").string(), cfg);

  const auto t0 = std::chrono::steady_clock::now();
  const auto art = fit(state, cfg.train, pools, run_dir, ov.resume);
  const auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  std::printf("trained %lld steps in %.1f s (%.2f s/step)\n",
              static_cast<long long>(art.steps_run), dt,
              art.steps_run > 0 ? dt / static_cast<double>(art.steps_run) : 0.0);
  std::printf("best validation Dice: %.2f%%\n", art.best_val_dice_pct);
  std::printf("checkpoints: %s (best), %s (last)\n", art.best_checkpoint.c_str(),
              art.last_checkpoint.c_str());
  std::printf("log: %s\n", art.log_path.c_str());
  return 0;
}

inline void print_metrics_table(const MetricsReport& rep, const TaskRegistry& registry) {
  std::printf("%-12s %4s %9s %11s %12s %12s %9s\n", "task", "n", "Dice(%)", "Jaccard(%)",
              "ASD(voxel)", "95HD(voxel)", "missing");
  const auto row = [](const char* name, const TaskMetrics& t) {
    const auto num = [](double v) {
      char b[32];
      if (std::isnan(v))
        std::snprintf(b, sizeof(b), "%s", "n/a");
      else
        std::snprintf(b, sizeof(b), "%.2f", v);
      return std::string(b);
    };
    std::printf("%-12s %4d %9.2f %11.2f %12s %12s %9d\n", name, t.n, t.dice_pct, t.jaccard_pct,
                num(t.asd).c_str(), num(t.hd95).c_str(), t.n_flagged);
  };
  for (const auto& [k, t] : rep.per_task) row(registry.name_of(k).c_str(), t);
  row("overall", rep.overall);
}

inline void write_metrics_csv(const std::string& path, const MetricsReport& rep,
                              const TaskRegistry& registry) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f << "task,n,dice_pct,jaccard_pct,asd,hd95,n_surface,n_flagged\n";
  const auto row = [&](const std::string& name, const TaskMetrics& t) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g,%.10g,%.10g,%d,%d", name.c_str(), t.n,
                  t.dice_pct, t.jaccard_pct, t.asd, t.hd95, t.n_surface, t.n_flagged);
    f << buf << "\n";
  };
  for (const auto& [k, t] : rep.per_task) row(registry.name_of(k), t);
  row("overall", rep.overall);
}

inline int cmd_eval(const std::string& config_path, const std::string& checkpoint,
                    const std::string& split_name, const std::string& mode_name,
                    std::string out_dir, bool per_sample) {
  const auto cfg = load_experiment_config(config_path);
  const auto state = load_checkpoint<float>(checkpoint);
  require(state.task_names == cfg.tasks, ErrorCode::checkpoint_mismatch,
          "checkpoint task names do not match the config");
  const auto registry = state.registry();

  const auto manifest = load_manifest(manifest_path(cfg));
  const auto split = load_split(split_path(cfg));
  const auto pools = load_pools(cfg.corpus_root, manifest, split, registry);
  require(split_name == "test" || split_name == "validation", ErrorCode::invalid_argument,
          "--split must be test or validation");
  const auto& samples = split_name == "test" ? pools.test : pools.validation;

  EvalMode mode;
  if (mode_name == "with-task-info")
    mode = EvalMode::with_task_info;
  else if (mode_name == "task-agnostic")
    mode = EvalMode::task_agnostic;
  else
    fail(ErrorCode::invalid_argument, "--mode must be with-task-info or task-agnostic");

  const auto rep = evaluate(state, samples, mode, cfg.train.threads());
  std::printf("split=%s mode=%s step=%lld\n", split_name.c_str(), eval_mode_name(mode),
              static_cast<long long>(state.step));
  print_metrics_table(rep, registry);

  if (out_dir.empty()) out_dir = ".";
  fs::create_directories(out_dir);
  const auto csv =
      (fs::path(out_dir) / ("metrics_" + split_name + "_" + mode_name + ".csv")).string();
  write_metrics_csv(csv, rep, registry);
  std::printf("metrics written to %s\n", csv.c_str());
  if (per_sample) {
    const auto ps =
        (fs::path(out_dir) / ("per_sample_" + split_name + "_" + mode_name + ".csv")).string();
    std::ofstream f(ps, std::ios::trunc);
    f << "id,task,dice,jaccard,asd,hd95,surface_valid,both_empty\n";
    for (const auto& sm : rep.samples) {
      char buf[256];
      std::snprintf(buf, sizeof(buf), "%s,%d,%.10g,%.10g,%.10g,%.10g,%d,%d", sm.id.c_str(),
                    sm.task_index, sm.dice, sm.jaccard, sm.asd, sm.hd95,
                    sm.surface_valid ? 1 : 0, sm.both_empty ? 1 : 0);
      f << buf << "\n";
    }
    std::printf("per-sample metrics written to %s\n", ps.c_str());
  }
  return 0;
}

inline int cmd_predict(const std::string& checkpoint, const std::string& input,
                       const std::string& prompt_name, const std::string& output) {
  const auto state = load_checkpoint<float>(checkpoint);
  const auto registry = state.registry();
  int slot = 0;
  if (prompt_name == "all-foreground") {
    slot = registry.synthetic_index();
  } else {
    slot = registry.index_of(prompt_name);
    require(slot > 0, ErrorCode::invalid_argument,
            "unknown prompt '" + prompt_name + "' (task name or all-foreground)");
  }
  const auto vol = load_volume(input);
  const auto probs = forward(state, vol, PromptVector{state.cfg.prompt_dim, slot});
  BinaryMask mask(vol.shape, vol.spacing);
  const auto n = probs.spatial();
  for (std::int64_t i = 0; i < n; ++i) mask.data[i] = probs.v[n + i] > 0.5f ? 1 : 0;
  save_mask(output, mask);
  std::printf("prompt=%s foreground voxels=%lld written to %s\n", prompt_name.c_str(),
              static_cast<long long>(foreground_count(mask)), output.c_str());
  return 0;
}

inline int cmd_diagnose(const std::string& config_path, const std::string& checkpoint,
                        const std::string& split_name, std::string out_dir, int bins) {
  const auto cfg = load_experiment_config(config_path);
  const auto state = load_checkpoint<float>(checkpoint);
  require(state.task_names == cfg.tasks, ErrorCode::checkpoint_mismatch,
          "checkpoint task names do not match the config");
  const auto registry = state.registry();
  const auto manifest = load_manifest(manifest_path(cfg));
  const auto split = load_split(split_path(cfg));
  require(bins >= 2, ErrorCode::invalid_argument, "--bins must be >= 2");

  std::vector<std::string> ids;
  for (int k = 1; k <= registry.pertinent_count(); ++k) {
    const auto& ts = split.of_task(k);
    const std::vector<std::string>* list = nullptr;
    if (split_name == "test")
      list = &ts.test;
    else if (split_name == "validation")
      list = &ts.validation;
    else if (split_name == "labeled")
      list = &ts.labeled;
    else if (split_name == "unlabeled")
      list = &ts.unlabeled;
    else
      fail(ErrorCode::invalid_argument,
           "--split must be one of test, validation, labeled, unlabeled");
    ids.insert(ids.end(), list->begin(), list->end());
  }

  if (out_dir.empty()) out_dir = ".";
  fs::create_directories(out_dir);
  const auto emb_path = (fs::path(out_dir) / ("embeddings_" + split_name + ".csv")).string();
  const auto hist_path = (fs::path(out_dir) / ("fg_prob_hist_" + split_name + ".csv")).string();
  std::ofstream fe(emb_path, std::ios::trunc), fh(hist_path, std::ios::trunc);
  require(fe.good() && fh.good(), ErrorCode::io_failure, "cannot open export files");

  const SegNet<float> net(state.cfg);
  fe << "id,task";
  for (int i = 0; i < net.bottleneck_channels(); ++i) fe << ",e" << i;
  fe << "\n";
  fh << "id,task";
  for (int i = 0; i < bins; ++i) fh << ",bin" << i;
  fh << "\n";

  for (const auto& id : ids) {
    const auto& e = manifest.entry(id);
    const auto vol = load_volume((fs::path(cfg.corpus_root) / e.volume_path).string());
    const auto fb = extract_features(state, vol);
    fe << id << "," << e.task_index;
    char buf[32];
    for (Eigen::Index i = 0; i < fb.pooled.size(); ++i) {
      std::snprintf(buf, sizeof(buf), ",%.7g", static_cast<double>(fb.pooled[i]));
      fe << buf;
    }
    fe << "\n";

    const auto probs = forward(state, vol, PromptVector{state.cfg.prompt_dim, e.task_index});
    std::vector<std::int64_t> hist(static_cast<std::size_t>(bins), 0);
    const auto n = probs.spatial();
    for (std::int64_t i = 0; i < n; ++i) {
      const float p = probs.v[n + i];
      const int b = std::min(bins - 1, static_cast<int>(p * static_cast<float>(bins)));
      ++hist[static_cast<std::size_t>(b)];
    }
    fh << id << "," << e.task_index;
    for (const auto h : hist) fh << "," << h;
    fh << "\n";
  }
  std::printf("embeddings (%zu rows, dim %d) -> %s\n", ids.size(), net.bottleneck_channels(),
              emb_path.c_str());
  std::printf("foreground-probability histograms -> %s\n", hist_path.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"unified multi-task volumetric segmentation with task prompts"};
  app.require_subcommand(1);

  std::string config_path, root_flag, checkpoint, input, output, out_dir;
  std::string split_name = "test", mode_name = "with-task-info", prompt_name;
  bool force = false, per_sample = false;
  int bins = 20;
  TrainOverrides ov;

  auto* synth = app.add_subcommand("synth-data", "generate the synthetic corpus and split");
  synth->add_option("--config", config_path, "experiment config (JSON)")->required();
  synth->add_flag("--force", force, "overwrite an existing non-empty corpus directory");
  synth->add_option("--root", root_flag, "override the corpus root directory");

  auto* train = app.add_subcommand("train", "run (or resume) the training loop");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_flag("--resume", ov.resume, "resume from the run dir's last checkpoint");
  train->add_option("--max-steps", ov.max_steps, "override train.max_steps");
  train->add_option("--seed", ov.seed, "override train.seed");
  train->add_option("--threads", ov.threads, "override train.threads");
  train->add_option("--run-dir", ov.run_dir, "override the run directory");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a data split");
  eval->add_option("--config", config_path, "experiment config (JSON)")->required();
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split_name, "test|validation (default test)");
  eval->add_option("--mode", mode_name, "with-task-info|task-agnostic");
  eval->add_option("--out", out_dir, "output directory for CSV reports");
  eval->add_flag("--per-sample", per_sample, "also write per-sample metrics");

  auto* predict = app.add_subcommand("predict", "segment one volume with a prompt");
  predict->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  predict->add_option("--input", input, "input volume base path (no extension)")->required();
  predict->add_option("--prompt", prompt_name, "task name or all-foreground")->required();
  predict->add_option("--output", output, "output mask base path")->required();

  auto* diagnose = app.add_subcommand("diagnose", "export pooled embeddings and probability histograms");
  diagnose->add_option("--config", config_path, "experiment config (JSON)")->required();
  diagnose->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  diagnose->add_option("--split", split_name, "test|validation|labeled|unlabeled");
  diagnose->add_option("--out", out_dir, "output directory");
  diagnose->add_option("--bins", bins, "histogram bin count (default 20)");

  std::vector<const char*> argv;
  argv.push_back("versemi");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth_data(config_path, force, root_flag);
    if (train->parsed()) return cmd_train(config_path, ov);
    if (eval->parsed())
      return cmd_eval(config_path, checkpoint, split_name, mode_name, out_dir, per_sample);
    if (predict->parsed()) return cmd_predict(checkpoint, input, prompt_name, output);
    if (diagnose->parsed())
      return cmd_diagnose(config_path, checkpoint, split_name, out_dir, bins);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_category(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace versemi::cli
