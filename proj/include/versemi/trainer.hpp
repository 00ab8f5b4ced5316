#pragma once

// Semi-supervised training loop: batch composition over the split pools, one
// Adam step per iteration on the combined objective, validation-based model
// selection, resumable checkpoints. All randomness is counter-based in
// (seed, step), so an interrupted run resumes onto the identical trajectory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "versemi/corpus.hpp"
#include "versemi/losses.hpp"
#include "versemi/metrics.hpp"

namespace versemi {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int batch_labeled = 4, batch_synthetic = 4, batch_unlabeled = 4;
  std::int64_t max_steps = 2000;
  std::int64_t val_interval = 200;
  std::uint64_t seed = 42;
  Shape3 patch{32, 32, 32};
  LossFlags loss;
  bool unsup_ramp = false;     // linear ramp of the unsupervised weight
  double unsup_ramp_frac = 0.1;
  bool poly_lr_decay = false;
  double poly_power = 0.9;
  int n_threads = 0;  // 0 = hardware default

  void validate() const {
    require(lr > 0.0, ErrorCode::invalid_argument, "learning rate must be > 0");
    require(batch_labeled >= 1, ErrorCode::invalid_argument, "batch_labeled must be >= 1");
    require(batch_synthetic >= 0 && batch_unlabeled >= 0, ErrorCode::invalid_argument,
            "batch sizes must be >= 0");
    require(max_steps >= 0, ErrorCode::invalid_argument, "max_steps must be >= 0");
    require(val_interval >= 1, ErrorCode::invalid_argument, "val_interval must be >= 1");
    require(max_steps == 0 || max_steps >= val_interval, ErrorCode::invalid_argument,
            "max_steps must be >= val_interval");
    require(shape_valid(patch, 4), ErrorCode::invalid_argument, "patch dims must be >= 4");
  }
  int threads() const {
    return n_threads > 0 ? n_threads
                         : std::max(1u, std::thread::hardware_concurrency());
  }
  double unsup_weight_at(std::int64_t step) const {
    if (!unsup_ramp) return 1.0;
    const double horizon = unsup_ramp_frac * static_cast<double>(std::max<std::int64_t>(1, max_steps));
    return std::min(1.0, static_cast<double>(step) / std::max(1.0, horizon));
  }
  double lr_at(std::int64_t step) const {
    if (!poly_lr_decay || max_steps <= 0) return lr;
    const double frac = static_cast<double>(step) / static_cast<double>(max_steps);
    return lr * std::pow(std::max(0.0, 1.0 - frac), poly_power);
  }
};

// ---------------------------------------------------------------------------
// in-memory pools resolved from a split plan

struct TrainPools {
  std::vector<std::vector<LabeledSample>> labeled;  // [task-1]
  std::vector<Volume> unlabeled;                    // flat; task identity dropped
  std::vector<EvalSample> validation;
  std::vector<EvalSample> test;
};

inline TrainPools load_pools(const std::string& root, const CorpusManifest& manifest,
                             const SplitPlan& split, const TaskRegistry& registry) {
  namespace fs = std::filesystem;
  TrainPools pools;
  pools.labeled.resize(static_cast<std::size_t>(registry.pertinent_count()));
  const auto vol_path = [&](const CorpusEntry& e) {
    return (fs::path(root) / e.volume_path).string();
  };
  const auto mask_path = [&](const CorpusEntry& e) {
    require(!e.mask_path.empty(), ErrorCode::invalid_argument,
            "entry " + e.id + " has no ground-truth mask");
    return (fs::path(root) / e.mask_path).string();
  };
  for (int k = 1; k <= registry.pertinent_count(); ++k) {
    const auto& ts = split.of_task(k);
    for (const auto& id : ts.labeled) {
      const auto& e = manifest.entry(id);
      pools.labeled[static_cast<std::size_t>(k - 1)].push_back(
          {load_volume(vol_path(e)), load_mask(mask_path(e)), k});
    }
    for (const auto& id : ts.unlabeled)
      pools.unlabeled.push_back(load_volume(vol_path(manifest.entry(id))));
    for (const auto& id : ts.validation) {
      const auto& e = manifest.entry(id);
      pools.validation.push_back({id, k, load_volume(vol_path(e)), load_mask(mask_path(e))});
    }
    for (const auto& id : ts.test) {
      const auto& e = manifest.entry(id);
      pools.test.push_back({id, k, load_volume(vol_path(e)), load_mask(mask_path(e))});
    }
  }
  return pools;
}

// ---------------------------------------------------------------------------

inline StepBatch build_step_batch(const TrainPools& pools, const TaskRegistry& registry,
                                  const TrainConfig& cfg, Rng& rng) {
  const int T = registry.pertinent_count();
  for (int k = 0; k < T; ++k)
    require(!pools.labeled[static_cast<std::size_t>(k)].empty(), ErrorCode::invalid_argument,
            "task " + std::to_string(k + 1) + " has no labeled samples");
  if (cfg.batch_unlabeled > 0)
    require(pools.unlabeled.size() >= 2, ErrorCode::invalid_argument,
            "need at least two unlabeled samples to mix");

  StepBatch batch;
  const auto draw_labeled = [&](int task) -> const LabeledSample& {
    const auto& pool = pools.labeled[static_cast<std::size_t>(task - 1)];
    return pool[static_cast<std::size_t>(rng.index(static_cast<std::int64_t>(pool.size())))];
  };

  for (int b = 0; b < cfg.batch_labeled; ++b) {
    const int t = 1 + static_cast<int>(rng.index(T));
    const auto& smp = draw_labeled(t);
    auto [xv, ym] = sample_patch(smp.x, &smp.y, cfg.patch, rng);
    batch.labeled.push_back({std::move(xv), std::move(*ym), t});
  }

  for (int b = 0; b < cfg.batch_synthetic; ++b) {
    const int i = 1 + static_cast<int>(rng.index(T));
    int j = 1 + static_cast<int>(rng.index(T - 1));
    if (j >= i) ++j;
    const auto& si = draw_labeled(i);
    const auto& sj = draw_labeled(j);
    auto [xi, yi] = sample_patch(si.x, &si.y, cfg.patch, rng);
    auto [xj, yj] = sample_patch(sj.x, &sj.y, cfg.patch, rng);
    auto cut = sample_cut_mask(cfg.patch, rng);
    auto mixed = mix_labeled(xi, *yi, xj, *yj, std::move(cut), i, j);
    SyntheticSample syn;
    syn.x = std::move(mixed.image);
    syn.y_union = std::move(mixed.label);
    syn.y_i = std::move(*yi);
    syn.y_j = std::move(*yj);
    syn.task_i = i;
    syn.task_j = j;
    syn.cut = std::move(mixed.cut);
    batch.synthetic.push_back(std::move(syn));
  }

  for (int b = 0; b < cfg.batch_unlabeled; ++b) {
    const auto n = static_cast<std::int64_t>(pools.unlabeled.size());
    const auto a = rng.index(n);
    auto b2 = rng.index(n - 1);
    if (b2 >= a) ++b2;
    auto [xa, ma] = sample_patch(pools.unlabeled[static_cast<std::size_t>(a)], nullptr,
                                 cfg.patch, rng);
    auto [xb, mb] = sample_patch(pools.unlabeled[static_cast<std::size_t>(b2)], nullptr,
                                 cfg.patch, rng);
    auto cut = sample_cut_mask(cfg.patch, rng);
    auto mixed = mix_unlabeled(xa, xb, std::move(cut));
    batch.unlabeled.push_back({std::move(mixed.image)});
  }
  return batch;
}

// One Adam update on the combined objective. Raises before the state can be
// corrupted by a non-finite loss or update.
template <class S>
LossReport train_step(ModelState<S>& st, const StepBatch& batch, const TrainConfig& cfg,
                      double unsup_weight = 1.0, LossContext<S>* ctx = nullptr) {
  LossContext<S> local_ctx;
  if (ctx == nullptr) ctx = &local_ctx;
  nn::ArrX<S> grads;
  const auto rep =
      compute_losses(st, batch, cfg.loss, unsup_weight, &grads, cfg.threads(), ctx);
  if (!std::isfinite(rep.l_total) || !grads.isFinite().all())
    fail(ErrorCode::non_finite_loss,
         "non-finite loss/gradient at step " + std::to_string(st.step + 1) + " (seed " +
             std::to_string(cfg.seed) + ")");

  st.step += 1;
  const auto t = static_cast<double>(st.step);
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  st.adam_m = b1 * st.adam_m + (S(1) - b1) * grads;
  st.adam_v = b2 * st.adam_v + (S(1) - b2) * grads.square();
  const S corr1 = static_cast<S>(1.0 - std::pow(cfg.beta1, t));
  const S corr2 = static_cast<S>(1.0 - std::pow(cfg.beta2, t));
  const S lr_t = static_cast<S>(cfg.lr_at(st.step));
  st.params -= lr_t * (st.adam_m / corr1) /
               ((st.adam_v / corr2).sqrt() + static_cast<S>(cfg.adam_eps));
  if (!st.params.isFinite().all())
    fail(ErrorCode::non_finite_loss,
         "non-finite parameters after step " + std::to_string(st.step) + " (seed " +
             std::to_string(cfg.seed) + ")");
  return rep;
}

// ---------------------------------------------------------------------------
// evaluation bridge

template <class S>
MetricsReport evaluate(const ModelState<S>& st, const std::vector<EvalSample>& samples,
                       EvalMode mode, int n_threads = 1) {
  tune_allocator_once();
  const auto registry = st.registry();
  require(!samples.empty(), ErrorCode::invalid_argument, "evaluation set is empty");
  std::vector<Grid3<float>> fg(samples.size());
  parallel_for(static_cast<int>(samples.size()), n_threads, [&](int i, int) {
    const auto& smp = samples[static_cast<std::size_t>(i)];
    const int prompt =
        mode == EvalMode::with_task_info ? smp.task_index : registry.synthetic_index();
    const auto probs = forward(st, smp.volume, PromptVector{st.cfg.prompt_dim, prompt});
    fg[static_cast<std::size_t>(i)] = foreground_grid(probs, smp.volume.spacing);
  });
  std::size_t cursor = 0;
  return evaluate_with(
      [&](const Volume&, int) { return fg[cursor++]; }, samples, registry, mode);
}

template <class S>
MetricsReport validate(const ModelState<S>& st, const std::vector<EvalSample>& validation_set,
                       int n_threads = 1) {
  return evaluate(st, validation_set, EvalMode::with_task_info, n_threads);
}

// ---------------------------------------------------------------------------

struct TrainedArtifact {
  std::string best_checkpoint, last_checkpoint, log_path, val_log_path;
  double best_val_dice_pct = 0.0;
  std::uint64_t config_fingerprint = 0;
  std::int64_t steps_run = 0;
};

namespace detail {

inline void append_line(const std::string& path, const std::string& line) {
  std::ofstream f(path, std::ios::app);
  require(f.good(), ErrorCode::io_failure, "cannot open for append: " + path);
  f << line << "\n";
}

inline std::string loss_row(std::int64_t step, const LossReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%lld,%.10g,%.10g,%.10g,%.10g", static_cast<long long>(step),
                r.l_lab, r.l_aux, r.l_unsup, r.l_total);
  return buf;
}

// keep only the header and rows with step <= last_step
inline void truncate_log(const std::string& path, std::int64_t last_step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      keep.push_back(line);
      first = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    if (std::stoll(line.substr(0, comma)) <= last_step) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace detail

// Runs (or resumes) the loop to cfg.max_steps inside run_dir:
//   log.csv, val.csv, ckpt_best.bin, ckpt_last.bin
template <class S>
TrainedArtifact fit(ModelState<S>& st, const TrainConfig& cfg, const TrainPools& pools,
                    const std::string& run_dir, bool resume = false) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(run_dir);
  TrainedArtifact art;
  art.log_path = (fs::path(run_dir) / "log.csv").string();
  art.val_log_path = (fs::path(run_dir) / "val.csv").string();
  art.best_checkpoint = (fs::path(run_dir) / "ckpt_best.bin").string();
  art.last_checkpoint = (fs::path(run_dir) / "ckpt_last.bin").string();
  art.config_fingerprint = st.fingerprint();

  double best = 0.0;
  if (resume && fs::exists(art.last_checkpoint)) {
    auto loaded = load_checkpoint<S>(art.last_checkpoint, &best);
    require(loaded.fingerprint() == st.fingerprint(), ErrorCode::checkpoint_mismatch,
            "checkpoint model config differs from the requested config");
    st = std::move(loaded);
    detail::truncate_log(art.log_path, st.step);
    detail::truncate_log(art.val_log_path, st.step);
  } else {
    std::ofstream(art.log_path, std::ios::trunc) << "step,l_lab,l_aux,l_unsup,l_total\n";
    std::ofstream(art.val_log_path, std::ios::trunc) << "step,mean_dice_pct\n";
    const auto rep0 = validate(st, pools.validation, cfg.threads());
    best = rep0.overall.dice_pct;
    {
      char buf[64];
      std::snprintf(buf, sizeof(buf), "0,%.10g", best);
      detail::append_line(art.val_log_path, buf);
    }
    save_checkpoint(art.best_checkpoint, st, best);
    save_checkpoint(art.last_checkpoint, st, best);
  }

  LossContext<S> ctx;
  while (st.step < cfg.max_steps) {
    const auto step = st.step + 1;
    Rng rng(mix64(cfg.seed, static_cast<std::uint64_t>(step), 0xb47c4ULL));
    const auto batch = build_step_batch(pools, st.registry(), cfg, rng);
    const auto rep = train_step(st, batch, cfg, cfg.unsup_weight_at(step), &ctx);
    detail::append_line(art.log_path, detail::loss_row(step, rep));

    if (step % cfg.val_interval == 0 || step == cfg.max_steps) {
      const auto vrep = validate(st, pools.validation, cfg.threads());
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%lld,%.10g", static_cast<long long>(step),
                    vrep.overall.dice_pct);
      detail::append_line(art.val_log_path, buf);
      if (vrep.overall.dice_pct > best) {
        best = vrep.overall.dice_pct;
        save_checkpoint(art.best_checkpoint, st, best);
      }
      save_checkpoint(art.last_checkpoint, st, best);
    }
  }
  if (!fs::exists(art.last_checkpoint)) save_checkpoint(art.last_checkpoint, st, best);

  art.best_val_dice_pct = best;
  art.steps_run = st.step;
  return art;
}

}  // namespace versemi
