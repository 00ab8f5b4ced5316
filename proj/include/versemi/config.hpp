#pragma once

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <string>

#include "json.hpp"
#include "versemi/corpus.hpp"
#include "versemi/trainer.hpp"

namespace versemi {

struct ExperimentConfig {
  std::vector<std::string> tasks{"lumpy", "sphere", "bean", "nodules"};
  std::string corpus_root = "corpus";
  SynthParams corpus;           // n_per_task, shape, seed, noise, bias
  double labeled_fraction = 0.1;
  std::uint64_t split_seed = 13;
  ModelConfig model;            // prompt_dim is derived from tasks
  TrainConfig train;
  std::string run_dir = "runs/default";

  TaskRegistry registry() const { return register_tasks(tasks); }

  void finalize() {
    model.prompt_dim = static_cast<int>(tasks.size()) + 1;
    (void)registry();  // validates task names
    require(labeled_fraction > 0.0 && labeled_fraction < 1.0, ErrorCode::invalid_argument,
            "split.labeled_fraction must lie in (0,1)");
    model.validate();
    const int stride = model.stride_total();
    for (int a = 0; a < 3; ++a) {
      require(train.patch[a] % stride == 0, ErrorCode::invalid_argument,
              "train.patch dims must be divisible by " + std::to_string(stride));
      require(corpus.shape[a] % stride == 0, ErrorCode::invalid_argument,
              "corpus.shape dims must be divisible by " + std::to_string(stride));
      require(train.patch[a] <= corpus.shape[a], ErrorCode::invalid_argument,
              "train.patch must fit inside corpus.shape");
    }
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (const auto& [key, val] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }) == allowed.end())
      fail(ErrorCode::invalid_argument, "unknown config key '" + where + key + "'");
  }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::ordered_json experiment_config_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["tasks"] = c.tasks;
  j["corpus"] = {{"root", c.corpus_root},
                 {"n_per_task", c.corpus.n_per_task},
                 {"shape", c.corpus.shape},
                 {"seed", c.corpus.seed},
                 {"noise_sigma", c.corpus.noise_sigma},
                 {"bias_amplitude", c.corpus.bias_amplitude}};
  j["split"] = {{"labeled_fraction", c.labeled_fraction}, {"seed", c.split_seed}};
  j["model"] = {{"base_width", c.model.base_width},
                {"depth", c.model.depth},
                {"head_hidden", c.model.head_hidden},
                {"seed", c.model.seed},
                {"pad_mode", c.model.pad_mode == nn::PadMode::circular ? "circular" : "zero"}};
  j["train"] = {{"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"batch_labeled", c.train.batch_labeled},
                {"batch_synthetic", c.train.batch_synthetic},
                {"batch_unlabeled", c.train.batch_unlabeled},
                {"max_steps", c.train.max_steps},
                {"val_interval", c.train.val_interval},
                {"seed", c.train.seed},
                {"patch", c.train.patch},
                {"detach_aggregate", c.train.loss.detach_aggregate},
                {"literal_aux_target", c.train.loss.literal_aux_target},
                {"w_lab", c.train.loss.w_lab},
                {"w_aux", c.train.loss.w_aux},
                {"w_unsup", c.train.loss.w_unsup},
                {"unsup_ramp", c.train.unsup_ramp},
                {"unsup_ramp_frac", c.train.unsup_ramp_frac},
                {"poly_lr_decay", c.train.poly_lr_decay},
                {"poly_power", c.train.poly_power},
                {"threads", c.train.n_threads}};
  j["run_dir"] = c.run_dir;
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::check_keys(j, {"tasks", "corpus", "split", "model", "train", "run_dir"}, "");
  detail::maybe(j, "tasks", c.tasks);
  detail::maybe(j, "run_dir", c.run_dir);
  if (j.contains("corpus")) {
    const auto& jc = j.at("corpus");
    detail::check_keys(jc, {"root", "n_per_task", "shape", "seed", "noise_sigma",
                            "bias_amplitude"},
                       "corpus.");
    detail::maybe(jc, "root", c.corpus_root);
    detail::maybe(jc, "n_per_task", c.corpus.n_per_task);
    detail::maybe(jc, "shape", c.corpus.shape);
    detail::maybe(jc, "seed", c.corpus.seed);
    detail::maybe(jc, "noise_sigma", c.corpus.noise_sigma);
    detail::maybe(jc, "bias_amplitude", c.corpus.bias_amplitude);
  }
  if (j.contains("split")) {
    const auto& js = j.at("split");
    detail::check_keys(js, {"labeled_fraction", "seed"}, "split.");
    detail::maybe(js, "labeled_fraction", c.labeled_fraction);
    detail::maybe(js, "seed", c.split_seed);
  }
  if (j.contains("model")) {
    const auto& jm = j.at("model");
    detail::check_keys(jm, {"base_width", "depth", "head_hidden", "seed", "pad_mode"}, "model.");
    detail::maybe(jm, "base_width", c.model.base_width);
    detail::maybe(jm, "depth", c.model.depth);
    detail::maybe(jm, "head_hidden", c.model.head_hidden);
    detail::maybe(jm, "seed", c.model.seed);
    if (jm.contains("pad_mode"))
      c.model.pad_mode = jm.at("pad_mode").get<std::string>() == "circular"
                             ? nn::PadMode::circular
                             : nn::PadMode::zero;
  }
  if (j.contains("train")) {
    const auto& jt = j.at("train");
    detail::check_keys(jt,
                       {"lr", "beta1", "beta2", "batch_labeled", "batch_synthetic",
                        "batch_unlabeled", "max_steps", "val_interval", "seed", "patch",
                        "detach_aggregate", "literal_aux_target", "w_lab", "w_aux", "w_unsup",
                        "unsup_ramp", "unsup_ramp_frac", "poly_lr_decay", "poly_power",
                        "threads"},
                       "train.");
    detail::maybe(jt, "lr", c.train.lr);
    detail::maybe(jt, "beta1", c.train.beta1);
    detail::maybe(jt, "beta2", c.train.beta2);
    detail::maybe(jt, "batch_labeled", c.train.batch_labeled);
    detail::maybe(jt, "batch_synthetic", c.train.batch_synthetic);
    detail::maybe(jt, "batch_unlabeled", c.train.batch_unlabeled);
    detail::maybe(jt, "max_steps", c.train.max_steps);
    detail::maybe(jt, "val_interval", c.train.val_interval);
    detail::maybe(jt, "seed", c.train.seed);
    detail::maybe(jt, "patch", c.train.patch);
    detail::maybe(jt, "detach_aggregate", c.train.loss.detach_aggregate);
    detail::maybe(jt, "literal_aux_target", c.train.loss.literal_aux_target);
    detail::maybe(jt, "w_lab", c.train.loss.w_lab);
    detail::maybe(jt, "w_aux", c.train.loss.w_aux);
    detail::maybe(jt, "w_unsup", c.train.loss.w_unsup);
    detail::maybe(jt, "unsup_ramp", c.train.unsup_ramp);
    detail::maybe(jt, "unsup_ramp_frac", c.train.unsup_ramp_frac);
    detail::maybe(jt, "poly_lr_decay", c.train.poly_lr_decay);
    detail::maybe(jt, "poly_power", c.train.poly_power);
    detail::maybe(jt, "threads", c.train.n_threads);
  }
  c.finalize();
  return c;
}

inline void save_experiment_config(const std::string& path, const ExperimentConfig& c) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f << experiment_config_json(c).dump(2) << "\n";
  require(f.good(), ErrorCode::io_failure, "write failed: " + path);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  std::ifstream f(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::header_mismatch, path + ": " + e.what());
  }
  return experiment_config_from_json(j);
}

inline std::uint64_t config_fingerprint(const ExperimentConfig& c) {
  const auto s = experiment_config_json(c).dump();
  return fnv1a64(s.data(), s.size());
}

}  // namespace versemi
