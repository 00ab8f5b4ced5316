#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <string>
#include <unordered_set>
#include <vector>

#include "versemi/error.hpp"

namespace versemi {

// Pertinent tasks are indexed 1..T; slot T+1 is the reserved all-foreground task.
struct TaskRegistry {
  std::vector<std::string> names;

  int pertinent_count() const { return static_cast<int>(names.size()); }
  int synthetic_index() const { return pertinent_count() + 1; }
  int prompt_dim() const { return pertinent_count() + 1; }

  bool is_pertinent(int task_index) const {
    return task_index >= 1 && task_index <= pertinent_count();
  }

  const std::string& name_of(int task_index) const {
    require(is_pertinent(task_index), ErrorCode::out_of_range,
            "no pertinent task with index " + std::to_string(task_index));
    return names[static_cast<std::size_t>(task_index - 1)];
  }

  // 1-based; 0 when not found.
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i) + 1;
    return 0;
  }
};

inline TaskRegistry register_tasks(std::vector<std::string> names) {
  require(names.size() >= 2, ErrorCode::invalid_argument,
          "need at least two task names (mixing requires two tasks)");
  std::unordered_set<std::string> seen;
  for (const auto& n : names) {
    require(!n.empty(), ErrorCode::invalid_argument, "task names must be non-empty");
    require(seen.insert(n).second, ErrorCode::invalid_argument, "duplicate task name: " + n);
  }
  return TaskRegistry{std::move(names)};
}

struct PromptVector {
  int dim = 0;
  int hot = 0;  // 1-based slot

  Eigen::ArrayXd values() const {
    Eigen::ArrayXd v = Eigen::ArrayXd::Zero(dim);
    v[hot - 1] = 1.0;
    return v;
  }

  template <class S>
  Eigen::Array<S, Eigen::Dynamic, 1> dense() const {
    Eigen::Array<S, Eigen::Dynamic, 1> v =
        Eigen::Array<S, Eigen::Dynamic, 1>::Zero(dim);
    v[hot - 1] = S(1);
    return v;
  }
};

inline PromptVector encode_prompt(const TaskRegistry& registry, int task_index) {
  require(task_index >= 1 && task_index <= registry.prompt_dim(), ErrorCode::out_of_range,
          "prompt index " + std::to_string(task_index) + " outside [1," +
              std::to_string(registry.prompt_dim()) + "]");
  return PromptVector{registry.prompt_dim(), task_index};
}

inline int decode_prompt(const PromptVector& p) {
  require(p.dim >= 1 && p.hot >= 1 && p.hot <= p.dim, ErrorCode::invalid_argument,
          "malformed prompt vector");
  return p.hot;
}

}  // namespace versemi
