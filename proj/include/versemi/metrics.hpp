#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "versemi/grid.hpp"
#include "versemi/tasks.hpp"

namespace versemi {

struct OverlapScore {
  double value = 0.0;
  bool both_empty = false;  // warning flag: 1.0 returned by convention
};

inline OverlapScore dice_score(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a.shape, b.shape, "dice_score");
  const auto na = foreground_count(a), nb = foreground_count(b);
  if (na == 0 && nb == 0) return {1.0, true};
  const auto inter = static_cast<std::int64_t>((a.data * b.data).template cast<std::int64_t>().sum());
  return {2.0 * static_cast<double>(inter) / static_cast<double>(na + nb), false};
}

inline OverlapScore jaccard_score(const BinaryMask& a, const BinaryMask& b) {
  require_same_shape(a.shape, b.shape, "jaccard_score");
  const auto na = foreground_count(a), nb = foreground_count(b);
  if (na == 0 && nb == 0) return {1.0, true};
  const auto inter = static_cast<std::int64_t>((a.data * b.data).template cast<std::int64_t>().sum());
  return {static_cast<double>(inter) / static_cast<double>(na + nb - inter), false};
}

// Foreground voxels with at least one of the six face neighbours background
// or outside the grid.
inline std::vector<std::array<int, 3>> surface_voxels(const BinaryMask& m) {
  require(foreground_count(m) > 0, ErrorCode::undefined_surface_metric,
          "surface of an empty mask is undefined");
  std::vector<std::array<int, 3>> out;
  const auto fg = [&](int z, int y, int x) {
    if (z < 0 || y < 0 || x < 0 || z >= m.shape[0] || y >= m.shape[1] || x >= m.shape[2])
      return false;
    return m.at(z, y, x) != 0;
  };
  for (int z = 0; z < m.shape[0]; ++z)
    for (int y = 0; y < m.shape[1]; ++y)
      for (int x = 0; x < m.shape[2]; ++x) {
        if (!m.at(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) ||
            !fg(z, y, x - 1) || !fg(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

namespace detail {

// "Absent" squared distance; large enough to lose against any in-grid
// distance, small enough for the envelope arithmetic to stay finite.
constexpr double kEdtFar = 1e30;

// One lower-envelope pass of the squared-distance transform along a line.
// f holds squared distances at integer positions; s is the axis spacing.
inline void edt_1d(std::vector<double>& f, std::vector<double>& scratch_d,
                   std::vector<int>& scratch_v, std::vector<double>& scratch_z, double s) {
  const int n = static_cast<int>(f.size());
  auto& d = scratch_d;
  auto& v = scratch_v;
  auto& z = scratch_z;
  d.resize(static_cast<std::size_t>(n));
  v.resize(static_cast<std::size_t>(n));
  z.resize(static_cast<std::size_t>(n) + 1);
  const double s2 = s * s;
  const auto intersect = [&](int q, int p) {
    return ((f[static_cast<std::size_t>(q)] + s2 * q * q) -
            (f[static_cast<std::size_t>(p)] + s2 * p * p)) /
           (2.0 * s2 * (q - p));
  };
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double inter = intersect(q, v[static_cast<std::size_t>(k)]);
    while (k > 0 && inter <= z[static_cast<std::size_t>(k)]) {
      --k;
      inter = intersect(q, v[static_cast<std::size_t>(k)]);
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = inter;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < static_cast<double>(q)) ++k;
    const int vk = v[static_cast<std::size_t>(k)];
    const double dq = s * (q - vk);
    d[static_cast<std::size_t>(q)] = dq * dq + f[static_cast<std::size_t>(vk)];
  }
  f = d;
}

// Exact squared Euclidean distance from every voxel to the given site set.
inline std::vector<double> edt_squared(Shape3 shape, const std::vector<std::array<int, 3>>& sites,
                                       Spacing3 spacing) {
  const auto total = voxel_count(shape);
  std::vector<double> dist(static_cast<std::size_t>(total), kEdtFar);
  const auto idx = [&](int z, int y, int x) {
    return (static_cast<std::int64_t>(z) * shape[1] + y) * shape[2] + x;
  };
  for (const auto& s : sites) dist[static_cast<std::size_t>(idx(s[0], s[1], s[2]))] = 0.0;

  std::vector<double> line, sd, sz;
  std::vector<int> sv;
  const auto present = [](double v) { return v < 0.5 * kEdtFar; };
  // pass along z
  line.resize(static_cast<std::size_t>(shape[0]));
  for (int y = 0; y < shape[1]; ++y)
    for (int x = 0; x < shape[2]; ++x) {
      bool any = false;
      for (int z = 0; z < shape[0]; ++z) {
        line[static_cast<std::size_t>(z)] = dist[static_cast<std::size_t>(idx(z, y, x))];
        any = any || present(line[static_cast<std::size_t>(z)]);
      }
      if (!any) continue;
      edt_1d(line, sd, sv, sz, spacing[0]);
      for (int z = 0; z < shape[0]; ++z)
        dist[static_cast<std::size_t>(idx(z, y, x))] = line[static_cast<std::size_t>(z)];
    }
  // pass along y
  line.resize(static_cast<std::size_t>(shape[1]));
  for (int z = 0; z < shape[0]; ++z)
    for (int x = 0; x < shape[2]; ++x) {
      bool any = false;
      for (int y = 0; y < shape[1]; ++y) {
        line[static_cast<std::size_t>(y)] = dist[static_cast<std::size_t>(idx(z, y, x))];
        any = any || present(line[static_cast<std::size_t>(y)]);
      }
      if (!any) continue;
      edt_1d(line, sd, sv, sz, spacing[1]);
      for (int y = 0; y < shape[1]; ++y)
        dist[static_cast<std::size_t>(idx(z, y, x))] = line[static_cast<std::size_t>(y)];
    }
  // pass along x
  line.resize(static_cast<std::size_t>(shape[2]));
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y) {
      bool any = false;
      for (int x = 0; x < shape[2]; ++x) {
        line[static_cast<std::size_t>(x)] = dist[static_cast<std::size_t>(idx(z, y, x))];
        any = any || present(line[static_cast<std::size_t>(x)]);
      }
      if (!any) continue;
      edt_1d(line, sd, sv, sz, spacing[2]);
      for (int x = 0; x < shape[2]; ++x)
        dist[static_cast<std::size_t>(idx(z, y, x))] = line[static_cast<std::size_t>(x)];
    }
  return dist;
}

// Distances from each voxel of `from` to the nearest voxel of `to`.
inline std::vector<double> directed_surface_distances(
    const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to,
    Shape3 shape, Spacing3 spacing) {
  const auto d2 = edt_squared(shape, to, spacing);
  std::vector<double> out;
  out.reserve(from.size());
  const auto idx = [&](const std::array<int, 3>& p) {
    return (static_cast<std::int64_t>(p[0]) * shape[1] + p[1]) * shape[2] + p[2];
  };
  for (const auto& p : from) out.push_back(std::sqrt(d2[static_cast<std::size_t>(idx(p))]));
  return out;
}

inline double percentile_linear(std::vector<double> v, double q) {
  require(!v.empty(), ErrorCode::invalid_argument, "percentile of empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

}  // namespace detail

// Symmetric average surface distance.
inline double asd(const BinaryMask& pred, const BinaryMask& gt, Spacing3 spacing = {1, 1, 1}) {
  require_same_shape(pred.shape, gt.shape, "asd");
  require(foreground_count(pred) > 0 && foreground_count(gt) > 0,
          ErrorCode::undefined_surface_metric, "asd needs two non-empty masks");
  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  const auto d_pg = detail::directed_surface_distances(sp, sg, pred.shape, spacing);
  const auto d_gp = detail::directed_surface_distances(sg, sp, pred.shape, spacing);
  const auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double d : v) s += d;
    return s / static_cast<double>(v.size());
  };
  return 0.5 * (mean(d_pg) + mean(d_gp));
}

// 95th percentile (linear interpolation) of the pooled directed surface
// distances in both directions.
inline double hd95(const BinaryMask& pred, const BinaryMask& gt, Spacing3 spacing = {1, 1, 1}) {
  require_same_shape(pred.shape, gt.shape, "hd95");
  require(foreground_count(pred) > 0 && foreground_count(gt) > 0,
          ErrorCode::undefined_surface_metric, "hd95 needs two non-empty masks");
  const auto sp = surface_voxels(pred);
  const auto sg = surface_voxels(gt);
  auto pooled = detail::directed_surface_distances(sp, sg, pred.shape, spacing);
  const auto back = detail::directed_surface_distances(sg, sp, pred.shape, spacing);
  pooled.insert(pooled.end(), back.begin(), back.end());
  return detail::percentile_linear(std::move(pooled), 0.95);
}

struct TaskMetrics {
  int n = 0;                // scored samples
  int n_surface = 0;        // samples with defined surface metrics
  int n_flagged = 0;        // samples with missing surface metrics
  int n_both_empty = 0;     // overlap-convention warnings
  double dice_pct = 0.0;    // mean Dice * 100
  double jaccard_pct = 0.0;
  double asd = 0.0;         // mean over surface-valid samples
  double hd95 = 0.0;
};

struct SampleMetrics {
  std::string id;
  int task_index = 0;
  double dice = 0.0, jaccard = 0.0;
  double asd = 0.0, hd95 = 0.0;
  bool surface_valid = false;
  bool both_empty = false;
};

struct MetricsReport {
  std::vector<std::pair<int, TaskMetrics>> per_task;
  TaskMetrics overall;
  std::vector<SampleMetrics> samples;

  const TaskMetrics& of_task(int task_index) const {
    for (const auto& [k, t] : per_task)
      if (k == task_index) return t;
    fail(ErrorCode::invalid_argument, "no metrics for task " + std::to_string(task_index));
  }
};

enum class EvalMode { with_task_info, task_agnostic };

inline const char* eval_mode_name(EvalMode m) {
  return m == EvalMode::with_task_info ? "with-task-info" : "task-agnostic";
}

struct EvalSample {
  std::string id;
  int task_index = 0;
  Volume volume;
  BinaryMask gt;
};

// forward_fg(volume, prompt_index) -> foreground probability grid.
template <class ForwardFg>
MetricsReport evaluate_with(ForwardFg&& forward_fg, const std::vector<EvalSample>& samples,
                            const TaskRegistry& registry, EvalMode mode) {
  require(!samples.empty(), ErrorCode::invalid_argument, "evaluation set is empty");
  MetricsReport report;
  for (const auto& s : samples) {
    const int prompt =
        mode == EvalMode::with_task_info ? s.task_index : registry.synthetic_index();
    const Grid3<float> p = forward_fg(s.volume, prompt);
    require_same_shape(p.shape, s.gt.shape, "evaluate");
    BinaryMask pred(p.shape, s.gt.spacing);
    for (std::int64_t i = 0; i < p.size(); ++i) pred.data[i] = p.data[i] > 0.5f ? 1 : 0;

    SampleMetrics sm;
    sm.id = s.id;
    sm.task_index = s.task_index;
    const auto d = dice_score(pred, s.gt);
    const auto j = jaccard_score(pred, s.gt);
    sm.dice = d.value;
    sm.jaccard = j.value;
    sm.both_empty = d.both_empty;
    if (foreground_count(pred) > 0 && foreground_count(s.gt) > 0) {
      sm.asd = asd(pred, s.gt, s.gt.spacing);
      sm.hd95 = hd95(pred, s.gt, s.gt.spacing);
      sm.surface_valid = true;
    }
    report.samples.push_back(std::move(sm));
  }

  const auto fold = [&](auto pred_fn) {
    TaskMetrics t;
    for (const auto& sm : report.samples) {
      if (!pred_fn(sm)) continue;
      ++t.n;
      t.dice_pct += sm.dice;
      t.jaccard_pct += sm.jaccard;
      if (sm.both_empty) ++t.n_both_empty;
      if (sm.surface_valid) {
        ++t.n_surface;
        t.asd += sm.asd;
        t.hd95 += sm.hd95;
      } else {
        ++t.n_flagged;
      }
    }
    if (t.n > 0) {
      t.dice_pct = 100.0 * t.dice_pct / t.n;
      t.jaccard_pct = 100.0 * t.jaccard_pct / t.n;
    }
    if (t.n_surface > 0) {
      t.asd /= t.n_surface;
      t.hd95 /= t.n_surface;
    } else {
      t.asd = t.hd95 = std::numeric_limits<double>::quiet_NaN();
    }
    return t;
  };

  for (int k = 1; k <= registry.pertinent_count(); ++k) {
    auto t = fold([&](const SampleMetrics& sm) { return sm.task_index == k; });
    if (t.n > 0) report.per_task.emplace_back(k, t);
  }
  report.overall = fold([](const SampleMetrics&) { return true; });
  return report;
}

inline double mean_dice_pct(const MetricsReport& r) { return r.overall.dice_pct; }

}  // namespace versemi
