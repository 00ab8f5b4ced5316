#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "versemi/io.hpp"
#include "versemi/rng.hpp"
#include "versemi/tasks.hpp"

namespace versemi {

struct CorpusEntry {
  std::string id;
  int task_index = 0;
  std::string volume_path;  // base path relative to corpus root, no extension
  std::string mask_path;    // empty when absent
};

struct CorpusManifest {
  std::uint64_t seed = 0;
  Shape3 shape{0, 0, 0};
  int n_per_task = 0;
  std::vector<std::string> task_names;
  std::vector<CorpusEntry> entries;

  std::vector<std::string> ids_of_task(int task_index) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (e.task_index == task_index) out.push_back(e.id);
    return out;
  }
  const CorpusEntry& entry(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return e;
    fail(ErrorCode::invalid_argument, "no corpus entry with id " + id);
  }
};

struct SynthParams {
  int n_per_task = 40;
  Shape3 shape{48, 48, 48};
  std::uint64_t seed = 7;
  double noise_sigma = 0.1;
  double bias_amplitude = 0.05;
};

namespace detail {

struct Vec3 {
  double z, y, x;
};

inline Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(v.z * v.z + v.y * v.y + v.x * v.x);
    if (n > 1e-9) return {v.z / n, v.y / n, v.x / n};
  }
}

inline double dot(const Vec3& a, const Vec3& b) { return a.z * b.z + a.y * b.y + a.x * b.x; }

// Family 1: axis-aligned ellipsoid with a few surface bumps.
inline BinaryMask make_lumpy_ellipsoid(Shape3 shape, Rng& rng, double scale = 1.0) {
  BinaryMask m(shape);
  const double md = scale * static_cast<double>(std::min({shape[0], shape[1], shape[2]}));
  double r[3], c[3];
  for (int a = 0; a < 3; ++a) r[a] = rng.uniform(0.14, 0.24) * md;
  for (int a = 0; a < 3; ++a) c[a] = rng.uniform(r[a] + 1.0, shape[a] - 2.0 - r[a]);
  const int n_bumps = 4 + static_cast<int>(rng.index(4));
  std::vector<std::array<double, 4>> bumps;  // z,y,x,radius
  const double rmin = std::min({r[0], r[1], r[2]});
  for (int b = 0; b < n_bumps; ++b) {
    const Vec3 u = random_unit(rng);
    const double br = rng.uniform(0.25, 0.45) * rmin;
    bumps.push_back({c[0] + u.z * r[0], c[1] + u.y * r[1], c[2] + u.x * r[2], br});
  }
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x) {
        const double dz = (z - c[0]) / r[0], dy = (y - c[1]) / r[1], dx = (x - c[2]) / r[2];
        bool inside = dz * dz + dy * dy + dx * dx <= 1.0;
        for (std::size_t b = 0; !inside && b < bumps.size(); ++b) {
          const double bz = z - bumps[b][0], by = y - bumps[b][1], bx = x - bumps[b][2];
          inside = bz * bz + by * by + bx * bx <= bumps[b][3] * bumps[b][3];
        }
        if (inside) m.at(z, y, x) = 1;
      }
  return m;
}

// Family 2: one smooth sphere.
inline BinaryMask make_sphere(Shape3 shape, Rng& rng, double scale = 1.0) {
  BinaryMask m(shape);
  const double md = scale * static_cast<double>(std::min({shape[0], shape[1], shape[2]}));
  const double r = rng.uniform(0.16, 0.26) * md;
  double c[3];
  for (int a = 0; a < 3; ++a) c[a] = rng.uniform(r + 1.0, shape[a] - 2.0 - r);
  const double r2 = r * r;
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x) {
        const double dz = z - c[0], dy = y - c[1], dx = x - c[2];
        if (dz * dz + dy * dy + dx * dx <= r2) m.at(z, y, x) = 1;
      }
  return m;
}

// Family 3: bean — a tapered tube swept along a circular arc.
inline BinaryMask make_bean(Shape3 shape, Rng& rng, double scale = 1.0) {
  BinaryMask m(shape);
  const double md = scale * static_cast<double>(std::min({shape[0], shape[1], shape[2]}));
  const double tube = rng.uniform(0.105, 0.135) * md;
  const double arc_r = rng.uniform(0.20, 0.26) * md;
  const double span = rng.uniform(1.9, 2.8);
  const Vec3 u = random_unit(rng);
  Vec3 v;
  for (;;) {
    const Vec3 w = random_unit(rng);
    v = {w.z - dot(w, u) * u.z, w.y - dot(w, u) * u.y, w.x - dot(w, u) * u.x};
    const double n = std::sqrt(dot(v, v));
    if (n > 0.2) {
      v = {v.z / n, v.y / n, v.x / n};
      break;
    }
  }
  double c[3];
  const double reach = arc_r + tube + 2.0;
  for (int a = 0; a < 3; ++a)
    c[a] = rng.uniform(reach, shape[a] - 1.0 - reach);
  const double t0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  constexpr int kArcSamples = 64;
  std::vector<std::array<double, 4>> pts(kArcSamples);  // z,y,x,local radius
  for (int s = 0; s < kArcSamples; ++s) {
    const double rel = static_cast<double>(s) / (kArcSamples - 1);  // 0..1 along arc
    const double t = t0 + rel * span;
    const double taper = 1.0 - 0.25 * (2.0 * rel - 1.0) * (2.0 * rel - 1.0);
    pts[s] = {c[0] + arc_r * (std::cos(t) * u.z + std::sin(t) * v.z),
              c[1] + arc_r * (std::cos(t) * u.y + std::sin(t) * v.y),
              c[2] + arc_r * (std::cos(t) * u.x + std::sin(t) * v.x), tube * taper};
  }
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x) {
        for (const auto& p : pts) {
          const double dz = z - p[0], dy = y - p[1], dx = x - p[2];
          if (dz * dz + dy * dy + dx * dx <= p[3] * p[3]) {
            m.at(z, y, x) = 1;
            break;
          }
        }
      }
  return m;
}

// Family 4: several separated small spheres (disconnected foreground).
inline BinaryMask make_nodules(Shape3 shape, Rng& rng, double scale = 1.0) {
  BinaryMask m(shape);
  const double md = scale * static_cast<double>(std::min({shape[0], shape[1], shape[2]}));
  const int n = 4 + static_cast<int>(rng.index(3));
  std::vector<std::array<double, 4>> balls;
  for (int b = 0; b < n; ++b) {
    const double r = rng.uniform(0.09, 0.13) * md;
    for (int attempt = 0; attempt < 200; ++attempt) {
      double c[3];
      for (int a = 0; a < 3; ++a) c[a] = rng.uniform(r + 1.0, shape[a] - 2.0 - r);
      bool ok = true;
      for (const auto& other : balls) {
        const double dz = c[0] - other[0], dy = c[1] - other[1], dx = c[2] - other[2];
        const double min_d = r + other[3] + 2.0;
        if (dz * dz + dy * dy + dx * dx < min_d * min_d) {
          ok = false;
          break;
        }
      }
      if (ok) {
        balls.push_back({c[0], c[1], c[2], r});
        break;
      }
    }
  }
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x)
        for (const auto& p : balls) {
          const double dz = z - p[0], dy = y - p[1], dx = x - p[2];
          if (dz * dz + dy * dy + dx * dx <= p[3] * p[3]) {
            m.at(z, y, x) = 1;
            break;
          }
        }
  return m;
}

inline BinaryMask make_object(int task_index, Shape3 shape, Rng& rng, double scale = 1.0) {
  switch ((task_index - 1) % 4) {
    case 0: return make_lumpy_ellipsoid(shape, rng, scale);
    case 1: return make_sphere(shape, rng, scale);
    case 2: return make_bean(shape, rng, scale);
    default: return make_nodules(shape, rng, scale);
  }
}

// Smooth low-frequency intensity bias from a 3x3x3 control grid.
inline void add_bias_field(Volume& v, double amplitude, Rng& rng) {
  double g[3][3][3];
  for (auto& plane : g)
    for (auto& row : plane)
      for (auto& cell : row) cell = rng.uniform(-amplitude, amplitude);
  const auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  for (int z = 0; z < v.shape[0]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[2]; ++x) {
        const double fz = 2.0 * z / std::max(1, v.shape[0] - 1);
        const double fy = 2.0 * y / std::max(1, v.shape[1] - 1);
        const double fx = 2.0 * x / std::max(1, v.shape[2] - 1);
        const int iz = std::min(1, static_cast<int>(fz)), iy = std::min(1, static_cast<int>(fy)),
                  ix = std::min(1, static_cast<int>(fx));
        const double tz = fz - iz, ty = fy - iy, tx = fx - ix;
        double c00 = lerp(g[iz][iy][ix], g[iz][iy][ix + 1], tx);
        double c01 = lerp(g[iz][iy + 1][ix], g[iz][iy + 1][ix + 1], tx);
        double c10 = lerp(g[iz + 1][iy][ix], g[iz + 1][iy][ix + 1], tx);
        double c11 = lerp(g[iz + 1][iy + 1][ix], g[iz + 1][iy + 1][ix + 1], tx);
        v.at(z, y, x) += static_cast<float>(lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz));
      }
}

}  // namespace detail

// Per-task foreground/background contrast; the floor keeps the
// inside-outside intensity gap above 0.3 under noise, bias and clutter.
inline double task_contrast_base(int task_index, int pertinent_count) {
  const double t = pertinent_count > 1
                       ? static_cast<double>(task_index - 1) / (pertinent_count - 1)
                       : 0.0;
  return 0.38 + 0.12 * t;
}

// Deterministically draws one (volume, mask) pair for a task. The volume holds
// exactly one foreground object of the task's family; the background carries a
// smooth bias field plus a few sub-scale distractor blobs from random families
// (never part of the mask), so intensity alone cannot settle a voxel.
inline std::pair<Volume, BinaryMask> synth_sample(int task_index, int pertinent_count,
                                                  const SynthParams& p, Rng& rng) {
  BinaryMask mask;
  bool ok = false;
  for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
    mask = detail::make_object(task_index, p.shape, rng);
    const double f = foreground_fraction(mask);
    ok = f >= 0.011 && f <= 0.385;
  }
  require(ok, ErrorCode::invalid_argument, "could not realize object fraction bounds");

  Volume v(p.shape);
  detail::add_bias_field(v, p.bias_amplitude, rng);

  const int n_clutter = 2 + static_cast<int>(rng.index(3));
  for (int b = 0; b < n_clutter; ++b) {
    const int family = 1 + static_cast<int>(rng.index(4));
    const double scale = rng.uniform(0.45, 0.70);
    const BinaryMask blob = detail::make_object(family, p.shape, rng, scale);
    const float c_cl = static_cast<float>(rng.uniform(0.25, 0.45));
    for (std::int64_t i = 0; i < v.size(); ++i)
      if (blob.data[i] && !mask.data[i]) v.data[i] += c_cl;
  }

  const double contrast = task_contrast_base(task_index, pertinent_count) + rng.uniform(0.0, 0.08);
  for (std::int64_t i = 0; i < v.size(); ++i) {
    const double fg = mask.data[i] ? contrast : 0.0;
    v.data[i] += static_cast<float>(fg + rng.normal(0.0, p.noise_sigma));
  }
  return {std::move(v), std::move(mask)};
}

inline std::string sample_id(const std::string& task_name, int i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "_%03d", i);
  return task_name + buf;
}

// Writes the corpus under root/<task>/{images,labels}/ and returns the manifest.
inline CorpusManifest generate_synthetic_corpus(const std::string& root, const SynthParams& p,
                                                const TaskRegistry& registry) {
  require(p.n_per_task >= 10, ErrorCode::invalid_argument, "n_per_task must be >= 10");
  require(shape_valid(p.shape, 16), ErrorCode::invalid_argument,
          "corpus shape dims must be >= 16");
  CorpusManifest man;
  man.seed = p.seed;
  man.shape = p.shape;
  man.n_per_task = p.n_per_task;
  man.task_names = registry.names;
  namespace fs = std::filesystem;
  for (int k = 1; k <= registry.pertinent_count(); ++k) {
    const std::string& tname = registry.name_of(k);
    fs::create_directories(fs::path(root) / tname / "images");
    fs::create_directories(fs::path(root) / tname / "labels");
    for (int i = 0; i < p.n_per_task; ++i) {
      Rng rng(mix64(p.seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i)));
      auto [vol, mask] = synth_sample(k, registry.pertinent_count(), p, rng);
      const std::string id = sample_id(tname, i);
      const std::string vrel = tname + "/images/" + id;
      const std::string mrel = tname + "/labels/" + id;
      save_volume((fs::path(root) / vrel).string(), vol, k);
      save_mask((fs::path(root) / mrel).string(), mask, k);
      man.entries.push_back({id, k, vrel, mrel});
    }
  }
  return man;
}

inline void save_manifest(const std::string& path, const CorpusManifest& m) {
  nlohmann::ordered_json j;
  j["format"] = "versemi-corpus";
  j["version"] = 1;
  j["seed"] = m.seed;
  j["shape"] = m.shape;
  j["n_per_task"] = m.n_per_task;
  j["tasks"] = m.task_names;
  auto& ents = j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : m.entries) {
    nlohmann::ordered_json je;
    je["id"] = e.id;
    je["task"] = e.task_index;
    je["volume"] = e.volume_path;
    if (!e.mask_path.empty()) je["mask"] = e.mask_path;
    ents.push_back(je);
  }
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f << j.dump(2) << "\n";
  require(f.good(), ErrorCode::io_failure, "write failed: " + path);
}

inline CorpusManifest load_manifest(const std::string& path) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  std::ifstream f(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::header_mismatch, path + ": " + e.what());
  }
  require(j.value("format", "") == "versemi-corpus", ErrorCode::header_mismatch,
          path + ": not a corpus manifest");
  CorpusManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.shape = j.at("shape").get<Shape3>();
  m.n_per_task = j.at("n_per_task").get<int>();
  m.task_names = j.at("tasks").get<std::vector<std::string>>();
  for (const auto& je : j.at("entries")) {
    CorpusEntry e;
    e.id = je.at("id").get<std::string>();
    e.task_index = je.at("task").get<int>();
    e.volume_path = je.at("volume").get<std::string>();
    if (je.contains("mask")) e.mask_path = je.at("mask").get<std::string>();
    m.entries.push_back(e);
  }
  return m;
}

// Existence plus shape agreement of every labeled pair.
inline void validate_manifest(const std::string& root, const CorpusManifest& m) {
  namespace fs = std::filesystem;
  for (const auto& e : m.entries) {
    const auto vbase = (fs::path(root) / e.volume_path).string();
    require(fs::exists(vbase + ".raw") && fs::exists(vbase + ".meta"), ErrorCode::missing_file,
            "volume files for entry " + e.id);
    const auto vmeta = detail::read_meta(vbase + ".meta");
    if (!e.mask_path.empty()) {
      const auto mbase = (fs::path(root) / e.mask_path).string();
      require(fs::exists(mbase + ".raw") && fs::exists(mbase + ".meta"), ErrorCode::missing_file,
              "mask files for entry " + e.id);
      const auto mmeta = detail::read_meta(mbase + ".meta");
      require(vmeta.shape == mmeta.shape, ErrorCode::header_mismatch,
              "entry " + e.id + ": mask shape differs from volume shape");
    }
  }
}

struct TaskSplit {
  std::vector<std::string> labeled, unlabeled, validation, test;
};

struct SplitPlan {
  double labeled_fraction = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::pair<int, TaskSplit>> per_task;  // ordered by task index

  const TaskSplit& of_task(int task_index) const {
    for (const auto& [k, s] : per_task)
      if (k == task_index) return s;
    fail(ErrorCode::invalid_argument, "no split for task " + std::to_string(task_index));
  }
};

// Per task: 20% test, then 10% of the remaining train ids for validation,
// labeled_fraction of the train ids labeled, rest unlabeled.
inline SplitPlan split_corpus(const CorpusManifest& manifest, double labeled_fraction,
                              std::uint64_t seed) {
  require(labeled_fraction > 0.0 && labeled_fraction < 1.0, ErrorCode::invalid_argument,
          "labeled_fraction must lie in (0,1)");
  SplitPlan plan;
  plan.labeled_fraction = labeled_fraction;
  plan.seed = seed;
  const int tasks = static_cast<int>(manifest.task_names.size());
  for (int k = 1; k <= tasks; ++k) {
    auto ids = manifest.ids_of_task(k);
    const auto n = static_cast<std::int64_t>(ids.size());
    require(n >= 5, ErrorCode::invalid_argument,
            "task " + std::to_string(k) + ": too few samples to populate all split sets");
    Rng rng(mix64(seed, static_cast<std::uint64_t>(k)));
    rng.shuffle(ids);
    const auto n_test = std::clamp<std::int64_t>(std::llround(0.2 * n), 1, n - 4);
    const auto n_train = n - n_test;
    const auto n_val = std::clamp<std::int64_t>(std::llround(0.1 * n_train), 1, n_train - 2);
    const auto n_lab =
        std::clamp<std::int64_t>(std::llround(labeled_fraction * n_train), 1, n_train - n_val - 1);
    TaskSplit s;
    auto it = ids.begin();
    s.test.assign(it, it + n_test);
    it += n_test;
    s.validation.assign(it, it + n_val);
    it += n_val;
    s.labeled.assign(it, it + n_lab);
    it += n_lab;
    s.unlabeled.assign(it, ids.end());
    require(!s.unlabeled.empty(), ErrorCode::invalid_argument,
            "task " + std::to_string(k) + ": no samples left for the unlabeled pool");
    plan.per_task.emplace_back(k, std::move(s));
  }
  return plan;
}

inline void save_split(const std::string& path, const SplitPlan& plan) {
  nlohmann::ordered_json j;
  j["format"] = "versemi-split";
  j["labeled_fraction"] = plan.labeled_fraction;
  j["seed"] = plan.seed;
  auto& pt = j["per_task"] = nlohmann::ordered_json::object();
  for (const auto& [k, s] : plan.per_task) {
    nlohmann::ordered_json js;
    js["labeled"] = s.labeled;
    js["unlabeled"] = s.unlabeled;
    js["validation"] = s.validation;
    js["test"] = s.test;
    pt[std::to_string(k)] = js;
  }
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f << j.dump(2) << "\n";
  require(f.good(), ErrorCode::io_failure, "write failed: " + path);
}

inline SplitPlan load_split(const std::string& path) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  std::ifstream f(path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::header_mismatch, path + ": " + e.what());
  }
  require(j.value("format", "") == "versemi-split", ErrorCode::header_mismatch,
          path + ": not a split plan");
  SplitPlan plan;
  plan.labeled_fraction = j.at("labeled_fraction").get<double>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  std::vector<int> keys;
  for (const auto& [key, val] : j.at("per_task").items()) keys.push_back(std::stoi(key));
  std::sort(keys.begin(), keys.end());
  for (int k : keys) {
    const auto& js = j.at("per_task").at(std::to_string(k));
    TaskSplit s;
    s.labeled = js.at("labeled").get<std::vector<std::string>>();
    s.unlabeled = js.at("unlabeled").get<std::vector<std::string>>();
    s.validation = js.at("validation").get<std::vector<std::string>>();
    s.test = js.at("test").get<std::vector<std::string>>();
    plan.per_task.emplace_back(k, std::move(s));
  }
  return plan;
}

// Axis-aligned random crop. With a mask present, half of the draws are
// re-drawn (up to 10 attempts) until the crop holds at least one foreground
// voxel.
inline std::pair<Volume, std::optional<BinaryMask>> sample_patch(const Volume& vol,
                                                                 const BinaryMask* mask,
                                                                 Shape3 patch, Rng& rng) {
  require(shape_valid(patch), ErrorCode::invalid_argument, "patch dims must be positive");
  for (int a = 0; a < 3; ++a)
    require(patch[a] <= vol.shape[a], ErrorCode::invalid_argument,
            "patch exceeds volume along axis " + std::to_string(a));
  if (mask != nullptr) require_same_shape(vol.shape, mask->shape, "sample_patch");

  const auto crop_has_fg = [&](const std::array<int, 3>& o) {
    for (int z = 0; z < patch[0]; ++z)
      for (int y = 0; y < patch[1]; ++y)
        for (int x = 0; x < patch[2]; ++x)
          if (mask->at(o[0] + z, o[1] + y, o[2] + x)) return true;
    return false;
  };

  const auto draw_origin = [&] {
    std::array<int, 3> o;
    for (int a = 0; a < 3; ++a)
      o[a] = static_cast<int>(rng.index(vol.shape[a] - patch[a] + 1));
    return o;
  };

  std::array<int, 3> origin = draw_origin();
  if (mask != nullptr && rng.bernoulli(0.5)) {
    for (int attempt = 0; attempt < 10 && !crop_has_fg(origin); ++attempt) origin = draw_origin();
  }

  Volume out(patch, vol.spacing);
  std::optional<BinaryMask> mout;
  if (mask != nullptr) mout.emplace(patch, vol.spacing);
  for (int z = 0; z < patch[0]; ++z)
    for (int y = 0; y < patch[1]; ++y)
      for (int x = 0; x < patch[2]; ++x) {
        out.at(z, y, x) = vol.at(origin[0] + z, origin[1] + y, origin[2] + x);
        if (mout) mout->at(z, y, x) = mask->at(origin[0] + z, origin[1] + y, origin[2] + x);
      }
  return {std::move(out), std::move(mout)};
}

}  // namespace versemi
