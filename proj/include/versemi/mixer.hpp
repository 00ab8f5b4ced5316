#pragma once

#include <cmath>
#include <cstdint>

#include "versemi/grid.hpp"
#include "versemi/rng.hpp"

namespace versemi {

struct CutMask {
  BinaryMask mask;
  double fraction = 0.0;  // fraction of voxels equal to 1
};

namespace detail {

// Best depth c for fixed (a, b): |a*b*c - target| minimized.
inline std::int64_t best_depth(std::int64_t a, std::int64_t b, double target, int w_max) {
  const double ideal = target / static_cast<double>(a * b);
  return std::clamp<std::int64_t>(std::llround(ideal), 1, w_max);
}

}  // namespace detail

// One axis-aligned cuboid of 1s covering a uniformly drawn 30..70% of the
// grid. Integer sides are fitted to the drawn fraction within +-0.02; side
// aspect is jittered so the cut geometry varies between draws.
inline CutMask sample_cut_mask(Shape3 shape, Rng& rng) {
  require(shape_valid(shape, 4), ErrorCode::invalid_argument,
          "cut mask needs every dim >= 4");
  const auto total = voxel_count(shape);
  const double tol = 0.02 * static_cast<double>(total);

  std::int64_t a = 0, b = 0, c = 0;
  double fraction = 0.0;
  bool fitted = false;
  // On coarse grids a drawn fraction may have no integer-sided cuboid within
  // the rounding slack; such draws are rejected and redrawn.
  for (int attempt = 0; attempt < 50 && !fitted; ++attempt) {
    const double f = rng.uniform(0.3, 0.7);
    const double target = f * static_cast<double>(total);
    const double cube = std::cbrt(f);

    auto jittered = [&](int dim) {
      const double scale = std::exp(rng.uniform(-0.25, 0.25));
      return std::clamp<std::int64_t>(std::llround(dim * cube * scale), 1, dim);
    };
    a = jittered(shape[0]);
    b = jittered(shape[1]);
    c = detail::best_depth(a, b, target, shape[2]);

    const auto err_of = [&](std::int64_t aa, std::int64_t bb, std::int64_t cc) {
      return std::abs(static_cast<double>(aa * bb * cc) - target);
    };
    double err = err_of(a, b, c);
    if (err > tol) {
      // refit (b, c) for the drawn a
      for (std::int64_t bb = 1; bb <= shape[1]; ++bb) {
        const auto cc = detail::best_depth(a, bb, target, shape[2]);
        if (err_of(a, bb, cc) < err) {
          err = err_of(a, bb, cc);
          b = bb;
          c = cc;
        }
      }
    }
    if (err > tol) {
      // exhaustive (a, b) as a last resort
      for (std::int64_t aa = 1; aa <= shape[0]; ++aa)
        for (std::int64_t bb = 1; bb <= shape[1]; ++bb) {
          const auto cc = detail::best_depth(aa, bb, target, shape[2]);
          if (err_of(aa, bb, cc) < err) {
            err = err_of(aa, bb, cc);
            a = aa;
            b = bb;
            c = cc;
          }
        }
    }
    fitted = err <= tol;
  }
  require(fitted, ErrorCode::invalid_argument,
          "shape too small to realize a 30..70% cut with integer sides");
  fraction = static_cast<double>(a * b * c) / static_cast<double>(total);

  const int z0 = static_cast<int>(rng.index(shape[0] - a + 1));
  const int y0 = static_cast<int>(rng.index(shape[1] - b + 1));
  const int x0 = static_cast<int>(rng.index(shape[2] - c + 1));
  CutMask cut{BinaryMask(shape), fraction};
  for (int z = z0; z < z0 + a; ++z)
    for (int y = y0; y < y0 + b; ++y)
      for (int x = x0; x < x0 + c; ++x) cut.mask.at(z, y, x) = 1;
  return cut;
}

struct MixedSample {
  Volume image;
  BinaryMask label;  // meaningful only when has_label
  bool has_label = false;
  int task_i = 0, task_j = 0;
  CutMask cut;
};

// image = x_i (.) M + x_j (.) (1 - M); label mixed the same way.
inline MixedSample mix_labeled(const Volume& x_i, const BinaryMask& y_i, const Volume& x_j,
                               const BinaryMask& y_j, CutMask cut, int task_i = 0,
                               int task_j = 0) {
  require_same_shape(x_i.shape, x_j.shape, "mix_labeled");
  require_same_shape(x_i.shape, y_i.shape, "mix_labeled");
  require_same_shape(x_i.shape, y_j.shape, "mix_labeled");
  require_same_shape(x_i.shape, cut.mask.shape, "mix_labeled");
  require(mask_is_binary(y_i) && mask_is_binary(y_j), ErrorCode::non_binary_mask,
          "mix_labeled: labels must be binary");
  MixedSample out;
  out.image = Volume(x_i.shape, x_i.spacing);
  out.label = BinaryMask(x_i.shape, x_i.spacing);
  out.has_label = true;
  out.task_i = task_i;
  out.task_j = task_j;
  for (std::int64_t i = 0; i < out.image.size(); ++i) {
    const bool m = cut.mask.data[i] != 0;
    out.image.data[i] = m ? x_i.data[i] : x_j.data[i];
    out.label.data[i] = m ? y_i.data[i] : y_j.data[i];
  }
  out.cut = std::move(cut);
  return out;
}

inline MixedSample mix_unlabeled(const Volume& x_i, const Volume& x_j, CutMask cut) {
  require_same_shape(x_i.shape, x_j.shape, "mix_unlabeled");
  require_same_shape(x_i.shape, cut.mask.shape, "mix_unlabeled");
  MixedSample out;
  out.image = Volume(x_i.shape, x_i.spacing);
  out.has_label = false;
  for (std::int64_t i = 0; i < out.image.size(); ++i)
    out.image.data[i] = cut.mask.data[i] ? x_i.data[i] : x_j.data[i];
  out.cut = std::move(cut);
  return out;
}

enum class CutSide { kept, complement };

inline BinaryMask restrict_label(const BinaryMask& y, const CutMask& cut, CutSide side) {
  require_same_shape(y.shape, cut.mask.shape, "restrict_label");
  BinaryMask out(y.shape, y.spacing);
  if (side == CutSide::kept)
    out.data = y.data * cut.mask.data;
  else
    out.data = y.data - y.data * cut.mask.data;
  return out;
}

}  // namespace versemi
