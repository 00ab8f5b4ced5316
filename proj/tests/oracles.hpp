// Test-only reference implementations: plain scalar loops, no shortcuts.
// These stay independent of the library's fast paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "versemi/grid.hpp"
#include "versemi/rng.hpp"

namespace oracles {

using versemi::BinaryMask;
using versemi::Shape3;
using versemi::Spacing3;
using versemi::Volume;

inline Volume bf_mix(const Volume& xi, const Volume& xj, const BinaryMask& m) {
  Volume out(xi.shape, xi.spacing);
  for (int z = 0; z < xi.shape[0]; ++z)
    for (int y = 0; y < xi.shape[1]; ++y)
      for (int x = 0; x < xi.shape[2]; ++x)
        out.at(z, y, x) = m.at(z, y, x) ? xi.at(z, y, x) : xj.at(z, y, x);
  return out;
}

inline BinaryMask bf_restrict(const BinaryMask& y, const BinaryMask& m, bool kept) {
  BinaryMask out(y.shape, y.spacing);
  for (int z = 0; z < y.shape[0]; ++z)
    for (int yy = 0; yy < y.shape[1]; ++yy)
      for (int x = 0; x < y.shape[2]; ++x) {
        const int mv = m.at(z, yy, x) ? 1 : 0;
        out.at(z, yy, x) = static_cast<std::uint8_t>(y.at(z, yy, x) * (kept ? mv : 1 - mv));
      }
  return out;
}

inline std::vector<std::array<int, 3>> bf_surface(const BinaryMask& m) {
  std::vector<std::array<int, 3>> out;
  const auto inside = [&](int z, int y, int x) {
    return z >= 0 && y >= 0 && x >= 0 && z < m.shape[0] && y < m.shape[1] && x < m.shape[2] &&
           m.at(z, y, x) != 0;
  };
  for (int z = 0; z < m.shape[0]; ++z)
    for (int y = 0; y < m.shape[1]; ++y)
      for (int x = 0; x < m.shape[2]; ++x) {
        if (!m.at(z, y, x)) continue;
        const bool interior = inside(z - 1, y, x) && inside(z + 1, y, x) && inside(z, y - 1, x) &&
                              inside(z, y + 1, x) && inside(z, y, x - 1) && inside(z, y, x + 1);
        if (!interior) out.push_back({z, y, x});
      }
  return out;
}

// O(|from| * |to|) directed nearest-surface distances.
inline std::vector<double> bf_directed(const std::vector<std::array<int, 3>>& from,
                                       const std::vector<std::array<int, 3>>& to,
                                       Spacing3 sp) {
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dz = (p[0] - q[0]) * sp[0];
      const double dy = (p[1] - q[1]) * sp[1];
      const double dx = (p[2] - q[2]) * sp[2];
      best = std::min(best, dz * dz + dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(best));
  }
  return out;
}

inline double bf_asd(const BinaryMask& pred, const BinaryMask& gt, Spacing3 sp) {
  const auto spd = bf_surface(pred);
  const auto sgt = bf_surface(gt);
  const auto d1 = bf_directed(spd, sgt, sp);
  const auto d2 = bf_directed(sgt, spd, sp);
  double m1 = 0, m2 = 0;
  for (double d : d1) m1 += d;
  for (double d : d2) m2 += d;
  return 0.5 * (m1 / static_cast<double>(d1.size()) + m2 / static_cast<double>(d2.size()));
}

inline double bf_hd95(const BinaryMask& pred, const BinaryMask& gt, Spacing3 sp) {
  const auto spd = bf_surface(pred);
  const auto sgt = bf_surface(gt);
  auto d = bf_directed(spd, sgt, sp);
  const auto d2 = bf_directed(sgt, spd, sp);
  d.insert(d.end(), d2.begin(), d2.end());
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

inline double bf_max_hausdorff(const BinaryMask& pred, const BinaryMask& gt, Spacing3 sp) {
  const auto spd = bf_surface(pred);
  const auto sgt = bf_surface(gt);
  auto d = bf_directed(spd, sgt, sp);
  const auto d2 = bf_directed(sgt, spd, sp);
  d.insert(d.end(), d2.begin(), d2.end());
  return *std::max_element(d.begin(), d.end());
}

// Random mask with at least one foreground voxel.
inline BinaryMask random_mask(Shape3 shape, versemi::Rng& rng, double p = 0.3) {
  BinaryMask m(shape);
  for (;;) {
    for (std::int64_t i = 0; i < m.size(); ++i)
      m.data[i] = rng.bernoulli(p) ? 1 : 0;
    if (versemi::foreground_count(m) > 0) return m;
  }
}

// Random blob mask (a noisy ball), denser than iid noise.
inline BinaryMask random_blob(Shape3 shape, versemi::Rng& rng) {
  BinaryMask m(shape);
  const double r = rng.uniform(0.2, 0.45) * std::min({shape[0], shape[1], shape[2]});
  const double cz = rng.uniform(0.3, 0.7) * shape[0];
  const double cy = rng.uniform(0.3, 0.7) * shape[1];
  const double cx = rng.uniform(0.3, 0.7) * shape[2];
  for (int z = 0; z < shape[0]; ++z)
    for (int y = 0; y < shape[1]; ++y)
      for (int x = 0; x < shape[2]; ++x) {
        const double dz = z - cz, dy = y - cy, dx = x - cx;
        if (std::sqrt(dz * dz + dy * dy + dx * dx) <= r + rng.uniform(-0.5, 0.5))
          m.at(z, y, x) = 1;
      }
  if (versemi::foreground_count(m) == 0) m.at(shape[0] / 2, shape[1] / 2, shape[2] / 2) = 1;
  return m;
}

inline Volume random_volume(Shape3 shape, versemi::Rng& rng) {
  Volume v(shape);
  for (std::int64_t i = 0; i < v.size(); ++i)
    v.data[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

}  // namespace oracles
