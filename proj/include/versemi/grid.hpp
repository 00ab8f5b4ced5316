#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <type_traits>

#include "versemi/error.hpp"

namespace versemi {

using Shape3 = std::array<int, 3>;     // (d, h, w)
using Spacing3 = std::array<double, 3>;  // (sz, sy, sx), voxel units

inline std::int64_t voxel_count(const Shape3& s) {
  return static_cast<std::int64_t>(s[0]) * s[1] * s[2];
}

inline bool shape_valid(const Shape3& s, int min_dim = 1) {
  return s[0] >= min_dim && s[1] >= min_dim && s[2] >= min_dim;
}

// Dense 3D scalar grid, z-major storage (w fastest).
template <class T>
struct Grid3 {
  Shape3 shape{0, 0, 0};
  Spacing3 spacing{1.0, 1.0, 1.0};
  Eigen::Array<T, Eigen::Dynamic, 1> data;

  Grid3() = default;
  Grid3(Shape3 s, Spacing3 sp = {1.0, 1.0, 1.0}) : shape(s), spacing(sp) {
    data = Eigen::Array<T, Eigen::Dynamic, 1>::Zero(voxel_count(s));
  }

  static Grid3 zeros(Shape3 s, Spacing3 sp = {1.0, 1.0, 1.0}) { return Grid3(s, sp); }
  static Grid3 constant(Shape3 s, T value, Spacing3 sp = {1.0, 1.0, 1.0}) {
    Grid3 g(s, sp);
    g.data.setConstant(value);
    return g;
  }

  std::int64_t size() const { return data.size(); }
  std::int64_t idx(int z, int y, int x) const {
    return (static_cast<std::int64_t>(z) * shape[1] + y) * shape[2] + x;
  }
  T& at(int z, int y, int x) { return data[idx(z, y, x)]; }
  T at(int z, int y, int x) const { return data[idx(z, y, x)]; }

  bool same_shape(const Shape3& other) const { return shape == other; }
  template <class U>
  bool same_shape(const Grid3<U>& other) const { return shape == other.shape; }
};

using Volume = Grid3<float>;
using BinaryMask = Grid3<std::uint8_t>;

inline bool mask_is_binary(const BinaryMask& m) {
  return (m.data <= 1).all();
}

inline std::int64_t foreground_count(const BinaryMask& m) {
  return static_cast<std::int64_t>(m.data.template cast<std::int64_t>().sum());
}

inline double foreground_fraction(const BinaryMask& m) {
  return m.size() == 0 ? 0.0 : static_cast<double>(foreground_count(m)) / static_cast<double>(m.size());
}

inline void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
  require(a == b, ErrorCode::invalid_argument,
          std::string(what) + ": shape mismatch (" + std::to_string(a[0]) + "," +
              std::to_string(a[1]) + "," + std::to_string(a[2]) + ") vs (" +
              std::to_string(b[0]) + "," + std::to_string(b[1]) + "," + std::to_string(b[2]) + ")");
}

// Stand-alone volume sanity: finite values, every dim >= 8.
inline void validate_volume(const Volume& v, const char* what = "volume") {
  require(shape_valid(v.shape, 8), ErrorCode::invalid_argument,
          std::string(what) + ": every dimension must be >= 8");
  require(v.data.isFinite().all(), ErrorCode::invalid_argument,
          std::string(what) + ": non-finite intensities");
}

// FNV-1a, used for config fingerprints and determinism checks.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class T>
std::uint64_t grid_checksum(const Grid3<T>& g) {
  std::uint64_t h = fnv1a64(g.shape.data(), sizeof(g.shape));
  return fnv1a64(g.data.data(), static_cast<std::size_t>(g.size()) * sizeof(T), h);
}

}  // namespace versemi
