#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "versemi/grid.hpp"

namespace versemi {

static_assert(std::endian::native == std::endian::little,
              "raw grid files are little-endian; big-endian hosts are unsupported");

namespace detail {

struct GridMeta {
  std::string dtype;
  Shape3 shape{};
  Spacing3 spacing{1.0, 1.0, 1.0};
  int task = -1;
};

inline void write_meta(const std::string& path, const GridMeta& m) {
  std::ofstream f(path, std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f << "versemi-grid v1\n";
  f << "dtype " << m.dtype << "\n";
  f << "shape " << m.shape[0] << " " << m.shape[1] << " " << m.shape[2] << "\n";
  std::ostringstream sp;
  sp.precision(17);
  sp << m.spacing[0] << " " << m.spacing[1] << " " << m.spacing[2];
  f << "spacing " << sp.str() << "\n";
  if (m.task >= 0) f << "task " << m.task << "\n";
  require(f.good(), ErrorCode::io_failure, "write failed: " + path);
}

inline GridMeta read_meta(const std::string& path) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  std::ifstream f(path);
  require(f.good(), ErrorCode::io_failure, "cannot open: " + path);
  GridMeta m;
  std::string line;
  require(static_cast<bool>(std::getline(f, line)) && line == "versemi-grid v1",
          ErrorCode::header_mismatch, "bad magic line in " + path);
  bool have_dtype = false, have_shape = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "dtype") {
      ls >> m.dtype;
      have_dtype = !m.dtype.empty();
    } else if (key == "shape") {
      ls >> m.shape[0] >> m.shape[1] >> m.shape[2];
      have_shape = !ls.fail();
    } else if (key == "spacing") {
      ls >> m.spacing[0] >> m.spacing[1] >> m.spacing[2];
      require(!ls.fail(), ErrorCode::header_mismatch, "bad spacing line in " + path);
    } else if (key == "task") {
      ls >> m.task;
    } else {
      fail(ErrorCode::header_mismatch, "unknown meta key '" + key + "' in " + path);
    }
  }
  require(have_dtype && have_shape, ErrorCode::header_mismatch, "incomplete meta: " + path);
  require(shape_valid(m.shape), ErrorCode::header_mismatch, "non-positive shape in " + path);
  return m;
}

template <class T>
void write_raw(const std::string& path, const Grid3<T>& g) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), ErrorCode::io_failure, "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(g.data.data()),
          static_cast<std::streamsize>(g.size() * static_cast<std::int64_t>(sizeof(T))));
  require(f.good(), ErrorCode::io_failure, "write failed: " + path);
}

template <class T>
void read_raw(const std::string& path, Grid3<T>& g) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  const auto expected = static_cast<std::uintmax_t>(g.size()) * sizeof(T);
  const auto actual = std::filesystem::file_size(path);
  require(actual == expected, ErrorCode::truncated_file,
          path + ": expected " + std::to_string(expected) + " bytes, found " +
              std::to_string(actual));
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_failure, "cannot open: " + path);
  f.read(reinterpret_cast<char*>(g.data.data()), static_cast<std::streamsize>(expected));
  require(f.gcount() == static_cast<std::streamsize>(expected), ErrorCode::truncated_file, path);
}

}  // namespace detail

// Grids live as <base>.raw plus a <base>.meta text sidecar.
inline void save_volume(const std::string& base, const Volume& v, int task = -1) {
  detail::write_meta(base + ".meta", {"float32", v.shape, v.spacing, task});
  detail::write_raw(base + ".raw", v);
}

inline Volume load_volume(const std::string& base) {
  const auto m = detail::read_meta(base + ".meta");
  require(m.dtype == "float32", ErrorCode::header_mismatch,
          base + ".meta: expected dtype float32, got " + m.dtype);
  Volume v(m.shape, m.spacing);
  detail::read_raw(base + ".raw", v);
  require(v.data.isFinite().all(), ErrorCode::header_mismatch,
          base + ".raw: non-finite intensities");
  return v;
}

inline void save_mask(const std::string& base, const BinaryMask& m, int task = -1) {
  require(mask_is_binary(m), ErrorCode::non_binary_mask, base + ": mask values must be 0/1");
  detail::write_meta(base + ".meta", {"uint8", m.shape, m.spacing, task});
  detail::write_raw(base + ".raw", m);
}

inline BinaryMask load_mask(const std::string& base) {
  const auto meta = detail::read_meta(base + ".meta");
  require(meta.dtype == "uint8", ErrorCode::header_mismatch,
          base + ".meta: expected dtype uint8, got " + meta.dtype);
  BinaryMask m(meta.shape, meta.spacing);
  detail::read_raw(base + ".raw", m);
  require(mask_is_binary(m), ErrorCode::non_binary_mask,
          base + ".raw: mask contains values outside {0,1}");
  return m;
}

inline std::uint64_t file_checksum(const std::string& path) {
  require(std::filesystem::exists(path), ErrorCode::missing_file, path);
  std::ifstream f(path, std::ios::binary);
  require(f.good(), ErrorCode::io_failure, "cannot open: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(f.gcount()), h);
  return h;
}

}  // namespace versemi
