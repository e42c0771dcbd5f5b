#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pvnet/geometry.hpp"

namespace pvnet::io {

namespace detail {

inline float load_le_float(const unsigned char* p) {
  std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                       (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return std::bit_cast<float>(bits);
}

inline void store_le_float(float v, unsigned char* p) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  p[0] = static_cast<unsigned char>(bits & 0xff);
  p[1] = static_cast<unsigned char>((bits >> 8) & 0xff);
  p[2] = static_cast<unsigned char>((bits >> 16) & 0xff);
  p[3] = static_cast<unsigned char>((bits >> 24) & 0xff);
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace detail

// KITTI velodyne scans: packed little-endian float32 (x, y, z, intensity).
inline PointCloud load_kitti_bin(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_kitti_bin: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 16 != 0) {
    throw Error("load_kitti_bin: " + path.string() + " has " + std::to_string(bytes.size()) +
                " bytes, not a multiple of 16");
  }
  const std::size_t n = bytes.size() / 16;
  PointCloud cloud;
  cloud.points.resize(n);
  cloud.feature_dim = 1;
  cloud.features.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + 16 * i;
    cloud.points[i] = {detail::load_le_float(rec), detail::load_le_float(rec + 4), detail::load_le_float(rec + 8)};
    cloud.features[i] = detail::load_le_float(rec + 12);
  }
  return cloud;
}

/// Writes float32 records; intensity comes from feature column 0 when present,
/// otherwise 0.
inline void save_kitti_bin(const PointCloud& cloud, const std::filesystem::path& path) {
  std::vector<unsigned char> bytes(cloud.size() * 16);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    unsigned char* rec = bytes.data() + 16 * i;
    for (int a = 0; a < 3; ++a) detail::store_le_float(static_cast<float>(cloud.points[i][a]), rec + 4 * a);
    const float intensity = cloud.has_features() ? static_cast<float>(cloud.features[i * cloud.feature_dim]) : 0.0f;
    detail::store_le_float(intensity, rec + 12);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_kitti_bin: cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ASCII PLY. Coordinates are written with 17 significant digits so that a
// write/read cycle is exact for doubles.
inline void save_ply(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_ply: cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size() << "\n";
  out << "property double x\nproperty double y\nproperty double z\n";
  for (std::size_t c = 0; c < cloud.feature_dim; ++c) out << "property double f" << c << "\n";
  out << "end_header\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << cloud.points[i][0] << ' ' << cloud.points[i][1] << ' ' << cloud.points[i][2];
    for (std::size_t c = 0; c < cloud.feature_dim; ++c) out << ' ' << cloud.features[i * cloud.feature_dim + c];
    out << '\n';
  }
  if (!out) throw Error("save_ply: write failed for " + path.string());
}

inline PointCloud load_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_ply: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw Error("load_ply: " + path.string() + " is not a PLY file");
  std::size_t vertex_count = 0;
  bool in_vertex = false;
  std::vector<std::string> props;
  bool ascii = false;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "format") {
      std::string fmt;
      ls >> fmt;
      ascii = (fmt == "ascii");
    } else if (tok == "element") {
      std::string name;
      ls >> name;
      in_vertex = (name == "vertex");
      if (in_vertex) ls >> vertex_count;
    } else if (tok == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type == "list") throw Error("load_ply: list properties on vertices are not supported");
      props.push_back(name);
    } else if (tok == "end_header") {
      break;
    }
  }
  if (!ascii) throw Error("load_ply: only ascii PLY is supported (" + path.string() + ")");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t j = 0; j < props.size(); ++j) {
    if (props[j] == "x") ix = static_cast<int>(j);
    if (props[j] == "y") iy = static_cast<int>(j);
    if (props[j] == "z") iz = static_cast<int>(j);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw Error("load_ply: missing x/y/z properties in " + path.string());
  PointCloud cloud;
  cloud.feature_dim = props.size() - 3;
  cloud.points.resize(vertex_count);
  cloud.features.reserve(vertex_count * cloud.feature_dim);
  std::vector<double> row(props.size());
  for (std::size_t i = 0; i < vertex_count; ++i) {
    for (auto& v : row) {
      if (!(in >> v)) throw Error("load_ply: truncated vertex data in " + path.string());
    }
    cloud.points[i] = {row[ix], row[iy], row[iz]};
    for (std::size_t j = 0; j < props.size(); ++j) {
      if (static_cast<int>(j) != ix && static_cast<int>(j) != iy && static_cast<int>(j) != iz) {
        cloud.features.push_back(row[j]);
      }
    }
  }
  cloud.validate();
  return cloud;
}

/// Whitespace-separated "x y z [features...]" per line.
inline void save_xyz(const PointCloud& cloud, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("save_xyz: cannot write " + path.string());
  out << std::setprecision(17);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    out << cloud.points[i][0] << ' ' << cloud.points[i][1] << ' ' << cloud.points[i][2];
    for (std::size_t c = 0; c < cloud.feature_dim; ++c) out << ' ' << cloud.features[i * cloud.feature_dim + c];
    out << '\n';
  }
}

inline PointCloud load_xyz(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("load_xyz: cannot open " + path.string());
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    if (vals.size() < 3) throw Error("load_xyz: line " + std::to_string(lineno) + " has fewer than 3 values");
    if (first) {
      cloud.feature_dim = vals.size() - 3;
      first = false;
    } else if (vals.size() - 3 != cloud.feature_dim) {
      throw Error("load_xyz: inconsistent column count at line " + std::to_string(lineno));
    }
    cloud.points.push_back({vals[0], vals[1], vals[2]});
    cloud.features.insert(cloud.features.end(), vals.begin() + 3, vals.end());
  }
  cloud.validate();
  return cloud;
}

/// Dispatches on extension: .ply, .xyz/.txt, .bin (KITTI).
inline PointCloud load_cloud(const std::filesystem::path& path) {
  const std::string ext = detail::lower(path.extension().string());
  if (ext == ".ply") return load_ply(path);
  if (ext == ".bin") return load_kitti_bin(path);
  if (ext == ".xyz" || ext == ".txt") return load_xyz(path);
  throw Error("load_cloud: unsupported extension '" + ext + "' for " + path.string());
}

inline void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  const std::string ext = detail::lower(path.extension().string());
  if (ext == ".ply") return save_ply(cloud, path);
  if (ext == ".bin") return save_kitti_bin(cloud, path);
  if (ext == ".xyz" || ext == ".txt") return save_xyz(cloud, path);
  throw Error("save_cloud: unsupported extension '" + ext + "' for " + path.string());
}

}  // namespace pvnet::io
