#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pvnet/common.hpp"
#include "pvnet/denoiser.hpp"
#include "pvnet/geometry.hpp"
#include "pvnet/metrics.hpp"
#include "pvnet/scenegen.hpp"

namespace pvnet::test {

inline PointCloud random_cloud(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points) p = {u(rng), u(rng), u(rng)};
  return c;
}

inline PointCloud random_box_cloud(std::size_t n, std::uint64_t seed, const SceneBounds& b) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud c;
  c.points.resize(n);
  for (auto& p : c.points) {
    for (int a = 0; a < 3; ++a) p[a] = b.min_corner[a] + u(rng) * (b.max_corner[a] - b.min_corner[a]);
  }
  return c;
}

/// Exhaustive k-nearest scan, ties to the lower reference index.
inline std::vector<std::pair<double, std::size_t>> brute_knn(const Vec3& q, const std::vector<Vec3>& refs,
                                                              std::size_t k) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t j = 0; j < refs.size(); ++j) {
    const double dx = q[0] - refs[j][0], dy = q[1] - refs[j][1], dz = q[2] - refs[j][2];
    all.emplace_back(std::sqrt(dx * dx + dy * dy + dz * dz), j);
  }
  std::sort(all.begin(), all.end());
  all.resize(k);
  return all;
}

inline double brute_nearest_sq(const Vec3& q, const std::vector<Vec3>& refs) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : refs) {
    const double dx = q[0] - r[0], dy = q[1] - r[1], dz = q[2] - r[2];
    best = std::min(best, dx * dx + dy * dy + dz * dz);
  }
  return best;
}

inline double brute_chamfer(const std::vector<Vec3>& P, const std::vector<Vec3>& Q) {
  double a = 0.0, b = 0.0;
  for (const auto& p : P) a += brute_nearest_sq(p, Q);
  for (const auto& q : Q) b += brute_nearest_sq(q, P);
  return a / P.size() + b / Q.size();
}

struct OracleRcd {
  double rcd, recon, match;
};

/// Exhaustive-scan reimplementation of the region-aware protocol.
inline OracleRcd oracle_rcd(const PointCloud& P, const PointCloud& Q, const metrics::RcdConfig& cfg) {
  std::vector<Vec3> q = Q.points, p = P.points;
  std::sort(q.begin(), q.end());
  std::sort(p.begin(), p.end());
  const std::size_t n = q.size(), G = cfg.groups;
  Rng rng(cfg.fps_seed());
  std::vector<std::size_t> centers{std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)};
  while (centers.size() < G) {
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t i = 0; i < n; ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t c : centers) d = std::min(d, squared_distance(q[i], q[c]));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    centers.push_back(best);
  }
  const std::size_t k = std::min<std::size_t>(cfg.targets_per_group, n);
  std::vector<std::vector<Vec3>> rq(G), rp(G);
  std::vector<Vec3> cpts;
  for (std::size_t g = 0; g < G; ++g) {
    cpts.push_back(q[centers[g]]);
    for (const auto& [d, j] : test::brute_knn(q[centers[g]], q, k)) rq[g].push_back(q[j]);
  }
  const std::size_t kp = std::min<std::size_t>(cfg.targets_per_group, p.size());
  for (std::size_t g = 0; g < G; ++g)
    for (const auto& [d, j] : test::brute_knn(cpts[g], p, kp)) rp[g].push_back(p[j]);
  auto one_way = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double s = 0;
    for (const auto& x : a) s += std::sqrt(test::brute_nearest_sq(x, b));
    return s / a.size();
  };
  std::vector<double> val(G);
  for (std::size_t g = 0; g < G; ++g) val[g] = one_way(rp[g], rq[g]) + one_way(rq[g], rp[g]);
  std::vector<int> ids(G);
  std::iota(ids.begin(), ids.end(), 0);
  Rng srng(cfg.split_seed());
  std::shuffle(ids.begin(), ids.end(), srng);
  auto avg = [&](auto begin, auto end) {
    double s = 0;
    int c = 0;
    for (auto it = begin; it != end; ++it) {
      s += val[*it];
      ++c;
    }
    return s / c;
  };
  return {avg(ids.begin(), ids.end()), avg(ids.begin(), ids.begin() + cfg.recon_groups),
          avg(ids.begin() + cfg.recon_groups, ids.end())};
}

/// A few hundred parameters on an 8x8x4 grid; fast enough for loops and
/// finite differences.
inline denoiser::DenoiserConfig tiny_denoiser(int timesteps = 50) {
  denoiser::DenoiserConfig c;
  c.grid = VoxelGridSpec{{8, 8, 4}, SceneBounds{{-1, -1, -1}, {1, 1, 1}}};
  c.timesteps = timesteps;
  c.voxel_channels = 1;
  c.init_hidden = 3;
  c.time_embed_dim = 2;
  c.unet_depth = 2;
  c.unet_width = 1;
  c.cond_channels = {1, 2, 3, 4};
  c.match_dim = 2;
  c.point_channels = 2;
  c.weight_hidden = 2;
  c.head_hidden = 3;
  c.neighbors = 4;
  return c;
}

/// Condition of n points in [-0.9, 0.9]^3 and an input of rate * n jittered copies.
inline scenegen::TrainingPair toy_pair(std::size_t n, int rate, std::uint64_t seed) {
  scenegen::TrainingPair pair;
  pair.rate = rate;
  pair.condition = random_cloud(n, seed, -0.9, 0.9);
  Rng rng(seed + 1);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (int r = 0; r < rate; ++r) {
    for (const auto& p : pair.condition.points) pair.input.points.push_back({p[0] + jitter(rng), p[1] + jitter(rng), p[2] + jitter(rng)});
  }
  return pair;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("pvnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace pvnet::test
