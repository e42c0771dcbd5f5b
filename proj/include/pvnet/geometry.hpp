#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pvnet/common.hpp"

namespace pvnet {

// ---------------------------------------------------------------------------
// PointCloud
// ---------------------------------------------------------------------------

/// Ordered set of 3D points (meters) with optional per-point feature rows.
struct PointCloud {
  std::vector<Vec3> points;
  std::size_t feature_dim = 0;
  std::vector<double> features;  // row-major, size() * feature_dim

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_features() const { return feature_dim > 0; }

  std::span<const double> feature_row(std::size_t i) const {
    return {features.data() + i * feature_dim, feature_dim};
  }

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      for (double v : points[i]) {
        if (!std::isfinite(v)) {
          throw Error("point cloud: non-finite coordinate at point " + std::to_string(i));
        }
      }
    }
    if (feature_dim > 0 && features.size() != points.size() * feature_dim) {
      throw Error("point cloud: feature rows (" + std::to_string(features.size() / feature_dim) +
                  ") do not match point count (" + std::to_string(points.size()) + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// Voxel grid
// ---------------------------------------------------------------------------

struct SceneBounds {
  Vec3 min_corner{-25.6, -25.6, -3.2};
  Vec3 max_corner{25.6, 25.6, 3.2};

  Vec3 center() const { return 0.5 * (min_corner + max_corner); }
  Vec3 extent() const { return max_corner - min_corner; }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(min_corner[a] < max_corner[a])) {
        throw Error("scene bounds: min_corner must be below max_corner on axis " + std::to_string(a));
      }
    }
  }
};

using VoxelIndex = std::array<int, 3>;

struct VoxelGridSpec {
  std::array<int, 3> resolution{128, 128, 16};
  SceneBounds bounds{};

  Vec3 voxel_size() const {
    const Vec3 e = bounds.extent();
    return {e[0] / resolution[0], e[1] / resolution[1], e[2] / resolution[2]};
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(resolution[0]) * resolution[1] * resolution[2];
  }

  bool contains(const VoxelIndex& v) const {
    for (int a = 0; a < 3; ++a) {
      if (v[a] < 0 || v[a] >= resolution[a]) return false;
    }
    return true;
  }

  /// Flat index with z slowest, then x, then y: the layout of a
  /// [channel][z][x][y] feature tensor.
  std::size_t linear(const VoxelIndex& v) const {
    return (static_cast<std::size_t>(v[2]) * resolution[0] + v[0]) * resolution[1] + v[1];
  }

  VoxelIndex unlinear(std::size_t l) const {
    const int y = static_cast<int>(l % resolution[1]);
    l /= resolution[1];
    const int x = static_cast<int>(l % resolution[0]);
    const int z = static_cast<int>(l / resolution[0]);
    return {x, y, z};
  }

  Vec3 center_of(const VoxelIndex& v) const {
    const Vec3 s = voxel_size();
    return {bounds.min_corner[0] + (v[0] + 0.5) * s[0], bounds.min_corner[1] + (v[1] + 0.5) * s[1],
            bounds.min_corner[2] + (v[2] + 0.5) * s[2]};
  }

  void validate() const {
    bounds.validate();
    for (int a = 0; a < 3; ++a) {
      if (resolution[a] <= 0) throw Error("voxel grid: resolution must be positive");
    }
    const Vec3 s = voxel_size();
    for (double v : s) {
      if (!(v > 0.0)) throw Error("voxel grid: voxel size must be positive");
    }
  }

  friend bool operator==(const VoxelGridSpec& a, const VoxelGridSpec& b) {
    return a.resolution == b.resolution && a.bounds.min_corner == b.bounds.min_corner &&
           a.bounds.max_corner == b.bounds.max_corner;
  }
};

struct VoxelAssignment {
  std::vector<VoxelIndex> voxel_index;
  std::vector<Vec3> offset;            // point minus voxel center
  std::vector<std::uint8_t> in_bounds;
  std::vector<std::size_t> linear;     // flat voxel index per point (valid when in bounds)
  std::vector<std::size_t> occupied;   // sorted unique flat indices

  std::size_t size() const { return voxel_index.size(); }
};

/// Assigns every point to its voxel. Points outside the bounds are flagged
/// and kept, never dropped. The max face of the bounds is inclusive.
inline VoxelAssignment voxelize(const PointCloud& cloud, const VoxelGridSpec& spec) {
  spec.validate();
  const std::size_t n = cloud.size();
  const Vec3 vs = spec.voxel_size();
  VoxelAssignment out;
  out.voxel_index.resize(n, VoxelIndex{-1, -1, -1});
  out.offset.resize(n, Vec3{0, 0, 0});
  out.in_bounds.resize(n, 0);
  out.linear.resize(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& p = cloud.points[i];
    bool inside = true;
    VoxelIndex v{};
    for (int a = 0; a < 3; ++a) {
      if (!(p[a] >= spec.bounds.min_corner[a] && p[a] <= spec.bounds.max_corner[a])) {
        inside = false;
        break;
      }
      int idx = static_cast<int>(std::floor((p[a] - spec.bounds.min_corner[a]) / vs[a]));
      v[a] = std::clamp(idx, 0, spec.resolution[a] - 1);
    }
    if (!inside) continue;
    out.in_bounds[i] = 1;
    out.voxel_index[i] = v;
    out.offset[i] = p - spec.center_of(v);
    out.linear[i] = spec.linear(v);
    out.occupied.push_back(out.linear[i]);
  }
  std::sort(out.occupied.begin(), out.occupied.end());
  out.occupied.erase(std::unique(out.occupied.begin(), out.occupied.end()), out.occupied.end());
  return out;
}

inline std::vector<Vec3> voxel_centers(const VoxelGridSpec& spec, std::span<const VoxelIndex> indices) {
  spec.validate();
  std::vector<Vec3> out;
  out.reserve(indices.size());
  for (const auto& v : indices) {
    if (!spec.contains(v)) {
      std::ostringstream msg;
      msg << "voxel_centers: index (" << v[0] << ", " << v[1] << ", " << v[2] << ") outside resolution ("
          << spec.resolution[0] << ", " << spec.resolution[1] << ", " << spec.resolution[2] << ")";
      throw Error(msg.str());
    }
    out.push_back(spec.center_of(v));
  }
  return out;
}

inline std::vector<Vec3> voxel_centers_linear(const VoxelGridSpec& spec, std::span<const std::size_t> linear) {
  std::vector<VoxelIndex> idx;
  idx.reserve(linear.size());
  for (std::size_t l : linear) idx.push_back(spec.unlinear(l));
  return voxel_centers(spec, idx);
}

// ---------------------------------------------------------------------------
// Neighbor search
// ---------------------------------------------------------------------------

/// Row-major N x k neighbor table.
struct KnnResult {
  std::size_t k = 0;
  std::vector<std::size_t> indices;
  std::vector<double> distances;

  std::size_t index(std::size_t q, std::size_t j) const { return indices[q * k + j]; }
  double distance(std::size_t q, std::size_t j) const { return distances[q * k + j]; }
};

/// Exact nearest-neighbor index over a uniform cell grid. Results are
/// identical to an exhaustive scan: ascending distance, ties to the lower
/// reference index.
class NeighborIndex {
 public:
  explicit NeighborIndex(std::span<const Vec3> refs) : refs_(refs.begin(), refs.end()) { build(); }

  std::size_t size() const { return refs_.size(); }

  /// Fills `heap` with the k nearest (squared distance, index) pairs, ascending.
  void query(const Vec3& q, std::size_t k, std::vector<std::pair<double, std::size_t>>& heap) const {
    heap.clear();
    if (k == 0 || refs_.empty()) return;
    const auto cmp = [](const std::pair<double, std::size_t>& a, const std::pair<double, std::size_t>& b) {
      return a < b;
    };
    std::array<int, 3> qc{};
    for (int a = 0; a < 3; ++a) {
      const int c = static_cast<int>(std::floor((q[a] - origin_[a]) / cell_));
      qc[a] = std::clamp(c, 0, dims_[a] - 1);
    }
    const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    for (int r = 0; r <= max_ring; ++r) {
      for (int cx = qc[0] - r; cx <= qc[0] + r; ++cx) {
        if (cx < 0 || cx >= dims_[0]) continue;
        const bool edge_x = (cx == qc[0] - r || cx == qc[0] + r);
        for (int cy = qc[1] - r; cy <= qc[1] + r; ++cy) {
          if (cy < 0 || cy >= dims_[1]) continue;
          const bool edge_y = edge_x || (cy == qc[1] - r || cy == qc[1] + r);
          for (int cz = qc[2] - r; cz <= qc[2] + r; ++cz) {
            if (cz < 0 || cz >= dims_[2]) continue;
            if (!edge_y && cz != qc[2] - r && cz != qc[2] + r) continue;
            const std::size_t cell = (static_cast<std::size_t>(cx) * dims_[1] + cy) * dims_[2] + cz;
            for (std::size_t s = start_[cell]; s < start_[cell + 1]; ++s) {
              const std::size_t ri = order_[s];
              const std::pair<double, std::size_t> cand{squared_distance(q, refs_[ri]), ri};
              if (heap.size() < k) {
                heap.push_back(cand);
                std::push_heap(heap.begin(), heap.end(), cmp);
              } else if (cand < heap.front()) {
                std::pop_heap(heap.begin(), heap.end(), cmp);
                heap.back() = cand;
                std::push_heap(heap.begin(), heap.end(), cmp);
              }
            }
          }
        }
      }
      if (heap.size() == k) {
        // Every cell outside ring r lies at least r full cells away.
        const double bound = static_cast<double>(r) * cell_;
        if (heap.front().first < bound * bound) break;
      }
    }
    std::sort_heap(heap.begin(), heap.end(), cmp);
  }

 private:
  void build() {
    if (refs_.empty()) {
      dims_ = {1, 1, 1};
      start_.assign(2, 0);
      return;
    }
    Vec3 lo = refs_[0];
    Vec3 hi = refs_[0];
    for (const auto& p : refs_) {
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    }
    origin_ = lo;
    const Vec3 ext = hi - lo;
    const double max_ext = std::max({ext[0], ext[1], ext[2]});
    const double target_cells = std::max(1.0, static_cast<double>(refs_.size()) / 2.0);
    auto cells_for = [&](double h) {
      double c = 1.0;
      for (int a = 0; a < 3; ++a) c *= std::max(1.0, std::ceil(ext[a] / h));
      return c;
    };
    if (max_ext <= 0.0) {
      cell_ = 1.0;
    } else {
      double lo_h = max_ext / 2048.0;
      double hi_h = max_ext * 2.0;
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo_h + hi_h);
        if (cells_for(mid) > target_cells) lo_h = mid; else hi_h = mid;
      }
      cell_ = hi_h;
    }
    for (int a = 0; a < 3; ++a) {
      dims_[a] = std::max(1, static_cast<int>(std::ceil(ext[a] / cell_)));
    }
    const std::size_t ncell = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    std::vector<std::size_t> cell_of(refs_.size());
    start_.assign(ncell + 1, 0);
    for (std::size_t i = 0; i < refs_.size(); ++i) {
      std::array<int, 3> c{};
      for (int a = 0; a < 3; ++a) {
        c[a] = std::clamp(static_cast<int>(std::floor((refs_[i][a] - origin_[a]) / cell_)), 0, dims_[a] - 1);
      }
      cell_of[i] = (static_cast<std::size_t>(c[0]) * dims_[1] + c[1]) * dims_[2] + c[2];
      ++start_[cell_of[i] + 1];
    }
    std::partial_sum(start_.begin(), start_.end(), start_.begin());
    order_.resize(refs_.size());
    std::vector<std::size_t> fill(start_.begin(), start_.end() - 1);
    for (std::size_t i = 0; i < refs_.size(); ++i) order_[fill[cell_of[i]]++] = i;
  }

  std::vector<Vec3> refs_;
  Vec3 origin_{0, 0, 0};
  double cell_ = 1.0;
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<std::size_t> start_;
  std::vector<std::size_t> order_;
};

inline KnnResult knn(std::span<const Vec3> queries, std::span<const Vec3> references, std::size_t k) {
  if (k == 0) throw Error("knn: k must be positive");
  if (references.size() < k) {
    throw Error("knn: need at least k references (M = " + std::to_string(references.size()) +
                ", k = " + std::to_string(k) + ")");
  }
  KnnResult out;
  out.k = k;
  out.indices.resize(queries.size() * k);
  out.distances.resize(queries.size() * k);
  NeighborIndex index(references);
  std::vector<std::pair<double, std::size_t>> heap;
  heap.reserve(k);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    index.query(queries[q], k, heap);
    for (std::size_t j = 0; j < k; ++j) {
      out.indices[q * k + j] = heap[j].second;
      out.distances[q * k + j] = std::sqrt(heap[j].first);
    }
  }
  return out;
}

inline std::vector<std::size_t> nearest_neighbor(std::span<const Vec3> queries, std::span<const Vec3> references) {
  if (references.empty()) throw Error("nearest_neighbor: reference set is empty");
  return knn(queries, references, 1).indices;
}

/// Farthest-point sampling. The first pick is a seeded uniform draw; each
/// subsequent pick maximizes the distance to the chosen set (lowest index on
/// ties).
inline std::vector<std::size_t> fps(std::span<const Vec3> points, std::size_t m, std::uint64_t seed) {
  const std::size_t n = points.size();
  if (m > n) {
    throw Error("fps: requested " + std::to_string(m) + " samples from " + std::to_string(n) + " points");
  }
  std::vector<std::size_t> chosen;
  if (m == 0) return chosen;
  chosen.reserve(m);
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t current = first(rng);
  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t s = 0; s < m; ++s) {
    chosen.push_back(current);
    const Vec3 c = points[current];
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = squared_distance(points[i], c);
      if (d < min_d2[i]) min_d2[i] = d;
      if (min_d2[i] > best_d) {
        best_d = min_d2[i];
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

inline std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t m, std::uint64_t seed) {
  return fps(std::span<const Vec3>(cloud.points), m, seed);
}

}  // namespace pvnet
