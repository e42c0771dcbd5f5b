#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pvnet/common.hpp"
#include "pvnet/geometry.hpp"

namespace pvnet::scenegen {

/// Surface labels carried in feature column 0 of generated scenes.
enum SurfaceLabel : int { kGround = 0, kBox = 1, kPole = 2 };

/// Procedural street-like scene: a ground square with boxes and poles
/// resting on it. Lengths in meters, density in points per square meter.
struct SceneSpec {
  std::uint64_t seed = 0;
  double ground_half_extent = 6.0;
  double ground_z = -2.0;
  int box_count = 4;
  double box_size_min = 0.8;
  double box_size_max = 2.0;
  int pole_count = 3;
  double pole_radius_min = 0.08;
  double pole_radius_max = 0.25;
  double pole_height_min = 1.5;
  double pole_height_max = 2.4;
  double density = 40.0;

  void validate() const {
    if (!(density > 0.0)) throw Error("scene spec: density must be positive");
    if (!(ground_half_extent > 0.0)) throw Error("scene spec: ground_half_extent must be positive");
    if (box_count < 0 || pole_count < 0) throw Error("scene spec: object counts must be non-negative");
    if (!(box_size_min > 0.0 && box_size_min <= box_size_max)) throw Error("scene spec: invalid box size range");
    if (!(pole_radius_min > 0.0 && pole_radius_min <= pole_radius_max)) {
      throw Error("scene spec: invalid pole radius range");
    }
    if (!(pole_height_min > 0.0 && pole_height_min <= pole_height_max)) {
      throw Error("scene spec: invalid pole height range");
    }
    if (box_size_max >= ground_half_extent) throw Error("scene spec: boxes do not fit on the ground plane");
  }
};

struct Box {
  Vec3 center_base;  // center of the footprint, on the ground
  double length, width, height, yaw;

  /// Visible surface (top + four sides; the bottom rests on the ground).
  double surface_area() const { return length * width + 2.0 * height * (length + width); }

  bool footprint_contains(double x, double y) const {
    const double dx = x - center_base[0];
    const double dy = y - center_base[1];
    const double c = std::cos(yaw), s = std::sin(yaw);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= 0.5 * length && std::abs(v) <= 0.5 * width;
  }
};

struct Pole {
  Vec3 center_base;
  double radius, height;
  double surface_area() const { return 2.0 * std::numbers::pi * radius * height + std::numbers::pi * radius * radius; }
};

struct SceneLayout {
  std::vector<Box> boxes;
  std::vector<Pole> poles;
};

namespace detail {

inline void emit(PointCloud& cloud, const Vec3& p, SurfaceLabel label) {
  cloud.points.push_back(p);
  cloud.features.push_back(static_cast<double>(label));
}

inline void sample_box(const Box& b, double density, Rng& rng, PointCloud& cloud) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  auto to_world = [&](double u, double v, double h) {
    return Vec3{b.center_base[0] + c * u - s * v, b.center_base[1] + s * u + c * v, b.center_base[2] + h};
  };
  // top
  {
    std::poisson_distribution<long> count(b.length * b.width * density);
    for (long i = count(rng); i > 0; --i) {
      const double u = (unit(rng) - 0.5) * b.length;
      const double v = (unit(rng) - 0.5) * b.width;
      emit(cloud, to_world(u, v, b.height), kBox);
    }
  }
  // sides: two of length x height, two of width x height
  for (int side = 0; side < 4; ++side) {
    const bool along_length = side < 2;
    const double span = along_length ? b.length : b.width;
    const double sign = (side % 2 == 0) ? 1.0 : -1.0;
    std::poisson_distribution<long> count(span * b.height * density);
    for (long i = count(rng); i > 0; --i) {
      const double a = (unit(rng) - 0.5) * span;
      const double h = unit(rng) * b.height;
      if (along_length) emit(cloud, to_world(a, sign * 0.5 * b.width, h), kBox);
      else emit(cloud, to_world(sign * 0.5 * b.length, a, h), kBox);
    }
  }
}

inline void sample_pole(const Pole& p, double density, Rng& rng, PointCloud& cloud) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::poisson_distribution<long> side_count(2.0 * std::numbers::pi * p.radius * p.height * density);
  for (long i = side_count(rng); i > 0; --i) {
    const double th = 2.0 * std::numbers::pi * unit(rng);
    const double h = unit(rng) * p.height;
    emit(cloud, {p.center_base[0] + p.radius * std::cos(th), p.center_base[1] + p.radius * std::sin(th),
                 p.center_base[2] + h}, kPole);
  }
  std::poisson_distribution<long> top_count(std::numbers::pi * p.radius * p.radius * density);
  for (long i = top_count(rng); i > 0; --i) {
    const double r = p.radius * std::sqrt(unit(rng));
    const double th = 2.0 * std::numbers::pi * unit(rng);
    emit(cloud, {p.center_base[0] + r * std::cos(th), p.center_base[1] + r * std::sin(th),
                 p.center_base[2] + p.height}, kPole);
  }
}

}  // namespace detail

inline SceneLayout make_layout(const SceneSpec& spec) {
  spec.validate();
  Rng rng(seeds::derive(spec.seed, "layout"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto in_range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  SceneLayout layout;
  const double H = spec.ground_half_extent;
  for (int i = 0; i < spec.box_count; ++i) {
    Box b{};
    b.length = in_range(spec.box_size_min, spec.box_size_max);
    b.width = in_range(spec.box_size_min, spec.box_size_max);
    b.height = in_range(spec.box_size_min, spec.box_size_max);
    b.yaw = in_range(0.0, std::numbers::pi);
    // Keep the whole footprint on the ground square.
    const double margin = 0.5 * std::hypot(b.length, b.width);
    const double reach = std::max(0.0, H - margin);
    b.center_base = {in_range(-reach, reach), in_range(-reach, reach), spec.ground_z};
    layout.boxes.push_back(b);
  }
  for (int i = 0; i < spec.pole_count; ++i) {
    Pole p{};
    p.radius = in_range(spec.pole_radius_min, spec.pole_radius_max);
    p.height = in_range(spec.pole_height_min, spec.pole_height_max);
    const double reach = H - p.radius;
    p.center_base = {in_range(-reach, reach), in_range(-reach, reach), spec.ground_z};
    layout.poles.push_back(p);
  }
  return layout;
}

/// Dense scene cloud; feature column 0 holds the SurfaceLabel. Deterministic
/// in `spec.seed`.
inline PointCloud generate_scene(const SceneSpec& spec) {
  const SceneLayout layout = make_layout(spec);
  Rng rng(seeds::derive(spec.seed, "surfaces"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud cloud;
  cloud.feature_dim = 1;
  const double H = spec.ground_half_extent;
  std::poisson_distribution<long> ground_count(4.0 * H * H * spec.density);
  for (long i = ground_count(rng); i > 0; --i) {
    const double x = (2.0 * unit(rng) - 1.0) * H;
    const double y = (2.0 * unit(rng) - 1.0) * H;
    bool covered = false;
    for (const auto& b : layout.boxes) covered = covered || b.footprint_contains(x, y);
    for (const auto& p : layout.poles) {
      covered = covered || std::hypot(x - p.center_base[0], y - p.center_base[1]) <= p.radius;
    }
    if (!covered) detail::emit(cloud, {x, y, spec.ground_z}, kGround);
  }
  for (const auto& b : layout.boxes) detail::sample_box(b, spec.density, rng, cloud);
  for (const auto& p : layout.poles) detail::sample_pole(p, spec.density, rng, cloud);
  return cloud;
}

// ---------------------------------------------------------------------------
// Training pairs
// ---------------------------------------------------------------------------

struct TrainingPair {
  PointCloud condition;
  PointCloud input;
  int rate = 1;
  std::uint64_t scene_seed = 0;

  void validate() const {
    if (rate < 1) throw Error("training pair: rate must be positive");
    if (input.size() != static_cast<std::size_t>(rate) * condition.size()) {
      throw Error("training pair: input count " + std::to_string(input.size()) + " != rate " +
                  std::to_string(rate) + " x condition count " + std::to_string(condition.size()));
    }
  }
};

/// Seeded draw of m distinct indices from [0, n) (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (m > n) throw Error("sample_without_replacement: m > n");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(m);
  return idx;
}

inline PointCloud select(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
  PointCloud out;
  out.feature_dim = cloud.feature_dim;
  out.points.reserve(idx.size());
  for (std::size_t i : idx) {
    out.points.push_back(cloud.points[i]);
    for (std::size_t c = 0; c < cloud.feature_dim; ++c) out.features.push_back(cloud.features[i * cloud.feature_dim + c]);
  }
  return out;
}

/// Condition and input are independent uniform subsamples of the same dense
/// scene; the condition is not forced to be a subset of the input.
inline TrainingPair make_training_pair(const PointCloud& dense, std::size_t condition_count, int rate,
                                       std::uint64_t seed) {
  if (rate < 1) throw Error("make_training_pair: rate must be positive");
  if (condition_count == 0) throw Error("make_training_pair: condition count must be positive");
  const std::size_t need = static_cast<std::size_t>(rate) * condition_count;
  if (dense.size() < need) {
    throw Error("make_training_pair: dense cloud has " + std::to_string(dense.size()) + " points, needs " +
                std::to_string(need) + " (short by " + std::to_string(need - dense.size()) + ")");
  }
  TrainingPair pair;
  pair.rate = rate;
  pair.scene_seed = seed;
  pair.condition = select(dense, sample_without_replacement(dense.size(), condition_count,
                                                            seeds::derive(seed, "condition")));
  pair.input = select(dense, sample_without_replacement(dense.size(), need, seeds::derive(seed, "input")));
  pair.validate();
  return pair;
}

// ---------------------------------------------------------------------------
// Single-sweep emulation
// ---------------------------------------------------------------------------

struct SweepFov {
  double elevation_min_deg = -24.8;
  double elevation_max_deg = 2.0;
};

/// Keeps, per (beam, azimuth) bin, the dense point with the smallest range
/// from the sensor. Beams partition the vertical field of view evenly.
inline PointCloud simulate_sweep(const PointCloud& dense, const Vec3& sensor_origin, int beams, int azimuth_steps,
                                 SweepFov fov = {}) {
  if (beams < 1 || azimuth_steps < 1) throw Error("simulate_sweep: beams and azimuth_steps must be >= 1");
  if (dense.empty()) return {};
  const double el_lo = fov.elevation_min_deg * std::numbers::pi / 180.0;
  const double el_hi = fov.elevation_max_deg * std::numbers::pi / 180.0;
  const std::size_t nbins = static_cast<std::size_t>(beams) * azimuth_steps;
  std::vector<double> best_range(nbins, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> best_idx(nbins, dense.size());
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const Vec3 d = dense.points[i] - sensor_origin;
    const double range = norm(d);
    if (range <= 0.0) continue;
    const double el = std::asin(std::clamp(d[2] / range, -1.0, 1.0));
    if (el < el_lo || el > el_hi) continue;
    int beam = static_cast<int>(std::floor((el - el_lo) / (el_hi - el_lo) * beams));
    beam = std::clamp(beam, 0, beams - 1);
    const double az = std::atan2(d[1], d[0]);
    int step = static_cast<int>(std::floor((az + std::numbers::pi) / (2.0 * std::numbers::pi) * azimuth_steps));
    step = std::clamp(step, 0, azimuth_steps - 1);
    const std::size_t bin = static_cast<std::size_t>(beam) * azimuth_steps + step;
    if (range < best_range[bin]) {
      best_range[bin] = range;
      best_idx[bin] = i;
    }
  }
  std::vector<std::size_t> keep;
  for (std::size_t b = 0; b < nbins; ++b) {
    if (best_idx[b] < dense.size()) keep.push_back(best_idx[b]);
  }
  return select(dense, keep);
}

// ---------------------------------------------------------------------------
// Robustness harness
// ---------------------------------------------------------------------------

inline PointCloud perturb_gaussian(const PointCloud& cloud, double tau, std::uint64_t seed) {
  if (!(tau >= 0.0)) throw Error("perturb_gaussian: tau must be non-negative");
  PointCloud out = cloud;
  if (tau == 0.0) return out;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& p : out.points) {
    for (double& v : p) v += tau * normal(rng);
  }
  return out;
}

}  // namespace pvnet::scenegen
