#pragma once

// Scene-upsampling metrics. P is the prediction, Q the reference. CD is in
// squared meters, the region-aware variants in meters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "pvnet/common.hpp"
#include "pvnet/geometry.hpp"

namespace pvnet::metrics {

namespace detail {

inline void require_points(const PointCloud& c, const char* who, const char* which) {
  if (c.empty()) throw Error(std::string(who) + ": " + which + " cloud is empty");
}

/// Distance from each query to its nearest reference (meters).
inline std::vector<double> nearest_distances(std::span<const Vec3> queries, std::span<const Vec3> refs) {
  const KnnResult r = knn(queries, refs, 1);
  return r.distances;
}

}  // namespace detail

/// Mean squared nearest distance P->Q plus Q->P.
inline double chamfer(const PointCloud& P, const PointCloud& Q) {
  detail::require_points(P, "chamfer", "first");
  detail::require_points(Q, "chamfer", "second");
  auto mean_sq = [](std::span<const Vec3> a, std::span<const Vec3> b) {
    const std::vector<std::size_t> nn = nearest_neighbor(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += squared_distance(a[i], b[nn[i]]);
    return s / static_cast<double>(a.size());
  };
  return mean_sq(P.points, Q.points) + mean_sq(Q.points, P.points);
}

struct RcdConfig {
  int groups = 64;
  int targets_per_group = 32;
  int recon_groups = 20;
  int match_groups = 44;
  std::uint64_t seed = 0;

  void validate() const {
    if (groups < 1) throw Error("rcd.groups must be >= 1");
    if (targets_per_group < 1) throw Error("rcd.targets_per_group must be >= 1");
    if (recon_groups < 0 || match_groups < 0) throw Error("rcd.recon_groups and rcd.match_groups must be >= 0");
    if (recon_groups + match_groups != groups) {
      throw Error("rcd: recon_groups + match_groups (" + std::to_string(recon_groups) + " + " +
                  std::to_string(match_groups) + ") must equal groups (" + std::to_string(groups) + ")");
    }
  }

  std::uint64_t fps_seed() const { return seeds::derive(seed, "rcd.fps"); }
  std::uint64_t split_seed() const { return seeds::derive(seed, "rcd.split"); }

  friend bool operator==(const RcdConfig&, const RcdConfig&) = default;
};

struct RcdResult {
  double rcd = 0.0;
  double recon_rcd = 0.0;
  double match_rcd = 0.0;
  std::vector<std::size_t> centers;           // indices into Q
  std::vector<std::vector<std::size_t>> r_q;  // per group, indices into Q
  std::vector<std::vector<std::size_t>> r_p;  // per group, indices into P
  std::vector<double> group_values;
  std::vector<int> recon_ids;
  std::vector<int> match_ids;
  std::size_t targets_used = 0;      // min(k, |Q|)
  std::size_t predictions_used = 0;  // min(k, |P|)
};

/// Random partition of group ids into the Recon and Match subsets.
inline std::pair<std::vector<int>, std::vector<int>> split_groups(const RcdConfig& cfg) {
  std::vector<int> ids(cfg.groups);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(cfg.split_seed());
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<int> recon(ids.begin(), ids.begin() + cfg.recon_groups);
  std::vector<int> match(ids.begin() + cfg.recon_groups, ids.end());
  std::sort(recon.begin(), recon.end());
  std::sort(match.begin(), match.end());
  return {recon, match};
}

/// Indices of `pts` sorted by coordinates (lexicographic, then index).
inline std::vector<std::size_t> canonical_order(std::span<const Vec3> pts) {
  std::vector<std::size_t> order(pts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pts[a] < pts[b]; });
  return order;
}

/// Region-aware Chamfer distance. Groups are FPS centers over Q; R_Q and R_P
/// are the k nearest Q and P points to each center. Per group the value is
/// the mean unsquared nearest distance R_P -> R_Q plus R_Q -> R_P. Both clouds are visited in coordinate order, so the result does not
/// depend on how the points are listed.
inline RcdResult rcd(const PointCloud& P, const PointCloud& Q, const RcdConfig& cfg = {}) {
  cfg.validate();
  detail::require_points(P, "rcd", "predicted");
  detail::require_points(Q, "rcd", "reference");
  if (static_cast<std::size_t>(cfg.groups) > Q.size()) {
    throw Error("rcd: " + std::to_string(cfg.groups) + " groups requested but the reference has only " +
                std::to_string(Q.size()) + " points");
  }
  const std::vector<std::size_t> q_order = canonical_order(Q.points);
  const std::vector<std::size_t> p_order = canonical_order(P.points);
  std::vector<Vec3> qs(Q.size()), ps(P.size());
  for (std::size_t i = 0; i < qs.size(); ++i) qs[i] = Q.points[q_order[i]];
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i] = P.points[p_order[i]];

  RcdResult out;
  const auto G = static_cast<std::size_t>(cfg.groups);
  out.targets_used = std::min(static_cast<std::size_t>(cfg.targets_per_group), Q.size());
  const std::vector<std::size_t> picks = fps(qs, G, cfg.fps_seed());
  std::vector<Vec3> centers(G);
  for (std::size_t g = 0; g < G; ++g) {
    centers[g] = qs[picks[g]];
    out.centers.push_back(q_order[picks[g]]);
  }

  const KnnResult near = knn(centers, qs, out.targets_used);
  out.r_q.resize(G);
  std::vector<std::vector<Vec3>> group_q(G), group_p(G);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t j = 0; j < out.targets_used; ++j) {
      out.r_q[g].push_back(q_order[near.index(g, j)]);
      group_q[g].push_back(qs[near.index(g, j)]);
    }
  }
  out.predictions_used = std::min(static_cast<std::size_t>(cfg.targets_per_group), P.size());
  const KnnResult near_p = knn(centers, ps, out.predictions_used);
  out.r_p.resize(G);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t j = 0; j < out.predictions_used; ++j) {
      out.r_p[g].push_back(p_order[near_p.index(g, j)]);
      group_p[g].push_back(ps[near_p.index(g, j)]);
    }
  }

  out.group_values.assign(G, 0.0);
  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  for (std::size_t g = 0; g < G; ++g) {
    out.group_values[g] = mean(detail::nearest_distances(group_p[g], group_q[g])) +
                          mean(detail::nearest_distances(group_q[g], group_p[g]));
  }

  std::tie(out.recon_ids, out.match_ids) = split_groups(cfg);
  auto mean_over = [&](const std::vector<int>& ids) {
    double s = 0.0;
    std::size_t n = 0;
    for (int g : ids) {
      s += out.group_values[static_cast<std::size_t>(g)];
      ++n;
    }
    return s / static_cast<double>(n);
  };
  std::vector<int> all(cfg.groups);
  std::iota(all.begin(), all.end(), 0);
  out.rcd = mean_over(all);
  out.recon_rcd = mean_over(out.recon_ids);
  out.match_rcd = mean_over(out.match_ids);
  return out;
}

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

/// Precision: fraction of P within `threshold` of Q. Recall: fraction of Q
/// within `threshold` of P. Distances equal to the threshold count as hits.
inline FScore fscore_detail(const PointCloud& P, const PointCloud& Q, double threshold) {
  if (!(threshold > 0.0)) throw Error("fscore: threshold must be positive");
  detail::require_points(P, "fscore", "predicted");
  detail::require_points(Q, "fscore", "reference");
  auto frac = [threshold](std::span<const Vec3> a, std::span<const Vec3> b) {
    const std::vector<double> d = detail::nearest_distances(a, b);
    const auto hits = std::count_if(d.begin(), d.end(), [threshold](double x) { return x <= threshold; });
    return static_cast<double>(hits) / static_cast<double>(a.size());
  };
  FScore s;
  s.precision = frac(P.points, Q.points);
  s.recall = frac(Q.points, P.points);
  const double denom = s.precision + s.recall;
  s.f = denom > 0.0 ? 2.0 * s.precision * s.recall / denom : 0.0;
  return s;
}

inline double fscore(const PointCloud& P, const PointCloud& Q, double threshold) {
  return fscore_detail(P, Q, threshold).f;
}

struct MetricReport {
  double cd = 0.0;         // m^2
  double rcd = 0.0;        // m
  double recon_rcd = 0.0;  // m
  double match_rcd = 0.0;  // m
  double fscore = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double fscore_threshold = 0.0;  // m
  RcdConfig rcd_config;
  std::size_t rcd_targets_used = 0;
  std::size_t rcd_predictions_used = 0;
  std::vector<int> recon_ids;
  std::vector<int> match_ids;
  std::size_t predicted_points = 0;
  std::size_t reference_points = 0;
};

inline MetricReport evaluate(const PointCloud& P, const PointCloud& Q, const RcdConfig& rcd_cfg, double f_threshold) {
  MetricReport r;
  r.cd = chamfer(P, Q);
  const RcdResult g = rcd(P, Q, rcd_cfg);
  r.rcd = g.rcd;
  r.recon_rcd = g.recon_rcd;
  r.match_rcd = g.match_rcd;
  const FScore f = fscore_detail(P, Q, f_threshold);
  r.fscore = f.f;
  r.precision = f.precision;
  r.recall = f.recall;
  r.fscore_threshold = f_threshold;
  r.rcd_config = rcd_cfg;
  r.rcd_targets_used = g.targets_used;
  r.rcd_predictions_used = g.predictions_used;
  r.recon_ids = g.recon_ids;
  r.match_ids = g.match_ids;
  r.predicted_points = P.size();
  r.reference_points = Q.size();
  return r;
}

/// JSON with explicit units.
inline nlohmann::ordered_json to_json(const MetricReport& r) {
  auto metric = [](double v, const char* unit) { return nlohmann::ordered_json{{"value", v}, {"unit", unit}}; };
  nlohmann::ordered_json j;
  j["cd"] = metric(r.cd, "m^2");
  j["rcd"] = metric(r.rcd, "m");
  j["recon_rcd"] = metric(r.recon_rcd, "m");
  j["match_rcd"] = metric(r.match_rcd, "m");
  j["fscore"] = {{"value", r.fscore},
                 {"precision", r.precision},
                 {"recall", r.recall},
                 {"threshold", r.fscore_threshold},
                 {"threshold_unit", "m"}};
  j["rcd_protocol"] = {{"groups", r.rcd_config.groups},
                       {"targets_per_group", r.rcd_config.targets_per_group},
                       {"targets_used", r.rcd_targets_used},
                       {"recon_groups", r.rcd_config.recon_groups},
                       {"match_groups", r.rcd_config.match_groups},
                       {"predictions_used", r.rcd_predictions_used},
                       {"recon_ids", r.recon_ids},
                       {"match_ids", r.match_ids}};
  j["seeds"] = {{"rcd", r.rcd_config.seed},
                {"rcd_fps", r.rcd_config.fps_seed()},
                {"rcd_split", r.rcd_config.split_seed()}};
  j["points"] = {{"predicted", r.predicted_points}, {"reference", r.reference_points}};
  return j;
}

}  // namespace pvnet::metrics
