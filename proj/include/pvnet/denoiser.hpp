#pragma once

// Noise predictor eps(p_t, c, t): voxel features from the noisy cloud, voxel
// completion, a planar U-Net refiner, a condition encoder, and point-voxel
// interaction that turns K neighboring voxels into a per-point noise vector.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pvnet/common.hpp"
#include "pvnet/diffusion.hpp"
#include "pvnet/geometry.hpp"
#include "pvnet/nn/autograd.hpp"
#include "pvnet/nn/params.hpp"

namespace pvnet::denoiser {

using nn::ParamStore;
using nn::Shape;
using nn::BasicTensor;
using nn::ParamBinder;
using nn::Tensor;
using nn::Var;

inline constexpr std::size_t kPosDim = 10;  // voxel xyz, point xyz, offset xyz, squared norm

/// Defaults are the desk-scale build: 32x32x8 grid of 0.4 m voxels.
struct DenoiserConfig {
  VoxelGridSpec grid{{32, 32, 8}, SceneBounds{{-6.4, -6.4, -2.8}, {6.4, 6.4, 0.4}}};
  int timesteps = 1000;
  int voxel_channels = 16;
  int init_hidden = 32;
  int time_embed_dim = 64;
  std::array<int, 3> mprb_kernels{3, 3, 3};
  std::array<int, 3> mprb_dilations{1, 2, 3};
  int unet_depth = 2;
  int unet_width = 32;
  std::array<int, 4> cond_channels{16, 32, 64, 128};
  int match_dim = 64;
  int point_channels = 32;
  int weight_hidden = 32;
  int head_hidden = 32;
  int neighbors = 16;
  // Test hook: zero the world-coordinate blocks of the positional features
  // before they enter the weight MLP.
  bool ablate_world_coords = false;

  static DenoiserConfig paper_scale() {
    DenoiserConfig c;
    c.grid = VoxelGridSpec{};
    return c;
  }

  /// Throws on hard violations; returns soft warnings.
  std::vector<std::string> validate(std::size_t expected_points = 0) const {
    grid.validate();
    std::vector<std::string> warnings;
    if (timesteps < 1) throw Error("denoiser: timesteps must be >= 1");
    if (neighbors < 1) throw Error("denoiser: neighbors (K) must be >= 1");
    if (voxel_channels < 1 || init_hidden < 1 || match_dim < 1 || point_channels < 1 || weight_hidden < 1 ||
        head_hidden < 1 || unet_width < 1) {
      throw Error("denoiser: channel widths must be positive");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw Error("denoiser: time_embed_dim must be even and >= 2");
    for (int k : mprb_kernels) {
      if (k < 1 || k % 2 == 0) throw Error("denoiser: MPRB kernels must be odd and positive");
    }
    for (int d : mprb_dilations) {
      if (d < 1) throw Error("denoiser: MPRB dilations must be positive");
    }
    if (cond_channels[0] < 1) throw Error("denoiser: cond_channels must be positive");
    for (int i = 1; i < 4; ++i) {
      if (cond_channels[i] <= cond_channels[i - 1]) throw Error("denoiser: cond_channels must be strictly increasing");
    }
    if (unet_depth < 1) throw Error("denoiser: unet_depth must be >= 1");
    const int div = 1 << (unet_depth - 1);
    if (grid.resolution[0] % div != 0 || grid.resolution[1] % div != 0) {
      throw Error("denoiser: grid x/y resolution (" + std::to_string(grid.resolution[0]) + ", " +
                  std::to_string(grid.resolution[1]) + ") not divisible by 2^(unet_depth-1) = " + std::to_string(div));
    }
    if (expected_points > 0 && grid.voxel_count() <= expected_points) {
      warnings.push_back("voxel capacity " + std::to_string(grid.voxel_count()) + " does not exceed point count " +
                         std::to_string(expected_points));
    }
    return warnings;
  }

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

inline ParamStore init_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto C = static_cast<std::size_t>(cfg.voxel_channels);
  nn::ParamBuilder b(seed);
  b.linear("init.fc1", "init", 6 + static_cast<std::size_t>(cfg.time_embed_dim), cfg.init_hidden, true);
  b.linear("init.fc2", "init", cfg.init_hidden, C, true);

  b.conv3d("completion.stem", "completion", C, C, 3, 1);
  for (int u = 0; u < 3; ++u) {
    const std::string unit = "completion.mprb" + std::to_string(u);
    for (int j = 0; j < 3; ++j) {
      b.conv3d(unit + ".path" + std::to_string(j), "completion", C, C, cfg.mprb_kernels[j], cfg.mprb_dilations[j]);
    }
    b.conv3d(unit + ".proj", "completion", 3 * C, C, 1, 1);
  }

  const std::size_t planes = C * static_cast<std::size_t>(cfg.grid.resolution[2]);
  std::vector<std::size_t> width(cfg.unet_depth);
  for (int l = 0; l < cfg.unet_depth; ++l) width[l] = static_cast<std::size_t>(cfg.unet_width) << l;
  for (int l = 0; l < cfg.unet_depth; ++l) {
    const std::string enc = "unet.enc" + std::to_string(l);
    b.conv2d(enc + ".conv1", "unet", l == 0 ? planes : width[l - 1], width[l], 3);
    b.conv2d(enc + ".conv2", "unet", width[l], width[l], 3);
  }
  for (int l = cfg.unet_depth - 1; l >= 1; --l) {
    b.conv2d("unet.dec" + std::to_string(l) + ".conv", "unet", width[l] + width[l - 1], width[l - 1], 3);
  }
  b.conv2d("unet.out", "unet", width[0], planes, 1);

  std::size_t in = 3;
  for (int k = 0; k < 4; ++k) {
    const std::string blk = "cond.block" + std::to_string(k);
    const auto w = static_cast<std::size_t>(cfg.cond_channels[k]);
    b.linear(blk + ".fc1", "condition", in, w, true);
    b.linear(blk + ".fc2", "condition", w, w, true);
    b.linear(blk + ".skip", "condition", in, w, false);
    in = w;
  }
  b.linear("match.fc1", "match", in, cfg.match_dim, false);
  b.linear("match.fc2", "match", cfg.match_dim, cfg.match_dim, false);

  b.linear("points.fc1", "interaction", 3, cfg.point_channels, true);
  b.linear("points.fc2", "interaction", cfg.point_channels, cfg.point_channels, true);
  b.linear("weight.fc1", "interaction", kPosDim + C + cfg.point_channels + cfg.match_dim, cfg.weight_hidden, true);
  b.linear("weight.fc2", "interaction", cfg.weight_hidden, C, true);
  b.linear("head.fc1", "interaction", C, cfg.head_hidden, true);
  b.linear("head.fc2", "interaction", cfg.head_hidden, 3, true);
  return std::move(b).build();
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Sinusoidal step embedding: pairs (sin, cos) of t / 10^(4 i / (h - 1)).
inline std::vector<double> time_embed(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw Error("time_embed: dimension must be even and >= 2");
  const int half = dim / 2;
  std::vector<double> out(dim);
  for (int i = 0; i < half; ++i) {
    const double exponent = half == 1 ? 0.0 : static_cast<double>(i) / (half - 1);
    const double angle = static_cast<double>(t) / std::pow(1.0e4, exponent);
    out[2 * i] = std::sin(angle);
    out[2 * i + 1] = std::cos(angle);
  }
  return out;
}

/// Grid-frame coordinates: centered on the bounds, scaled by the half extent.
inline Vec3 to_grid_frame(const Vec3& p, const VoxelGridSpec& grid) {
  const Vec3 c = grid.bounds.center();
  const Vec3 e = grid.bounds.extent();
  return {2.0 * (p[0] - c[0]) / e[0], 2.0 * (p[1] - c[1]) / e[1], 2.0 * (p[2] - c[2]) / e[2]};
}

template <typename T>
Var<T> mlp2(ParamBinder<T>& P, const std::string& name, const Var<T>& x, bool bias) {
  Var<T> h = nn::leaky_relu(nn::linear(x, P(name + ".fc1.weight"), bias ? P(name + ".fc1.bias") : Var<T>()));
  return nn::linear(h, P(name + ".fc2.weight"), bias ? P(name + ".fc2.bias") : Var<T>());
}

inline Shape grid_shape(const DenoiserConfig& cfg) {
  const auto& r = cfg.grid.resolution;
  return {static_cast<std::size_t>(cfg.voxel_channels), static_cast<std::size_t>(r[2]), static_cast<std::size_t>(r[0]),
          static_cast<std::size_t>(r[1])};
}

/// Channel-major voxel features laid out [C, nz, nx, ny] plus the occupancy
/// of the assignment that produced them.
template <typename T>
struct VoxelFeatureGrid {
  Var<T> features;
  std::vector<std::uint8_t> occupancy;
};

template <typename T>
VoxelFeatureGrid<T> init_voxel_features(const PointCloud& noisy, const VoxelAssignment& assign,
                                        const std::vector<double>& t_emb, ParamBinder<T>& P,
                                        const DenoiserConfig& cfg) {
  if (assign.size() != noisy.size()) {
    throw Error("init_voxel_features: assignment covers " + std::to_string(assign.size()) + " points, cloud has " +
                std::to_string(noisy.size()));
  }
  if (t_emb.size() != static_cast<std::size_t>(cfg.time_embed_dim)) {
    throw Error("init_voxel_features: time embedding width mismatch");
  }
  const std::size_t cells = cfg.grid.voxel_count();
  const Vec3 vs = cfg.grid.voxel_size();
  const std::size_t width = 6 + t_emb.size();
  BasicTensor<T> in({noisy.size(), width});
  std::vector<std::size_t> cell(noisy.size(), cells);
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    T* row = in.data.data() + i * width;
    if (assign.in_bounds[i]) {
      for (int a = 0; a < 3; ++a) row[a] = static_cast<T>(assign.offset[i][a] / vs[a]);
      cell[i] = assign.linear[i];
    }
    const Vec3 q = to_grid_frame(noisy.points[i], cfg.grid);
    for (int a = 0; a < 3; ++a) row[3 + a] = static_cast<T>(q[a]);
    std::copy(t_emb.begin(), t_emb.end(), row + 6);
  }
  Var<T> feats = mlp2(P, "init", nn::constant(std::move(in)), true);
  const Shape gs = grid_shape(cfg);
  VoxelFeatureGrid<T> out;
  out.features = nn::scatter_mean(feats, cell, Shape(gs.begin() + 1, gs.end()));
  out.occupancy.assign(cells, 0);
  for (std::size_t l : assign.occupied) out.occupancy[l] = 1;
  return out;
}

template <typename T>
Var<T> voxel_completion(const Var<T>& grid, ParamBinder<T>& P, const DenoiserConfig& cfg) {
  if (grid.shape() != grid_shape(cfg)) {
    throw Error("voxel_completion: grid shape " + nn::shape_str(grid.shape()) + " does not match config " +
                nn::shape_str(grid_shape(cfg)));
  }
  Var<T> x = nn::stanh(nn::conv3d(grid, P("completion.stem.weight")));
  Var<T> fused = grid;
  for (int u = 0; u < 3; ++u) {
    const std::string unit = "completion.mprb" + std::to_string(u);
    std::vector<Var<T>> paths;
    for (int j = 0; j < 3; ++j) {
      const auto d = static_cast<std::size_t>(cfg.mprb_dilations[j]);
      Var<T> y = nn::stanh(nn::conv3d(x, P(unit + ".path" + std::to_string(j) + ".weight"), {d, d, d}));
      paths.push_back(nn::add(y, x));
    }
    x = nn::stanh(nn::conv3d(nn::concat_rows(paths), P(unit + ".proj.weight")));
    fused = nn::add(fused, x);
  }
  return fused;
}

/// Folds z into channels, runs an encoder-decoder with skip connections over
/// the (x, y) plane, unfolds, and adds the input back.
template <typename T>
Var<T> planar_unet(const Var<T>& grid, ParamBinder<T>& P, const DenoiserConfig& cfg) {
  const Shape gs = grid_shape(cfg);
  if (grid.shape() != gs) throw Error("planar_unet: grid shape mismatch");
  const Var<T> x = nn::reshape(grid, {gs[0] * gs[1], 1, gs[2], gs[3]});
  auto conv = [&](const Var<T>& v, const std::string& name) { return nn::conv3d(v, P(name + ".weight")); };
  std::vector<Var<T>> skips;
  Var<T> h = x;
  for (int l = 0; l < cfg.unet_depth; ++l) {
    const std::string enc = "unet.enc" + std::to_string(l);
    if (l > 0) h = nn::avg_pool2(h);
    h = nn::stanh(conv(nn::stanh(conv(h, enc + ".conv1")), enc + ".conv2"));
    skips.push_back(h);
  }
  for (int l = cfg.unet_depth - 1; l >= 1; --l) {
    h = nn::stanh(conv(nn::concat_rows({nn::upsample2(h), skips[l - 1]}), "unet.dec" + std::to_string(l) + ".conv"));
  }
  Var<T> y = nn::add(x, conv(h, "unet.out"));
  return nn::reshape(y, gs);
}

/// Pointwise residual blocks of increasing width; output [N, C4].
template <typename T>
Var<T> encode_condition(const PointCloud& sparse, ParamBinder<T>& P, const DenoiserConfig& cfg) {
  BasicTensor<T> in({sparse.size(), 3});
  for (std::size_t i = 0; i < sparse.size(); ++i) {
    const Vec3 q = to_grid_frame(sparse.points[i], cfg.grid);
    for (int a = 0; a < 3; ++a) in[i * 3 + a] = static_cast<T>(q[a]);
  }
  Var<T> x = nn::constant(std::move(in));
  for (int k = 0; k < 4; ++k) {
    const std::string blk = "cond.block" + std::to_string(k);
    Var<T> h = nn::leaky_relu(nn::linear(x, P(blk + ".fc1.weight"), P(blk + ".fc1.bias")));
    h = nn::linear(h, P(blk + ".fc2.weight"), P(blk + ".fc2.bias"));
    x = nn::leaky_relu(nn::add(h, nn::linear(x, P(blk + ".skip.weight"))));
  }
  return x;
}

/// The unconditional token: an all-zero condition feature block.
template <typename T>
Var<T> null_condition(std::size_t n, const DenoiserConfig& cfg) {
  return nn::constant(BasicTensor<T>({n, static_cast<std::size_t>(cfg.cond_channels[3])}));
}

template <typename T>
struct MatchResult {
  Var<T> features;                     // [N, match_dim]
  std::vector<std::size_t> source;  // nearest sparse index per input point (empty under null condition)
};

/// Condition features gathered at each input point's nearest sparse point and
/// refined to match_dim. `sparse == nullptr` selects the null condition, whose
/// match block is zero.
template <typename T>
MatchResult<T> match_features(const PointCloud& input, const PointCloud* sparse, const Var<T>& cond_feats,
                              ParamBinder<T>& P, const DenoiserConfig& cfg) {
  MatchResult<T> out;
  if (sparse == nullptr) {
    out.features = nn::constant(BasicTensor<T>({input.size(), static_cast<std::size_t>(cfg.match_dim)}));
    return out;
  }
  if (sparse->empty()) throw Error("match_features: sparse cloud is empty");
  if (cond_feats.shape()[0] != sparse->size()) {
    throw Error("match_features: condition features have " + std::to_string(cond_feats.shape()[0]) +
                " rows for " + std::to_string(sparse->size()) + " sparse points");
  }
  out.source = nearest_neighbor(input.points, sparse->points);
  out.features = mlp2(P, "match", nn::gather_rows(cond_feats, out.source), false);
  return out;
}

/// Materialized per-group features, for inspection.
struct InteractionBundle {
  std::size_t k = 0;
  Tensor f_pos;     // [N*K, 10] in world units
  Tensor f_group;   // [N*K, C]
  Tensor f_points;  // [N, Cp]
  Tensor f_match;   // [N, 64]
  Tensor weights;   // [N*K, C]
  std::vector<std::size_t> voxel_cells;  // [N*K] flat voxel index of each neighbor

  /// [F_pos, F_group, F_points, F_match] with per-point blocks broadcast over K.
  Tensor hybrid() const {
    const std::size_t nk = f_pos.rows();
    const std::size_t cp = f_points.cols(), cm = f_match.cols(), cg = f_group.cols();
    const std::size_t w = kPosDim + cg + cp + cm;
    Tensor out({nk, w});
    for (std::size_t r = 0; r < nk; ++r) {
      const std::size_t i = r / k;
      double* dst = out.data.data() + r * w;
      std::copy_n(f_pos.data.data() + r * kPosDim, kPosDim, dst);
      std::copy_n(f_group.data.data() + r * cg, cg, dst + kPosDim);
      std::copy_n(f_points.data.data() + i * cp, cp, dst + kPosDim + cg);
      std::copy_n(f_match.data.data() + i * cm, cm, dst + kPosDim + cg + cp);
    }
    return out;
  }
};

/// Scales world-unit positional features for the weight MLP: coordinates by
/// the largest half extent, offsets by the voxel size.
inline Tensor scale_positional(const Tensor& f_pos, const DenoiserConfig& cfg) {
  const Vec3 e = cfg.grid.bounds.extent();
  const double coord = 2.0 / std::max({e[0], e[1], e[2]});
  const Vec3 vs = cfg.grid.voxel_size();
  const double unit = std::max({vs[0], vs[1], vs[2]});
  Tensor out = f_pos;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    double* row = out.data.data() + r * kPosDim;
    for (int j = 0; j < 6; ++j) row[j] = cfg.ablate_world_coords ? 0.0 : row[j] * coord;
    for (int j = 6; j < 9; ++j) row[j] /= unit;
    row[9] /= unit * unit;
  }
  return out;
}

template <typename T>
Var<T> point_voxel_interact(const PointCloud& input, const Var<T>& grid, const std::vector<std::size_t>& occupied,
                            const Var<T>& f_match, ParamBinder<T>& P, const DenoiserConfig& cfg,
                            InteractionBundle* capture = nullptr) {
  const auto K = static_cast<std::size_t>(cfg.neighbors);
  if (occupied.size() < K) {
    throw Error("point_voxel_interact: " + std::to_string(occupied.size()) + " occupied voxels, need at least K = " +
                std::to_string(K));
  }
  const std::size_t n = input.size();
  const std::vector<Vec3> centers = voxel_centers_linear(cfg.grid, occupied);
  const KnnResult nb = knn(input.points, centers, K);
  Tensor f_pos({n * K, kPosDim});
  std::vector<std::size_t> cells(n * K);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3& pp = input.points[i];
    for (std::size_t j = 0; j < K; ++j) {
      const std::size_t r = i * K + j;
      const Vec3& pv = centers[nb.index(i, j)];
      cells[r] = occupied[nb.index(i, j)];
      const Vec3 d = pv - pp;
      double* row = f_pos.data.data() + r * kPosDim;
      for (int a = 0; a < 3; ++a) {
        row[a] = pv[a];
        row[3 + a] = pp[a];
        row[6 + a] = d[a];
      }
      row[9] = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    }
  }

  BasicTensor<T> coords({n, 3});
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 q = to_grid_frame(input.points[i], cfg.grid);
    for (int a = 0; a < 3; ++a) coords[i * 3 + a] = static_cast<T>(q[a]);
  }
  const std::size_t C = static_cast<std::size_t>(cfg.voxel_channels);
  const Var<T> f_group = nn::gather_cells(grid, cells);
  const Var<T> f_points = mlp2(P, "points", nn::constant(std::move(coords)), true);

  // First weight layer over [F_pos, F_group, F_points, F_match], evaluated as
  // a per-neighbor part plus a per-point part broadcast over K.
  const Var<T> w1 = P("weight.fc1.weight");
  const std::size_t local_w = kPosDim + C;
  const std::size_t total_w = w1.shape()[1];
  const Var<T> local = nn::concat_cols({nn::constant(scale_positional(f_pos, cfg).template cast<T>()), f_group});
  const Var<T> point_part = nn::concat_cols({f_points, f_match});
  Var<T> h = nn::add_broadcast_groups(nn::linear(local, nn::slice_cols(w1, 0, local_w), P("weight.fc1.bias")),
                                   nn::linear(point_part, nn::slice_cols(w1, local_w, total_w)), K);
  const Var<T> weights = nn::linear(nn::leaky_relu(h), P("weight.fc2.weight"), P("weight.fc2.bias"));
  const Var<T> pooled = nn::mean_groups(nn::mul(weights, f_group), K);
  Var<T> eps = nn::linear(nn::leaky_relu(nn::linear(pooled, P("head.fc1.weight"), P("head.fc1.bias"))),
                       P("head.fc2.weight"), P("head.fc2.bias"));
  if (capture != nullptr) {
    capture->k = K;
    capture->f_pos = std::move(f_pos);
    capture->f_group = f_group.value().template cast<double>();
    capture->f_points = f_points.value().template cast<double>();
    capture->f_match = f_match.value().template cast<double>();
    capture->weights = weights.value().template cast<double>();
    capture->voxel_cells = std::move(cells);
  }
  return eps;
}

// ---------------------------------------------------------------------------
// Full predictor
// ---------------------------------------------------------------------------

/// Intermediate results of one evaluation, for tests and diagnostics.
struct DenoiseTrace {
  VoxelAssignment assignment;
  Tensor initial_grid;
  Tensor completed_grid;
  Tensor refined_grid;
  Tensor condition_features;
  InteractionBundle interaction;
};

/// eps_hat [N, 3] as a graph node. `condition == nullptr` is the null
/// condition.
template <typename T>
Var<T> denoise(const PointCloud& noisy, const PointCloud* condition, int t, ParamBinder<T>& P,
               const DenoiserConfig& cfg, DenoiseTrace* trace = nullptr) {
  if (t < 0 || t >= cfg.timesteps) {
    throw Error("denoise: step " + std::to_string(t) + " outside [0, " + std::to_string(cfg.timesteps) + ")");
  }
  if (noisy.empty()) throw Error("denoise: input cloud is empty");
  VoxelAssignment assign = voxelize(noisy, cfg.grid);
  const VoxelFeatureGrid<T> g0 = init_voxel_features(noisy, assign, time_embed(t, cfg.time_embed_dim), P, cfg);
  const Var<T> g1 = voxel_completion(g0.features, P, cfg);
  const Var<T> g2 = planar_unet(g1, P, cfg);
  const Var<T> cond = condition ? encode_condition(*condition, P, cfg) : null_condition<T>(0, cfg);
  const MatchResult<T> match = match_features(noisy, condition, cond, P, cfg);
  Var<T> eps = point_voxel_interact(noisy, g2, assign.occupied, match.features, P, cfg,
                                 trace ? &trace->interaction : nullptr);
  if (trace != nullptr) {
    trace->initial_grid = g0.features.value().template cast<double>();
    trace->completed_grid = g1.value().template cast<double>();
    trace->refined_grid = g2.value().template cast<double>();
    trace->condition_features = cond.value().template cast<double>();
    trace->assignment = std::move(assign);
  }
  return eps;
}

template <typename T>
diffusion::NoiseTensor to_noise(const Var<T>& eps) {
  diffusion::NoiseTensor out(eps.shape()[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (int a = 0; a < 3; ++a) out[i][a] = eps.data()[i * 3 + a];
  }
  return out;
}

/// Inference-only evaluation, in float unless T says otherwise.
template <typename T = float>
diffusion::NoiseTensor predict_noise(const PointCloud& noisy, const PointCloud* condition, int t,
                                     const ParamStore& params, const DenoiserConfig& cfg) {
  ParamBinder<T> P(params, false);
  return to_noise(denoise(noisy, condition, t, P, cfg));
}

/// Binds parameters and config into a callable usable by diffusion::sample.
template <typename T = float>
struct Predictor {
  const ParamStore* params;
  const DenoiserConfig* config;

  diffusion::NoiseTensor operator()(const PointCloud& noisy, const PointCloud* condition, int t) const {
    return predict_noise<T>(noisy, condition, t, *params, *config);
  }
};

}  // namespace pvnet::denoiser
