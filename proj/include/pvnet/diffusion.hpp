#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "pvnet/common.hpp"
#include "pvnet/geometry.hpp"

namespace pvnet::diffusion {

/// One noise vector per point.
using NoiseTensor = std::vector<Vec3>;

/// Step indices are 0-based; t = 0 is the least-noised step.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  /// Alpha-bar with the convention alpha_bar(-1) = 1.
  double alpha_bar_at(int t) const { return t < 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t)); }
  /// Local noise scale sqrt(1 - alpha_bar_t); zero at t = -1.
  double sigma(int t) const { return std::sqrt(1.0 - alpha_bar_at(t)); }

  void check_step(int t, const char* who) const {
    if (t < 0 || t >= T) {
      throw Error(std::string(who) + ": step " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
    }
  }
};

inline NoiseSchedule linear_schedule(int T, double beta_0, double beta_T) {
  if (T < 1) throw Error("linear_schedule: T must be >= 1");
  if (!(beta_0 > 0.0 && beta_0 <= beta_T && beta_T < 1.0)) {
    throw Error("linear_schedule: need 0 < beta_0 <= beta_T < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.beta[t] = (T == 1) ? beta_0 : beta_0 + t * (beta_T - beta_0) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

namespace detail {
inline void check_shape(std::size_t a, std::size_t b, const char* who) {
  if (a != b) {
    throw Error(std::string(who) + ": shape mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + " rows)");
  }
}
}  // namespace detail

/// Local forward noising: p_t = p + sqrt(1 - alpha_bar_t) * eps.
inline PointCloud forward_noise(const PointCloud& points, int t, const NoiseSchedule& sched, const NoiseTensor& eps) {
  sched.check_step(t, "forward_noise");
  detail::check_shape(points.size(), eps.size(), "forward_noise");
  const double s = sched.sigma(t);
  PointCloud out;
  out.points.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out.points[i] = points.points[i] + s * eps[i];
  return out;
}

/// Classifier-free guidance eps_u + s * (eps_c - eps_u), evaluated as
/// (1 - s) * eps_u + s * eps_c so that s = 0 and s = 1 are exact.
inline NoiseTensor cfg_combine(const NoiseTensor& eps_uncond, const NoiseTensor& eps_cond, double s) {
  detail::check_shape(eps_uncond.size(), eps_cond.size(), "cfg_combine");
  NoiseTensor out(eps_uncond.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (int a = 0; a < 3; ++a) out[i][a] = (1.0 - s) * eps_uncond[i][a] + s * eps_cond[i][a];
  }
  return out;
}

enum class SamplerVariant { kPaperExact, kLocalDdim };

inline std::string to_string(SamplerVariant v) { return v == SamplerVariant::kPaperExact ? "paper-exact" : "local-ddim"; }

inline SamplerVariant parse_variant(const std::string& s) {
  if (s == "paper-exact") return SamplerVariant::kPaperExact;
  if (s == "local-ddim") return SamplerVariant::kLocalDdim;
  throw Error("unknown sampler variant '" + s + "' (expected paper-exact or local-ddim)");
}

/// Moves p from step t to step t_prev (t_prev < t, -1 = clean).
///
/// local-ddim: p - (sigma_t - sigma_prev) * eps_hat, deterministic.
/// paper-exact: p - beta'/sigma_t * eps_hat + sqrt(beta' (1 - ab_prev) / (1 - ab_t)) * z,
/// with beta' = 1 - ab_t / ab_prev (equal to beta_t for consecutive steps).
inline PointCloud reverse_jump(const PointCloud& p_t, const NoiseTensor& eps_hat, int t, int t_prev,
                               const NoiseSchedule& sched, SamplerVariant variant, const NoiseTensor& z) {
  sched.check_step(t, "reverse_step");
  if (t_prev >= t || t_prev < -1) {
    throw Error("reverse_step: target step " + std::to_string(t_prev) + " must lie in [-1, " + std::to_string(t) + ")");
  }
  detail::check_shape(p_t.size(), eps_hat.size(), "reverse_step");
  PointCloud out;
  out.points.resize(p_t.size());
  if (variant == SamplerVariant::kLocalDdim) {
    const double drift = sched.sigma(t) - sched.sigma(t_prev);
    for (std::size_t i = 0; i < p_t.size(); ++i) out.points[i] = p_t.points[i] - drift * eps_hat[i];
    return out;
  }
  detail::check_shape(p_t.size(), z.size(), "reverse_step");
  const double ab_t = sched.alpha_bar_at(t);
  const double ab_prev = sched.alpha_bar_at(t_prev);
  const double beta_jump = (t_prev == t - 1) ? sched.beta[t] : 1.0 - ab_t / ab_prev;
  const double drift = beta_jump / std::sqrt(1.0 - ab_t);
  const double var = beta_jump * (1.0 - ab_prev) / (1.0 - ab_t);
  const double sd = std::sqrt(std::max(var, 0.0));
  for (std::size_t i = 0; i < p_t.size(); ++i) out.points[i] = p_t.points[i] - drift * eps_hat[i] + sd * z[i];
  return out;
}

inline PointCloud reverse_step(const PointCloud& p_t, const NoiseTensor& eps_hat, int t, const NoiseSchedule& sched,
                               SamplerVariant variant, const NoiseTensor& z) {
  return reverse_jump(p_t, eps_hat, t, t - 1, sched, variant, z);
}

/// Evenly spaced descending steps from T-1 to 0. A single-step ladder is
/// {T-1}: one jump straight to the clean state.
inline std::vector<int> timestep_ladder(int T, int steps) {
  if (T < 1 || steps < 1 || steps > T) {
    throw Error("timestep_ladder: need 1 <= steps <= T (steps = " + std::to_string(steps) +
                ", T = " + std::to_string(T) + ")");
  }
  if (steps == 1) return {T - 1};
  std::vector<int> out(steps);
  for (int i = 0; i < steps; ++i) {
    const double frac = 1.0 - static_cast<double>(i) / (steps - 1);
    out[i] = static_cast<int>(std::lround((T - 1) * frac));
  }
  return out;
}

struct SamplerConfig {
  int steps = 50;
  double guidance_scale = std::numeric_limits<double>::quiet_NaN();  // must be set explicitly
  SamplerVariant variant = SamplerVariant::kLocalDdim;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& sched) const {
    if (!std::isfinite(guidance_scale)) throw Error("sampler: guidance_scale must be set");
    if (steps < 1 || steps > sched.T) {
      throw Error("sampler: steps (" + std::to_string(steps) + ") must lie in [1, T = " + std::to_string(sched.T) + "]");
    }
  }
};

inline NoiseTensor gaussian_noise(std::size_t n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  NoiseTensor out(n);
  for (auto& v : out) {
    for (double& c : v) c = normal(rng);
  }
  return out;
}

/// Anything that predicts noise for a noisy cloud. `condition == nullptr`
/// requests the unconditional (null-condition) prediction.
template <typename D>
concept Denoiser = requires(const D& d, const PointCloud& noisy, const PointCloud* cond, int t) {
  { d(noisy, cond, t) } -> std::convertible_to<NoiseTensor>;
};

/// Replicates each condition point R times (copies of point i occupy rows
/// i*R .. i*R+R-1).
inline PointCloud replicate(const PointCloud& condition, int rate) {
  PointCloud out;
  out.points.reserve(condition.size() * rate);
  for (const auto& p : condition.points) {
    for (int r = 0; r < rate; ++r) out.points.push_back(p);
  }
  return out;
}

/// The noise used to initialize a trajectory; exposed so tests can build
/// oracle denoisers.
inline NoiseTensor initial_noise(std::size_t n, const SamplerConfig& cfg) {
  Rng rng(seeds::derive(cfg.seed, "sampler.init"));
  return gaussian_noise(n, rng);
}

/// Conditional reverse diffusion at rate R. Each step evaluates the denoiser
/// twice (null and real condition) and blends them with the guidance scale.
template <Denoiser D>
PointCloud sample(const D& denoiser, const PointCloud& condition, int rate, const SamplerConfig& cfg,
                  const NoiseSchedule& sched) {
  if (condition.empty()) throw Error("sample: condition cloud is empty");
  if (rate < 1) throw Error("sample: rate must be >= 1");
  cfg.validate(sched);
  const PointCloud base = replicate(condition, rate);
  PointCloud p = forward_noise(base, sched.T - 1, sched, initial_noise(base.size(), cfg));
  const std::vector<int> ladder = timestep_ladder(sched.T, cfg.steps);
  Rng rng(seeds::derive(cfg.seed, "sampler.steps"));
  NoiseTensor z;
  for (std::size_t i = 0; i < ladder.size(); ++i) {
    const int t = ladder[i];
    const int t_prev = (i + 1 < ladder.size()) ? ladder[i + 1] : -1;
    const NoiseTensor eps_u = denoiser(p, nullptr, t);
    const NoiseTensor eps_c = denoiser(p, &condition, t);
    const NoiseTensor eps_hat = cfg_combine(eps_u, eps_c, cfg.guidance_scale);
    if (cfg.variant == SamplerVariant::kPaperExact) z = gaussian_noise(p.size(), rng);
    p = reverse_jump(p, eps_hat, t, t_prev, sched, cfg.variant, z);
  }
  return p;
}

}  // namespace pvnet::diffusion
