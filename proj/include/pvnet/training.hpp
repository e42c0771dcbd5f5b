#pragma once

// Noise-prediction loss with the standard-deviation regularizer, condition
// dropout, AdamW, and the epoch loop with per-epoch checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "pvnet/common.hpp"
#include "pvnet/denoiser.hpp"
#include "pvnet/diffusion.hpp"
#include "pvnet/nn/autograd.hpp"
#include "pvnet/nn/params.hpp"
#include "pvnet/scenegen.hpp"

namespace pvnet::training {

using diffusion::NoiseTensor;
using nn::ParamStore;

enum class Precision { kFloat, kDouble };

inline std::string to_string(Precision p) { return p == Precision::kFloat ? "float" : "double"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "float") return Precision::kFloat;
  if (s == "double") return Precision::kDouble;
  throw Error("unknown precision '" + s + "' (expected float or double)");
}

struct TrainConfig {
  int epochs = 20;
  int batch_size = 2;
  double lr = 1e-4;
  int lr_halving_period_epochs = 5;
  double weight_decay = 1e-4;
  double lambda = 1.0;
  double p_uncond = 0.1;
  int rate = 10;
  std::uint64_t seed = 0;
  // Arithmetic of the forward/backward graph. Master weights and optimizer
  // moments are always double.
  Precision precision = Precision::kFloat;

  void validate() const {
    if (epochs < 1) throw Error("train.epochs must be >= 1");
    if (batch_size < 1) throw Error("train.batch_size must be >= 1");
    if (!(lr > 0.0)) throw Error("train.lr must be positive");
    if (lr_halving_period_epochs < 1) throw Error("train.lr_halving_period_epochs must be >= 1");
    if (weight_decay < 0.0) throw Error("train.weight_decay must be non-negative");
    if (lambda < 0.0) throw Error("train.lambda must be non-negative");
    if (!(p_uncond >= 0.0 && p_uncond < 1.0)) throw Error("train.p_uncond must lie in [0, 1)");
    if (rate < 1) throw Error("train.rate must be >= 1");
  }

  double lr_at(int epoch) const { return lr * std::ldexp(1.0, -(epoch / lr_halving_period_epochs)); }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

inline double smooth_l1(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  if (std::abs(x) < 1.0) return x;
  return x > 0.0 ? 1.0 : -1.0;
}

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;
  double std_reg = 0.0;
  double observed_std = 0.0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

namespace detail {

template <typename T>
LossBreakdown loss_values(std::span<const T> pred, std::span<const double> target, double lambda) {
  const std::size_t m = pred.size();
  double mean = 0.0;
  for (T v : pred) mean += static_cast<double>(v);
  mean /= static_cast<double>(m);
  double var = 0.0;
  double se = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = static_cast<double>(pred[i]) - mean;
    var += d * d;
    const double e = static_cast<double>(pred[i]) - target[i];
    se += e * e;
  }
  LossBreakdown out;
  out.mse = se / static_cast<double>(m);
  out.observed_std = std::sqrt(var / static_cast<double>(m));
  out.std_reg = smooth_l1(out.observed_std - 1.0);
  out.total = out.mse + lambda * out.std_reg;
  return out;
}

inline std::vector<double> flatten(const NoiseTensor& eps) {
  std::vector<double> out;
  out.reserve(eps.size() * 3);
  for (const auto& v : eps) out.insert(out.end(), v.begin(), v.end());
  return out;
}

}  // namespace detail

/// mse over all coordinates plus lambda * smooth_l1(std(eps_hat) - 1), with
/// the population standard deviation over every entry of eps_hat.
inline LossBreakdown loss(const NoiseTensor& eps_hat, const NoiseTensor& eps, double lambda) {
  diffusion::detail::check_shape(eps_hat.size(), eps.size(), "loss");
  if (eps_hat.size() * 3 < 2) throw Error("loss: need at least 2 entries for a standard deviation");
  const std::vector<double> a = detail::flatten(eps_hat);
  const std::vector<double> b = detail::flatten(eps);
  return detail::loss_values<double>(a, b, lambda);
}

/// The same loss as a graph node over eps_hat [N, 3]; the breakdown is written
/// to `out` when given.
template <typename T>
nn::Var<T> noise_loss(const nn::Var<T>& eps_hat, const NoiseTensor& eps, double lambda, LossBreakdown* out = nullptr) {
  if (eps_hat.shape() != nn::Shape{eps.size(), 3}) {
    throw Error("noise_loss: prediction shape " + nn::shape_str(eps_hat.shape()) + " vs " + std::to_string(eps.size()) +
                " target rows");
  }
  if (eps_hat.size() < 2) throw Error("loss: need at least 2 entries for a standard deviation");
  std::vector<double> target = detail::flatten(eps);
  const LossBreakdown lb = detail::loss_values<T>(std::span<const T>(eps_hat.data(), eps_hat.size()), target, lambda);
  if (out != nullptr) *out = lb;
  return nn::detail::make_op<T>(
      nn::BasicTensor<T>({1}, {static_cast<T>(lb.total)}), {eps_hat},
      [target = std::move(target), lb, lambda](nn::Node<T>& self) {
        nn::Node<T>& p = *self.parents[0];
        auto& g = p.grad_buffer();
        const std::size_t m = g.size();
        const double up = static_cast<double>(self.grad[0]);
        double mean = 0.0;
        for (T v : p.value.data) mean += static_cast<double>(v);
        mean /= static_cast<double>(m);
        // d std / d x_i = (x_i - mean) / (m std); zero when std vanishes.
        const double reg = lb.observed_std > 0.0
                               ? lambda * smooth_l1_grad(lb.observed_std - 1.0) / (static_cast<double>(m) * lb.observed_std)
                               : 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = static_cast<double>(p.value[i]);
          const double d = 2.0 * (x - target[i]) / static_cast<double>(m) + reg * (x - mean);
          g[i] += static_cast<T>(up * d);
        }
      });
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

/// One AdamW update with decoupled weight decay.
inline void adamw_update(ParamStore& params, const nn::GradStore& grads, AdamState& st, double lr, double weight_decay) {
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, tensor] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) throw Error("adamw: no gradient for '" + name + "'");
    const auto& g = git->second;
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.size() != g.size()) m.assign(g.size(), 0.0);
    if (v.size() != g.size()) v.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      tensor.data[i] -= lr * (mhat / (std::sqrt(vhat) + st.eps) + weight_decay * tensor.data[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// Random choices of one training sample.
struct SampleDraw {
  int t = 0;
  NoiseTensor eps;
  bool drop_condition = false;
};

inline SampleDraw draw_sample(std::size_t n_points, int T, double p_uncond, std::uint64_t seed, std::int64_t step,
                              std::size_t slot) {
  const auto idx = static_cast<std::uint64_t>(step) * 1024 + slot;
  Rng noise_rng(seeds::derive(seed, "train.noise", idx));
  Rng drop_rng(seeds::derive(seed, "train.dropout", idx));
  SampleDraw d;
  d.t = std::uniform_int_distribution<int>(0, T - 1)(noise_rng);
  d.eps = diffusion::gaussian_noise(n_points, noise_rng);
  d.drop_condition = std::uniform_real_distribution<double>(0.0, 1.0)(drop_rng) < p_uncond;
  return d;
}

/// Loss graph for one pair under a fixed draw.
template <typename T>
nn::Var<T> sample_loss(const scenegen::TrainingPair& pair, const SampleDraw& draw, const diffusion::NoiseSchedule& sched,
                       nn::ParamBinder<T>& P, const denoiser::DenoiserConfig& dcfg, double lambda,
                       LossBreakdown* out = nullptr) {
  const PointCloud noisy = diffusion::forward_noise(pair.input, draw.t, sched, draw.eps);
  const nn::Var<T> eps_hat =
      denoiser::denoise(noisy, draw.drop_condition ? nullptr : &pair.condition, draw.t, P, dcfg);
  return noise_loss(eps_hat, draw.eps, lambda, out);
}

inline LossBreakdown mean_breakdown(const std::vector<LossBreakdown>& parts) {
  LossBreakdown out;
  for (const auto& b : parts) {
    out.total += b.total;
    out.mse += b.mse;
    out.std_reg += b.std_reg;
    out.observed_std += b.observed_std;
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  out.total *= inv;
  out.mse *= inv;
  out.std_reg *= inv;
  out.observed_std *= inv;
  return out;
}

namespace detail {

template <typename T>
std::pair<LossBreakdown, nn::GradStore> batch_gradients(const ParamStore& params,
                                                        std::span<const scenegen::TrainingPair* const> batch,
                                                        const std::vector<SampleDraw>& draws,
                                                        const diffusion::NoiseSchedule& sched,
                                                        const denoiser::DenoiserConfig& dcfg, double lambda) {
  nn::ParamBinder<T> P(params, true);
  std::vector<nn::Var<T>> losses;
  std::vector<LossBreakdown> parts(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    losses.push_back(sample_loss(*batch[b], draws[b], sched, P, dcfg, lambda, &parts[b]));
  }
  nn::backward(nn::mean_scalars(losses));
  return {mean_breakdown(parts), P.grads()};
}

}  // namespace detail

/// One optimizer step on a batch. All randomness comes from (seed, step).
inline LossBreakdown train_step(ParamStore& params, AdamState& opt,
                                std::span<const scenegen::TrainingPair* const> batch,
                                const diffusion::NoiseSchedule& sched, const denoiser::DenoiserConfig& dcfg,
                                const TrainConfig& tcfg, double lr) {
  if (batch.empty()) throw Error("train_step: empty batch");
  if (sched.T != dcfg.timesteps) {
    throw Error("train_step: schedule T (" + std::to_string(sched.T) + ") != denoiser timesteps (" +
                std::to_string(dcfg.timesteps) + ")");
  }
  std::vector<SampleDraw> draws;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    batch[b]->validate();
    draws.push_back(draw_sample(batch[b]->input.size(), sched.T, tcfg.p_uncond, tcfg.seed, opt.step, b));
  }
  auto [lb, grads] = tcfg.precision == Precision::kFloat
                         ? detail::batch_gradients<float>(params, batch, draws, sched, dcfg, tcfg.lambda)
                         : detail::batch_gradients<double>(params, batch, draws, sched, dcfg, tcfg.lambda);
  for (const auto& [name, g] : grads) {
    for (double v : g) {
      if (!std::isfinite(v)) throw Error("train_step: non-finite gradient in '" + name + "'");
    }
  }
  adamw_update(params, grads, opt, lr, tcfg.weight_decay);
  return lb;
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

struct LossRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;

  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

inline void write_loss_csv(const std::vector<LossRecord>& history, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os.precision(17);
  os << "step,epoch,lr,mse,std_reg,observed_std,total\n";
  for (const auto& r : history) {
    os << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss.mse << ',' << r.loss.std_reg << ','
       << r.loss.observed_std << ',' << r.loss.total << '\n';
  }
}

inline std::size_t steps_per_epoch(std::size_t dataset, int batch_size) {
  return (dataset + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size);
}

/// Order in which an epoch visits the dataset.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seeds::derive(seed, "train.shuffle", static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

/// Everything needed to continue a run.
struct TrainState {
  ParamStore params;
  AdamState optimizer;
  int epochs_done = 0;
  std::vector<LossRecord> history;
};

/// Called after each completed epoch (checkpointing hook).
using EpochCallback = std::function<void(const TrainState&)>;

/// Runs epochs [state.epochs_done, cfg.epochs). Resuming from a saved state
/// reproduces the uninterrupted run because every draw is keyed on
/// (seed, step) or (seed, epoch).
inline void train(TrainState& state, const std::vector<scenegen::TrainingPair>& dataset,
                  const diffusion::NoiseSchedule& sched, const denoiser::DenoiserConfig& dcfg, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {}) {
  if (dataset.empty()) throw Error("train: dataset is empty");
  cfg.validate();
  for (const auto& p : dataset) p.validate();
  const std::size_t per_epoch = steps_per_epoch(dataset.size(), cfg.batch_size);
  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    const std::vector<std::size_t> order = epoch_order(dataset.size(), cfg.seed, epoch);
    for (std::size_t s = 0; s < per_epoch; ++s) {
      std::vector<const scenegen::TrainingPair*> batch;
      for (std::size_t j = s * cfg.batch_size; j < std::min(order.size(), (s + 1) * cfg.batch_size); ++j) {
        batch.push_back(&dataset[order[j]]);
      }
      const std::int64_t step = state.optimizer.step;
      const LossBreakdown lb = train_step(state.params, state.optimizer, batch, sched, dcfg, cfg, lr);
      state.history.push_back({step, epoch, lr, lb});
    }
    state.epochs_done = epoch + 1;
    if (on_epoch) on_epoch(state);
  }
}

/// Keeps large scratch buffers (im2col columns) on the heap instead of
/// returning them to the OS after every convolution. No-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
  mallopt(M_TOP_PAD, 256 * 1024 * 1024);
#endif
}

}  // namespace pvnet::training
