#include <gtest/gtest.h>

#include "pvnet/diffusion.hpp"
#include "support.hpp"

using namespace pvnet;
using namespace pvnet::diffusion;

namespace {

NoiseTensor noise(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return gaussian_noise(n, rng);
}

/// Returns the exact noise that initialized the trajectory.
struct OracleDenoiser {
  NoiseTensor eps;
  NoiseTensor operator()(const PointCloud&, const PointCloud*, int) const { return eps; }
};

}  // namespace

TEST(Schedule, DefaultEndpoints) {
  const auto s = linear_schedule(1000, 3.5e-5, 7e-3);
  EXPECT_EQ(s.beta.front(), 3.5e-5);
  EXPECT_EQ(s.beta.back(), 7e-3);
  EXPECT_NEAR(s.alpha_bar[0], 0.999965, 1e-12);
}

TEST(Schedule, PerIndexInvariants) {
  const auto s = linear_schedule(1000, 3.5e-5, 7e-3);
  double prod = 1.0;
  for (int t = 0; t < s.T; ++t) {
    EXPECT_NEAR(s.beta[t], 3.5e-5 + t * (7e-3 - 3.5e-5) / 999.0, 1e-12);
    EXPECT_NEAR(s.alpha[t], 1.0 - s.beta[t], 1e-12);
    prod *= s.alpha[t];
    EXPECT_NEAR(s.alpha_bar[t], prod, 1e-12);
    if (t > 0) {
      EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    }
  }
}

TEST(Schedule, TwoStepProduct) {
  const auto s = linear_schedule(2, 0.5, 0.5);
  EXPECT_EQ(s.alpha_bar[0], 0.5);
  EXPECT_EQ(s.alpha_bar[1], 0.25);
}

TEST(Schedule, SingleStepUsesBetaZero) {
  const auto s = linear_schedule(1, 0.1, 0.2);
  EXPECT_EQ(s.beta[0], 0.1);
}

TEST(Schedule, InvalidBoundsRejected) {
  EXPECT_THROW(linear_schedule(0, 1e-4, 1e-2), Error);
  EXPECT_THROW(linear_schedule(10, 0.0, 1e-2), Error);
  EXPECT_THROW(linear_schedule(10, 1e-2, 1e-3), Error);
  EXPECT_THROW(linear_schedule(10, 1e-3, 1.0), Error);
}

TEST(ForwardNoise, ZeroNoiseIsIdentity) {
  const auto s = linear_schedule(100, 1e-4, 2e-2);
  const PointCloud p = test::random_cloud(20, 1);
  EXPECT_EQ(forward_noise(p, 57, s, NoiseTensor(20, Vec3{0, 0, 0})).points, p.points);
}

TEST(ForwardNoise, HandExample) {
  auto s = linear_schedule(2, 0.25, 0.25);  // alpha_bar_0 = 0.75
  const PointCloud p({{1, 1, 1}});
  const auto q = forward_noise(p, 0, s, NoiseTensor{{2, 0, 0}});
  EXPECT_NEAR(q.points[0][0], 2.0, 1e-15);
  EXPECT_EQ(q.points[0][1], 1.0);
}

TEST(ForwardNoise, InverseRecoversNoiseAtEveryStep) {
  const auto s = linear_schedule(1000, 3.5e-5, 7e-3);
  const PointCloud p = test::random_cloud(16, 2, -20, 20);
  const NoiseTensor e = noise(16, 3);
  for (int t = 0; t < s.T; ++t) {
    const auto q = forward_noise(p, t, s, e);
    for (std::size_t i = 0; i < p.size(); ++i)
      for (int a = 0; a < 3; ++a) EXPECT_NEAR((q.points[i][a] - p.points[i][a]) / s.sigma(t), e[i][a], 1e-12);
  }
}

TEST(ForwardNoise, ShapeMismatchAndBadStepRejected) {
  const auto s = linear_schedule(10, 1e-3, 1e-2);
  const PointCloud p = test::random_cloud(3, 1);
  EXPECT_THROW(forward_noise(p, 0, s, NoiseTensor(2)), Error);
  EXPECT_THROW(forward_noise(p, 10, s, NoiseTensor(3)), Error);
}

TEST(CfgCombine, Identities) {
  const NoiseTensor u = noise(50, 4), c = noise(50, 5);
  EXPECT_EQ(cfg_combine(u, c, 1.0), c);
  EXPECT_EQ(cfg_combine(u, c, 0.0), u);
  const NoiseTensor zero(50, Vec3{0, 0, 0});
  const NoiseTensor two = cfg_combine(zero, c, 2.0);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int a = 0; a < 3; ++a) EXPECT_EQ(two[i][a], 2.0 * c[i][a]);
  EXPECT_THROW(cfg_combine(u, noise(49, 6), 1.0), Error);
}

TEST(ReverseStep, ZeroInputsKeepPoints) {
  const auto s = linear_schedule(100, 1e-4, 2e-2);
  const PointCloud p = test::random_cloud(10, 7);
  const NoiseTensor zero(10, Vec3{0, 0, 0});
  for (auto v : {SamplerVariant::kLocalDdim, SamplerVariant::kPaperExact}) {
    EXPECT_EQ(reverse_step(p, zero, 50, s, v, zero).points, p.points);
  }
}

TEST(ReverseStep, PaperExactAddsNoNoiseAtStepZero) {
  const auto s = linear_schedule(100, 1e-4, 2e-2);
  const PointCloud p = test::random_cloud(10, 8);
  const NoiseTensor zero(10, Vec3{0, 0, 0});
  EXPECT_EQ(reverse_step(p, zero, 0, s, SamplerVariant::kPaperExact, noise(10, 9)).points, p.points);
}

TEST(ReverseStep, PaperExactMatchesFormula) {
  const auto s = linear_schedule(100, 1e-4, 2e-2);
  const PointCloud p = test::random_cloud(5, 10);
  const NoiseTensor e = noise(5, 11), z = noise(5, 12);
  const int t = 40;
  const auto q = reverse_step(p, e, t, s, SamplerVariant::kPaperExact, z);
  const double drift = (1 - s.alpha[t]) / std::sqrt(1 - s.alpha_bar[t]);
  const double sd = std::sqrt(s.beta[t] * (1 - s.alpha_bar[t - 1]) / (1 - s.alpha_bar[t]));
  for (std::size_t i = 0; i < p.size(); ++i)
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(q.points[i][a], p.points[i][a] - drift * e[i][a] + sd * z[i][a], 1e-14);
}

TEST(ReverseStep, InvalidStepRejected) {
  const auto s = linear_schedule(10, 1e-3, 1e-2);
  const PointCloud p = test::random_cloud(2, 1);
  EXPECT_THROW(reverse_step(p, NoiseTensor(2), 10, s, SamplerVariant::kLocalDdim, {}), Error);
  EXPECT_THROW(reverse_step(p, NoiseTensor(2), -1, s, SamplerVariant::kLocalDdim, {}), Error);
}

TEST(LocalDdim, FullLadderTelescopesToCleanPoints) {
  const auto s = linear_schedule(1000, 3.5e-5, 7e-3);
  const PointCloud p0 = test::random_cloud(32, 13, -20, 20);
  const NoiseTensor e = noise(32, 14);
  PointCloud p = forward_noise(p0, s.T - 1, s, e);
  double drift_sum = 0.0;
  for (int t = s.T - 1; t >= 0; --t) {
    drift_sum += s.sigma(t) - s.sigma(t - 1);
    p = reverse_step(p, e, t, s, SamplerVariant::kLocalDdim, {});
  }
  EXPECT_NEAR(drift_sum, std::sqrt(1 - s.alpha_bar[s.T - 1]), 1e-12);
  for (std::size_t i = 0; i < p0.size(); ++i)
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(p.points[i][a], p0.points[i][a], 1e-9);
}

TEST(Ladder, Examples) {
  const auto full = timestep_ladder(10, 10);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(full[i], 9 - i);
  EXPECT_EQ(timestep_ladder(1000, 2), (std::vector<int>{999, 0}));
  EXPECT_EQ(timestep_ladder(1000, 1), (std::vector<int>{999}));
  EXPECT_THROW(timestep_ladder(10, 0), Error);
  EXPECT_THROW(timestep_ladder(10, 11), Error);
}

TEST(Ladder, StrictlyDecreasingAndEndsAtZero) {
  for (int T : {2, 7, 100, 1000}) {
    for (int steps = 2; steps <= std::min(T, 60); ++steps) {
      const auto l = timestep_ladder(T, steps);
      ASSERT_EQ(static_cast<int>(l.size()), steps);
      EXPECT_EQ(l.front(), T - 1);
      EXPECT_EQ(l.back(), 0);
      for (std::size_t i = 1; i < l.size(); ++i) EXPECT_LT(l[i], l[i - 1]);
    }
  }
}

TEST(Sample, OracleDenoiserRecoversReplicatedCondition) {
  const auto s = linear_schedule(1000, 3.5e-5, 7e-3);
  const PointCloud cond = test::random_cloud(40, 15, -10, 10);
  for (int steps : {1, 5, 50, 1000}) {
    SamplerConfig cfg;
    cfg.steps = steps;
    cfg.guidance_scale = 2.0;
    cfg.seed = 99;
    const int R = 3;
    OracleDenoiser oracle{initial_noise(cond.size() * R, cfg)};
    const PointCloud out = sample(oracle, cond, R, cfg, s);
    ASSERT_EQ(out.size(), cond.size() * R);
    for (std::size_t i = 0; i < out.size(); ++i)
      for (int a = 0; a < 3; ++a) EXPECT_NEAR(out.points[i][a], cond.points[i / R][a], 1e-6);
  }
}

TEST(Sample, PaperExactJumpsStayFiniteWithOracle) {
  const auto s = linear_schedule(1000, 3.5e-5, 7e-3);
  const PointCloud cond = test::random_cloud(10, 16);
  SamplerConfig cfg;
  cfg.steps = 20;
  cfg.guidance_scale = 1.0;
  cfg.variant = SamplerVariant::kPaperExact;
  OracleDenoiser oracle{initial_noise(20, cfg)};
  const PointCloud out = sample(oracle, cond, 2, cfg, s);
  EXPECT_EQ(out.size(), 20u);
  EXPECT_NO_THROW(out.validate());
}

TEST(Sample, CountIsRateTimesConditionAndDeterministic) {
  const auto s = linear_schedule(100, 1e-4, 2e-2);
  const PointCloud cond = test::random_cloud(13, 17);
  SamplerConfig cfg;
  cfg.steps = 10;
  cfg.guidance_scale = 2.0;
  cfg.seed = 5;
  auto den = [](const PointCloud& p, const PointCloud* c, int t) {
    NoiseTensor e(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      for (int a = 0; a < 3; ++a) e[i][a] = 0.1 * p.points[i][a] + (c ? 0.01 * t : 0.0);
    return e;
  };
  for (int R : {2, 4, 7}) {
    const PointCloud a = sample(den, cond, R, cfg, s);
    EXPECT_EQ(a.size(), cond.size() * R);
    EXPECT_EQ(a.points, sample(den, cond, R, cfg, s).points);
  }
}

TEST(Sample, RequiresGuidanceAndValidInputs) {
  const auto s = linear_schedule(100, 1e-4, 2e-2);
  const PointCloud cond = test::random_cloud(4, 18);
  OracleDenoiser oracle{NoiseTensor(8)};
  SamplerConfig cfg;
  EXPECT_THROW(sample(oracle, cond, 2, cfg, s), Error);
  cfg.guidance_scale = 1.0;
  EXPECT_THROW(sample(oracle, PointCloud{}, 2, cfg, s), Error);
  EXPECT_THROW(sample(oracle, cond, 0, cfg, s), Error);
  cfg.steps = 101;
  EXPECT_THROW(sample(oracle, cond, 2, cfg, s), Error);
}

TEST(Variant, ParseRoundTrip) {
  for (auto v : {SamplerVariant::kPaperExact, SamplerVariant::kLocalDdim}) EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("ddpm"), Error);
}
