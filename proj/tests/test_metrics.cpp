#include <gtest/gtest.h>

#include <numeric>

#include "pvnet/metrics.hpp"
#include "support.hpp"

using namespace pvnet;
using namespace pvnet::metrics;

TEST(Chamfer, Examples) {
  const PointCloud P({{0, 0, 0}}), Q({{3, 4, 0}});
  EXPECT_EQ(chamfer(P, Q), 50.0);
  const PointCloud R = test::random_cloud(100, 1);
  EXPECT_EQ(chamfer(R, R), 0.0);
  const PointCloud S = test::random_cloud(70, 2);
  EXPECT_EQ(chamfer(R, S), chamfer(S, R));
  EXPECT_THROW(chamfer(R, PointCloud{}), Error);
}

TEST(Chamfer, MatchesExhaustiveScan) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const PointCloud P = test::random_cloud(1 + (s * 37) % 512, 10 + s);
    const PointCloud Q = test::random_cloud(1 + (s * 91) % 512, 500 + s);
    EXPECT_NEAR(chamfer(P, Q), test::brute_chamfer(P.points, Q.points), 1e-9);
  }
}

TEST(Chamfer, RigidMotionInvariance) {
  const PointCloud P = test::random_cloud(200, 3), Q = test::random_cloud(150, 4);
  const double th = 0.7;
  auto move = [&](PointCloud c) {
    for (auto& p : c.points) {
      p = {std::cos(th) * p[0] - std::sin(th) * p[1] + 5, std::sin(th) * p[0] + std::cos(th) * p[1] - 2, p[2] + 1};
    }
    return c;
  };
  EXPECT_NEAR(chamfer(move(P), move(Q)), chamfer(P, Q), 1e-9);
}

TEST(Rcd, IdenticalCloudsGiveZero) {
  const PointCloud Q = test::random_cloud(400, 5);
  const auto r = rcd(Q, Q);
  EXPECT_EQ(r.rcd, 0.0);
  EXPECT_EQ(r.recon_rcd, 0.0);
  EXPECT_EQ(r.match_rcd, 0.0);
}

TEST(Rcd, SingleGroupHandExample) {
  RcdConfig cfg;
  cfg.groups = 1;
  cfg.recon_groups = 1;
  cfg.match_groups = 0;
  const auto r = rcd(PointCloud({{0, 0, 0}}), PointCloud({{1, 0, 0}}), cfg);
  EXPECT_EQ(r.rcd, 2.0);
  EXPECT_EQ(r.targets_used, 1u);
}

TEST(Rcd, MatchesExhaustiveOracle) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    RcdConfig cfg;
    cfg.seed = s;
    const PointCloud Q = test::random_cloud(64 + (s * 53) % 449, 1000 + s);
    const PointCloud P = test::random_cloud(1 + (s * 71) % 512, 2000 + s);
    const auto r = rcd(P, Q, cfg);
    const auto o = test::oracle_rcd(P, Q, cfg);
    EXPECT_NEAR(r.rcd, o.rcd, 1e-9);
    EXPECT_NEAR(r.recon_rcd, o.recon, 1e-9);
    EXPECT_NEAR(r.match_rcd, o.match, 1e-9);
  }
}

TEST(Rcd, ProtocolAccounting) {
  const PointCloud Q = test::random_cloud(3000, 6), P = test::random_cloud(2000, 7);
  const auto r = rcd(P, Q);
  EXPECT_EQ(r.centers.size(), 64u);
  EXPECT_EQ(std::set<std::size_t>(r.centers.begin(), r.centers.end()).size(), 64u);
  ASSERT_EQ(r.r_q.size(), 64u);
  for (const auto& g : r.r_q) EXPECT_EQ(g.size(), 32u);
  EXPECT_EQ(r.recon_ids.size(), 20u);
  EXPECT_EQ(r.match_ids.size(), 44u);
  std::vector<int> all = r.recon_ids;
  all.insert(all.end(), r.match_ids.begin(), r.match_ids.end());
  std::sort(all.begin(), all.end());
  for (int g = 0; g < 64; ++g) EXPECT_EQ(all[g], g);
  for (const auto& g : r.r_p) EXPECT_EQ(g.size(), 32u);
  EXPECT_EQ(r.predictions_used, 32u);
}

TEST(Rcd, OrderInvariance) {
  const PointCloud Q = test::random_cloud(500, 8), P = test::random_cloud(450, 9);
  PointCloud q2 = Q, p2 = P;
  Rng rng(10);
  std::shuffle(q2.points.begin(), q2.points.end(), rng);
  std::shuffle(p2.points.begin(), p2.points.end(), rng);
  const auto a = rcd(P, Q), b = rcd(p2, q2);
  EXPECT_EQ(a.rcd, b.rcd);
  EXPECT_EQ(a.recon_rcd, b.recon_rcd);
  EXPECT_EQ(a.match_rcd, b.match_rcd);
}

TEST(Rcd, SparsePredictionFillsEveryGroup) {
  const PointCloud Q = test::random_cloud(300, 11);
  const PointCloud P({{-1, -1, -1}});
  const auto r = rcd(P, Q);
  EXPECT_EQ(r.predictions_used, 1u);
  for (const auto& g : r.r_p) EXPECT_EQ(g, std::vector<std::size_t>{0});
  for (double v : r.group_values) EXPECT_TRUE(std::isfinite(v));
  EXPECT_TRUE(std::isfinite(r.rcd));
}

TEST(Rcd, ErrorsAndClampedTargets) {
  EXPECT_THROW(rcd(test::random_cloud(5, 1), test::random_cloud(10, 2)), Error);
  RcdConfig cfg;
  cfg.groups = 4;
  cfg.recon_groups = 1;
  cfg.match_groups = 3;
  EXPECT_EQ(rcd(test::random_cloud(5, 1), test::random_cloud(10, 2), cfg).targets_used, 10u);
  cfg.match_groups = 2;
  EXPECT_THROW(rcd(test::random_cloud(5, 1), test::random_cloud(10, 2), cfg), Error);
}

TEST(FScore, Examples) {
  const PointCloud R = test::random_cloud(50, 12);
  EXPECT_EQ(fscore(R, R, 0.1), 1.0);
  PointCloud far = R;
  for (auto& p : far.points) p[0] += 100;
  EXPECT_EQ(fscore(R, far, 0.1), 0.0);
  const double t = 0.25;
  const auto s = fscore_detail(PointCloud({{0, 0, 0}, {2 * t, 0, 0}}), PointCloud({{0, 0, 0}}), t);
  EXPECT_EQ(s.precision, 0.5);
  EXPECT_EQ(s.recall, 1.0);
  EXPECT_NEAR(s.f, 2.0 / 3.0, 1e-15);
  EXPECT_THROW(fscore(R, R, 0.0), Error);
  EXPECT_THROW(fscore(PointCloud{}, R, 0.1), Error);
}

TEST(Evaluate, SelfReportAndComposition) {
  const PointCloud Q = test::random_cloud(400, 13), P = test::random_cloud(380, 14);
  RcdConfig cfg;
  cfg.seed = 3;
  const auto self = evaluate(Q, Q, cfg, 0.2);
  EXPECT_EQ(self.cd, 0.0);
  EXPECT_EQ(self.rcd, 0.0);
  EXPECT_EQ(self.fscore, 1.0);
  const auto r = evaluate(P, Q, cfg, 0.2);
  EXPECT_EQ(r.cd, chamfer(P, Q));
  EXPECT_EQ(r.rcd, rcd(P, Q, cfg).rcd);
  EXPECT_EQ(r.match_rcd, rcd(P, Q, cfg).match_rcd);
  EXPECT_EQ(r.fscore, fscore(P, Q, 0.2));
  EXPECT_EQ(to_json(r).dump(), to_json(evaluate(P, Q, cfg, 0.2)).dump());
  for (double v : {r.cd, r.rcd, r.recon_rcd, r.match_rcd, r.fscore}) EXPECT_GE(v, 0.0);
  EXPECT_LE(r.fscore, 1.0);
}

TEST(Evaluate, JsonCarriesUnitsSeedsAndThreshold) {
  const PointCloud Q = test::random_cloud(100, 15);
  RcdConfig cfg;
  cfg.seed = 42;
  const auto j = to_json(evaluate(Q, Q, cfg, 0.3));
  EXPECT_EQ(j["cd"]["unit"], "m^2");
  EXPECT_EQ(j["rcd"]["unit"], "m");
  EXPECT_EQ(j["fscore"]["threshold"], 0.3);
  EXPECT_TRUE(j.dump().find("42") != std::string::npos);
}
