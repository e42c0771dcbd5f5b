#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "pvnet/io.hpp"
#include "support.hpp"

using namespace pvnet;

namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(KittiBin, EmptyFileIsEmptyCloud) {
  const auto dir = test::scratch_dir("kitti_empty");
  write_bytes(dir / "a.bin", {});
  EXPECT_EQ(io::load_kitti_bin(dir / "a.bin").size(), 0u);
}

TEST(KittiBin, ThirtyTwoBytesAreTwoPoints) {
  const auto dir = test::scratch_dir("kitti_two");
  const float vals[8] = {1.f, 2.f, 3.f, 0.5f, -1.f, -2.f, -3.f, 0.25f};
  std::vector<unsigned char> bytes(32);
  std::memcpy(bytes.data(), vals, 32);  // host is little-endian
  write_bytes(dir / "a.bin", bytes);
  const PointCloud c = io::load_kitti_bin(dir / "a.bin");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.points[1], (Vec3{-1, -2, -3}));
  ASSERT_EQ(c.feature_dim, 1u);
  EXPECT_EQ(c.features[0], 0.5);
  EXPECT_EQ(c.features[1], 0.25);
}

TEST(KittiBin, MalformedLengthNamesByteCount) {
  const auto dir = test::scratch_dir("kitti_bad");
  write_bytes(dir / "a.bin", std::vector<unsigned char>(17));
  try {
    io::load_kitti_bin(dir / "a.bin");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("17 bytes"), std::string::npos);
  }
}

TEST(KittiBin, UnreadablePathRejected) {
  EXPECT_THROW(io::load_kitti_bin("/nonexistent/dir/scan.bin"), Error);
}

TEST(KittiBin, RoundTripIsBitExact) {
  const auto dir = test::scratch_dir("kitti_rt");
  PointCloud c = test::random_cloud(100, 3, -50, 50);
  for (auto& p : c.points)
    for (double& v : p) v = static_cast<float>(v);
  c.feature_dim = 1;
  for (std::size_t i = 0; i < c.size(); ++i) c.features.push_back(static_cast<float>(i * 0.01));
  io::save_kitti_bin(c, dir / "a.bin");
  const PointCloud r = io::load_kitti_bin(dir / "a.bin");
  EXPECT_EQ(r.points, c.points);
  EXPECT_EQ(r.features, c.features);
}

TEST(Ply, RoundTripIsExact) {
  const auto dir = test::scratch_dir("ply_rt");
  PointCloud c = test::random_cloud(200, 4, -30, 30);
  c.feature_dim = 2;
  for (std::size_t i = 0; i < 2 * c.size(); ++i) c.features.push_back(1.0 / (i + 3.0));
  io::save_ply(c, dir / "a.ply");
  const PointCloud r = io::load_ply(dir / "a.ply");
  EXPECT_EQ(r.points, c.points);
  EXPECT_EQ(r.feature_dim, 2u);
  EXPECT_EQ(r.features, c.features);
}

TEST(Ply, TruncatedDataRejected) {
  const auto dir = test::scratch_dir("ply_trunc");
  std::ofstream(dir / "a.ply") << "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\n"
                                  "property double y\nproperty double z\nend_header\n1 2 3\n4 5 6\n";
  EXPECT_THROW(io::load_ply(dir / "a.ply"), Error);
}

TEST(Xyz, RoundTripAndDispatch) {
  const auto dir = test::scratch_dir("xyz_rt");
  const PointCloud c = test::random_cloud(50, 5);
  io::save_cloud(c, dir / "a.xyz");
  EXPECT_EQ(io::load_cloud(dir / "a.xyz").points, c.points);
  EXPECT_THROW(io::load_cloud(dir / "a.obj"), Error);
}

TEST(Xyz, ShortLineRejected) {
  const auto dir = test::scratch_dir("xyz_bad");
  std::ofstream(dir / "a.xyz") << "1 2 3\n4 5\n";
  EXPECT_THROW(io::load_xyz(dir / "a.xyz"), Error);
}
