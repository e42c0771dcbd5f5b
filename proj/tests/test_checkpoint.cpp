#include <gtest/gtest.h>

#include <fstream>

#include "pvnet/checkpoint.hpp"
#include "support.hpp"

using namespace pvnet;
using namespace pvnet::checkpoint;

namespace {

const diffusion::NoiseSchedule kSched = diffusion::linear_schedule(50, 1e-3, 2e-2);

Checkpoint trained_checkpoint() {
  Checkpoint ck;
  ck.denoiser = test::tiny_denoiser();
  ck.train.epochs = 2;
  ck.train.batch_size = 1;
  ck.train.lr = 1e-2;
  ck.train.seed = 6;
  ck.train.rate = 2;
  ck.state.params = denoiser::init_params(ck.denoiser, 5);
  training::train(ck.state, {test::toy_pair(16, 2, 1), test::toy_pair(16, 2, 2)}, kSched, ck.denoiser, ck.train);
  return ck;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void expect_throw_containing(const std::function<void()>& f, const std::string& needle) {
  try {
    f();
    ADD_FAILURE() << "no error, expected one mentioning '" << needle << "'";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Checkpoint, RoundTripIsLossless) {
  const Checkpoint ck = trained_checkpoint();
  const Checkpoint back = decode(encode(ck));
  EXPECT_EQ(back.denoiser, ck.denoiser);
  EXPECT_EQ(back.train, ck.train);
  EXPECT_EQ(back.state.params.tensors, ck.state.params.tensors);
  EXPECT_EQ(back.state.params.layers, ck.state.params.layers);
  EXPECT_EQ(back.state.optimizer, ck.state.optimizer);
  EXPECT_EQ(back.state.epochs_done, 2);
  EXPECT_EQ(back.state.history, ck.state.history);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = test::scratch_dir("ckpt_idem");
  save(trained_checkpoint(), dir / "a.ckpt");
  save(load(dir / "a.ckpt"), dir / "b.ckpt");
  const std::string a = slurp(dir / "a.ckpt"), b = slurp(dir / "b.ckpt");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
}

TEST(Checkpoint, ResumeFromDiskMatchesUninterruptedRun) {
  const auto dir = test::scratch_dir("ckpt_resume");
  const std::vector<scenegen::TrainingPair> data{test::toy_pair(16, 2, 1), test::toy_pair(16, 2, 2)};
  Checkpoint ck;
  ck.denoiser = test::tiny_denoiser();
  ck.train.epochs = 3;
  ck.train.batch_size = 1;
  ck.train.lr_halving_period_epochs = 1;
  ck.train.lr = 1e-2;
  ck.train.rate = 2;
  ck.state.params = denoiser::init_params(ck.denoiser, 5);
  training::TrainState full = ck.state;
  training::train(full, data, kSched, ck.denoiser, ck.train);

  training::train(ck.state, data, kSched, ck.denoiser, ck.train, [&](const training::TrainState& s) {
    if (s.epochs_done == 1) save({ck.denoiser, ck.train, s}, dir / "epoch1.ckpt");
  });
  Checkpoint resumed = load(dir / "epoch1.ckpt", ck.denoiser);
  EXPECT_EQ(resumed.state.epochs_done, 1);
  training::train(resumed.state, data, kSched, resumed.denoiser, resumed.train);
  EXPECT_EQ(resumed.state.history, full.history);
  EXPECT_EQ(resumed.state.params.tensors, full.params.tensors);
}

TEST(Checkpoint, MismatchedConfigIsRefused) {
  const auto dir = test::scratch_dir("ckpt_mismatch");
  save(trained_checkpoint(), dir / "a.ckpt");
  auto other = test::tiny_denoiser();
  other.neighbors = 3;
  other.match_dim = 5;
  expect_throw_containing([&] { load(dir / "a.ckpt", other); }, "neighbors");
  expect_throw_containing([&] { load(dir / "a.ckpt", other); }, "match_dim");
  EXPECT_NO_THROW(load(dir / "a.ckpt", test::tiny_denoiser()));
}

TEST(Checkpoint, CorruptArchivesAreRejected) {
  const std::string good = encode(trained_checkpoint());
  expect_throw_containing([&] { decode("hello"); }, "not a pvnet checkpoint");
  expect_throw_containing([&] { decode(good + "x"); }, "trailing bytes");
  expect_throw_containing([&] { decode(good.substr(0, good.size() - 3)); }, "truncated");
  std::string bad_version = good;
  bad_version[8] = 9;
  expect_throw_containing([&] { decode(bad_version); }, "version");
  expect_throw_containing([&] { load("/nonexistent/x.ckpt"); }, "cannot read");
}

TEST(Checkpoint, ManifestMustMatchStoredConfig) {
  Checkpoint ck = trained_checkpoint();
  ck.state.params.tensors.erase("head.fc2.bias");
  EXPECT_THROW(decode(encode(ck)), Error);

  Checkpoint reshaped = trained_checkpoint();
  reshaped.state.params.tensors["head.fc2.bias"] = nn::Tensor({7});
  expect_throw_containing([&] { decode(encode(reshaped)); }, "head.fc2.bias");

  Checkpoint relabeled = trained_checkpoint();
  relabeled.denoiser.head_hidden = 4;
  expect_throw_containing([&] { decode(encode(relabeled)); }, "head.fc1.bias");
}

TEST(Checkpoint, EncodingIsDeterministic) {
  EXPECT_EQ(encode(trained_checkpoint()), encode(trained_checkpoint()));
}
