#include <gtest/gtest.h>

#include <functional>

#include "pvnet/nn/autograd.hpp"
#include "support.hpp"

using namespace pvnet;
using namespace pvnet::nn;

namespace {

using V = Var<double>;

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : t.data) v = u(rng);
  return t;
}

/// Projects the op output onto fixed random weights so every output entry
/// reaches the scalar loss with a distinct coefficient.
V project(const V& y, std::uint64_t seed) {
  const Tensor w = random_tensor({y.size()}, seed);
  const V flat = reshape(y, {1, y.size()});
  return linear(flat, constant(Tensor({1, y.size()}, w.data)));
}

/// Central-difference check of d(project(f(inputs)))/d(inputs).
void check_gradients(const std::vector<Tensor>& inputs, const std::function<V(const std::vector<V>&)>& f,
                     double tol = 1e-7) {
  std::vector<V> leaves;
  for (const auto& t : inputs) leaves.push_back(parameter(t));
  backward(project(f(leaves), 777));
  const double h = 1e-5;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const std::vector<double> analytic = leaves[k].grad();
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<V> xs;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t.data[i] += delta;
          xs.push_back(constant(std::move(t)));
        }
        return project(f(xs), 777).data()[0];
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      EXPECT_NEAR(analytic[i], numeric, tol * std::max(1.0, std::abs(numeric))) << "input " << k << " entry " << i;
    }
  }
}

}  // namespace

TEST(Autograd, Elementwise) {
  const Tensor a = random_tensor({4, 3}, 1), b = random_tensor({4, 3}, 2);
  check_gradients({a, b}, [](const std::vector<V>& x) { return add(x[0], x[1]); });
  check_gradients({a, b}, [](const std::vector<V>& x) { return mul(x[0], x[1]); });
  check_gradients({a}, [](const std::vector<V>& x) { return scale(x[0], 2.5); });
  check_gradients({a}, [](const std::vector<V>& x) { return leaky_relu(x[0]); });
  check_gradients({a}, [](const std::vector<V>& x) { return stanh(x[0]); });
}

TEST(Autograd, StanhIsOddAndZeroPreserving) {
  const Tensor a = random_tensor({10}, 3);
  Tensor neg = a;
  for (double& v : neg.data) v = -v;
  const V p = stanh(constant(a)), n = stanh(constant(neg));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(p.data()[i], -n.data()[i]);
  EXPECT_EQ(stanh(constant(Tensor({1}))).data()[0], 0.0);
}

TEST(Autograd, LinearWithAndWithoutBias) {
  const Tensor x = random_tensor({5, 4}, 4), w = random_tensor({3, 4}, 5), b = random_tensor({3}, 6);
  check_gradients({x, w, b}, [](const std::vector<V>& v) { return linear(v[0], v[1], v[2]); });
  check_gradients({x, w}, [](const std::vector<V>& v) { return linear(v[0], v[1]); });
}

TEST(Autograd, SliceConcatGather) {
  const Tensor a = random_tensor({4, 5}, 7), b = random_tensor({4, 2}, 8), c = random_tensor({3, 5}, 9);
  check_gradients({a}, [](const std::vector<V>& x) { return slice_cols(x[0], 1, 4); });
  check_gradients({a, b}, [](const std::vector<V>& x) { return concat_cols({x[0], x[1]}); });
  check_gradients({a, c}, [](const std::vector<V>& x) { return concat_rows({x[0], x[1]}); });
  check_gradients({a}, [](const std::vector<V>& x) { return gather_rows(x[0], {3, 0, 3, 1}); });
}

TEST(Autograd, ScatterAndGatherCells) {
  const Tensor x = random_tensor({7, 3}, 10);
  const std::vector<std::size_t> cell{0, 5, 5, 2, 99, 0, 5};  // 99 is out of range and ignored
  check_gradients({x}, [&](const std::vector<V>& v) { return scatter_mean(v[0], cell, {2, 3}); });
  const Tensor g = random_tensor({3, 2, 3}, 11);
  check_gradients({g}, [](const std::vector<V>& v) { return gather_cells(v[0], {1, 4, 4, 0}); });
}

TEST(Autograd, ScatterMeanValues) {
  const Tensor x({3, 2}, {1, 10, 3, 30, 5, 50});
  const V y = scatter_mean(constant(x), {1, 1, 3}, {4});
  EXPECT_EQ(y.value().data, (std::vector<double>{0, 2, 0, 5, 0, 20, 0, 50}));
}

TEST(Autograd, ScatterMeanPermutationBitIdentical) {
  const Tensor x = random_tensor({200, 4}, 12);
  Rng rng(13);
  std::vector<std::size_t> cell(200);
  for (auto& c : cell) c = std::uniform_int_distribution<std::size_t>(0, 9)(rng);
  std::vector<std::size_t> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor xp({200, 4});
  std::vector<std::size_t> cp(200);
  for (std::size_t i = 0; i < 200; ++i) {
    cp[i] = cell[perm[i]];
    for (int j = 0; j < 4; ++j) xp[i * 4 + j] = x[perm[i] * 4 + j];
  }
  EXPECT_EQ(scatter_mean(constant(x), cell, {10}).value().data, scatter_mean(constant(xp), cp, {10}).value().data);
}

TEST(Autograd, GroupOps) {
  const Tensor a = random_tensor({6, 4}, 14), b = random_tensor({2, 4}, 15);
  check_gradients({a, b}, [](const std::vector<V>& x) { return add_broadcast_groups(x[0], x[1], 3); });
  check_gradients({a}, [](const std::vector<V>& x) { return mean_groups(x[0], 3); });
}

TEST(Autograd, Conv3dDilatedAndPointwise) {
  const Tensor x = random_tensor({2, 4, 3, 5}, 16);
  const Tensor w3 = random_tensor({3, 2, 3, 3, 3}, 17);
  const Tensor w1 = random_tensor({3, 2, 1, 1, 1}, 18);
  const Tensor w2d = random_tensor({3, 2, 1, 3, 3}, 19);
  check_gradients({x, w3}, [](const std::vector<V>& v) { return conv3d(v[0], v[1]); });
  check_gradients({x, w3}, [](const std::vector<V>& v) { return conv3d(v[0], v[1], {2, 2, 2}); });
  check_gradients({x, w1}, [](const std::vector<V>& v) { return conv3d(v[0], v[1]); });
  check_gradients({x, w2d}, [](const std::vector<V>& v) { return conv3d(v[0], v[1], {1, 3, 1}); });
}

TEST(Autograd, Conv3dMatchesDirectSum) {
  const Tensor x = random_tensor({2, 3, 4, 5}, 20);
  const Tensor w = random_tensor({2, 2, 3, 3, 3}, 21);
  const std::size_t d = 2;
  const V y = conv3d(constant(x), constant(w), {d, d, d});
  const std::size_t D[3] = {3, 4, 5};
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t i = 0; i < D[0]; ++i)
      for (std::size_t j = 0; j < D[1]; ++j)
        for (std::size_t k = 0; k < D[2]; ++k) {
          double s = 0;
          for (std::size_t c = 0; c < 2; ++c)
            for (int a = 0; a < 3; ++a)
              for (int b = 0; b < 3; ++b)
                for (int e = 0; e < 3; ++e) {
                  const long ii = long(i) + (a - 1) * long(d), jj = long(j) + (b - 1) * long(d),
                             kk = long(k) + (e - 1) * long(d);
                  if (ii < 0 || jj < 0 || kk < 0 || ii >= long(D[0]) || jj >= long(D[1]) || kk >= long(D[2])) continue;
                  s += w[(((o * 2 + c) * 3 + a) * 3 + b) * 3 + e] * x[((c * D[0] + ii) * D[1] + jj) * D[2] + kk];
                }
          EXPECT_NEAR(y.data()[((o * D[0] + i) * D[1] + j) * D[2] + k], s, 1e-12);
        }
}

TEST(Autograd, PoolUpsampleMeanScalars) {
  const Tensor x = random_tensor({2, 1, 4, 6}, 22);
  check_gradients({x}, [](const std::vector<V>& v) { return avg_pool2(v[0]); });
  check_gradients({x}, [](const std::vector<V>& v) { return upsample2(v[0]); });
  const Tensor a = random_tensor({1}, 23), b = random_tensor({1}, 24);
  check_gradients({a, b}, [](const std::vector<V>& v) { return mean_scalars(std::vector<V>{v[0], v[1], v[0]}); });
}

TEST(Autograd, SharedSubgraphAccumulates) {
  const Tensor a = random_tensor({3, 3}, 25);
  check_gradients({a}, [](const std::vector<V>& x) {
    const V h = stanh(x[0]);
    return add(mul(h, h), leaky_relu(h));
  });
}

TEST(Autograd, ShapeErrors) {
  EXPECT_THROW(linear(constant(Tensor({2, 3})), constant(Tensor({4, 2}))), Error);
  EXPECT_THROW(add(constant(Tensor({2, 3})), constant(Tensor({3, 2}))), Error);
  EXPECT_THROW(backward(constant(Tensor({2}))), Error);
  EXPECT_THROW(conv3d(constant(Tensor({1, 2, 2, 2})), constant(Tensor({1, 1, 2, 2, 2}))), Error);
}

TEST(Autograd, ConstantsCarryNoGradient) {
  const V c = constant(random_tensor({2, 2}, 26));
  const V p = parameter(random_tensor({2, 2}, 27));
  backward(project(mul(c, p), 1));
  EXPECT_FALSE(c.requires_grad());
  for (double g : c.grad()) EXPECT_EQ(g, 0.0);
}
