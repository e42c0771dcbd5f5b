#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pvnet/common.hpp"
#include "pvnet/nn/autograd.hpp"
#include "pvnet/nn/tensor.hpp"

namespace pvnet::nn {

/// One entry of the structural manifest.
struct LayerInfo {
  std::string name;       // e.g. "completion.mprb1.path0"
  std::string kind;       // "linear", "conv3d", "conv2d"
  std::string path;       // functional block: "init", "completion", "unet", "condition", "match", "interaction"
  std::vector<int> kernel;
  std::vector<int> dilation;
  bool bias = false;
  bool normalization = false;

  friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

/// Named parameter tensors plus the layer manifest that produced them.
struct ParamStore {
  std::map<std::string, Tensor> tensors;
  std::vector<LayerInfo> layers;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("parameter '" + name + "' not found");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("parameter '" + name + "' not found");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors.count(name) > 0; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, t] : tensors) n += t.size();
    return n;
  }
};

/// Gradients keyed like ParamStore::tensors.
using GradStore = std::map<std::string, std::vector<double>>;

/// Wraps stored parameters as graph leaves of scalar type T for one forward
/// pass. In training mode every leaf requires a gradient; the same leaf is
/// returned for repeated lookups so gradients accumulate across a batch.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(const ParamStore& store, bool training) : store_(&store), training_(training) {}
  ParamBinder(ParamStore&&, bool) = delete;

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    BasicTensor<T> t = store_->at(name).template cast<T>();
    Var<T> v = training_ ? parameter(std::move(t)) : constant(std::move(t));
    bound_.emplace(name, v);
    return v;
  }

  bool training() const { return training_; }

  GradStore grads() const {
    GradStore out;
    for (const auto& [name, t] : store_->tensors) {
      auto it = bound_.find(name);
      if (it == bound_.end()) {
        out[name] = std::vector<double>(t.size(), 0.0);
      } else {
        const std::vector<T> g = it->second.grad();
        out[name] = std::vector<double>(g.begin(), g.end());
      }
    }
    return out;
  }

 private:
  const ParamStore* store_;
  bool training_;
  std::map<std::string, Var<T>> bound_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) fill, seeded per tensor name.
inline Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name) {
  Tensor t(std::move(shape));
  Rng rng(seeds::derive(seed, name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.data) v = u(rng);
  return t;
}

/// Declares layers into a ParamStore with deterministic initialization.
class ParamBuilder {
 public:
  explicit ParamBuilder(std::uint64_t seed) : seed_(seed) {}

  void linear(const std::string& name, const std::string& path, std::size_t in, std::size_t out, bool bias) {
    store_.tensors[name + ".weight"] = init_uniform({out, in}, in, seed_, name + ".weight");
    if (bias) store_.tensors[name + ".bias"] = init_uniform({out}, in, seed_, name + ".bias");
    store_.layers.push_back({name, "linear", path, {1}, {1}, bias, false});
  }

  void conv3d(const std::string& name, const std::string& path, std::size_t in, std::size_t out, int kernel,
              int dilation) {
    const auto k = static_cast<std::size_t>(kernel);
    store_.tensors[name + ".weight"] = init_uniform({out, in, k, k, k}, in * k * k * k, seed_, name + ".weight");
    store_.layers.push_back({name, "conv3d", path, {kernel, kernel, kernel}, {dilation, dilation, dilation}, false, false});
  }

  /// Planar convolution stored as a [Cout, Cin, 1, k, k] kernel.
  void conv2d(const std::string& name, const std::string& path, std::size_t in, std::size_t out, int kernel) {
    const auto k = static_cast<std::size_t>(kernel);
    store_.tensors[name + ".weight"] = init_uniform({out, in, 1, k, k}, in * k * k, seed_, name + ".weight");
    store_.layers.push_back({name, "conv2d", path, {kernel, kernel}, {1, 1}, false, false});
  }

  ParamStore build() && { return std::move(store_); }

 private:
  std::uint64_t seed_;
  ParamStore store_;
};

}  // namespace pvnet::nn
