#pragma once

// Single-file checkpoint: magic, a JSON manifest (configs, layer manifest,
// counters, tensor index), then every tensor as little-endian float64.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvnet/common.hpp"
#include "pvnet/denoiser.hpp"
#include "pvnet/nn/params.hpp"
#include "pvnet/training.hpp"

namespace pvnet::checkpoint {

using nlohmann::ordered_json;

inline constexpr char kMagic[8] = {'P', 'V', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kVersion = 1;

inline ordered_json to_json(const denoiser::DenoiserConfig& c) {
  return {{"grid_resolution", c.grid.resolution},
          {"grid_min", c.grid.bounds.min_corner},
          {"grid_max", c.grid.bounds.max_corner},
          {"timesteps", c.timesteps},
          {"voxel_channels", c.voxel_channels},
          {"init_hidden", c.init_hidden},
          {"time_embed_dim", c.time_embed_dim},
          {"mprb_kernels", c.mprb_kernels},
          {"mprb_dilations", c.mprb_dilations},
          {"unet_depth", c.unet_depth},
          {"unet_width", c.unet_width},
          {"cond_channels", c.cond_channels},
          {"match_dim", c.match_dim},
          {"point_channels", c.point_channels},
          {"weight_hidden", c.weight_hidden},
          {"head_hidden", c.head_hidden},
          {"neighbors", c.neighbors},
          {"ablate_world_coords", c.ablate_world_coords}};
}

inline denoiser::DenoiserConfig denoiser_from_json(const ordered_json& j) {
  denoiser::DenoiserConfig c;
  j.at("grid_resolution").get_to(c.grid.resolution);
  j.at("grid_min").get_to(c.grid.bounds.min_corner);
  j.at("grid_max").get_to(c.grid.bounds.max_corner);
  j.at("timesteps").get_to(c.timesteps);
  j.at("voxel_channels").get_to(c.voxel_channels);
  j.at("init_hidden").get_to(c.init_hidden);
  j.at("time_embed_dim").get_to(c.time_embed_dim);
  j.at("mprb_kernels").get_to(c.mprb_kernels);
  j.at("mprb_dilations").get_to(c.mprb_dilations);
  j.at("unet_depth").get_to(c.unet_depth);
  j.at("unet_width").get_to(c.unet_width);
  j.at("cond_channels").get_to(c.cond_channels);
  j.at("match_dim").get_to(c.match_dim);
  j.at("point_channels").get_to(c.point_channels);
  j.at("weight_hidden").get_to(c.weight_hidden);
  j.at("head_hidden").get_to(c.head_hidden);
  j.at("neighbors").get_to(c.neighbors);
  j.at("ablate_world_coords").get_to(c.ablate_world_coords);
  return c;
}

inline ordered_json to_json(const training::TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_halving_period_epochs", c.lr_halving_period_epochs},
          {"weight_decay", c.weight_decay},
          {"lambda", c.lambda},
          {"p_uncond", c.p_uncond},
          {"rate", c.rate},
          {"seed", c.seed},
          {"precision", training::to_string(c.precision)}};
}

inline training::TrainConfig train_from_json(const ordered_json& j) {
  training::TrainConfig c;
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("lr_halving_period_epochs").get_to(c.lr_halving_period_epochs);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("lambda").get_to(c.lambda);
  j.at("p_uncond").get_to(c.p_uncond);
  j.at("rate").get_to(c.rate);
  j.at("seed").get_to(c.seed);
  c.precision = training::parse_precision(j.at("precision").get<std::string>());
  return c;
}

inline ordered_json to_json(const nn::LayerInfo& l) {
  return {{"name", l.name},     {"kind", l.kind}, {"path", l.path},
          {"kernel", l.kernel}, {"dilation", l.dilation}, {"bias", l.bias},
          {"normalization", l.normalization}};
}

inline nn::LayerInfo layer_from_json(const ordered_json& j) {
  nn::LayerInfo l;
  j.at("name").get_to(l.name);
  j.at("kind").get_to(l.kind);
  j.at("path").get_to(l.path);
  j.at("kernel").get_to(l.kernel);
  j.at("dilation").get_to(l.dilation);
  j.at("bias").get_to(l.bias);
  j.at("normalization").get_to(l.normalization);
  return l;
}

/// Structural manifest of a parameter store as JSON.
inline ordered_json manifest_json(const nn::ParamStore& params) {
  ordered_json layers = ordered_json::array();
  for (const auto& l : params.layers) layers.push_back(to_json(l));
  return layers;
}

struct Checkpoint {
  denoiser::DenoiserConfig denoiser;
  training::TrainConfig train;
  training::TrainState state;
};

namespace detail {

struct Blob {
  std::string name;
  std::string role;
  nn::Shape shape;
  const std::vector<double>* data;
};

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_uint(const std::string& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline std::vector<double> history_rows(const std::vector<training::LossRecord>& h) {
  std::vector<double> out;
  out.reserve(h.size() * 7);
  for (const auto& r : h) {
    out.insert(out.end(), {static_cast<double>(r.step), static_cast<double>(r.epoch), r.lr, r.loss.mse, r.loss.std_reg,
                           r.loss.observed_std, r.loss.total});
  }
  return out;
}

}  // namespace detail

/// Serialized archive bytes (deterministic for a given checkpoint).
inline std::string encode(const Checkpoint& ck) {
  const auto& st = ck.state;
  std::vector<detail::Blob> blobs;
  for (const auto& [name, t] : st.params.tensors) blobs.push_back({name, "param", t.shape, &t.data});
  for (const auto& [name, t] : st.params.tensors) {
    auto it = st.optimizer.m.find(name);
    if (it != st.optimizer.m.end()) blobs.push_back({name, "adam_m", t.shape, &it->second});
  }
  for (const auto& [name, t] : st.params.tensors) {
    auto it = st.optimizer.v.find(name);
    if (it != st.optimizer.v.end()) blobs.push_back({name, "adam_v", t.shape, &it->second});
  }
  const std::vector<double> hist = detail::history_rows(st.history);
  blobs.push_back({"history", "history", {st.history.size(), 7}, &hist});

  ordered_json index = ordered_json::array();
  for (const auto& b : blobs) index.push_back({{"name", b.name}, {"role", b.role}, {"shape", b.shape}});
  ordered_json header{{"format", "pvnet-checkpoint"},
                      {"version", kVersion},
                      {"denoiser", to_json(ck.denoiser)},
                      {"train", to_json(ck.train)},
                      {"layers", manifest_json(st.params)},
                      {"counters", {{"epochs_done", st.epochs_done}, {"step", st.optimizer.step}}},
                      {"adam", {{"beta1", st.optimizer.beta1}, {"beta2", st.optimizer.beta2}, {"eps", st.optimizer.eps}}},
                      {"tensors", index}};
  const std::string text = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  detail::put_u32(out, kVersion);
  detail::put_u64(out, text.size());
  out += text;
  for (const auto& b : blobs) {
    if (b.data->size() != nn::numel(b.shape)) throw Error("checkpoint: tensor '" + b.name + "' has inconsistent size");
    for (double v : *b.data) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode(const std::string& bytes, const std::string& origin = "checkpoint") {
  const std::size_t head = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < head || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(origin + ": not a pvnet checkpoint");
  }
  const auto version = detail::get_uint(bytes, 8, 4);
  if (version != kVersion) throw Error(origin + ": unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get_uint(bytes, 12, 8);
  if (bytes.size() < head + len) throw Error(origin + ": truncated manifest");
  ordered_json header;
  try {
    header = ordered_json::parse(bytes.substr(head, len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(origin + ": malformed manifest (" + e.what() + ")");
  }
  Checkpoint ck;
  try {
    ck.denoiser = denoiser_from_json(header.at("denoiser"));
    ck.train = train_from_json(header.at("train"));
    for (const auto& l : header.at("layers")) ck.state.params.layers.push_back(layer_from_json(l));
    ck.state.epochs_done = header.at("counters").at("epochs_done").get<int>();
    ck.state.optimizer.step = header.at("counters").at("step").get<std::int64_t>();
    ck.state.optimizer.beta1 = header.at("adam").at("beta1").get<double>();
    ck.state.optimizer.beta2 = header.at("adam").at("beta2").get<double>();
    ck.state.optimizer.eps = header.at("adam").at("eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(origin + ": incomplete manifest (" + e.what() + ")");
  }

  std::size_t pos = head + len;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto role = entry.at("role").get<std::string>();
    const auto shape = entry.at("shape").get<nn::Shape>();
    const std::size_t n = nn::numel(shape);
    if (bytes.size() < pos + 8 * n) throw Error(origin + ": truncated tensor data for '" + name + "'");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(detail::get_uint(bytes, pos + 8 * i, 8));
    pos += 8 * n;
    if (role == "param") {
      ck.state.params.tensors[name] = nn::Tensor(shape, std::move(data));
    } else if (role == "adam_m") {
      ck.state.optimizer.m[name] = std::move(data);
    } else if (role == "adam_v") {
      ck.state.optimizer.v[name] = std::move(data);
    } else if (role == "history") {
      for (std::size_t r = 0; r < shape[0]; ++r) {
        const double* row = data.data() + 7 * r;
        ck.state.history.push_back({static_cast<std::int64_t>(row[0]), static_cast<int>(row[1]), row[2],
                                    training::LossBreakdown{row[6], row[3], row[4], row[5]}});
      }
    } else {
      throw Error(origin + ": unknown tensor role '" + role + "'");
    }
  }
  if (pos != bytes.size()) throw Error(origin + ": trailing bytes after tensor data");

  // The manifest must describe exactly the network the stored config builds.
  const nn::ParamStore reference = denoiser::init_params(ck.denoiser, 0);
  if (reference.layers != ck.state.params.layers) {
    throw Error(origin + ": layer manifest does not match the stored denoiser config");
  }
  for (const auto& [name, t] : reference.tensors) {
    auto it = ck.state.params.tensors.find(name);
    if (it == ck.state.params.tensors.end()) throw Error(origin + ": missing parameter '" + name + "'");
    if (it->second.shape != t.shape) {
      throw Error(origin + ": parameter '" + name + "' has shape " + nn::shape_str(it->second.shape) + ", expected " +
                  nn::shape_str(t.shape));
    }
  }
  if (ck.state.params.tensors.size() != reference.tensors.size()) {
    throw Error(origin + ": unexpected extra parameters");
  }
  return ck;
}

inline void save(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode(ck);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode(bytes, path.string());
}

/// Loads and refuses a checkpoint built for a different denoiser config.
inline Checkpoint load(const std::filesystem::path& path, const denoiser::DenoiserConfig& expected) {
  Checkpoint ck = load(path);
  if (!(ck.denoiser == expected)) {
    const ordered_json a = to_json(ck.denoiser);
    const ordered_json b = to_json(expected);
    std::string diff;
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (b.at(it.key()) != it.value()) {
        diff += " " + it.key() + " (checkpoint " + it.value().dump() + ", config " + b.at(it.key()).dump() + ")";
      }
    }
    throw Error(path.string() + ": checkpoint config does not match:" + diff);
  }
  return ck;
}

}  // namespace pvnet::checkpoint
