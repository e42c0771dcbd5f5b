#pragma once

// Run configuration as flat dotted keys ("train.lr = 1e-4"). One root seed
// fans out to the named sub-seeds used by every component.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "pvnet/common.hpp"
#include "pvnet/denoiser.hpp"
#include "pvnet/diffusion.hpp"
#include "pvnet/geometry.hpp"
#include "pvnet/metrics.hpp"
#include "pvnet/scenegen.hpp"
#include "pvnet/training.hpp"

namespace pvnet::config {

struct ScheduleConfig {
  int T = 1000;
  double beta_0 = 3.5e-5;
  double beta_T = 7e-3;

  diffusion::NoiseSchedule build() const { return diffusion::linear_schedule(T, beta_0, beta_T); }
};

struct DataConfig {
  int scenes = 4;
  int condition_points = 1024;
};

struct RunConfig {
  std::uint64_t seed = 0;
  scenegen::SceneSpec scene;
  DataConfig data;
  ScheduleConfig schedule;
  denoiser::DenoiserConfig denoiser;
  training::TrainConfig train;
  diffusion::SamplerConfig sampler;
  metrics::RcdConfig rcd;
  double fscore_threshold = 0.2;

  RunConfig() {
    scene.density = 80.0;
    resolve();
  }

  /// Fans the root seed out to the component seeds and mirrors shared fields.
  void resolve() {
    scene.seed = seeds::derive(seed, "scene");
    train.seed = seeds::derive(seed, "train");
    sampler.seed = seeds::derive(seed, "sampler");
    rcd.seed = seeds::derive(seed, "rcd");
    denoiser.timesteps = schedule.T;
  }

  std::uint64_t init_seed() const { return seeds::derive(seed, "init"); }
  std::uint64_t pair_seed(int scene_index) const {
    return seeds::derive(seed, "pair", static_cast<std::uint64_t>(scene_index));
  }
  scenegen::SceneSpec scene_spec(int scene_index) const {
    scenegen::SceneSpec s = scene;
    s.seed = seeds::derive(scene.seed, "scene", static_cast<std::uint64_t>(scene_index));
    return s;
  }

  /// Every hard check, including those that span sections. Returns the soft
  /// warnings.
  std::vector<std::string> validate() const {
    scene.validate();
    if (data.scenes < 1) throw Error("data.scenes must be >= 1");
    if (data.condition_points < 1) throw Error("data.condition_points must be >= 1");
    (void)schedule.build();
    std::vector<std::string> warnings =
        denoiser.validate(static_cast<std::size_t>(data.condition_points) * static_cast<std::size_t>(train.rate));
    train.validate();
    if (sampler.steps < 1 || sampler.steps > schedule.T) {
      throw Error("sampler.steps (" + std::to_string(sampler.steps) + ") must lie in [1, schedule.T = " +
                  std::to_string(schedule.T) + "]");
    }
    rcd.validate();
    if (!(fscore_threshold > 0.0)) throw Error("eval.fscore_threshold must be positive");
    if (denoiser.timesteps != schedule.T) throw Error("denoiser timesteps must equal schedule.T");
    return warnings;
  }
};

// ---------------------------------------------------------------------------
// Key registry
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  if (std::isnan(v)) return "unset";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const std::string s = trim(text);
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw Error("config key '" + key + "': cannot parse '" + text + "' as " +
                (std::is_floating_point_v<T> ? "a real number" : "an integer"));
  }
  return v;
}

template <typename T, std::size_t N>
std::array<T, N> parse_list(const std::string& key, const std::string& text) {
  std::array<T, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i < N) out[i] = parse_number<T>(key, item);
    ++i;
  }
  if (i != N) {
    throw Error("config key '" + key + "': expected " + std::to_string(N) + " comma-separated values, got '" + text + "'");
  }
  return out;
}

template <typename T, std::size_t N>
std::string format_list(const std::array<T, N>& a) {
  std::string out;
  for (std::size_t i = 0; i < N; ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(a[i]);
    } else {
      out += std::to_string(a[i]);
    }
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error("config key '" + key + "': expected true or false, got '" + text + "'");
}

}  // namespace detail

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

template <typename T, typename Access>
Field number(std::string key, Access access) {
  return Field{key,
               [access](const RunConfig& c) {
                 const T& v = access(const_cast<RunConfig&>(c));
                 if constexpr (std::is_floating_point_v<T>) {
                   return format_double(v);
                 } else {
                   return std::to_string(v);
                 }
               },
               [access, key](RunConfig& c, const std::string& s) { access(c) = parse_number<T>(key, s); }};
}

template <typename T, std::size_t N, typename Access>
Field list(std::string key, Access access) {
  return Field{key, [access](const RunConfig& c) { return format_list(access(const_cast<RunConfig&>(c))); },
               [access, key](RunConfig& c, const std::string& s) { access(c) = parse_list<T, N>(key, s); }};
}

}  // namespace detail

inline const std::vector<Field>& fields() {
  using detail::list;
  using detail::number;
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(number<std::uint64_t>("seed", [](RunConfig& c) -> auto& { return c.seed; }));

    f.push_back(number<double>("scene.ground_half_extent", [](RunConfig& c) -> auto& { return c.scene.ground_half_extent; }));
    f.push_back(number<double>("scene.ground_z", [](RunConfig& c) -> auto& { return c.scene.ground_z; }));
    f.push_back(number<int>("scene.box_count", [](RunConfig& c) -> auto& { return c.scene.box_count; }));
    f.push_back(number<double>("scene.box_size_min", [](RunConfig& c) -> auto& { return c.scene.box_size_min; }));
    f.push_back(number<double>("scene.box_size_max", [](RunConfig& c) -> auto& { return c.scene.box_size_max; }));
    f.push_back(number<int>("scene.pole_count", [](RunConfig& c) -> auto& { return c.scene.pole_count; }));
    f.push_back(number<double>("scene.pole_radius_min", [](RunConfig& c) -> auto& { return c.scene.pole_radius_min; }));
    f.push_back(number<double>("scene.pole_radius_max", [](RunConfig& c) -> auto& { return c.scene.pole_radius_max; }));
    f.push_back(number<double>("scene.pole_height_min", [](RunConfig& c) -> auto& { return c.scene.pole_height_min; }));
    f.push_back(number<double>("scene.pole_height_max", [](RunConfig& c) -> auto& { return c.scene.pole_height_max; }));
    f.push_back(number<double>("scene.density", [](RunConfig& c) -> auto& { return c.scene.density; }));

    f.push_back(number<int>("data.scenes", [](RunConfig& c) -> auto& { return c.data.scenes; }));
    f.push_back(number<int>("data.condition_points", [](RunConfig& c) -> auto& { return c.data.condition_points; }));

    f.push_back(number<int>("schedule.T", [](RunConfig& c) -> auto& { return c.schedule.T; }));
    f.push_back(number<double>("schedule.beta_0", [](RunConfig& c) -> auto& { return c.schedule.beta_0; }));
    f.push_back(number<double>("schedule.beta_T", [](RunConfig& c) -> auto& { return c.schedule.beta_T; }));

    f.push_back(list<int, 3>("grid.resolution", [](RunConfig& c) -> auto& { return c.denoiser.grid.resolution; }));
    f.push_back(list<double, 3>("grid.min", [](RunConfig& c) -> auto& { return c.denoiser.grid.bounds.min_corner; }));
    f.push_back(list<double, 3>("grid.max", [](RunConfig& c) -> auto& { return c.denoiser.grid.bounds.max_corner; }));

    f.push_back(number<int>("denoiser.voxel_channels", [](RunConfig& c) -> auto& { return c.denoiser.voxel_channels; }));
    f.push_back(number<int>("denoiser.init_hidden", [](RunConfig& c) -> auto& { return c.denoiser.init_hidden; }));
    f.push_back(number<int>("denoiser.time_embed_dim", [](RunConfig& c) -> auto& { return c.denoiser.time_embed_dim; }));
    f.push_back(list<int, 3>("denoiser.mprb_kernels", [](RunConfig& c) -> auto& { return c.denoiser.mprb_kernels; }));
    f.push_back(list<int, 3>("denoiser.mprb_dilations", [](RunConfig& c) -> auto& { return c.denoiser.mprb_dilations; }));
    f.push_back(number<int>("denoiser.unet_depth", [](RunConfig& c) -> auto& { return c.denoiser.unet_depth; }));
    f.push_back(number<int>("denoiser.unet_width", [](RunConfig& c) -> auto& { return c.denoiser.unet_width; }));
    f.push_back(list<int, 4>("denoiser.cond_channels", [](RunConfig& c) -> auto& { return c.denoiser.cond_channels; }));
    f.push_back(number<int>("denoiser.match_dim", [](RunConfig& c) -> auto& { return c.denoiser.match_dim; }));
    f.push_back(number<int>("denoiser.point_channels", [](RunConfig& c) -> auto& { return c.denoiser.point_channels; }));
    f.push_back(number<int>("denoiser.weight_hidden", [](RunConfig& c) -> auto& { return c.denoiser.weight_hidden; }));
    f.push_back(number<int>("denoiser.head_hidden", [](RunConfig& c) -> auto& { return c.denoiser.head_hidden; }));
    f.push_back(number<int>("denoiser.neighbors", [](RunConfig& c) -> auto& { return c.denoiser.neighbors; }));
    f.push_back(Field{"denoiser.ablate_world_coords",
                      [](const RunConfig& c) { return std::string(c.denoiser.ablate_world_coords ? "true" : "false"); },
                      [](RunConfig& c, const std::string& s) {
                        c.denoiser.ablate_world_coords = detail::parse_bool("denoiser.ablate_world_coords", s);
                      }});

    f.push_back(number<int>("train.epochs", [](RunConfig& c) -> auto& { return c.train.epochs; }));
    f.push_back(number<int>("train.batch_size", [](RunConfig& c) -> auto& { return c.train.batch_size; }));
    f.push_back(number<double>("train.lr", [](RunConfig& c) -> auto& { return c.train.lr; }));
    f.push_back(number<int>("train.lr_halving_period_epochs",
                            [](RunConfig& c) -> auto& { return c.train.lr_halving_period_epochs; }));
    f.push_back(number<double>("train.weight_decay", [](RunConfig& c) -> auto& { return c.train.weight_decay; }));
    f.push_back(number<double>("train.lambda", [](RunConfig& c) -> auto& { return c.train.lambda; }));
    f.push_back(number<double>("train.p_uncond", [](RunConfig& c) -> auto& { return c.train.p_uncond; }));
    f.push_back(number<int>("train.rate", [](RunConfig& c) -> auto& { return c.train.rate; }));
    f.push_back(Field{"train.precision", [](const RunConfig& c) { return training::to_string(c.train.precision); },
                      [](RunConfig& c, const std::string& s) { c.train.precision = training::parse_precision(detail::trim(s)); }});

    f.push_back(number<int>("sampler.steps", [](RunConfig& c) -> auto& { return c.sampler.steps; }));
    // No default: "unset" until the operator picks a scale.
    f.push_back(Field{"sampler.guidance", [](const RunConfig& c) { return detail::format_double(c.sampler.guidance_scale); },
                      [](RunConfig& c, const std::string& s) {
                        c.sampler.guidance_scale = detail::trim(s) == "unset"
                                                       ? std::numeric_limits<double>::quiet_NaN()
                                                       : detail::parse_number<double>("sampler.guidance", s);
                      }});
    f.push_back(Field{"sampler.variant", [](const RunConfig& c) { return diffusion::to_string(c.sampler.variant); },
                      [](RunConfig& c, const std::string& s) { c.sampler.variant = diffusion::parse_variant(detail::trim(s)); }});

    f.push_back(number<int>("rcd.groups", [](RunConfig& c) -> auto& { return c.rcd.groups; }));
    f.push_back(number<int>("rcd.targets_per_group", [](RunConfig& c) -> auto& { return c.rcd.targets_per_group; }));
    f.push_back(number<int>("rcd.recon_groups", [](RunConfig& c) -> auto& { return c.rcd.recon_groups; }));
    f.push_back(number<int>("rcd.match_groups", [](RunConfig& c) -> auto& { return c.rcd.match_groups; }));
    f.push_back(number<double>("eval.fscore_threshold", [](RunConfig& c) -> auto& { return c.fscore_threshold; }));
    return f;
  }();
  return table;
}

inline void set(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      cfg.resolve();
      return;
    }
  }
  throw Error("unknown config key '" + key + "'");
}

inline std::string get(const RunConfig& cfg, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f.get(cfg);
  }
  throw Error("unknown config key '" + key + "'");
}

/// key -> value for every field, in registry order.
inline std::vector<std::pair<std::string, std::string>> entries(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

inline std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : entries(cfg)) out += k + " = " + v + "\n";
  return out;
}

/// Applies "key = value" lines; '#' starts a comment.
inline void apply_text(RunConfig& cfg, const std::string& text, const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    try {
      set(cfg, key, detail::trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      throw Error(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  RunConfig cfg;
  apply_text(cfg, ss.str(), path.string());
  return cfg;
}

/// The derived sub-seeds, for manifests.
inline std::map<std::string, std::uint64_t> sub_seeds(const RunConfig& cfg) {
  return {{"root", cfg.seed},           {"scene", cfg.scene.seed},     {"train", cfg.train.seed},
          {"sampler", cfg.sampler.seed}, {"rcd", cfg.rcd.seed},         {"init", cfg.init_seed()}};
}

}  // namespace pvnet::config
