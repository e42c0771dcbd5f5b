// pvnet: synth | train | upsample | eval | inspect-schedule

#include <CLI11.hpp>
#include <Eigen/Core>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pvnet/checkpoint.hpp"
#include "pvnet/config.hpp"
#include "pvnet/io.hpp"
#include "pvnet/metrics.hpp"
#include "pvnet/scenegen.hpp"
#include "pvnet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace pvnet;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool print_config = false;
};

config::RunConfig resolve_config(const Common& c) {
  config::RunConfig cfg = c.config_path.empty() ? config::RunConfig{} : config::load(c.config_path);
  if (c.seed) config::set(cfg, "seed", std::to_string(*c.seed));
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    config::set(cfg, config::detail::trim(kv.substr(0, eq)), config::detail::trim(kv.substr(eq + 1)));
  }
  for (const auto& w : cfg.validate()) std::cerr << "warning: " << w << "\n";
  return cfg;
}

ordered_json config_json(const config::RunConfig& cfg) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : config::entries(cfg)) j[k] = v;
  return j;
}

void write_json(const ordered_json& j, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

/// Run manifest: command, config snapshot, derived seeds, inputs, outputs.
void write_manifest(const fs::path& path, const std::string& command, const config::RunConfig& cfg,
                    const ordered_json& inputs, const ordered_json& outputs, ordered_json extra = ordered_json::object()) {
  ordered_json j;
  j["command"] = command;
  j["versions"] = {{"pvnet", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__}};
  j["config"] = config_json(cfg);
  j["seeds"] = config::sub_seeds(cfg);
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_json(j, path);
}

fs::path ensure_dir(const std::string& out) {
  if (out.empty()) throw Error("--out is required");
  fs::create_directories(out);
  return fs::path(out);
}

std::string scene_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%03d", i);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_synth(const config::RunConfig& cfg, const std::string& out) {
  const fs::path dir = ensure_dir(out);
  ordered_json scenes = ordered_json::array();
  for (int i = 0; i < cfg.data.scenes; ++i) {
    const scenegen::SceneSpec spec = cfg.scene_spec(i);
    const PointCloud dense = scenegen::generate_scene(spec);
    const scenegen::TrainingPair pair = scenegen::make_training_pair(
        dense, static_cast<std::size_t>(cfg.data.condition_points), cfg.train.rate, cfg.pair_seed(i));
    const std::string base = scene_name(i);
    io::save_ply(dense, dir / (base + "_dense.ply"));
    io::save_ply(pair.condition, dir / (base + "_condition.ply"));
    io::save_ply(pair.input, dir / (base + "_input.ply"));
    scenes.push_back({{"name", base},
                      {"scene_seed", spec.seed},
                      {"pair_seed", cfg.pair_seed(i)},
                      {"dense", base + "_dense.ply"},
                      {"condition", base + "_condition.ply"},
                      {"input", base + "_input.ply"},
                      {"dense_points", dense.size()},
                      {"condition_points", pair.condition.size()},
                      {"input_points", pair.input.size()},
                      {"rate", pair.rate}});
    std::cout << base << ": dense " << dense.size() << ", condition " << pair.condition.size() << ", input "
              << pair.input.size() << "\n";
  }
  write_manifest(dir / "manifest.json", "synth", cfg, ordered_json::array(), scenes);
  return 0;
}

std::vector<scenegen::TrainingPair> load_dataset(const fs::path& dir, ordered_json& inputs) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw Error("dataset manifest not found: " + (dir / "manifest.json").string());
  const ordered_json m = ordered_json::parse(is);
  std::vector<scenegen::TrainingPair> pairs;
  for (const auto& s : m.at("outputs")) {
    scenegen::TrainingPair p;
    p.condition = io::load_cloud(dir / s.at("condition").get<std::string>());
    p.input = io::load_cloud(dir / s.at("input").get<std::string>());
    p.rate = s.at("rate").get<int>();
    p.scene_seed = s.at("pair_seed").get<std::uint64_t>();
    p.validate();
    inputs.push_back((dir / s.at("input").get<std::string>()).string());
    inputs.push_back((dir / s.at("condition").get<std::string>()).string());
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw Error("dataset " + dir.string() + " has no scenes");
  return pairs;
}

int cmd_train(const config::RunConfig& cfg, const std::string& dataset, const std::string& out, bool resume) {
  if (dataset.empty()) throw Error("--dataset is required");
  const fs::path dir = ensure_dir(out);
  ordered_json inputs = ordered_json::array();
  const auto pairs = load_dataset(dataset, inputs);
  for (const auto& p : pairs) {
    if (p.rate != cfg.train.rate) {
      throw Error("train.rate = " + std::to_string(cfg.train.rate) + " but the dataset was built at rate " +
                  std::to_string(p.rate));
    }
  }
  const diffusion::NoiseSchedule sched = cfg.schedule.build();
  training::TrainState state;
  const fs::path latest = dir / "latest.ckpt";
  if (resume && fs::exists(latest)) {
    checkpoint::Checkpoint ck = checkpoint::load(latest, cfg.denoiser);
    training::TrainConfig a = ck.train, b = cfg.train;
    a.epochs = b.epochs = 0;
    if (!(a == b)) throw Error(latest.string() + ": training settings differ from the checkpoint; refusing to resume");
    state = std::move(ck.state);
    std::cout << "resuming after epoch " << state.epochs_done << " (step " << state.optimizer.step << ")\n";
  } else {
    state.params = denoiser::init_params(cfg.denoiser, cfg.init_seed());
  }
  std::cout << "parameters: " << state.params.count() << ", scenes: " << pairs.size()
            << ", steps/epoch: " << training::steps_per_epoch(pairs.size(), cfg.train.batch_size) << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  ordered_json outputs = ordered_json::array();
  training::train(state, pairs, sched, cfg.denoiser, cfg.train, [&](const training::TrainState& st) {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", st.epochs_done);
    const checkpoint::Checkpoint ck{cfg.denoiser, cfg.train, st};
    checkpoint::save(ck, dir / name);
    checkpoint::save(ck, latest);
    training::write_loss_csv(st.history, dir / "loss.csv");
    const auto& last = st.history.back();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "epoch " << st.epochs_done << "/" << cfg.train.epochs << "  lr " << last.lr << "  loss "
              << last.loss.total << "  mse " << last.loss.mse << "  std " << last.loss.observed_std << "  ("
              << secs << " s)\n";
    outputs.push_back(name);
  });
  outputs.push_back("latest.ckpt");
  outputs.push_back("loss.csv");
  write_manifest(dir / "manifest.json", "train", cfg, inputs, outputs,
                 {{"dataset", dataset}, {"parameters", state.params.count()}, {"steps", state.optimizer.step}});
  return 0;
}

int cmd_upsample(config::RunConfig cfg, const std::string& ckpt, const std::string& input, std::optional<int> rate,
                 std::optional<double> guidance, std::optional<int> steps, const std::string& out) {
  if (ckpt.empty()) throw Error("--checkpoint is required");
  if (input.empty()) throw Error("--input is required");
  if (out.empty()) throw Error("--out is required");
  if (guidance) config::set(cfg, "sampler.guidance", config::detail::format_double(*guidance));
  if (steps) config::set(cfg, "sampler.steps", std::to_string(*steps));
  const int R = rate.value_or(cfg.train.rate);
  if (R < 1) throw Error("--rate must be >= 1");
  const diffusion::NoiseSchedule sched = cfg.schedule.build();
  cfg.sampler.validate(sched);
  const checkpoint::Checkpoint ck = checkpoint::load(ckpt, cfg.denoiser);
  const PointCloud condition = io::load_cloud(input);
  const denoiser::Predictor<float> predictor{&ck.state.params, &ck.denoiser};
  const auto t0 = std::chrono::steady_clock::now();
  const PointCloud result = diffusion::sample(predictor, condition, R, cfg.sampler, sched);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  io::save_cloud(result, out_path);
  std::cout << "wrote " << result.size() << " points (" << condition.size() << " x " << R << ") to " << out_path.string()
            << " in " << secs << " s\n";
  write_manifest(out_path.string() + ".manifest.json", "upsample", cfg, ordered_json::array({ckpt, input}),
                 ordered_json::array({out_path.string()}),
                 {{"rate", R},
                  {"guidance", cfg.sampler.guidance_scale},
                  {"steps", cfg.sampler.steps},
                  {"variant", diffusion::to_string(cfg.sampler.variant)},
                  {"sampler_seed", cfg.sampler.seed}});
  return 0;
}

int cmd_eval(config::RunConfig cfg, const std::string& pred, const std::string& ref, std::optional<double> threshold,
             const std::string& out) {
  if (pred.empty() || ref.empty()) throw Error("--pred and --ref are required");
  if (threshold) config::set(cfg, "eval.fscore_threshold", config::detail::format_double(*threshold));
  cfg.validate();
  const PointCloud P = io::load_cloud(pred);
  const PointCloud Q = io::load_cloud(ref);
  const metrics::MetricReport report = metrics::evaluate(P, Q, cfg.rcd, cfg.fscore_threshold);
  ordered_json j = metrics::to_json(report);
  j["inputs"] = {{"predicted", pred}, {"reference", ref}};
  std::cout << j.dump(2) << "\n";
  if (!out.empty()) {
    fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    write_json(j, out_path);
    write_manifest(out_path.string() + ".manifest.json", "eval", cfg, ordered_json::array({pred, ref}),
                   ordered_json::array({out_path.string()}));
  }
  return 0;
}

int cmd_inspect_schedule(const config::RunConfig& cfg, const std::string& out) {
  const diffusion::NoiseSchedule s = cfg.schedule.build();
  std::ostringstream csv;
  csv.precision(17);
  csv << "t,beta,alpha,alpha_bar,sigma\n";
  for (int t = 0; t < s.T; ++t) {
    csv << t << ',' << s.beta[t] << ',' << s.alpha[t] << ',' << s.alpha_bar[t] << ',' << s.sigma(t) << '\n';
  }
  if (out.empty()) {
    std::cout << csv.str();
    return 0;
  }
  fs::path out_path(out);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream os(out_path);
  if (!os) throw Error("cannot write " + out_path.string());
  os << csv.str();
  write_manifest(out_path.string() + ".manifest.json", "inspect-schedule", cfg, ordered_json::array(),
                 ordered_json::array({out_path.string()}));
  std::cout << "wrote " << s.T << " rows to " << out_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  training::tune_allocator();
  CLI::App app{"pvnet: synthetic scenes, training, diffusion upsampling, evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(0, 1);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Root seed (overrides the config)");
    sub->add_option("--set", common.overrides, "Override one key, e.g. --set train.lr=5e-5");
    sub->add_flag("--print-config", common.print_config, "Print the resolved config and exit");
  };
  add_common(&app);

  std::string out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset directory");
  add_common(synth);
  synth->add_option("--out", out, "Output directory");

  std::string dataset;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train the denoiser on a dataset directory");
  add_common(train);
  train->add_option("--dataset", dataset, "Dataset directory written by synth")->check(CLI::ExistingDirectory);
  train->add_option("--out", out, "Output directory for checkpoints and loss.csv");
  train->add_flag("--resume", resume, "Continue from <out>/latest.ckpt when present");

  std::string ckpt, input;
  std::optional<int> rate, steps;
  std::optional<double> guidance, threshold;
  auto* upsample = app.add_subcommand("upsample", "Upsample a sparse cloud with a trained checkpoint");
  add_common(upsample);
  upsample->add_option("--checkpoint", ckpt, "Checkpoint file")->check(CLI::ExistingFile);
  upsample->add_option("--input", input, "Sparse input cloud (.ply, .bin, .xyz)")->check(CLI::ExistingFile);
  upsample->add_option("--rate", rate, "Upsampling rate R");
  upsample->add_option("--guidance", guidance, "Guidance scale s");
  upsample->add_option("--steps", steps, "Sampler steps");
  upsample->add_option("--out", out, "Output cloud (.ply or .xyz)");

  std::string pred, ref;
  auto* eval = app.add_subcommand("eval", "Compare a predicted cloud against a reference");
  add_common(eval);
  eval->add_option("--pred", pred, "Predicted cloud")->check(CLI::ExistingFile);
  eval->add_option("--ref", ref, "Reference cloud")->check(CLI::ExistingFile);
  eval->add_option("--threshold", threshold, "F-score threshold in meters");
  eval->add_option("--out", out, "Report JSON path");

  auto* inspect = app.add_subcommand("inspect-schedule", "Write the noise schedule as CSV");
  add_common(inspect);
  inspect->add_option("--out", out, "CSV path (stdout when omitted)");

  CLI11_PARSE(app, argc, argv);

  try {
    const config::RunConfig cfg = resolve_config(common);
    if (common.print_config) {
      std::cout << config::to_text(cfg);
      return 0;
    }
    if (synth->parsed()) return cmd_synth(cfg, out);
    if (train->parsed()) return cmd_train(cfg, dataset, out, resume);
    if (upsample->parsed()) return cmd_upsample(cfg, ckpt, input, rate, guidance, steps, out);
    if (eval->parsed()) return cmd_eval(cfg, pred, ref, threshold, out);
    if (inspect->parsed()) return cmd_inspect_schedule(cfg, out);
    std::cout << app.help();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
