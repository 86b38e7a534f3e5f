#include "omnidrl/harness.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "omnidrl/line_projection.hpp"

namespace omnidrl {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void check_keys(const nlohmann::json& given, const nlohmann::json& ref, const std::string& path) {
  if (!given.is_object()) throw std::invalid_argument("config: " + (path.empty() ? "root" : path) + " must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!ref.contains(key)) throw std::invalid_argument("config: unknown key '" + full + "'");
    if (ref.at(key).is_object()) check_keys(value, ref.at(key), full);
  }
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config: " + p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

void check_network_matches(const nn::ArchSpec& arch, const EnvConfig& env) {
  if (arch.in_channels != 1 || arch.in_height != env.input_size || arch.in_width != env.input_size ||
      arch.num_actions != kNumActions || arch.num_classes != 2) {
    throw std::invalid_argument("network input/output shape does not match the environment (" +
                                std::to_string(env.input_size) + "x" + std::to_string(env.input_size) +
                                " grayscale crops, 9 actions, 2 classes)");
  }
}

}  // namespace

CameraIntrinsics RunConfig::default_camera() {
  CameraIntrinsics c;
  c.xi = 0.9;
  c.eta = 1.0;
  c.f1 = c.f2 = 200.0;
  c.width = c.height = 1024;
  c.u0 = c.v0 = 511.5;
  return c;
}

EnvConfig RunConfig::default_env() {
  EnvConfig e;
  e.input_size = 224;
  return e;
}

nlohmann::json to_json(const RunConfig& c) {
  return nlohmann::json{
      {"seed", c.seed},
      {"camera", c.camera},
      {"scene", c.scene},
      {"dataset", {{"num_scenes", c.dataset.num_scenes}, {"train_fraction", c.dataset.train_fraction}}},
      {"env", c.env},
      {"arch", c.arch},
      {"train", c.train},
      {"eval", {{"multi_task", c.eval_multi_task}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  check_keys(j, to_json(RunConfig{}), "");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("camera")) {
      nlohmann::json cam = to_json(RunConfig{}).at("camera");
      cam.merge_patch(j.at("camera"));
      c.camera = cam.get<CameraIntrinsics>();
    }
    if (j.contains("scene")) c.scene = j.at("scene").get<SceneConfig>();
    if (j.contains("dataset")) {
      c.dataset.num_scenes = j.at("dataset").value("num_scenes", c.dataset.num_scenes);
      c.dataset.train_fraction = j.at("dataset").value("train_fraction", c.dataset.train_fraction);
    }
    if (j.contains("env")) {
      nlohmann::json env = to_json(RunConfig{}).at("env");
      env.merge_patch(j.at("env"));
      c.env = env.get<EnvConfig>();
    }
    if (j.contains("arch")) {
      nlohmann::json arch = to_json(RunConfig{}).at("arch");
      arch.merge_patch(j.at("arch"));
      c.arch = arch.get<nn::ArchSpec>();
    }
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("eval")) c.eval_multi_task = j.at("eval").value("multi_task", c.eval_multi_task);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  if (c.dataset.num_scenes <= 0 || !(c.dataset.train_fraction > 0.0 && c.dataset.train_fraction < 1.0)) {
    throw std::invalid_argument("config: dataset.num_scenes must be positive and train_fraction in (0, 1)");
  }
  nn::Layout layout(c.arch);  // validates the architecture
  (void)layout;
  return c;
}

RunConfig load_run_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  const nlohmann::json defaults = to_json(RunConfig{});
  nlohmann::json merged = defaults;
  if (path) {
    const nlohmann::json file = read_json(*path);
    check_keys(file, defaults, "");
    merged.merge_patch(file);
  }
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must be key=value: " + ov);
    const std::string key = ov.substr(0, eq);
    const std::string text = ov.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      value = text;
    }
    nlohmann::json* node = &merged;
    const nlohmann::json* ref = &defaults;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!ref->is_object() || !ref->contains(part)) throw std::invalid_argument("config: unknown key '" + key + "'");
      ref = &ref->at(part);
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = value;
  }
  RunConfig c = run_config_from_json(merged);
  if (seed) c.seed = *seed;
  return c;
}

std::string config_hash(const RunConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& c,
                    const nlohmann::json& extra) {
  nlohmann::json m{{"command", command},
                   {"seed", c.seed},
                   {"config_hash", config_hash(c)},
                   {"config", to_json(c)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(dir / "manifest.json", m);
}

LoadedSplit load_split(const fs::path& dir) {
  LoadedSplit s;
  s.records = read_split(dir);
  s.images.reserve(s.records.size());
  for (const auto& r : s.records) s.images.push_back(OmniImage::load(dir / r.image, r.intrinsics));
  return s;
}

void cmd_generate(const RunConfig& c, const fs::path& out_dir) {
  c.camera.validate();
  const auto [n_train, n_test] = split_counts(c.dataset.num_scenes, c.dataset.train_fraction);
  fs::create_directories(out_dir);
  if (n_train > 0) write_split(out_dir / "train", generate_dataset(n_train, Split::kTrain, c.scene, c.camera, c.seed));
  if (n_test > 0) write_split(out_dir / "test", generate_dataset(n_test, Split::kTest, c.scene, c.camera, c.seed));
  save_calibration(out_dir / "calibration.json", c.camera);
  write_manifest(out_dir, "generate", c, {{"train_scenes", n_train}, {"test_scenes", n_test}});
}

TrainResult cmd_train(const RunConfig& c, const fs::path& dataset_dir, const fs::path& out_dir, bool resume,
                      bool verbose) {
  check_network_matches(c.arch, c.env);
  LoadedSplit train = load_split(dataset_dir / "train");
  if (train.records.empty()) throw std::invalid_argument("training split is empty");
  std::vector<std::optional<CylBox>> gts;
  std::vector<double> ground;
  for (const auto& r : train.records) {
    gts.push_back(r.gt);
    ground.push_back(r.scene.ground_z);
  }
  BoxTrainingEnv env(std::move(train.images), std::move(gts), std::move(ground), c.env);
  Trainer trainer(c.arch, c.train, env, c.seed);

  fs::create_directories(out_dir);
  const fs::path state_path = out_dir / "trainer_state.bin";
  const fs::path ckpt_path = out_dir / "model.ckpt";
  const fs::path log_path = out_dir / "train_log.csv";
  if (resume && fs::exists(state_path)) {
    trainer.load_state(state_path);
    if (verbose) std::cerr << "resumed at step " << trainer.step() << '\n';
  }

  auto save_all = [&] {
    save_checkpoint(ckpt_path, {c.arch, trainer.step(), trainer.online().params});
    trainer.save_state(state_path);
    write_log_csv(log_path, trainer.log());
  };
  const auto t0 = std::chrono::steady_clock::now();
  trainer.run(c.train.max_steps, [&](const LogRow& row) {
    if (c.train.checkpoint_every > 0 && row.step % c.train.checkpoint_every == 0) save_all();
    if (verbose && row.step % 1000 == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "step " << row.step << " episode " << row.episode << " drl " << row.drl_loss << " cls "
                << row.cls_loss << " avg_iou " << row.avg_iou << " T " << trainer.temperature() << " ("
                << secs << " s)\n";
    }
  });
  save_all();
  write_manifest(out_dir, "train", c, {{"steps", trainer.step()}, {"dataset", fs::absolute(dataset_dir).string()}});
  return {ckpt_path, log_path, trainer.step()};
}

EvalAgent eval_agent_from(const std::string& name) {
  if (name == "network") return EvalAgent::kNetwork;
  if (name == "oracle") return EvalAgent::kTeleportOracle;
  if (name == "planner") return EvalAgent::kPlannerOracle;
  throw std::invalid_argument("agent must be network, oracle or planner");
}

EvalResult evaluate(const RunConfig& c, const LoadedSplit& test, EvalAgent agent, const QNetwork* net) {
  if (agent == EvalAgent::kNetwork) {
    if (!net) throw std::invalid_argument("network agent needs a checkpoint");
    check_network_matches(net->layout.arch(), c.env);
  }
  EvalResult out;
  for (std::size_t i = 0; i < test.records.size(); ++i) {
    const DatasetRecord& r = test.records[i];
    if (!r.gt) continue;  // detection metrics are defined on pedestrian scenes
    BoxEnv env(test.images[i], r.gt, c.env);
    std::mt19937_64 rng(splitmix(c.seed ^ splitmix(i + 1)));
    EpisodeResult res;
    switch (agent) {
      case EvalAgent::kNetwork: res = infer_episode(*net, env, r.scene.ground_z, c.eval_multi_task, rng); break;
      case EvalAgent::kTeleportOracle: res = teleport_oracle_episode(env); break;
      case EvalAgent::kPlannerOracle: res = planner_oracle_episode(env, r.scene.ground_z, rng); break;
    }
    out.records.push_back(res.record);
  }
  if (out.records.empty()) throw std::invalid_argument("test split has no pedestrian scenes to evaluate");
  out.summary = rmse_metrics(out.records);
  return out;
}

nlohmann::json summary_json(const EvalSummary& s) {
  return {{"episodes", s.episodes},   {"avg_steps", s.avg_steps}, {"avg_iou", s.avg_iou},
          {"correct_pct", s.correct_pct}, {"rmse_rho", s.rmse_rho}, {"rmse_beta", s.rmse_beta},
          {"std_rho", s.std_rho},     {"std_beta", s.std_beta}};
}

EvalResult cmd_eval(const RunConfig& c, const std::optional<fs::path>& checkpoint, const fs::path& dataset_dir,
                    const fs::path& out_dir, EvalAgent agent) {
  std::optional<QNetwork> net;
  if (agent == EvalAgent::kNetwork) {
    if (!checkpoint) throw std::invalid_argument("eval needs --checkpoint for the network agent");
    net.emplace(network_from(load_checkpoint(*checkpoint)));
  }
  const LoadedSplit test = load_split(dataset_dir / "test");
  EvalResult res = evaluate(c, test, agent, net ? &*net : nullptr);
  fs::create_directories(out_dir);
  write_eval_csv(out_dir / "eval.csv", res.records);
  nlohmann::json summary = summary_json(res.summary);
  summary["multi_task"] = c.eval_multi_task;
  summary["agent"] = agent == EvalAgent::kNetwork ? "network" : agent == EvalAgent::kTeleportOracle ? "oracle" : "planner";
  write_json(out_dir / "summary.json", summary);
  write_manifest(out_dir, "eval", c);
  return res;
}

cv::Mat render_overlay(const cv::Mat& gray, const CameraIntrinsics& cam, const RenderRequest& req) {
  cv::Mat color;
  if (gray.channels() == 1) {
    cv::cvtColor(gray, color, cv::COLOR_GRAY2BGR);
  } else {
    color = gray.clone();
  }
  constexpr int kShift = 4;
  auto draw = [&](const CurveSegment& seg, const cv::Scalar& colour) {
    std::vector<cv::Point> pts;
    pts.reserve(seg.pixels.size());
    for (const auto& p : seg.pixels) {
      pts.emplace_back(cvRound(p.u * (1 << kShift)), cvRound(p.v * (1 << kShift)));
    }
    cv::polylines(color, pts, false, colour, 1, cv::LINE_AA, kShift);
  };
  if (req.box) {
    const auto x = corners(*req.box);
    for (const auto& e : kBoxEdges) draw(segment_curve(x[e[0]], x[e[1]], cam), cv::Scalar(0, 255, 0));
  }
  if (req.segment) draw(segment_curve(req.segment->first, req.segment->second, cam), cv::Scalar(0, 0, 255));
  return color;
}

void cmd_render(const RunConfig& c, const fs::path& image, const RenderRequest& req, const fs::path& out_png) {
  cv::Mat gray = cv::imread(image.string(), cv::IMREAD_UNCHANGED);
  if (gray.empty()) throw std::runtime_error("cannot read image " + image.string());
  if (gray.cols != c.camera.width || gray.rows != c.camera.height) {
    throw std::invalid_argument("image size does not match the configured camera");
  }
  const cv::Mat out = render_overlay(gray, c.camera, req);
  if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
  if (!cv::imwrite(out_png.string(), out)) throw std::runtime_error("cannot write " + out_png.string());
}

}  // namespace omnidrl
