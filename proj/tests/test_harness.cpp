#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "omnidrl/harness.hpp"

using namespace omnidrl;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 17;
  c.camera.f1 = c.camera.f2 = 40.0;
  c.camera.u0 = c.camera.v0 = 95.5;
  c.camera.width = c.camera.height = 192;
  c.dataset.num_scenes = 20;
  c.dataset.train_fraction = 0.7;
  c.env.input_size = 24;
  c.arch = nn::ArchSpec::desk();
  c.arch.in_height = c.arch.in_width = 24;
  c.arch.shared = {{4, 3, 2, 1}};
  c.arch.branch = {{4, 3, 2, 1}};
  c.arch.fc_hidden = 16;
  c.train.max_steps = 240;
  c.train.learn_start = 40;
  c.train.batch_size = 8;
  c.train.target_sync = 50;
  c.train.replay_capacity = 500;
  c.train.class_capacity = 500;
  c.train.optimizer = OptimizerKind::kAdam;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("omnidrl_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = std::string(std::istreambuf_iterator<char>(in), {});
  }
  return out;
}

}  // namespace

TEST_CASE("config round trip and strict keys") {
  const RunConfig c = tiny_config();
  const nlohmann::json j = to_json(c);
  CHECK(to_json(run_config_from_json(j)) == j);
  CHECK(config_hash(run_config_from_json(j)) == config_hash(c));

  const fs::path dir = scratch("config");
  fs::create_directories(dir);
  std::ofstream(dir / "c.json") << j.dump(2);
  const RunConfig loaded = load_run_config(dir / "c.json", {}, std::nullopt);
  CHECK(to_json(loaded) == j);

  const RunConfig over = load_run_config(dir / "c.json", {"train.gamma=0.5", "eval.multi_task=false", "env.frame=radial"}, 99);
  CHECK(over.train.gamma == 0.5);
  CHECK_FALSE(over.eval_multi_task);
  CHECK(over.env.frame == StateFrame::kRadial);
  CHECK(over.seed == 99);
  CHECK(config_hash(over) != config_hash(c));

  CHECK_THROWS_AS(load_run_config(dir / "c.json", {"train.gama=0.5"}, std::nullopt), std::invalid_argument);
  nlohmann::json bad = j;
  bad["train"]["warmup"] = 3;
  std::ofstream(dir / "bad.json") << bad.dump();
  CHECK_THROWS_AS(load_run_config(dir / "bad.json", {}, std::nullopt), std::invalid_argument);
  fs::remove_all(dir);
}

TEST_CASE("dataset generation is byte-identical and split 70/30") {
  const RunConfig c = tiny_config();
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  cmd_generate(c, a);
  cmd_generate(c, b);
  const auto ta = read_tree(a), tb = read_tree(b);
  CHECK(ta == tb);
  CHECK(read_split(a / "train").size() == 14);
  CHECK(read_split(a / "test").size() == 6);
  CHECK(load_calibration(a / "calibration.json") == c.camera);

  const auto manifest = nlohmann::json::parse(ta.at("manifest.json"));
  CHECK(manifest.at("config_hash") == config_hash(c));
  CHECK(manifest.at("config_hash") == config_hash(run_config_from_json(manifest.at("config"))));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("train, resume and evaluate end to end") {
  const RunConfig c = tiny_config();
  const fs::path data = scratch("e2e_data"), run = scratch("e2e_run"), ev = scratch("e2e_eval");
  cmd_generate(c, data);

  const TrainResult tr = cmd_train(c, data, run);
  CHECK(tr.steps == c.train.max_steps);
  const Checkpoint ck = load_checkpoint(tr.checkpoint);
  CHECK(ck.step == c.train.max_steps);
  CHECK(ck.arch == c.arch);
  {
    std::ifstream log(tr.log);
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) ++lines;
    CHECK(lines == c.train.max_steps + 1);
  }

  // Running again resumes from the saved state and leaves the results unchanged.
  const auto before = read_tree(run);
  cmd_train(c, data, run);
  CHECK(read_tree(run).at("train_log.csv") == before.at("train_log.csv"));
  CHECK(read_tree(run).at("model.ckpt") == before.at("model.ckpt"));

  const EvalResult res = cmd_eval(c, tr.checkpoint, data, ev);
  CHECK(res.records.size() == res.summary.episodes);
  for (const auto& r : res.records) {
    CHECK(r.steps <= c.env.max_steps);
    CHECK(r.final_iou >= 0.0);
    CHECK(r.final_iou <= 1.0);
  }
  // The summary can be recomputed from the CSV rows.
  const auto rows = read_eval_csv(ev / "eval.csv");
  const EvalSummary s = rmse_metrics(rows);
  const auto sj = nlohmann::json::parse(read_tree(ev).at("summary.json"));
  CHECK(sj.at("avg_steps").get<double>() == doctest::Approx(s.avg_steps));
  CHECK(sj.at("correct_pct").get<double>() == doctest::Approx(s.correct_pct));
  CHECK(sj.at("rmse_rho").get<double>() == doctest::Approx(s.rmse_rho).epsilon(1e-6));

  // Single-task mode runs on the same checkpoint.
  RunConfig single = c;
  single.eval_multi_task = false;
  const EvalResult rs = cmd_eval(single, tr.checkpoint, data, ev);
  CHECK(rs.summary.episodes == res.summary.episodes);

  // A network whose input does not match the crops is rejected.
  RunConfig wrong = c;
  wrong.env.input_size = 32;
  CHECK_THROWS_AS(cmd_eval(wrong, tr.checkpoint, data, ev), std::invalid_argument);
  CHECK_THROWS_AS(cmd_eval(c, std::nullopt, data, ev), std::invalid_argument);

  fs::remove_all(data);
  fs::remove_all(run);
  fs::remove_all(ev);
}

TEST_CASE("interrupted training on boxes resumes exactly") {
  const RunConfig c = tiny_config();
  const fs::path data = scratch("resume_data");
  cmd_generate(c, data);
  auto make_env = [&] {
    LoadedSplit s = load_split(data / "train");
    std::vector<std::optional<CylBox>> gts;
    std::vector<double> ground;
    for (const auto& r : s.records) {
      gts.push_back(r.gt);
      ground.push_back(r.scene.ground_z);
    }
    return BoxTrainingEnv(std::move(s.images), std::move(gts), std::move(ground), c.env);
  };
  BoxTrainingEnv e1 = make_env(), e2 = make_env(), e3 = make_env();
  Trainer whole(c.arch, c.train, e1, c.seed);
  whole.run(c.train.max_steps);

  Trainer first(c.arch, c.train, e2, c.seed);
  first.run(113);
  first.save_state(data / "state.bin");
  Trainer second(c.arch, c.train, e3, c.seed + 1);
  second.load_state(data / "state.bin");
  second.run(c.train.max_steps);
  CHECK(second.log() == whole.log());
  CHECK(second.online().params == whole.online().params);
  fs::remove_all(data);
}

TEST_CASE("oracle agents through the evaluation pipeline") {
  const RunConfig c = tiny_config();
  const fs::path data = scratch("oracle_data"), ev = scratch("oracle_eval");
  cmd_generate(c, data);
  const EvalResult r = cmd_eval(c, std::nullopt, data, ev, EvalAgent::kTeleportOracle);
  CHECK(r.summary.correct_pct == 100.0);
  CHECK(r.summary.avg_iou >= 0.99);
  CHECK(r.summary.avg_steps == 1.0);
  CHECK(r.summary.rmse_rho < 1e-12);
  fs::remove_all(data);
  fs::remove_all(ev);
}

TEST_CASE("evaluation on a split without pedestrians is an error") {
  RunConfig c = tiny_config();
  c.scene.negative_fraction = 1.0;
  const fs::path data = scratch("neg_data"), ev = scratch("neg_eval");
  cmd_generate(c, data);
  CHECK_THROWS_AS(cmd_eval(c, std::nullopt, data, ev, EvalAgent::kTeleportOracle), std::invalid_argument);
  fs::remove_all(data);
  fs::remove_all(ev);
}

TEST_CASE("pinhole overlays draw straight segments") {
  CameraIntrinsics cam;
  cam.xi = 0.0;
  cam.f1 = cam.f2 = 100.0;
  cam.u0 = cam.v0 = 127.5;
  cam.width = cam.height = 256;
  const Point3 x1{-0.8, -0.5, 1.0}, x2{0.9, 0.6, 1.2};
  const cv::Mat overlay = render_overlay(cv::Mat::zeros(256, 256, CV_8UC1), cam, {std::nullopt, std::pair{x1, x2}});
  const PixelPoint a = project_pixel(x1, cam), b = project_pixel(x2, cam);
  const double len = std::hypot(b.u - a.u, b.v - a.v);
  int drawn = 0;
  double worst = 0.0;
  for (int v = 0; v < 256; ++v)
    for (int u = 0; u < 256; ++u) {
      if (overlay.at<cv::Vec3b>(v, u)[2] < 64) continue;
      ++drawn;
      const double d = std::abs((b.u - a.u) * (a.v - v) - (a.u - u) * (b.v - a.v)) / len;
      worst = std::max(worst, d);
    }
  CHECK(drawn > len * 0.8);
  CHECK(worst < 1.5);

  RenderRequest bad;
  bad.segment = std::pair{Point3{0, 0, -1}, Point3{1, 0, 1}};
  CHECK_THROWS_AS(render_overlay(cv::Mat::zeros(256, 256, CV_8UC1), cam, bad), GeometryError);
}

TEST_CASE("default configuration matches the published setup") {
  const RunConfig c;
  CHECK(c.env.tau == 0.6);
  CHECK(c.env.alpha_trig == 10.0);
  CHECK(c.env.max_steps == 100);
  CHECK(c.train.learning_rate == 1e-4);
  CHECK(c.train.target_sync == 15000);
  CHECK(c.dataset.train_fraction == 0.7);
  CHECK(split_counts(1000, c.dataset.train_fraction) == std::pair{700, 300});

  const nn::ArchSpec p = nn::ArchSpec::paper();
  CHECK(p.in_height == 224);
  CHECK(p.in_width == 224);
  CHECK(p.shared.size() + p.branch.size() == 5);
  CHECK(p.shared.size() == 3);
  CHECK(p.num_actions == 9);
  CHECK(p.num_classes == 2);
  const nn::Layout layout(p);
  CHECK(layout.q_branch().convs.size() == 2);
  CHECK(layout.q_branch().dense.size() == 2);
  CHECK(layout.cls_branch().dense.size() == 2);
  CHECK(layout.q_branch().dense.back().out == 9);
  CHECK(layout.cls_branch().dense.back().out == 2);
}
