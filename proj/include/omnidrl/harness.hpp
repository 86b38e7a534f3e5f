#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "omnidrl/box_env.hpp"
#include "omnidrl/camera_model.hpp"
#include "omnidrl/learner.hpp"
#include "omnidrl/nn.hpp"
#include "omnidrl/region_metrics.hpp"
#include "omnidrl/scene_synth.hpp"
#include "json.hpp"

namespace omnidrl {

struct DatasetConfig {
  int num_scenes = 1000;
  double train_fraction = 0.7;
};

struct RunConfig {
  std::uint64_t seed = 1;
  CameraIntrinsics camera = default_camera();
  SceneConfig scene;
  DatasetConfig dataset;
  EnvConfig env = default_env();
  nn::ArchSpec arch = nn::ArchSpec::paper();
  TrainConfig train;
  bool eval_multi_task = true;

  // xi = 0.9, f*eta = 200, 1024 x 1024.
  static CameraIntrinsics default_camera();
  static EnvConfig default_env();  // 224 x 224 crops to match the default network
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

// Reads a config file, layers it over the defaults and applies key=value
// overrides (dotted paths, values parsed as JSON, falling back to strings).
// Unknown keys are rejected.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed);

// 64-bit FNV-1a over the canonical JSON dump.
std::string config_hash(const RunConfig& c);
void write_manifest(const std::filesystem::path& dir, const std::string& command, const RunConfig& c,
                    const nlohmann::json& extra = nlohmann::json::object());

struct LoadedSplit {
  std::vector<DatasetRecord> records;
  std::vector<OmniImage> images;
};
LoadedSplit load_split(const std::filesystem::path& dir);

void cmd_generate(const RunConfig& c, const std::filesystem::path& out_dir);

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::int64_t steps = 0;
};
// Resumes from out_dir/trainer_state.bin when present and resume is set.
TrainResult cmd_train(const RunConfig& c, const std::filesystem::path& dataset_dir,
                      const std::filesystem::path& out_dir, bool resume = true, bool verbose = false);

enum class EvalAgent { kNetwork, kTeleportOracle, kPlannerOracle };
EvalAgent eval_agent_from(const std::string& name);

struct EvalResult {
  std::vector<EvalRecord> records;
  EvalSummary summary;
};
EvalResult evaluate(const RunConfig& c, const LoadedSplit& test, EvalAgent agent,
                    const QNetwork* net);
EvalResult cmd_eval(const RunConfig& c, const std::optional<std::filesystem::path>& checkpoint,
                    const std::filesystem::path& dataset_dir, const std::filesystem::path& out_dir,
                    EvalAgent agent = EvalAgent::kNetwork);
nlohmann::json summary_json(const EvalSummary& s);

struct RenderRequest {
  std::optional<CylBox> box;
  std::optional<std::pair<Point3, Point3>> segment;
};
// Overlays the projected arcs on the image. Throws GeometryError when the
// requested geometry has no finite image.
cv::Mat render_overlay(const cv::Mat& gray, const CameraIntrinsics& cam, const RenderRequest& req);
void cmd_render(const RunConfig& c, const std::filesystem::path& image, const RenderRequest& req,
                const std::filesystem::path& out_png);

}  // namespace omnidrl
