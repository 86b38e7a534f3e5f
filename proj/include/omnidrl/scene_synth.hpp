#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "omnidrl/camera_model.hpp"
#include "omnidrl/cyl_box.hpp"
#include "json.hpp"

namespace omnidrl {

// 8-bit grayscale omnidirectional image with a mip pyramid for resampling.
class OmniImage {
 public:
  OmniImage() = default;
  OmniImage(cv::Mat gray, const CameraIntrinsics& cam);

  static OmniImage load(const std::filesystem::path& png, const CameraIntrinsics& cam);
  void save(const std::filesystem::path& png) const;

  const cv::Mat& pixels() const { return levels_.front(); }
  const cv::Mat& level(int l) const { return levels_.at(l); }
  int num_levels() const { return static_cast<int>(levels_.size()); }
  const CameraIntrinsics& camera() const { return cam_; }
  bool empty() const { return levels_.empty(); }

 private:
  std::vector<cv::Mat> levels_;
  CameraIntrinsics cam_;
};

struct SceneConfig {
  double ground_z = -0.8;  // floor height relative to the camera centre
  double ceiling_z = 1.8;
  double wall_radius = 7.0;
  double rho_min = 1.5, rho_max = 3.5;  // pedestrian distance range
  double ped_width = 0.5, ped_width_jitter = 0.05;
  double ped_height = 1.7, ped_height_jitter = 0.1;
  double ped_depth = 0.25;
  double negative_fraction = 0.15;
  double noise = 4.0;  // uniform per-pixel noise amplitude (intensity levels)
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct Pedestrian {
  CylBox front;        // the planar front face; the proxy extends `depth` behind it
  double depth = 0.25;
  double shirt = 60.0;  // base intensities
  double pants = 45.0;
  double skin = 175.0;
  double stripe_period = 0.12;
};

struct Scene {
  std::optional<Pedestrian> pedestrian;
  double ground_z = -0.8;
  double ceiling_z = 1.8;
  double wall_radius = 7.0;
  double floor_tile = 0.5;
  double wall_phase = 0.0;
  double wall_stripes = 24.0;
  double light = 1.0;
  double noise = 4.0;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const Scene& s);
void from_json(const nlohmann::json& j, Scene& s);

Scene make_scene(const SceneConfig& cfg, std::uint64_t seed, bool with_pedestrian);

// Ray-cast render: every pixel is lifted to its viewing ray and shaded by the
// nearest hit among floor, ceiling, cylindrical wall and pedestrian proxy.
// Deterministic in (scene, cam).
OmniImage render_scene(const Scene& scene, const CameraIntrinsics& cam);

// Binary mask (255 = pedestrian proxy visible) at the same resolution.
cv::Mat render_pedestrian_mask(const Scene& scene, const CameraIntrinsics& cam);

// Box enclosing the proxy in the image: its front face. Throws
// std::invalid_argument when the scene has no pedestrian.
CylBox gt_box(const Scene& scene);

enum class Split { kTrain, kTest };
std::string_view split_name(Split s);

struct DatasetRecord {
  std::string image;  // path relative to the split directory
  CameraIntrinsics intrinsics;
  std::optional<CylBox> gt;
  int label = 0;  // 1 <=> pedestrian present
  Scene scene;
};

void to_json(nlohmann::json& j, const DatasetRecord& r);
void from_json(const nlohmann::json& j, DatasetRecord& r);

// Train/test counts for a total n at the given train fraction (rounded).
std::pair<int, int> split_counts(int n, double train_fraction);

// Scene descriptions only (no rendering). Seeds are partitioned by split so
// train and test never share a scene.
std::vector<DatasetRecord> generate_dataset(int n, Split split, const SceneConfig& cfg,
                                            const CameraIntrinsics& cam, std::uint64_t seed);

// Renders every record into <dir>/<image> and writes <dir>/index.json.
void write_split(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_split(const std::filesystem::path& dir);

}  // namespace omnidrl
