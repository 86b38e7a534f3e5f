#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <opencv2/core.hpp>

#include "omnidrl/cyl_box.hpp"
#include "omnidrl/region_metrics.hpp"
#include "omnidrl/scene_synth.hpp"
#include "json.hpp"

namespace omnidrl {

// How the crop grid is oriented. kImage uses the axis-aligned pixel envelope
// of the distorted box. kRadial rotates the sampling grid about the principal
// point so rows run along the box's radial direction (head side first) and
// columns along +beta; the image itself is not undistorted.
enum class StateFrame { kImage, kRadial };

struct EnvConfig {
  BoxBounds bounds;
  ActionStepSizes steps;
  double tau = 0.6;          // trigger IoU threshold
  double alpha_trig = 10.0;  // trigger reward magnitude
  int max_steps = 100;
  int input_size = 64;       // square crop resolution
  StateFrame frame = StateFrame::kImage;
  bool draw_outline = false;

  // Test-time initialisation: fixed rho and dimension, stratified betas.
  double init_rho = 1.2;
  double init_w = 1.2;
  double init_h = 2.0;
  int num_candidates = 6;

  // Training initialisation: with probability protocol_fraction start like a
  // test candidate whose beta lies within protocol_beta_spread of the truth,
  // otherwise perturb the ground truth uniformly by up to the given radii.
  double protocol_fraction = 0.3;
  double protocol_beta_spread = 0.5236;
  double perturb_rho = 0.8;
  double perturb_beta = 0.25;
  double perturb_w = 0.4;
  double perturb_h = 0.4;

  // A crop counts as containing the pedestrian when it covers at least this
  // fraction of the ground-truth region.
  double label_coverage = 0.5;
};

void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);

struct BoxState {
  cv::Mat crop;  // CV_8UC1, input_size x input_size
  CylBox box;
  int step_index = 0;
  bool degraded = false;  // part of the box projects outside the image
};

struct StepOutcome {
  BoxState next_state;
  double reward = 0.0;
  bool terminal = false;
  bool triggered = false;
  double iou = 0.0;  // IoU of the box after the action
};

// Projects the box, takes the envelope of its four edge arcs in the chosen
// frame, crops and resamples to input_size. Throws GeometryError when the
// envelope is empty.
BoxState render_state(const CylBox& box, const OmniImage& image, const EnvConfig& cfg,
                      int step_index = 0);

// Axis-aligned pixel envelope used by the kImage frame, clipped to the image.
cv::Rect crop_envelope(const DistortedRegion& region, const CameraIntrinsics& cam);

// Reward for a movement: +1 when IoU strictly increases, -1 otherwise. For the
// trigger: +alpha if IoU >= tau else -alpha.
double movement_reward(double iou_before, double iou_after);
double trigger_reward(double iou, const EnvConfig& cfg);

// One environment transition as a pure function of its inputs. Throws
// std::logic_error when the state is already at the step cap.
StepOutcome step(const BoxState& state, Action a, const CylBox& gt, const OmniImage& image,
                 const EnvConfig& cfg);

// Stratified test candidates: beta_k = (k + u_k) 2pi/K with u_k in
// [0.25, 0.75], so neighbours are at least pi/K apart.
std::vector<CylBox> test_candidates(const EnvConfig& cfg, double ground_z, std::mt19937_64& rng);
CylBox train_init(const CylBox& gt, const EnvConfig& cfg, std::mt19937_64& rng);

// Fraction of the ground-truth region covered by the box region.
double gt_coverage(const DistortedRegion& box_region, const DistortedRegion& gt_region);

// Stateful wrapper around step() that caches the ground-truth region and the
// current IoU. One instance per logical thread.
class BoxEnv {
 public:
  BoxEnv(const OmniImage& image, std::optional<CylBox> gt, const EnvConfig& cfg);

  // step_index > 0 resumes an episode part-way through.
  const BoxState& reset(const CylBox& start, int step_index = 0);
  StepOutcome step(Action a);

  const BoxState& state() const { return state_; }
  double iou() const { return iou_; }
  bool terminal() const { return terminal_; }
  bool has_gt() const { return gt_.has_value(); }
  const CylBox& gt() const { return *gt_; }
  const DistortedRegion& gt_region() const { return gt_region_; }
  const EnvConfig& config() const { return cfg_; }
  const OmniImage& image() const { return *image_; }

  // IoU of an arbitrary box against the ground truth (0 without one).
  double iou_of(const CylBox& box) const;
  // Classification label of the current crop.
  int crop_label() const;

 private:
  const OmniImage* image_;
  std::optional<CylBox> gt_;
  EnvConfig cfg_;
  DistortedRegion gt_region_;
  BoxState state_;
  DistortedRegion region_;
  double iou_ = 0.0;
  bool terminal_ = true;
};

}  // namespace omnidrl
