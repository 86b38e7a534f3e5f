#include "omnidrl/box_env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgproc.hpp>

namespace omnidrl {

namespace {

struct Advance {
  StepOutcome outcome;
  DistortedRegion region;  // region of the next box
};

Advance advance(const BoxState& state, Action a, double current_iou,
                const DistortedRegion& gt_region, const OmniImage& image, const EnvConfig& cfg) {
  if (state.step_index >= cfg.max_steps) {
    throw std::logic_error("step: episode already reached the step cap");
  }
  Advance adv;
  StepOutcome& out = adv.outcome;
  if (a == Action::kTrigger) {
    out.next_state = state;
    out.next_state.step_index = state.step_index + 1;
    out.reward = trigger_reward(current_iou, cfg);
    out.terminal = true;
    out.triggered = true;
    out.iou = current_iou;
    adv.region = region_from_box(state.box, image.camera());
    return adv;
  }
  const CylBox next = apply_action(state.box, a, cfg.steps, cfg.bounds);
  out.next_state = render_state(next, image, cfg, state.step_index + 1);
  adv.region = region_from_box(next, image.camera());
  out.iou = gt_region.empty() ? 0.0 : distorted_iou(adv.region, gt_region);
  out.reward = movement_reward(current_iou, out.iou);
  out.terminal = out.next_state.step_index >= cfg.max_steps;
  return adv;
}

void draw_outline(cv::Mat& crop, const std::vector<cv::Point2d>& pts) {
  std::vector<cv::Point> poly;
  poly.reserve(pts.size());
  for (const auto& p : pts) poly.emplace_back(cvRound(p.x), cvRound(p.y));
  cv::polylines(crop, poly, true, cv::Scalar(255), 1, cv::LINE_8);
}

}  // namespace

void to_json(nlohmann::json& j, const EnvConfig& c) {
  j = nlohmann::json{
      {"rho_min", c.bounds.rho_min},
      {"rho_max", c.bounds.rho_max},
      {"w_min", c.bounds.w_min},
      {"w_max", c.bounds.w_max},
      {"h_min", c.bounds.h_min},
      {"h_max", c.bounds.h_max},
      {"step_rho", c.steps.rho},
      {"step_beta", c.steps.beta},
      {"step_w", c.steps.w},
      {"step_h", c.steps.h},
      {"tau", c.tau},
      {"alpha_trig", c.alpha_trig},
      {"max_steps", c.max_steps},
      {"input_size", c.input_size},
      {"frame", c.frame == StateFrame::kImage ? "image" : "radial"},
      {"draw_outline", c.draw_outline},
      {"init_rho", c.init_rho},
      {"init_w", c.init_w},
      {"init_h", c.init_h},
      {"num_candidates", c.num_candidates},
      {"protocol_fraction", c.protocol_fraction},
      {"protocol_beta_spread", c.protocol_beta_spread},
      {"perturb_rho", c.perturb_rho},
      {"perturb_beta", c.perturb_beta},
      {"perturb_w", c.perturb_w},
      {"perturb_h", c.perturb_h},
      {"label_coverage", c.label_coverage},
  };
}

void from_json(const nlohmann::json& j, EnvConfig& c) {
  c.bounds.rho_min = j.at("rho_min").get<double>();
  c.bounds.rho_max = j.at("rho_max").get<double>();
  c.bounds.w_min = j.at("w_min").get<double>();
  c.bounds.w_max = j.at("w_max").get<double>();
  c.bounds.h_min = j.at("h_min").get<double>();
  c.bounds.h_max = j.at("h_max").get<double>();
  c.steps.rho = j.at("step_rho").get<double>();
  c.steps.beta = j.at("step_beta").get<double>();
  c.steps.w = j.at("step_w").get<double>();
  c.steps.h = j.at("step_h").get<double>();
  c.tau = j.at("tau").get<double>();
  c.alpha_trig = j.at("alpha_trig").get<double>();
  c.max_steps = j.at("max_steps").get<int>();
  c.input_size = j.at("input_size").get<int>();
  const std::string frame = j.at("frame").get<std::string>();
  if (frame == "image") {
    c.frame = StateFrame::kImage;
  } else if (frame == "radial") {
    c.frame = StateFrame::kRadial;
  } else {
    throw std::invalid_argument("env.frame must be \"image\" or \"radial\"");
  }
  c.draw_outline = j.at("draw_outline").get<bool>();
  c.init_rho = j.at("init_rho").get<double>();
  c.init_w = j.at("init_w").get<double>();
  c.init_h = j.at("init_h").get<double>();
  c.num_candidates = j.at("num_candidates").get<int>();
  c.protocol_fraction = j.at("protocol_fraction").get<double>();
  c.protocol_beta_spread = j.at("protocol_beta_spread").get<double>();
  c.perturb_rho = j.at("perturb_rho").get<double>();
  c.perturb_beta = j.at("perturb_beta").get<double>();
  c.perturb_w = j.at("perturb_w").get<double>();
  c.perturb_h = j.at("perturb_h").get<double>();
  c.label_coverage = j.at("label_coverage").get<double>();
  if (c.max_steps <= 0 || c.input_size <= 0 || c.num_candidates <= 0) {
    throw std::invalid_argument("env: max_steps, input_size and num_candidates must be positive");
  }
}

cv::Rect crop_envelope(const DistortedRegion& region, const CameraIntrinsics& cam) {
  const int x0 = static_cast<int>(std::floor(std::max(region.min_u, 0.0)));
  const int y0 = static_cast<int>(std::floor(std::max(region.min_v, 0.0)));
  const int x1 = static_cast<int>(std::ceil(std::min(region.max_u, cam.width - 1.0))) + 1;
  const int y1 = static_cast<int>(std::ceil(std::min(region.max_v, cam.height - 1.0))) + 1;
  if (x1 <= x0 || y1 <= y0) return {};
  return {x0, y0, std::min(x1, cam.width) - x0, std::min(y1, cam.height) - y0};
}

BoxState render_state(const CylBox& box, const OmniImage& image, const EnvConfig& cfg,
                      int step_index) {
  const CameraIntrinsics& cam = image.camera();
  const DistortedRegion region = region_from_box(box, cam);
  if (region.empty()) throw GeometryError("render_state: box has no projectable outline");

  BoxState st;
  st.box = box;
  st.step_index = step_index;
  st.degraded = region.degraded;
  const int n = cfg.input_size;
  std::vector<cv::Point2d> outline;

  if (cfg.frame == StateFrame::kImage) {
    const cv::Rect r = crop_envelope(region, cam);
    if (r.area() <= 0) throw GeometryError("render_state: empty envelope");
    cv::resize(image.pixels()(r), st.crop, cv::Size(n, n), 0, 0, cv::INTER_AREA);
    if (cfg.draw_outline) {
      for (const PixelPoint& p : region.boundary) {
        outline.emplace_back((p.u - r.x + 0.5) * n / r.width - 0.5, (p.v - r.y + 0.5) * n / r.height - 0.5);
      }
    }
  } else {
    const double c = std::cos(box.beta), s = std::sin(box.beta);
    double r_lo = 1e300, r_hi = -1e300, t_lo = 1e300, t_hi = -1e300;
    std::vector<cv::Point2d> rotated;
    rotated.reserve(region.boundary.size());
    for (const PixelPoint& p : region.boundary) {
      const NormalizedPoint m = pixel_to_normalized(p, cam);
      const double radial = c * m.x + s * m.y;
      const double tangential = -s * m.x + c * m.y;
      rotated.emplace_back(radial, tangential);
      r_lo = std::min(r_lo, radial);
      r_hi = std::max(r_hi, radial);
      t_lo = std::min(t_lo, tangential);
      t_hi = std::max(t_hi, tangential);
    }
    if (!(r_hi > r_lo) || !(t_hi > t_lo)) throw GeometryError("render_state: empty envelope");
    const double dr = (r_hi - r_lo) / n, dt = (t_hi - t_lo) / n;
    const double spacing = std::max(dr, dt) * std::max(cam.f1, cam.f2) * cam.eta;
    const int level = std::clamp(static_cast<int>(std::floor(std::log2(std::max(spacing, 1.0)))), 0,
                                 image.num_levels() - 1);
    const double scale = 1.0 / static_cast<double>(1 << level);
    cv::Mat map_x(n, n, CV_32FC1), map_y(n, n, CV_32FC1);
    for (int i = 0; i < n; ++i) {
      const double radial = r_lo + (i + 0.5) * dr;
      for (int k = 0; k < n; ++k) {
        const double tangential = t_lo + (k + 0.5) * dt;
        const PixelPoint p = normalized_to_pixel({c * radial - s * tangential, s * radial + c * tangential}, cam);
        map_x.at<float>(i, k) = static_cast<float>((p.u + 0.5) * scale - 0.5);
        map_y.at<float>(i, k) = static_cast<float>((p.v + 0.5) * scale - 0.5);
      }
    }
    cv::remap(image.level(level), st.crop, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_CONSTANT,
              cv::Scalar(0));
    if (cfg.draw_outline) {
      for (const auto& q : rotated) {
        outline.emplace_back((q.y - t_lo) / dt - 0.5, (q.x - r_lo) / dr - 0.5);
      }
    }
  }
  if (cfg.draw_outline) draw_outline(st.crop, outline);
  return st;
}

double movement_reward(double iou_before, double iou_after) {
  return iou_after > iou_before ? 1.0 : -1.0;
}

double trigger_reward(double iou, const EnvConfig& cfg) {
  return iou >= cfg.tau ? cfg.alpha_trig : -cfg.alpha_trig;
}

StepOutcome step(const BoxState& state, Action a, const CylBox& gt, const OmniImage& image,
                 const EnvConfig& cfg) {
  const DistortedRegion gt_region = region_from_box(gt, image.camera());
  const double current = distorted_iou(region_from_box(state.box, image.camera()), gt_region);
  return advance(state, a, current, gt_region, image, cfg).outcome;
}

std::vector<CylBox> test_candidates(const EnvConfig& cfg, double ground_z, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(0.25, 0.75);
  std::vector<CylBox> out;
  const double sector = kTwoPi / cfg.num_candidates;
  for (int k = 0; k < cfg.num_candidates; ++k) {
    CylBox b{cfg.init_rho, wrap_angle((k + jitter(rng)) * sector), ground_z, cfg.init_w, cfg.init_h};
    out.push_back(clamp_to_bounds(b, cfg.bounds));
  }
  return out;
}

CylBox train_init(const CylBox& gt, const EnvConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto sym = [&](double r) { return r * (2.0 * unit(rng) - 1.0); };
  CylBox b;
  if (unit(rng) < cfg.protocol_fraction) {
    b = {cfg.init_rho, gt.beta + sym(cfg.protocol_beta_spread), gt.z, cfg.init_w, cfg.init_h};
  } else {
    b = {gt.rho + sym(cfg.perturb_rho), gt.beta + sym(cfg.perturb_beta), gt.z,
         gt.w + sym(cfg.perturb_w), gt.h + sym(cfg.perturb_h)};
  }
  return clamp_to_bounds(b, cfg.bounds);
}

double gt_coverage(const DistortedRegion& box_region, const DistortedRegion& gt_region) {
  const double area = gt_region.visible_area();
  if (!(area > 0.0)) return 0.0;
  return std::clamp(intersection_area(box_region, gt_region) / area, 0.0, 1.0);
}

BoxEnv::BoxEnv(const OmniImage& image, std::optional<CylBox> gt, const EnvConfig& cfg)
    : image_(&image), gt_(gt), cfg_(cfg) {
  if (gt_) gt_region_ = region_from_box(*gt_, image.camera());
}

const BoxState& BoxEnv::reset(const CylBox& start, int step_index) {
  if (step_index < 0 || step_index >= cfg_.max_steps) {
    throw std::invalid_argument("BoxEnv::reset: step index outside the episode");
  }
  state_ = render_state(start, *image_, cfg_, step_index);
  region_ = region_from_box(start, image_->camera());
  iou_ = gt_ ? distorted_iou(region_, gt_region_) : 0.0;
  terminal_ = false;
  return state_;
}

StepOutcome BoxEnv::step(Action a) {
  if (terminal_) throw std::logic_error("BoxEnv::step on a terminal episode");
  Advance adv = advance(state_, a, iou_, gt_region_, *image_, cfg_);
  state_ = adv.outcome.next_state;
  region_ = std::move(adv.region);
  iou_ = adv.outcome.iou;
  terminal_ = adv.outcome.terminal;
  return adv.outcome;
}

double BoxEnv::iou_of(const CylBox& box) const {
  if (!gt_) return 0.0;
  return distorted_iou(region_from_box(box, image_->camera()), gt_region_);
}

int BoxEnv::crop_label() const {
  if (!gt_) return 0;
  return gt_coverage(region_, gt_region_) >= cfg_.label_coverage ? 1 : 0;
}

}  // namespace omnidrl
