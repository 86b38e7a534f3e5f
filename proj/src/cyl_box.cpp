#include "omnidrl/cyl_box.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace omnidrl {

std::string_view action_name(Action a) {
  switch (a) {
    case Action::kRhoPlus: return "rho+";
    case Action::kRhoMinus: return "rho-";
    case Action::kBetaPlus: return "beta+";
    case Action::kBetaMinus: return "beta-";
    case Action::kWidthPlus: return "w+";
    case Action::kWidthMinus: return "w-";
    case Action::kHeightPlus: return "h+";
    case Action::kHeightMinus: return "h-";
    case Action::kTrigger: return "trigger";
  }
  return "?";
}

Action action_from_index(int index) {
  if (index < 0 || index >= kNumActions) throw std::out_of_range("action index out of range");
  return static_cast<Action>(index);
}

double wrap_angle(double a) {
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;  // fmod(-tiny) + 2pi can round up to 2pi
  return r;
}

double angle_diff(double a, double b) {
  double d = std::remainder(a - b, kTwoPi);
  return d;
}

std::array<Point3, 4> corners(const CylBox& box) {
  const double c = std::cos(box.beta);
  const double s = std::sin(box.beta);
  const Eigen::Vector3d center(box.rho * c, box.rho * s, 0.0);
  const Eigen::Vector3d tangent(-s, c, 0.0);
  const Eigen::Vector3d half = 0.5 * box.w * tangent;
  const Eigen::Vector3d bottom(0.0, 0.0, box.z);
  const Eigen::Vector3d top(0.0, 0.0, box.z + box.h);
  return {center - half + bottom, center + half + bottom, center - half + top, center + half + top};
}

CylBox clamp_to_bounds(const CylBox& box, const BoxBounds& bounds) {
  CylBox out = box;
  out.rho = std::clamp(out.rho, bounds.rho_min, bounds.rho_max);
  out.w = std::clamp(out.w, bounds.w_min, bounds.w_max);
  out.h = std::clamp(out.h, bounds.h_min, bounds.h_max);
  out.beta = wrap_angle(out.beta);
  return out;
}

CylBox apply_action(const CylBox& box, Action a, const ActionStepSizes& steps,
                    const BoxBounds& bounds) {
  CylBox out = box;
  switch (a) {
    case Action::kRhoPlus: out.rho = std::min(box.rho + steps.rho, bounds.rho_max); break;
    case Action::kRhoMinus: out.rho = std::max(box.rho - steps.rho, bounds.rho_min); break;
    case Action::kBetaPlus: out.beta = wrap_angle(box.beta + steps.beta); break;
    case Action::kBetaMinus: out.beta = wrap_angle(box.beta - steps.beta); break;
    case Action::kWidthPlus: out.w = std::min(box.w + steps.w, bounds.w_max); break;
    case Action::kWidthMinus: out.w = std::max(box.w - steps.w, bounds.w_min); break;
    case Action::kHeightPlus: out.h = std::min(box.h + steps.h, bounds.h_max); break;
    case Action::kHeightMinus: out.h = std::max(box.h - steps.h, bounds.h_min); break;
    case Action::kTrigger: throw std::invalid_argument("apply_action: trigger is not a movement");
  }
  return out;
}

void to_json(nlohmann::json& j, const CylBox& b) {
  j = nlohmann::json{{"rho", b.rho}, {"beta", b.beta}, {"z", b.z}, {"w", b.w}, {"h", b.h}};
}

void from_json(const nlohmann::json& j, CylBox& b) {
  b.rho = j.at("rho").get<double>();
  b.beta = j.at("beta").get<double>();
  b.z = j.at("z").get<double>();
  b.w = j.at("w").get<double>();
  b.h = j.at("h").get<double>();
}

}  // namespace omnidrl
