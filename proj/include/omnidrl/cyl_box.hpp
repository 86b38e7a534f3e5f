#pragma once

#include <array>
#include <numbers>
#include <string_view>

#include "omnidrl/camera_model.hpp"
#include "json.hpp"

namespace omnidrl {

// Vertical planar rectangle facing the camera, parameterised in world
// cylindrical coordinates: radial distance rho, azimuth beta, base height z,
// metric width w (horizontal chord) and height h.
struct CylBox {
  double rho = 1.0;
  double beta = 0.0;
  double z = 0.0;
  double w = 1.0;
  double h = 1.0;
  bool operator==(const CylBox&) const = default;
};

enum class Action : int {
  kRhoPlus = 0,
  kRhoMinus,
  kBetaPlus,
  kBetaMinus,
  kWidthPlus,
  kWidthMinus,
  kHeightPlus,
  kHeightMinus,
  kTrigger,
};
inline constexpr int kNumActions = 9;
inline constexpr std::array<Action, kNumActions> kAllActions = {
    Action::kRhoPlus,    Action::kRhoMinus,    Action::kBetaPlus,
    Action::kBetaMinus,  Action::kWidthPlus,   Action::kWidthMinus,
    Action::kHeightPlus, Action::kHeightMinus, Action::kTrigger};

std::string_view action_name(Action a);
Action action_from_index(int index);  // throws std::out_of_range
inline int action_index(Action a) { return static_cast<int>(a); }

struct ActionStepSizes {
  double rho = 0.1;
  double beta = 0.05;
  double w = 0.05;
  double h = 0.05;
};

struct BoxBounds {
  double rho_min = 0.8, rho_max = 6.0;
  double w_min = 0.2, w_max = 2.5;
  double h_min = 0.5, h_max = 2.6;
  bool contains(const CylBox& b) const {
    return b.rho >= rho_min && b.rho <= rho_max && b.w >= w_min && b.w <= w_max &&
           b.h >= h_min && b.h <= h_max;
  }
};

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Wraps to [0, 2pi).
double wrap_angle(double a);
// Shortest signed difference a - b in [-pi, pi].
double angle_diff(double a, double b);

// Corners x1..x4: x1 bottom-left, x2 bottom-right, x3 top-left, x4 top-right,
// "left" being the -beta side. Edges are (1,2), (1,3), (2,4), (3,4).
std::array<Point3, 4> corners(const CylBox& box);
inline constexpr std::array<std::array<int, 2>, 4> kBoxEdges = {{{0, 1}, {0, 2}, {1, 3}, {2, 3}}};

// Moves exactly one parameter by one step, then clamps to bounds. The trigger
// is not a movement and throws std::invalid_argument.
CylBox apply_action(const CylBox& box, Action a, const ActionStepSizes& steps,
                    const BoxBounds& bounds);

CylBox clamp_to_bounds(const CylBox& box, const BoxBounds& bounds);

void to_json(nlohmann::json& j, const CylBox& b);
void from_json(const nlohmann::json& j, CylBox& b);

}  // namespace omnidrl
