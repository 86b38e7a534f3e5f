#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include "json.hpp"

namespace omnidrl {

// Geometry failures. All derive from GeometryError so callers that only care
// about "not projectable" can catch one type.
class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DomainError : public GeometryError {
 public:
  using GeometryError::GeometryError;
};
class ProjectionAtInfinity : public GeometryError {
 public:
  using GeometryError::GeometryError;
};
class OutOfFov : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

using Point3 = Eigen::Vector3d;

struct NormalizedPoint {
  double x = 0.0;
  double y = 0.0;
};

struct PixelPoint {
  double u = 0.0;
  double v = 0.0;
};

// Unified sphere model: unit sphere, re-projection centre offset by xi along
// the optical axis, then a generalised pinhole (f1*eta, f2*eta, skew).
struct CameraIntrinsics {
  double xi = 0.0;
  double eta = 1.0;
  double f1 = 1.0;
  double f2 = 1.0;
  double skew = 0.0;
  double u0 = 0.0;
  double v0 = 0.0;
  int width = 1;
  int height = 1;

  void validate() const;  // throws DomainError
  bool contains(const PixelPoint& p) const {
    return p.u >= 0.0 && p.v >= 0.0 && p.u <= width - 1.0 && p.v <= height - 1.0;
  }
  bool operator==(const CameraIntrinsics&) const = default;
};

// n_p,z values at or below this are treated as projecting to infinity.
inline constexpr double kAtInfinityEps = 1e-9;

// Returns n_p^+ = x/|x| + (0,0,xi), the sphere point nearest to x expressed in
// the frame centred at (0,0,-xi).
Eigen::Vector3d lift_to_sphere(const Point3& x, const CameraIntrinsics& cam);

NormalizedPoint project_normalized(const Point3& x, const CameraIntrinsics& cam);
PixelPoint normalized_to_pixel(const NormalizedPoint& p, const CameraIntrinsics& cam);
NormalizedPoint pixel_to_normalized(const PixelPoint& p, const CameraIntrinsics& cam);
PixelPoint project_pixel(const Point3& x, const CameraIntrinsics& cam);

// True when x has a finite image (n_p,z > eps).
bool is_projectable(const Point3& x, const CameraIntrinsics& cam);

// Unit viewing direction of a normalized-plane point (inverse of
// project_normalized up to positive scale).
Eigen::Vector3d normalized_to_ray(const NormalizedPoint& p, const CameraIntrinsics& cam);
Eigen::Vector3d pixel_to_ray(const PixelPoint& p, const CameraIntrinsics& cam);

void to_json(nlohmann::json& j, const CameraIntrinsics& cam);
void from_json(const nlohmann::json& j, CameraIntrinsics& cam);

CameraIntrinsics load_calibration(const std::filesystem::path& path);
void save_calibration(const std::filesystem::path& path, const CameraIntrinsics& cam);

}  // namespace omnidrl
