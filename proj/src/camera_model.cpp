#include "omnidrl/camera_model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace omnidrl {

void CameraIntrinsics::validate() const {
  auto fail = [](const std::string& what) { throw DomainError("invalid intrinsics: " + what); };
  if (!(xi >= 0.0 && xi <= 1.0)) fail("xi must lie in [0,1]");
  if (!(eta > 0.0)) fail("eta must be positive");
  if (!(f1 > 0.0) || !(f2 > 0.0)) fail("focal lengths must be positive");
  if (!std::isfinite(skew) || !std::isfinite(u0) || !std::isfinite(v0)) fail("non-finite skew or principal point");
  if (width <= 0 || height <= 0) fail("image size must be positive");
}

Eigen::Vector3d lift_to_sphere(const Point3& x, const CameraIntrinsics& cam) {
  const double r = x.norm();
  if (!(r > 0.0)) throw DomainError("lift_to_sphere: zero-norm point");
  return {x.x() / r, x.y() / r, x.z() / r + cam.xi};
}

bool is_projectable(const Point3& x, const CameraIntrinsics& cam) {
  const double r = x.norm();
  return r > 0.0 && x.z() / r + cam.xi > kAtInfinityEps;
}

NormalizedPoint project_normalized(const Point3& x, const CameraIntrinsics& cam) {
  const double r = x.norm();
  if (!(r > 0.0)) throw DomainError("project_normalized: zero-norm point");
  if (!(x.z() / r + cam.xi > kAtInfinityEps)) throw ProjectionAtInfinity("point projects to infinity");
  // (x/r) / (z/r + xi) == x / (z + xi r); with xi = 0 this is exactly x/z.
  const double denom = x.z() + cam.xi * r;
  return {x.x() / denom, x.y() / denom};
}

PixelPoint normalized_to_pixel(const NormalizedPoint& p, const CameraIntrinsics& cam) {
  const double g1 = cam.f1 * cam.eta;
  const double g2 = cam.f2 * cam.eta;
  return {g1 * p.x + g1 * cam.skew * p.y + cam.u0, g2 * p.y + cam.v0};
}

NormalizedPoint pixel_to_normalized(const PixelPoint& p, const CameraIntrinsics& cam) {
  const double g1 = cam.f1 * cam.eta;
  const double g2 = cam.f2 * cam.eta;
  const double y = (p.v - cam.v0) / g2;
  const double x = (p.u - cam.u0 - g1 * cam.skew * y) / g1;
  return {x, y};
}

PixelPoint project_pixel(const Point3& x, const CameraIntrinsics& cam) {
  return normalized_to_pixel(project_normalized(x, cam), cam);
}

Eigen::Vector3d normalized_to_ray(const NormalizedPoint& p, const CameraIntrinsics& cam) {
  // Solve |lambda*(x,y,1) - (0,0,xi)| = 1 for the root with lambda > 0.
  const double r2 = p.x * p.x + p.y * p.y;
  const double disc = 1.0 + (1.0 - cam.xi * cam.xi) * r2;
  if (!(disc >= 0.0)) throw OutOfFov("pixel has no sphere intersection");
  const double lambda = (cam.xi + std::sqrt(disc)) / (1.0 + r2);
  if (!(lambda > kAtInfinityEps)) throw OutOfFov("pixel lies on the field-of-view boundary");
  Eigen::Vector3d d(lambda * p.x, lambda * p.y, lambda - cam.xi);
  return d.normalized();
}

Eigen::Vector3d pixel_to_ray(const PixelPoint& p, const CameraIntrinsics& cam) {
  return normalized_to_ray(pixel_to_normalized(p, cam), cam);
}

void to_json(nlohmann::json& j, const CameraIntrinsics& cam) {
  j = nlohmann::json{{"xi", cam.xi},     {"eta", cam.eta},   {"f1", cam.f1},
                     {"f2", cam.f2},     {"skew", cam.skew}, {"u0", cam.u0},
                     {"v0", cam.v0},     {"width", cam.width}, {"height", cam.height}};
}

void from_json(const nlohmann::json& j, CameraIntrinsics& cam) {
  static const char* kKeys[] = {"xi", "eta", "f1", "f2", "skew", "u0", "v0", "width", "height"};
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) throw DomainError("calibration: unknown key '" + key + "'");
  }
  for (const char* k : kKeys) {
    if (!j.contains(k)) throw DomainError(std::string("calibration: missing key '") + k + "'");
  }
  cam.xi = j.at("xi").get<double>();
  cam.eta = j.at("eta").get<double>();
  cam.f1 = j.at("f1").get<double>();
  cam.f2 = j.at("f2").get<double>();
  cam.skew = j.at("skew").get<double>();
  cam.u0 = j.at("u0").get<double>();
  cam.v0 = j.at("v0").get<double>();
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  cam.validate();
}

CameraIntrinsics load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open calibration file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("calibration file " + path.string() + ": " + e.what());
  }
  return j.get<CameraIntrinsics>();
}

void save_calibration(const std::filesystem::path& path, const CameraIntrinsics& cam) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write calibration file " + path.string());
  out << nlohmann::json(cam).dump(2) << '\n';
}

}  // namespace omnidrl
