#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "omnidrl/camera_model.hpp"

using namespace omnidrl;

namespace {

CameraIntrinsics cam_with_xi(double xi) {
  CameraIntrinsics c;
  c.xi = xi;
  c.f1 = c.f2 = 200.0;
  c.u0 = c.v0 = 512.0;
  c.width = c.height = 1024;
  return c;
}

Point3 random_point(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  return {u(rng), u(rng), u(rng)};
}

}  // namespace

TEST_CASE("lift_to_sphere examples") {
  auto a = lift_to_sphere({0, 0, 1}, cam_with_xi(0.5));
  CHECK(a.x() == 0.0);
  CHECK(a.y() == 0.0);
  CHECK(a.z() == doctest::Approx(1.5).epsilon(1e-15));

  auto b = lift_to_sphere({3, 0, 4}, cam_with_xi(0.0));
  CHECK(b.x() == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b.z() == doctest::Approx(0.8).epsilon(1e-15));

  // x = (1,0,1): r = sqrt(2), so x/r = (0.70710678..., 0, 0.70710678...)
  auto c = lift_to_sphere({1, 0, 1}, cam_with_xi(1.0));
  const double s = 0.70710678118654752;
  CHECK(c.x() == doctest::Approx(s).epsilon(1e-15));
  CHECK(c.y() == 0.0);
  CHECK(c.z() == doctest::Approx(s + 1.0).epsilon(1e-15));
}

TEST_CASE("lifted points lie on the shifted unit sphere") {
  std::mt19937_64 rng(11);
  for (double xi : {0.0, 0.3, 0.9, 1.0}) {
    for (int i = 0; i < 500; ++i) {
      const Point3 x = random_point(rng);
      const auto n = lift_to_sphere(x, cam_with_xi(xi));
      const double err = n.x() * n.x() + n.y() * n.y() + (n.z() - xi) * (n.z() - xi) - 1.0;
      CHECK(std::abs(err) < 1e-12);
    }
  }
}

TEST_CASE("zero-norm point is a domain error") {
  CHECK_THROWS_AS(lift_to_sphere({0, 0, 0}, cam_with_xi(0.5)), DomainError);
  CHECK_THROWS_AS(project_normalized({0, 0, 0}, cam_with_xi(0.5)), DomainError);
}

TEST_CASE("project_normalized examples") {
  for (double xi : {0.0, 0.4, 1.0}) {
    auto p = project_normalized({0, 0, 5}, cam_with_xi(xi));
    CHECK(p.x == 0.0);
    CHECK(p.y == 0.0);
  }
  auto q = project_normalized({2, 0, 2}, cam_with_xi(0.0));
  CHECK(q.x == 1.0);
  CHECK(q.y == 0.0);

  // (1/sqrt2) / (1/sqrt2 + 1) = 1 / (1 + sqrt2) = sqrt2 - 1
  auto r = project_normalized({1, 0, 1}, cam_with_xi(1.0));
  CHECK(r.x == doctest::Approx(std::sqrt(2.0) - 1.0).epsilon(1e-14));
  CHECK(r.x == doctest::Approx(0.41421).epsilon(1e-5));
}

TEST_CASE("pinhole degeneracy is exact") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-4.0, 4.0), z(0.1, 6.0);
  for (int i = 0; i < 2000; ++i) {
    const Point3 x{u(rng), u(rng), z(rng)};
    const auto p = project_normalized(x, cam_with_xi(0.0));
    const double ex = x.x() / x.z(), ey = x.y() / x.z();
    CHECK(std::abs(p.x - ex) <= 1e-15 * std::max(1.0, std::abs(ex)));
    CHECK(std::abs(p.y - ey) <= 1e-15 * std::max(1.0, std::abs(ey)));
  }
}

TEST_CASE("points behind the viewpoint project to infinity") {
  CHECK_THROWS_AS(project_normalized({0, 0, -1}, cam_with_xi(0.0)), ProjectionAtInfinity);
  CHECK_THROWS_AS(project_normalized({1, 0, 0}, cam_with_xi(0.0)), ProjectionAtInfinity);
  CHECK_THROWS_AS(project_normalized({0, 0, -1}, cam_with_xi(1.0)), ProjectionAtInfinity);
  CHECK_FALSE(is_projectable({0, 0, -1}, cam_with_xi(0.9)));
  CHECK(is_projectable({1, 0, 0}, cam_with_xi(0.5)));
  CHECK_NOTHROW(project_normalized({1, 0, -0.3}, cam_with_xi(0.9)));
}

TEST_CASE("normalized_to_pixel examples") {
  CameraIntrinsics c = cam_with_xi(0.0);
  c.u0 = 320;
  c.v0 = 240;
  auto a = normalized_to_pixel({0, 0}, c);
  CHECK(a.u == 320.0);
  CHECK(a.v == 240.0);

  c.f1 = 100;
  c.u0 = 0;
  auto b = normalized_to_pixel({1, 0}, c);
  CHECK(b.u == 100.0);

  // 200 * 0.41421 + 512 = 594.842
  auto d = normalized_to_pixel({0.41421, 0}, cam_with_xi(0.9));
  CHECK(d.u == doctest::Approx(594.84).epsilon(1e-5));
  CHECK(d.v == 512.0);
}

TEST_CASE("skew and eta enter the pixel mapping") {
  CameraIntrinsics c = cam_with_xi(0.5);
  c.eta = 2.0;
  c.skew = 0.1;
  auto p = normalized_to_pixel({0.5, 0.25}, c);
  CHECK(p.u == doctest::Approx(200 * 2 * 0.5 + 200 * 2 * 0.1 * 0.25 + 512));
  CHECK(p.v == doctest::Approx(200 * 2 * 0.25 + 512));
  auto back = pixel_to_normalized(p, c);
  CHECK(back.x == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(back.y == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("pixel_to_ray inverts the projection") {
  for (double xi : {0.0, 0.25, 0.5, 0.9, 1.0}) {
    const CameraIntrinsics c = cam_with_xi(xi);
    auto axis = pixel_to_ray({c.u0, c.v0}, c);
    CHECK(axis.x() == doctest::Approx(0.0));
    CHECK(axis.z() == doctest::Approx(1.0).epsilon(1e-15));

    std::mt19937_64 rng(17);
    int tested = 0;
    while (tested < 1000) {
      const Point3 x = random_point(rng);
      if (!is_projectable(x, c)) continue;
      if (xi == 0.0 && x.z() < 0.05 * x.norm()) continue;  // keep pinhole pixels finite
      ++tested;
      const auto d = pixel_to_ray(project_pixel(x, c), c);
      const double angle = std::atan2(d.cross(x.normalized()).norm(), d.dot(x.normalized()));
      CHECK(angle < 1e-9);
      CHECK(std::abs(d.norm() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("pixel_to_ray reduces to pinhole back-projection") {
  const CameraIntrinsics c = cam_with_xi(0.0);
  const PixelPoint p{700.0, 300.0};
  const Eigen::Vector3d expect =
      Eigen::Vector3d((p.u - c.u0) / c.f1, (p.v - c.v0) / c.f2, 1.0).normalized();
  CHECK((pixel_to_ray(p, c) - expect).norm() < 1e-15);
}

TEST_CASE("pixels without a sphere intersection are out of the field of view") {
  CHECK_THROWS_AS(pixel_to_ray({1e200, 0.0}, cam_with_xi(0.5)), OutOfFov);
}

TEST_CASE("projection is radially symmetric") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ang(0.0, 6.283185307179586);
  for (int i = 0; i < 500; ++i) {
    const Point3 x = random_point(rng);
    const CameraIntrinsics c = cam_with_xi(0.8);
    if (!is_projectable(x, c)) continue;
    const double t = ang(rng);
    const Point3 xr{std::cos(t) * x.x() - std::sin(t) * x.y(), std::sin(t) * x.x() + std::cos(t) * x.y(), x.z()};
    const auto p = project_normalized(x, c);
    const auto q = project_normalized(xr, c);
    const double tol = 1e-12 * std::max(1.0, std::hypot(p.x, p.y));
    CHECK(std::abs(std::hypot(p.x, p.y) - std::hypot(q.x, q.y)) < tol);
    CHECK(std::abs(std::cos(t) * p.x - std::sin(t) * p.y - q.x) < tol);
  }
}

TEST_CASE("intrinsics validation") {
  CameraIntrinsics c = cam_with_xi(0.5);
  CHECK_NOTHROW(c.validate());
  c.xi = 1.2;
  CHECK_THROWS_AS(c.validate(), DomainError);
  c = cam_with_xi(0.5);
  c.eta = 0.0;
  CHECK_THROWS_AS(c.validate(), DomainError);
  c = cam_with_xi(0.5);
  c.width = 0;
  CHECK_THROWS_AS(c.validate(), DomainError);
}

TEST_CASE("calibration file round trip and strict keys") {
  const auto dir = std::filesystem::temp_directory_path() / "omnidrl_test_calib";
  std::filesystem::create_directories(dir);
  CameraIntrinsics c = cam_with_xi(0.75);
  c.skew = 0.01;
  save_calibration(dir / "cam.json", c);
  CHECK(load_calibration(dir / "cam.json") == c);

  nlohmann::json j = c;
  j["extra"] = 1;
  CHECK_THROWS_AS(j.get<CameraIntrinsics>(), DomainError);
  j = c;
  j.erase("eta");
  CHECK_THROWS_AS(j.get<CameraIntrinsics>(), DomainError);
  std::filesystem::remove_all(dir);
}
