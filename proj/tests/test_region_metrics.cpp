#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "omnidrl/region_metrics.hpp"
#include "oracles.hpp"

using namespace omnidrl;

namespace {

CameraIntrinsics cam1024() {
  CameraIntrinsics c;
  c.xi = 0.9;
  c.f1 = c.f2 = 200.0;
  c.u0 = c.v0 = 511.5;
  c.width = c.height = 1024;
  return c;
}

DistortedRegion rect(double u0, double v0, double u1, double v1) {
  return region_from_polyline({{u0, v0}, {u1, v0}, {u1, v1}, {u0, v1}});
}

}  // namespace

TEST_CASE("rectangle IoU examples") {
  CHECK(distorted_iou(rect(0, 0, 10, 10), rect(0, 0, 10, 10)) == 1.0);
  CHECK(distorted_iou(rect(0, 0, 10, 10), rect(20, 20, 30, 30)) == 0.0);
  // Overlap 50 of a union 150.
  CHECK(distorted_iou(rect(0, 0, 10, 10), rect(5, 0, 15, 10)) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(distorted_iou(rect(0, 0, 10, 10), rect(0, 0, 5, 5)) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(rect(0, 0, 4, 3).area() == doctest::Approx(12.0));
}

TEST_CASE("degenerate regions") {
  const DistortedRegion line = region_from_polyline({{0, 0}, {5, 0}, {10, 0}});
  CHECK(line.area() == 0.0);
  CHECK(distorted_iou(line, rect(0, 0, 10, 10)) == 0.0);
  CHECK(distorted_iou(line, line) == 1.0);
  CHECK(distorted_iou(DistortedRegion{}, rect(0, 0, 1, 1)) == 0.0);
}

TEST_CASE("IoU is symmetric and self-identical on box regions") {
  const CameraIntrinsics cam = cam1024();
  std::mt19937_64 rng(21);
  for (int i = 0; i < 200; ++i) {
    const CylBox a = testing::random_box(rng);
    const CylBox b = testing::nearby_box(a, rng);
    const DistortedRegion ra = region_from_box(a, cam), rb = region_from_box(b, cam);
    const double ab = distorted_iou(ra, rb);
    CHECK(std::abs(ab - distorted_iou(rb, ra)) < 1e-12);
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(std::abs(distorted_iou(ra, ra) - 1.0) < 1e-9);
    // A copy with a different boundary object still gives 1.
    DistortedRegion shifted = ra;
    shifted.boundary.pop_back();
    std::rotate(shifted.boundary.begin(), shifted.boundary.begin() + 1, shifted.boundary.end());
    shifted = region_from_polyline(shifted.boundary);
    CHECK(std::abs(distorted_iou(ra, shifted) - 1.0) < 1e-9);
  }
}

TEST_CASE("shrinking toward the centroid never increases IoU against a superset") {
  const CameraIntrinsics cam = cam1024();
  std::mt19937_64 rng(22);
  for (int i = 0; i < 30; ++i) {
    const DistortedRegion outer = region_from_box(testing::random_box(rng), cam);
    double cu = 0, cv = 0;
    const std::size_t n = outer.boundary.size() - 1;
    for (std::size_t k = 0; k < n; ++k) {
      cu += outer.boundary[k].u;
      cv += outer.boundary[k].v;
    }
    cu /= n;
    cv /= n;
    double prev = 1.0 + 1e-12;
    for (double s = 1.0; s > 0.05; s -= 0.1) {
      std::vector<PixelPoint> pts;
      for (const PixelPoint& p : outer.boundary) pts.push_back({cu + s * (p.u - cu), cv + s * (p.v - cv)});
      const double iou = distorted_iou(region_from_polyline(pts), outer);
      CHECK(iou <= prev + 1e-9);
      prev = iou;
    }
  }
}

TEST_CASE("polygon IoU agrees with pixel rasterization") {
  const CameraIntrinsics cam = cam1024();
  std::mt19937_64 rng(23);
  double worst = 0.0;
  for (int i = 0; i < 60; ++i) {
    const CylBox a = testing::random_box(rng);
    const CylBox b = testing::nearby_box(a, rng);
    const DistortedRegion ra = region_from_box(a, cam), rb = region_from_box(b, cam);
    worst = std::max(worst, std::abs(distorted_iou(ra, rb) - testing::raster_iou(ra, rb, 1024, 1024)));
  }
  CHECK(worst < 0.01);
}

TEST_CASE("box regions are closed and enclose the corner images") {
  const CameraIntrinsics cam = cam1024();
  const CylBox box{2.0, 1.0, -0.8, 0.5, 1.7};
  const DistortedRegion r = region_from_box(box, cam);
  REQUIRE_FALSE(r.empty());
  CHECK(r.boundary.front().u == r.boundary.back().u);
  CHECK(r.boundary.front().v == r.boundary.back().v);
  CHECK_FALSE(r.degraded);
  for (const auto& x : corners(box)) {
    const PixelPoint p = project_pixel(x, cam);
    CHECK(p.u >= r.min_u - 1e-9);
    CHECK(p.u <= r.max_u + 1e-9);
    CHECK(p.v >= r.min_v - 1e-9);
    CHECK(p.v <= r.max_v + 1e-9);
  }
}

TEST_CASE("boxes crossing the field-of-view limit are degraded") {
  CameraIntrinsics cam = cam1024();
  cam.xi = 0.0;
  const DistortedRegion r = region_from_box({2.0, 0.0, -0.8, 0.5, 1.7}, cam);
  CHECK(r.degraded);
}

TEST_CASE("rmse_metrics examples") {
  {
    const std::vector<EvalRecord> recs{{10, 0.7, true, 0.5, 0.0}};
    const EvalSummary s = rmse_metrics(recs);
    CHECK(s.rmse_rho == doctest::Approx(0.5));
    CHECK(s.std_rho == 0.0);
    CHECK(s.correct_pct == 100.0);
    CHECK(s.avg_steps == 10.0);
  }
  {
    const std::vector<EvalRecord> recs{{10, 0.6, true, 0.3, 0.1}, {20, 0.4, false, -0.3, -0.1}};
    const EvalSummary s = rmse_metrics(recs);
    CHECK(s.rmse_rho == doctest::Approx(0.3));
    CHECK(s.rmse_beta == doctest::Approx(0.1));
    CHECK(s.std_rho == doctest::Approx(std::sqrt(2 * 0.09)));
    CHECK(s.avg_steps == 15.0);
    CHECK(s.avg_iou == doctest::Approx(0.5));
    CHECK(s.correct_pct == 50.0);
    CHECK(s.episodes == 2);
  }
  {
    const std::vector<EvalRecord> recs{{1, 1.0, true, 0.0, kTwoPi - 0.01}};
    CHECK(rmse_metrics(recs).rmse_beta == doctest::Approx(0.01).epsilon(1e-9));
  }
  CHECK_THROWS_AS(rmse_metrics(std::vector<EvalRecord>{}), std::invalid_argument);
}

TEST_CASE("eval CSV round trip and summary row") {
  const auto path = std::filesystem::temp_directory_path() / "omnidrl_eval_test.csv";
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<EvalRecord> recs;
  for (int i = 0; i < 25; ++i) recs.push_back({i % 100 + 1, 0.5 + 0.4 * u(rng), u(rng) > 0, u(rng), 0.2 * u(rng)});
  write_eval_csv(path, recs);
  const auto back = read_eval_csv(path);
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].steps == recs[i].steps);
    CHECK(back[i].triggered_correct == recs[i].triggered_correct);
    CHECK(back[i].rho_error == doctest::Approx(recs[i].rho_error).epsilon(1e-9));
  }
  const EvalSummary a = rmse_metrics(recs), b = rmse_metrics(back);
  CHECK(a.rmse_rho == doctest::Approx(b.rmse_rho).epsilon(1e-8));
  CHECK(a.correct_pct == b.correct_pct);
  std::filesystem::remove(path);
}

TEST_CASE("areas outside the image frame do not count") {
  DistortedRegion a = rect(-10, 0, 10, 10);
  DistortedRegion b = rect(0, 0, 10, 10);
  CHECK(distorted_iou(a, b) == doctest::Approx(0.5));
  a.frame = b.frame = std::array<double, 4>{0, 0, 100, 100};
  CHECK(a.visible_area() == doctest::Approx(100.0));
  CHECK(a.area() == doctest::Approx(200.0));
  CHECK(distorted_iou(a, b) == doctest::Approx(1.0));
  CHECK(intersection_area(a, b) == doctest::Approx(100.0));

  const CameraIntrinsics cam = cam1024();
  const DistortedRegion r = region_from_box({2.0, 1.0, -0.8, 0.5, 1.7}, cam);
  REQUIRE(r.frame.has_value());
  CHECK((*r.frame)[2] == cam.width - 0.5);
  CHECK(r.visible_area() == r.area());
}
