#include "omnidrl/line_projection.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Geometry>

namespace omnidrl {

namespace {

constexpr int kMaxCurveSamples = 1 << 16;

}  // namespace

LineMoment line_moment(const Point3& x1, const Point3& x2) { return x1.cross(x2); }

LineConic line_conic(const LineMoment& l, const CameraIntrinsics& cam) {
  const double n = l.norm();
  if (!(n > 0.0)) throw DomainError("line_conic: zero line moment");
  const Eigen::Vector3d u = l / n;
  const double a = 1.0 - cam.xi * cam.xi;
  const double b = cam.xi * cam.xi;
  const double l1 = u.x(), l2 = u.y(), l3 = u.z();

  LineConic conic;
  Eigen::Matrix3d& C = conic.C;
  C(0, 0) = l1 * l1 * a - l3 * l3 * b;
  C(1, 1) = l2 * l2 * a - l3 * l3 * b;
  C(2, 2) = l3 * l3;
  C(0, 1) = C(1, 0) = l1 * l2 * a;
  C(0, 2) = C(2, 0) = l1 * l3;
  C(1, 2) = C(2, 1) = l2 * l3;
  double scale = C.cwiseAbs().maxCoeff();
  if (scale == 0.0) {
    // xi = 1 and a plane through the optical axis: the image is the radial
    // line l1 x + l2 y = 0, which the general form loses as 0 = 0.
    C.setZero();
    C(0, 0) = l1 * l1;
    C(1, 1) = l2 * l2;
    C(0, 1) = C(1, 0) = l1 * l2;
    scale = C.cwiseAbs().maxCoeff();
  }
  C /= scale;
  return conic;
}

double conic_residual(const LineConic& conic, const NormalizedPoint& p) {
  Eigen::Vector3d h(p.x, p.y, 1.0);
  h.normalize();
  return h.dot(conic.C * h);
}

CurveSegment segment_curve(const Point3& x1, const Point3& x2, const CameraIntrinsics& cam,
                           int n_samples, double max_pixel_gap) {
  const double n1 = x1.norm();
  const double n2 = x2.norm();
  if (!(n1 > 0.0) || !(n2 > 0.0)) throw DomainError("segment_curve: endpoint at the origin");
  const Eigen::Vector3d d1 = x1 / n1;
  const Eigen::Vector3d d2 = x2 / n2;
  const double sin_omega = d1.cross(d2).norm();
  if (sin_omega <= 1e-12) throw DomainError("segment_curve: degenerate segment (zero moment)");
  const double omega = std::atan2(sin_omega, d1.dot(d2));

  // Throws ProjectionAtInfinity for either endpoint.
  const NormalizedPoint first = project_normalized(x1, cam);
  const NormalizedPoint last = project_normalized(x2, cam);

  int count = std::max(n_samples, 2);
  CurveSegment seg;
  while (true) {
    seg.samples.assign(count, {});
    seg.pixels.assign(count, {});
    seg.samples.front() = first;
    seg.samples.back() = last;
    for (int i = 1; i + 1 < count; ++i) {
      const double t = static_cast<double>(i) / (count - 1);
      const Eigen::Vector3d d =
          (std::sin((1.0 - t) * omega) * d1 + std::sin(t * omega) * d2) / std::sin(omega);
      seg.samples[i] = project_normalized(d, cam);
    }
    double max_gap = 0.0;
    for (int i = 0; i < count; ++i) {
      seg.pixels[i] = normalized_to_pixel(seg.samples[i], cam);
      if (i > 0) {
        max_gap = std::max(max_gap, std::hypot(seg.pixels[i].u - seg.pixels[i - 1].u,
                                               seg.pixels[i].v - seg.pixels[i - 1].v));
      }
    }
    if (max_gap < max_pixel_gap || count >= kMaxCurveSamples) break;
    count = 2 * (count - 1) + 1;  // keeps the previous samples as a subset
  }
  return seg;
}

}  // namespace omnidrl
