#pragma once

#include <vector>

#include <Eigen/Core>

#include "omnidrl/camera_model.hpp"

namespace omnidrl {

// Moment l = x1 x x2 of a 3D line; normal of the interpretation plane.
using LineMoment = Eigen::Vector3d;

// Symmetric 3x3 conic on the normalized plane, scaled so max |entry| = 1.
struct LineConic {
  Eigen::Matrix3d C = Eigen::Matrix3d::Zero();
};

struct CurveSegment {
  std::vector<NormalizedPoint> samples;  // ordered from F(x1) to F(x2)
  std::vector<PixelPoint> pixels;        // same samples after the pinhole mapping
  NormalizedPoint first() const { return samples.front(); }
  NormalizedPoint last() const { return samples.back(); }
};

LineMoment line_moment(const Point3& x1, const Point3& x2);

LineConic line_conic(const LineMoment& l, const CameraIntrinsics& cam);

// Scale-free residual: p^T C p with p = (x, y, 1) / |(x, y, 1)|.
double conic_residual(const LineConic& conic, const NormalizedPoint& p);

inline constexpr int kDefaultCurveSamples = 64;
inline constexpr double kMaxPixelGap = 1.0;

// Image of the 3D segment [x1, x2]. Samples are taken along the great-circle
// arc of viewing directions, so the returned arc is the image of the segment
// and never its complement on the conic. Sampling starts at n_samples points
// and doubles until consecutive pixel samples are less than max_pixel_gap
// apart.
CurveSegment segment_curve(const Point3& x1, const Point3& x2, const CameraIntrinsics& cam,
                           int n_samples = kDefaultCurveSamples,
                           double max_pixel_gap = kMaxPixelGap);

}  // namespace omnidrl
