#include "omnidrl/region_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <Eigen/Geometry>

#include <boost/geometry.hpp>
#include <boost/geometry/geometries/point_xy.hpp>
#include <boost/geometry/geometries/polygon.hpp>
#include <boost/geometry/geometries/multi_polygon.hpp>

#include "omnidrl/line_projection.hpp"

namespace omnidrl {

namespace bg = boost::geometry;

namespace {

using BgPoint = bg::model::d2::point_xy<double>;
using BgPolygon = bg::model::polygon<BgPoint>;
using BgMultiPolygon = bg::model::multi_polygon<BgPolygon>;

// Samples an edge whose endpoints are not both projectable: dense slerp over
// viewing directions, keeping only projectable samples.
std::vector<PixelPoint> partial_edge(const Point3& x1, const Point3& x2, const CameraIntrinsics& cam) {
  constexpr int kSamples = 1024;
  std::vector<PixelPoint> out;
  const Eigen::Vector3d d1 = x1.normalized();
  const Eigen::Vector3d d2 = x2.normalized();
  const double omega = std::atan2(d1.cross(d2).norm(), d1.dot(d2));
  if (omega <= 1e-12) return out;
  for (int i = 0; i < kSamples; ++i) {
    const double t = static_cast<double>(i) / (kSamples - 1);
    const Eigen::Vector3d d =
        (std::sin((1.0 - t) * omega) * d1 + std::sin(t * omega) * d2) / std::sin(omega);
    if (is_projectable(d, cam)) out.push_back(project_pixel(d, cam));
  }
  return out;
}

BgPolygon to_polygon(const DistortedRegion& r) {
  BgPolygon poly;
  auto& ring = poly.outer();
  ring.reserve(r.boundary.size());
  for (const PixelPoint& p : r.boundary) ring.emplace_back(p.u, p.v);
  bg::correct(poly);
  return poly;
}

bool same_boundary(const DistortedRegion& a, const DistortedRegion& b) {
  if (a.boundary.size() != b.boundary.size()) return false;
  for (std::size_t i = 0; i < a.boundary.size(); ++i) {
    if (a.boundary[i].u != b.boundary[i].u || a.boundary[i].v != b.boundary[i].v) return false;
  }
  return true;
}

bool exceeds_frame(const DistortedRegion& r) {
  if (!r.frame) return false;
  const auto& f = *r.frame;
  return r.min_u < f[0] || r.min_v < f[1] || r.max_u > f[2] || r.max_v > f[3];
}

BgPolygon frame_polygon(const std::array<double, 4>& f) {
  BgPolygon box;
  bg::append(box.outer(), BgPoint(f[0], f[1]));
  bg::append(box.outer(), BgPoint(f[0], f[3]));
  bg::append(box.outer(), BgPoint(f[2], f[3]));
  bg::append(box.outer(), BgPoint(f[2], f[1]));
  bg::append(box.outer(), BgPoint(f[0], f[1]));
  bg::correct(box);
  return box;
}

void update_envelope(DistortedRegion& r) {
  if (r.boundary.empty()) return;
  r.min_u = r.max_u = r.boundary.front().u;
  r.min_v = r.max_v = r.boundary.front().v;
  for (const PixelPoint& p : r.boundary) {
    r.min_u = std::min(r.min_u, p.u);
    r.max_u = std::max(r.max_u, p.u);
    r.min_v = std::min(r.min_v, p.v);
    r.max_v = std::max(r.max_v, p.v);
  }
}

}  // namespace

double DistortedRegion::area() const {
  if (boundary.size() < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0; i + 1 < boundary.size(); ++i) {
    twice += boundary[i].u * boundary[i + 1].v - boundary[i + 1].u * boundary[i].v;
  }
  return 0.5 * std::abs(twice);
}

double DistortedRegion::visible_area() const {
  if (!exceeds_frame(*this) || boundary.size() < 3) return area();
  BgMultiPolygon out;
  bg::intersection(to_polygon(*this), frame_polygon(*frame), out);
  return bg::area(out);
}

DistortedRegion region_from_polyline(std::vector<PixelPoint> boundary) {
  DistortedRegion r;
  r.boundary = std::move(boundary);
  if (!r.boundary.empty()) {
    const PixelPoint& f = r.boundary.front();
    const PixelPoint& l = r.boundary.back();
    if (f.u != l.u || f.v != l.v) r.boundary.push_back(f);
  }
  update_envelope(r);
  return r;
}

DistortedRegion region_from_box(const CylBox& box, const CameraIntrinsics& cam) {
  const auto x = corners(box);
  // Closed loop: bottom (1->2), right (2->4), top (4->3), left (3->1).
  const std::array<std::array<int, 2>, 4> loop = {{{0, 1}, {1, 3}, {3, 2}, {2, 0}}};
  DistortedRegion r;
  for (const auto& [i, j] : loop) {
    std::vector<PixelPoint> pts;
    if (is_projectable(x[i], cam) && is_projectable(x[j], cam)) {
      try {
        pts = segment_curve(x[i], x[j], cam).pixels;
      } catch (const ProjectionAtInfinity&) {
        pts = partial_edge(x[i], x[j], cam);
        r.degraded = true;
      }
    } else {
      pts = partial_edge(x[i], x[j], cam);
      r.degraded = true;
    }
    // Consecutive edges share a corner; skip the duplicate.
    std::size_t start = 0;
    if (!r.boundary.empty() && !pts.empty() && r.boundary.back().u == pts.front().u &&
        r.boundary.back().v == pts.front().v) {
      start = 1;
    }
    r.boundary.insert(r.boundary.end(), pts.begin() + start, pts.end());
  }
  if (!r.boundary.empty()) {
    const PixelPoint f = r.boundary.front();
    const PixelPoint l = r.boundary.back();
    if (f.u != l.u || f.v != l.v) r.boundary.push_back(f);
  }
  update_envelope(r);
  r.frame = {-0.5, -0.5, cam.width - 0.5, cam.height - 0.5};
  if (r.min_u < 0.0 || r.min_v < 0.0 || r.max_u > cam.width - 1.0 || r.max_v > cam.height - 1.0) {
    r.degraded = true;
  }
  return r;
}

double intersection_area(const DistortedRegion& a, const DistortedRegion& b) {
  if (a.empty() || b.empty()) return 0.0;
  if (a.max_u < b.min_u || b.max_u < a.min_u || a.max_v < b.min_v || b.max_v < a.min_v) return 0.0;
  if (same_boundary(a, b)) return a.visible_area();
  BgMultiPolygon out;
  bg::intersection(to_polygon(a), to_polygon(b), out);
  const auto& frame = a.frame ? a.frame : b.frame;
  if (frame && (exceeds_frame(a) || exceeds_frame(b))) {
    BgMultiPolygon clipped;
    bg::intersection(out, frame_polygon(*frame), clipped);
    return bg::area(clipped);
  }
  return bg::area(out);
}

double distorted_iou(const DistortedRegion& a, const DistortedRegion& b) {
  const double area_a = a.visible_area();
  const double area_b = b.visible_area();
  if (same_boundary(a, b)) return 1.0;
  if (area_a <= 0.0 || area_b <= 0.0) return 0.0;
  const double inter = std::min(intersection_area(a, b), std::min(area_a, area_b));
  const double uni = area_a + area_b - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

EvalSummary rmse_metrics(std::span<const EvalRecord> records) {
  if (records.empty()) throw std::invalid_argument("rmse_metrics: empty record list");
  const double n = static_cast<double>(records.size());
  EvalSummary s;
  s.episodes = records.size();
  double sum_r = 0, sum_b = 0, sq_r = 0, sq_b = 0, steps = 0, iou = 0, correct = 0;
  for (const EvalRecord& r : records) {
    const double eb = std::remainder(r.beta_error, kTwoPi);
    sum_r += r.rho_error;
    sum_b += eb;
    sq_r += r.rho_error * r.rho_error;
    sq_b += eb * eb;
    steps += r.steps;
    iou += r.final_iou;
    correct += r.triggered_correct ? 1.0 : 0.0;
  }
  s.rmse_rho = std::sqrt(sq_r / n);
  s.rmse_beta = std::sqrt(sq_b / n);
  if (records.size() > 1) {
    const double mr = sum_r / n, mb = sum_b / n;
    double vr = 0, vb = 0;
    for (const EvalRecord& r : records) {
      const double eb = std::remainder(r.beta_error, kTwoPi);
      vr += (r.rho_error - mr) * (r.rho_error - mr);
      vb += (eb - mb) * (eb - mb);
    }
    s.std_rho = std::sqrt(vr / (n - 1.0));
    s.std_beta = std::sqrt(vb / (n - 1.0));
  }
  s.avg_steps = steps / n;
  s.avg_iou = iou / n;
  s.correct_pct = 100.0 * correct / n;
  return s;
}

void write_eval_csv(const std::filesystem::path& path, std::span<const EvalRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "steps,final_iou,correct,rho_err,beta_err\n";
  for (const EvalRecord& r : records) {
    out << r.steps << ',' << r.final_iou << ',' << (r.triggered_correct ? 1 : 0) << ','
        << r.rho_error << ',' << r.beta_error << '\n';
  }
  const EvalSummary s = rmse_metrics(records);
  out << s.avg_steps << ',' << s.avg_iou << ',' << s.correct_pct / 100.0 << ',' << s.rmse_rho
      << ',' << s.rmse_beta << '\n';
}

std::vector<EvalRecord> read_eval_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "steps,final_iou,correct,rho_err,beta_err") {
    throw std::runtime_error(path.string() + ": unexpected header");
  }
  std::vector<EvalRecord> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::array<double, 5> v{};
    for (double& x : v) {
      if (!std::getline(ss, cell, ',')) throw std::runtime_error(path.string() + ": short row");
      x = std::stod(cell);
    }
    EvalRecord r;
    r.steps = static_cast<int>(v[0]);
    r.final_iou = v[1];
    r.triggered_correct = v[2] != 0.0;
    r.rho_error = v[3];
    r.beta_error = v[4];
    rows.push_back(r);
  }
  if (!rows.empty()) rows.pop_back();  // summary row
  return rows;
}

}  // namespace omnidrl
