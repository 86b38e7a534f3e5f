#pragma once

#include <filesystem>
#include <array>
#include <optional>
#include <span>
#include <vector>

#include "omnidrl/camera_model.hpp"
#include "omnidrl/cyl_box.hpp"

namespace omnidrl {

// Image-space region bounded by the four projected box edges.
struct DistortedRegion {
  std::vector<PixelPoint> boundary;  // closed: front() == back()
  double min_u = 0.0, min_v = 0.0, max_u = 0.0, max_v = 0.0;
  // Some boundary samples were not projectable and were dropped, or part of
  // the region lies outside the image.
  bool degraded = false;
  // Pixel extent of the image (min_u, min_v, max_u, max_v). Areas used for
  // IoU count only the part of the region inside it.
  std::optional<std::array<double, 4>> frame;

  double area() const;          // unsigned shoelace area of the full polygon
  double visible_area() const;  // area inside the frame
  bool empty() const { return boundary.size() < 4; }
};

DistortedRegion region_from_box(const CylBox& box, const CameraIntrinsics& cam);
// Region from an explicit closed polyline (used for rectangles in tests and
// for reference polygons).
DistortedRegion region_from_polyline(std::vector<PixelPoint> boundary);

double intersection_area(const DistortedRegion& a, const DistortedRegion& b);
// |A n B| / |A u B|. A zero-area region scores 1 against an identical
// boundary and 0 against anything else.
double distorted_iou(const DistortedRegion& a, const DistortedRegion& b);

// Per test-episode outcome.
struct EvalRecord {
  int steps = 0;
  double final_iou = 0.0;
  bool triggered_correct = false;
  double rho_error = 0.0;   // metres, estimate - truth
  double beta_error = 0.0;  // radians, estimate - truth (any branch)
};

struct EvalSummary {
  std::size_t episodes = 0;
  double rmse_rho = 0.0, rmse_beta = 0.0;
  double std_rho = 0.0, std_beta = 0.0;
  double avg_steps = 0.0, avg_iou = 0.0;
  double correct_pct = 0.0;
};

// Beta errors are wrapped to [-pi, pi] before use. Std is the sample standard
// deviation (zero for a single record). Throws std::invalid_argument on an
// empty list.
EvalSummary rmse_metrics(std::span<const EvalRecord> records);

// CSV with header "steps,final_iou,correct,rho_err,beta_err", one row per
// record and a final summary row holding (avg steps, avg IoU, correct
// fraction, RMSE rho, RMSE beta).
void write_eval_csv(const std::filesystem::path& path, std::span<const EvalRecord> records);
std::vector<EvalRecord> read_eval_csv(const std::filesystem::path& path);

}  // namespace omnidrl
