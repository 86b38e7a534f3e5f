#include "omnidrl/scene_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <stdexcept>

#include <opencv2/core/utility.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace omnidrl {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Uniform in [-1, 1), a pure function of (seed, key).
double hash_noise(std::uint64_t seed, std::uint64_t key) {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(key));
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Hit {
  double distance = kInf;
  double intensity = 0.0;
  bool pedestrian = false;
};

// Ray-box test in the proxy's local frame (radial, tangential, vertical).
Hit hit_pedestrian(const Pedestrian& p, const Eigen::Vector3d& d) {
  const double c = std::cos(p.front.beta), s = std::sin(p.front.beta);
  const double da = d.x() * c + d.y() * s;
  const double db = -d.x() * s + d.y() * c;
  const double dz = d.z();
  const double lo[3] = {p.front.rho, -0.5 * p.front.w, p.front.z};
  const double hi[3] = {p.front.rho + p.depth, 0.5 * p.front.w, p.front.z + p.front.h};
  const double dir[3] = {da, db, dz};
  double t0 = 0.0, t1 = kInf;
  int entry_axis = -1;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(dir[k]) < 1e-15) {
      if (lo[k] > 0.0 || hi[k] < 0.0) return {};
      continue;
    }
    double ta = lo[k] / dir[k], tb = hi[k] / dir[k];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      entry_axis = k;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return {};
  }
  if (entry_axis < 0) return {};

  const double b = t0 * db;
  const double frac = (p.front.z + p.front.h - t0 * dz) / p.front.h;  // 0 at top, 1 at feet
  double value;
  if (frac < 0.13) {
    value = p.skin;
  } else if (frac < 0.5) {
    const double phase = std::fmod(std::abs(t0 * dz - p.front.z), p.stripe_period) / p.stripe_period;
    value = p.shirt + (phase < 0.5 ? 35.0 : 0.0);
  } else {
    // Two legs separated by a darker gap.
    value = std::abs(b) < 0.04 * p.front.w / 0.5 ? p.pants * 0.6 : p.pants;
  }
  // Side faces and tops are shaded darker than the camera-facing front.
  if (entry_axis != 0) value *= 0.75;
  return {t0, value, true};
}

Hit hit_background(const Scene& sc, const Eigen::Vector3d& d) {
  Hit hit;
  const double horiz = std::hypot(d.x(), d.y());
  const double t_wall = horiz > 1e-12 ? sc.wall_radius / horiz : kInf;
  const double z_wall = t_wall * d.z();
  if (t_wall < kInf && z_wall > sc.ground_z && z_wall < sc.ceiling_z) {
    const double az = std::atan2(d.y(), d.x());
    const double stripe = std::sin(az * sc.wall_stripes + sc.wall_phase);
    double v = 160.0 + 25.0 * (stripe > 0.0 ? 1.0 : -1.0);
    if (z_wall < sc.ground_z + 0.15) v = 95.0;  // skirting board
    hit = {t_wall, v, false};
  } else if (d.z() < 0.0) {
    const double t = sc.ground_z / d.z();
    const double x = t * d.x(), y = t * d.y();
    const int ix = static_cast<int>(std::floor(x / sc.floor_tile));
    const int iy = static_cast<int>(std::floor(y / sc.floor_tile));
    hit = {t, ((ix + iy) & 1) ? 120.0 : 95.0, false};
  } else {
    const double t = d.z() > 1e-12 ? sc.ceiling_z / d.z() : kInf;
    const double x = t * d.x(), y = t * d.y();
    // Ceiling lights as bright discs on a regular grid.
    const double gx = x - 2.0 * std::round(x / 2.0);
    const double gy = y - 2.0 * std::round(y / 2.0);
    hit = {t, std::hypot(gx, gy) < 0.3 ? 245.0 : 205.0, false};
  }
  return hit;
}

template <typename Shade>
cv::Mat render_rows(const CameraIntrinsics& cam, Shade shade) {
  cv::Mat img(cam.height, cam.width, CV_8UC1);
  cv::parallel_for_(cv::Range(0, cam.height), [&](const cv::Range& rows) {
    for (int v = rows.start; v < rows.end; ++v) {
      auto* row = img.ptr<std::uint8_t>(v);
      for (int u = 0; u < cam.width; ++u) {
        Eigen::Vector3d d;
        try {
          d = pixel_to_ray({static_cast<double>(u), static_cast<double>(v)}, cam);
        } catch (const OutOfFov&) {
          row[u] = 0;
          continue;
        }
        row[u] = shade(u, v, d);
      }
    }
  });
  return img;
}

}  // namespace

OmniImage::OmniImage(cv::Mat gray, const CameraIntrinsics& cam) : cam_(cam) {
  if (gray.type() != CV_8UC1) throw std::invalid_argument("OmniImage expects 8-bit grayscale");
  if (gray.cols != cam.width || gray.rows != cam.height) {
    throw std::invalid_argument("OmniImage dimensions do not match the intrinsics");
  }
  levels_.push_back(std::move(gray));
  while (levels_.back().cols >= 32 && levels_.back().rows >= 32) {
    cv::Mat next;
    cv::pyrDown(levels_.back(), next);
    levels_.push_back(std::move(next));
  }
}

OmniImage OmniImage::load(const std::filesystem::path& png, const CameraIntrinsics& cam) {
  cv::Mat img = cv::imread(png.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw std::runtime_error("cannot read image " + png.string());
  return OmniImage(std::move(img), cam);
}

void OmniImage::save(const std::filesystem::path& png) const {
  if (!cv::imwrite(png.string(), pixels())) throw std::runtime_error("cannot write " + png.string());
}

Scene make_scene(const SceneConfig& cfg, std::uint64_t seed, bool with_pedestrian) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
  Scene sc;
  sc.seed = seed;
  sc.ground_z = cfg.ground_z;
  sc.ceiling_z = cfg.ceiling_z;
  sc.wall_radius = cfg.wall_radius;
  sc.noise = cfg.noise;
  sc.floor_tile = uniform(0.35, 0.8);
  sc.wall_phase = uniform(0.0, kTwoPi);
  sc.wall_stripes = std::round(uniform(12.0, 40.0));
  sc.light = uniform(0.8, 1.15);
  // Pedestrian parameters are always drawn so negatives consume the same
  // random stream as positives.
  Pedestrian p;
  p.front.rho = uniform(cfg.rho_min, cfg.rho_max);
  p.front.beta = uniform(0.0, kTwoPi);
  p.front.z = cfg.ground_z;
  p.front.w = cfg.ped_width + uniform(-cfg.ped_width_jitter, cfg.ped_width_jitter);
  p.front.h = cfg.ped_height + uniform(-cfg.ped_height_jitter, cfg.ped_height_jitter);
  p.depth = cfg.ped_depth;
  p.shirt = uniform(20.0, 90.0);
  p.pants = uniform(25.0, 60.0);
  p.skin = uniform(150.0, 200.0);
  p.stripe_period = uniform(0.08, 0.2);
  if (with_pedestrian) sc.pedestrian = p;
  return sc;
}

OmniImage render_scene(const Scene& scene, const CameraIntrinsics& cam) {
  cam.validate();
  cv::Mat img = render_rows(cam, [&](int u, int v, const Eigen::Vector3d& d) -> std::uint8_t {
    Hit hit = hit_background(scene, d);
    if (scene.pedestrian) {
      const Hit ph = hit_pedestrian(*scene.pedestrian, d);
      if (ph.distance < hit.distance) hit = ph;
    }
    const std::uint64_t key = static_cast<std::uint64_t>(v) * cam.width + u;
    const double value = hit.intensity * scene.light + scene.noise * hash_noise(scene.seed, key);
    return cv::saturate_cast<std::uint8_t>(value);
  });
  return OmniImage(std::move(img), cam);
}

cv::Mat render_pedestrian_mask(const Scene& scene, const CameraIntrinsics& cam) {
  cam.validate();
  return render_rows(cam, [&](int, int, const Eigen::Vector3d& d) -> std::uint8_t {
    if (!scene.pedestrian) return 0;
    const Hit ph = hit_pedestrian(*scene.pedestrian, d);
    return ph.pedestrian && ph.distance < hit_background(scene, d).distance ? 255 : 0;
  });
}

CylBox gt_box(const Scene& scene) {
  if (!scene.pedestrian) throw std::invalid_argument("gt_box: scene has no pedestrian");
  return scene.pedestrian->front;
}

std::string_view split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"ground_z", c.ground_z},
                     {"ceiling_z", c.ceiling_z},
                     {"wall_radius", c.wall_radius},
                     {"rho_min", c.rho_min},
                     {"rho_max", c.rho_max},
                     {"ped_width", c.ped_width},
                     {"ped_width_jitter", c.ped_width_jitter},
                     {"ped_height", c.ped_height},
                     {"ped_height_jitter", c.ped_height_jitter},
                     {"ped_depth", c.ped_depth},
                     {"negative_fraction", c.negative_fraction},
                     {"noise", c.noise}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  c.ground_z = j.value("ground_z", c.ground_z);
  c.ceiling_z = j.value("ceiling_z", c.ceiling_z);
  c.wall_radius = j.value("wall_radius", c.wall_radius);
  c.rho_min = j.value("rho_min", c.rho_min);
  c.rho_max = j.value("rho_max", c.rho_max);
  c.ped_width = j.value("ped_width", c.ped_width);
  c.ped_width_jitter = j.value("ped_width_jitter", c.ped_width_jitter);
  c.ped_height = j.value("ped_height", c.ped_height);
  c.ped_height_jitter = j.value("ped_height_jitter", c.ped_height_jitter);
  c.ped_depth = j.value("ped_depth", c.ped_depth);
  c.negative_fraction = j.value("negative_fraction", c.negative_fraction);
  c.noise = j.value("noise", c.noise);
  if (!(c.ceiling_z > 0.0 && c.ground_z < 0.0 && c.wall_radius > c.rho_max && c.rho_max >= c.rho_min &&
        c.rho_min > 0.0 && c.ped_width > 0.0 && c.ped_height > 0.0 && c.ped_depth >= 0.0 &&
        c.negative_fraction >= 0.0 && c.negative_fraction <= 1.0 && c.noise >= 0.0)) {
    throw std::invalid_argument("scene: inconsistent scene configuration");
  }
}

std::pair<int, int> split_counts(int n, double train_fraction) {
  if (n <= 0) throw std::invalid_argument("split_counts: n must be positive");
  const int train = static_cast<int>(std::lround(n * train_fraction));
  return {train, n - train};
}

std::vector<DatasetRecord> generate_dataset(int n, Split split, const SceneConfig& cfg,
                                            const CameraIntrinsics& cam, std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("generate_dataset: n must be positive");
  const std::uint64_t tag = split == Split::kTrain ? 0x7261696eULL : 0x74657374ULL;
  std::vector<DatasetRecord> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t scene_seed = splitmix64(splitmix64(seed ^ (tag << 32)) + i);
    const bool negative = (hash_noise(scene_seed, 0x6e6567) + 1.0) * 0.5 < cfg.negative_fraction;
    DatasetRecord r;
    r.scene = make_scene(cfg, scene_seed, !negative);
    r.intrinsics = cam;
    r.label = negative ? 0 : 1;
    if (!negative) r.gt = gt_box(r.scene);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05d.png", i);
    r.image = name;
    out.push_back(std::move(r));
  }
  return out;
}

void to_json(nlohmann::json& j, const Scene& s) {
  j = nlohmann::json{{"ground_z", s.ground_z},   {"ceiling_z", s.ceiling_z},
                     {"wall_radius", s.wall_radius}, {"floor_tile", s.floor_tile},
                     {"wall_phase", s.wall_phase},   {"wall_stripes", s.wall_stripes},
                     {"light", s.light},             {"noise", s.noise},
                     {"seed", s.seed}};
  if (s.pedestrian) {
    const Pedestrian& p = *s.pedestrian;
    j["pedestrian"] = {{"front", p.front}, {"depth", p.depth},   {"shirt", p.shirt},
                       {"pants", p.pants}, {"skin", p.skin}, {"stripe_period", p.stripe_period}};
  }
}

void from_json(const nlohmann::json& j, Scene& s) {
  s.ground_z = j.at("ground_z").get<double>();
  s.ceiling_z = j.at("ceiling_z").get<double>();
  s.wall_radius = j.at("wall_radius").get<double>();
  s.floor_tile = j.at("floor_tile").get<double>();
  s.wall_phase = j.at("wall_phase").get<double>();
  s.wall_stripes = j.at("wall_stripes").get<double>();
  s.light = j.at("light").get<double>();
  s.noise = j.at("noise").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.pedestrian.reset();
  if (j.contains("pedestrian")) {
    const auto& jp = j.at("pedestrian");
    Pedestrian p;
    p.front = jp.at("front").get<CylBox>();
    p.depth = jp.at("depth").get<double>();
    p.shirt = jp.at("shirt").get<double>();
    p.pants = jp.at("pants").get<double>();
    p.skin = jp.at("skin").get<double>();
    p.stripe_period = jp.at("stripe_period").get<double>();
    s.pedestrian = p;
  }
}

void to_json(nlohmann::json& j, const DatasetRecord& r) {
  j = nlohmann::json{{"image", r.image}, {"intrinsics", r.intrinsics}, {"label", r.label},
                     {"scene", r.scene}};
  j["gt"] = r.gt ? nlohmann::json(*r.gt) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, DatasetRecord& r) {
  r.image = j.at("image").get<std::string>();
  r.intrinsics = j.at("intrinsics").get<CameraIntrinsics>();
  r.label = j.at("label").get<int>();
  if (r.label != 0 && r.label != 1) throw std::runtime_error("dataset record label must be 0 or 1");
  r.gt.reset();
  if (!j.at("gt").is_null()) r.gt = j.at("gt").get<CylBox>();
  if ((r.label == 1) != r.gt.has_value()) {
    throw std::runtime_error("dataset record: label 1 requires a ground-truth box");
  }
  if (j.contains("scene")) r.scene = j.at("scene").get<Scene>();
}

void write_split(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records) {
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (const DatasetRecord& r : records) {
    render_scene(r.scene, r.intrinsics).save(dir / r.image);
    index.push_back(r);
  }
  std::ofstream out(dir / "index.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "index.json").string());
  out << index.dump(1) << '\n';
}

std::vector<DatasetRecord> read_split(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "index.json").string());
  nlohmann::json index;
  in >> index;
  return index.get<std::vector<DatasetRecord>>();
}

}  // namespace omnidrl
