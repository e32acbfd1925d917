#pragma once

// Deterministic synthetic scenes: a flat ground plane and box-shaped cars
// scanned by an HDL-64E model over the camera's forward field of view.
// Used as fixtures for calibration, the evaluation suite and the CLI demo.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spooflab/geometry.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/lidar_model.hpp"
#include "spooflab/point_cloud.hpp"

namespace spooflab {

struct ScanOptions {
  RayGrid grid{};
  double half_fov = deg_to_rad(45.0);
  double max_range = 70.0;
  double ground_z = -1.73;
};

struct SyntheticScene {
  std::string id;
  PointCloud cloud;
  std::vector<Box3D> cars;
  std::size_t target = 0;  // index into cars

  const Box3D& target_box() const { return cars.at(target); }
};

namespace detail {

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Reflectivity in [lo, hi), fixed per firing direction.
inline double ray_intensity(const RayId& ray, double lo, double hi) {
  const std::uint64_t h = mix64((static_cast<std::uint64_t>(static_cast<std::uint32_t>(ray.beam)) << 32) ^
                                static_cast<std::uint32_t>(ray.azimuth_index));
  return lo + (hi - lo) * static_cast<double>(h >> 11) * 0x1.0p-53;
}

// Entry distance of a ray from the origin into an oriented box, if any.
inline std::optional<double> ray_hits_box(CartesianPoint d, const Box3D& b) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double o[3] = {c * -b.x + s * -b.y, -s * -b.x + c * -b.y, -b.z};
  const double v[3] = {c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
  const double h[3] = {0.5 * b.dx, 0.5 * b.dy, 0.5 * b.dz};
  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(v[a]) < 1e-15) {
      if (std::abs(o[a]) > h[a]) return std::nullopt;
      continue;
    }
    double ta = (-h[a] - o[a]) / v[a];
    double tb = (h[a] - o[a]) / v[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t1 >= t0) || !(t0 > 0.0)) return std::nullopt;
  return t0;
}

}  // namespace detail

// One return per firing direction: the nearest of ground and car surfaces.
inline PointCloud scan_scene(const std::vector<Box3D>& cars, const ScanOptions& opt = {}) {
  PointCloud cloud;
  const RayGrid& g = opt.grid;
  const auto half_cells = static_cast<int>(std::floor(opt.half_fov / g.azimuth_resolution + 1e-9));
  for (std::size_t k = 0; k < g.beams.size(); ++k) {
    for (int idx = -half_cells; idx <= half_cells; ++idx) {
      const double az = g.azimuth_of(idx);
      const SphericalCoord unit{1.0, az, g.beams[k]};
      const CartesianPoint d = range_direction(unit);
      double best = std::numeric_limits<double>::infinity();
      bool on_car = false;
      if (d.z < 0.0) best = opt.ground_z / d.z;
      for (const Box3D& b : cars) {
        if (const auto t = detail::ray_hits_box(d, b); t && *t < best) {
          best = *t;
          on_car = true;
        }
      }
      if (!(best <= opt.max_range)) continue;
      const RayId ray{static_cast<int>(k), idx};
      const double intensity = on_car ? detail::ray_intensity(ray, 0.2, 0.7) : detail::ray_intensity(ray, 0.05, 0.35);
      const CartesianPoint p = sph_to_cart({best, az, g.beams[k]});
      cloud.push_back({p.x, p.y, p.z, intensity});
    }
  }
  return cloud;
}

inline constexpr double kGroundZ = -1.73;

// Car resting on the ground with its center at planar (x, y).
inline Box3D ground_car(double x, double y, double yaw = 0.0, double length = 3.9, double width = 1.6,
                        double height = 1.56) {
  return Box3D{x, y, kGroundZ + 0.5 * height, length, width, height, normalize_angle(yaw)};
}

inline SyntheticScene make_scene(std::string id, std::vector<Box3D> cars, std::size_t target = 0,
                                 const ScanOptions& opt = {}) {
  SyntheticScene s;
  s.id = std::move(id);
  s.cloud = scan_scene(cars, opt);
  s.cars = std::move(cars);
  s.target = target;
  return s;
}

// Single template-sized car straight ahead at 20 m.
inline SyntheticScene reference_scene() { return make_scene("000000", {ground_car(20.0, 0.0)}); }

// Cars at 10-25 m in a spread of bearings and both axis orientations.
inline std::vector<SyntheticScene> calibration_fixtures() {
  std::vector<SyntheticScene> out;
  out.push_back(reference_scene());
  out.push_back(make_scene("000001", {ground_car(12.0, -3.0), ground_car(25.0, 6.0, 0.5 * kPi)}));
  out.push_back(make_scene("000002", {ground_car(15.0, 4.0, 0.0, 4.2, 1.7, 1.5)}));
  out.push_back(make_scene("000003", {ground_car(22.0, -7.0, 0.5 * kPi), ground_car(10.0, 2.5)}));
  out.push_back(make_scene("000004", {ground_car(18.0, 0.0, 0.0, 3.7, 1.55, 1.6)}));
  return out;
}

// Random scenes with one attack target each plus distractor cars.
// Targets are spaced so the placement region never overlaps a distractor.
inline std::vector<SyntheticScene> scene_suite(std::size_t count, std::uint64_t seed, const ScanOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * detail::unit_uniform(rng); };
  std::vector<SyntheticScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<Box3D> cars;
    const double dist = uniform(10.0, 25.0);
    const double bearing = deg_to_rad(uniform(-25.0, 25.0));
    const double yaw = (rng() & 1U ? 0.5 * kPi : 0.0) + deg_to_rad(uniform(-4.0, 4.0));
    cars.push_back(ground_car(dist * std::cos(bearing), dist * std::sin(bearing), yaw, uniform(3.6, 4.3),
                              uniform(1.5, 1.8), uniform(1.45, 1.65)));
    const std::size_t distractors = rng() % 3;
    for (std::size_t d = 0, tries = 0; d < distractors && tries < 50; ++tries) {
      const double dd = uniform(8.0, 38.0);
      const double bb = deg_to_rad(uniform(-40.0, 40.0));
      const Box3D c = ground_car(dd * std::cos(bb), dd * std::sin(bb), rng() & 1U ? 0.5 * kPi : 0.0);
      bool clear = true;
      for (const Box3D& o : cars) clear = clear && std::hypot(c.x - o.x, c.y - o.y) > 7.0;
      if (!clear) continue;
      cars.push_back(c);
      ++d;
    }
    out.push_back(make_scene(kitti::format_frame_id(i), std::move(cars), 0, opt));
  }
  return out;
}

// KITTI-style calibration for a camera 0.27 m ahead and 0.08 m below the LiDAR.
inline kitti::CalibrationSet synthetic_calibration() {
  kitti::CalibrationSet c;
  c.p2 << 721.5377, 0.0, 609.5593, 44.85728, 0.0, 721.5377, 172.854, 0.2163791, 0.0, 0.0, 1.0, 0.002745884;
  const double a = 0.01;
  c.r0_rect << 1.0, 0.0, 0.0, 0.0, std::cos(a), -std::sin(a), 0.0, std::sin(a), std::cos(a);
  c.tr_velo_to_cam << 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, -0.08, 1.0, 0.0, 0.0, -0.27;
  return c;
}

inline void write_kitti_frame(const std::filesystem::path& root, const SyntheticScene& scene,
                              const kitti::CalibrationSet& calib = synthetic_calibration()) {
  const kitti::FramePaths p = kitti::frame_paths(root, scene.id);
  for (const auto& dir : {p.velodyne, p.calib, p.label}) std::filesystem::create_directories(dir.parent_path());
  kitti::write_point_cloud(scene.cloud, p.velodyne);
  kitti::write_calibration(calib, p.calib);
  std::vector<kitti::LabelRecord> labels;
  for (const Box3D& b : scene.cars) labels.push_back(kitti::lidar_box_to_label(b, calib));
  kitti::write_labels(labels, p.label);
}

inline void write_kitti_dataset(const std::filesystem::path& root, const std::vector<SyntheticScene>& scenes,
                                const kitti::CalibrationSet& calib = synthetic_calibration()) {
  for (const SyntheticScene& s : scenes) write_kitti_frame(root, s, calib);
}

}  // namespace spooflab
