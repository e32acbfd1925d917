#pragma once

// Beam geometry of a spinning LiDAR and the physical constraints an injected
// point must satisfy to be recorded: it must lie on an existing firing
// direction (beam elevation x azimuth cell), at most one point per firing,
// and all injected azimuths inside the transmitter's horizontal window.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "spooflab/errors.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/point_cloud.hpp"

namespace spooflab {

// Elevations in radians, index 0 = topmost beam, strictly decreasing.
struct BeamTable {
  std::vector<double> elevations;

  std::size_t size() const { return elevations.size(); }
  double operator[](std::size_t k) const { return elevations[k]; }

  // Nearest beam whose elevation is within half the gap to its neighbour on
  // the query's side (half the adjacent gap past either end of the table).
  std::optional<int> nearest_beam(double elevation) const {
    const auto n = static_cast<int>(elevations.size());
    if (n == 0) return std::nullopt;
    // First index whose elevation is <= query (table is decreasing).
    const auto it = std::lower_bound(elevations.begin(), elevations.end(), elevation, std::greater<>());
    int below = static_cast<int>(it - elevations.begin());
    int above = below - 1;
    if (below == n) {
      const double gap = n > 1 ? elevations[n - 2] - elevations[n - 1] : 0.0;
      return elevations[n - 1] - elevation <= 0.5 * gap ? std::optional<int>(n - 1) : std::nullopt;
    }
    if (above < 0) {
      const double gap = n > 1 ? elevations[0] - elevations[1] : 0.0;
      return elevation - elevations[0] <= 0.5 * gap ? std::optional<int>(0) : std::nullopt;
    }
    return (elevations[above] - elevation) < (elevation - elevations[below]) ? above : below;
  }
};

// Velodyne HDL-64E: 32 upper lasers at 1/3 deg spacing from +2.0 deg and 32
// lower lasers at 1/2 deg spacing ending at -24.8 deg.
inline BeamTable hdl64e_beam_table() {
  BeamTable t;
  t.elevations.reserve(64);
  for (int k = 0; k < 32; ++k) t.elevations.push_back(deg_to_rad(2.0 - k / 3.0));
  for (int k = 32; k < 64; ++k) t.elevations.push_back(deg_to_rad(-24.8 + (63 - k) * 0.5));
  return t;
}

struct RayId {
  int beam = 0;
  int azimuth_index = 0;
  friend constexpr auto operator<=>(const RayId&, const RayId&) = default;
};

struct RayIdHash {
  std::size_t operator()(const RayId& r) const noexcept {
    return std::hash<std::int64_t>{}((static_cast<std::int64_t>(r.beam) << 32) ^
                                     static_cast<std::uint32_t>(r.azimuth_index));
  }
};

// Beam table plus horizontal firing resolution.
struct RayGrid {
  BeamTable beams = hdl64e_beam_table();
  double azimuth_resolution = deg_to_rad(0.2);

  // Number of cells per revolution when the resolution tiles 2*pi, else 0.
  std::int64_t cells_per_turn() const {
    const double n = 2.0 * kPi / azimuth_resolution;
    const double r = std::round(n);
    return std::abs(n - r) < 1e-6 ? static_cast<std::int64_t>(r) : 0;
  }

  // Maps an index onto the representative whose azimuth lies in (-pi, pi].
  int canonical_index(std::int64_t idx) const {
    const std::int64_t n = cells_per_turn();
    if (n > 0) {
      idx = ((idx % n) + n) % n;
      if (2 * idx > n) idx -= n;
    }
    return static_cast<int>(idx);
  }

  double azimuth_of(int idx) const { return normalize_angle(idx * azimuth_resolution); }

  int nearest_azimuth_index(double azimuth) const {
    return canonical_index(std::llround(azimuth / azimuth_resolution));
  }

  std::optional<RayId> ray_for(CartesianPoint p) const {
    if (p.x == 0.0 && p.y == 0.0 && p.z == 0.0) return std::nullopt;
    const SphericalCoord s = cart_to_sph(p);
    const auto beam = beams.nearest_beam(s.elevation);
    if (!beam) return std::nullopt;
    return RayId{*beam, nearest_azimuth_index(s.azimuth)};
  }
};

// Axis-aligned volume above the target in which injected points may lie.
struct PlacementRegion {
  double cx = 0.0;
  double cy = 0.0;
  double side_x = 3.6;
  double side_y = 3.6;
  double z_lo = 0.0;
  double z_hi = 1.0;

  double x_min() const { return cx - 0.5 * side_x; }
  double x_max() const { return cx + 0.5 * side_x; }
  double y_min() const { return cy - 0.5 * side_y; }
  double y_max() const { return cy + 0.5 * side_y; }
  double center_azimuth() const { return (cx == 0.0 && cy == 0.0) ? 0.0 : std::atan2(cy, cx); }

  bool contains(CartesianPoint p, double slack = 0.0) const {
    return p.x >= x_min() - slack && p.x <= x_max() + slack && p.y >= y_min() - slack &&
           p.y <= y_max() + slack && p.z >= z_lo - slack && p.z <= z_hi + slack;
  }
};

inline constexpr double kPlacementSide = 3.6;
inline constexpr double kPlacementHeight = 1.0;

inline PlacementRegion placement_region_for(const Box3D& target, double side = kPlacementSide,
                                            double height = kPlacementHeight) {
  const double z_lo = target.z + 0.5 * target.dz;
  return PlacementRegion{target.x, target.y, side, side, z_lo, z_lo + height};
}

struct FeasibleRay {
  RayId ray;
  double elevation = 0.0;
  double azimuth = 0.0;
  double r_min = 0.0;
  double r_max = 0.0;
};

namespace detail {

// Ray-from-origin vs axis-aligned box; returns [t_enter, t_exit] with t >= 0.
inline std::optional<std::pair<double, double>> ray_box_interval(CartesianPoint d, const PlacementRegion& r) {
  double t0 = 0.0;
  double t1 = std::numeric_limits<double>::infinity();
  const double lo[3] = {r.x_min(), r.y_min(), r.z_lo};
  const double hi[3] = {r.x_max(), r.y_max(), r.z_hi};
  const double dir[3] = {d.x, d.y, d.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dir[a]) < 1e-15) {
      if (lo[a] > 0.0 || hi[a] < 0.0) return std::nullopt;
      continue;
    }
    double ta = lo[a] / dir[a];
    double tb = hi[a] / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (!(t1 >= t0) || !(t1 > 0.0)) return std::nullopt;
  return std::pair{t0, t1};
}

}  // namespace detail

// Every (beam, azimuth cell) whose ray crosses the region, with the exact
// range interval of the crossing. Grazing rays (interval shorter than 1e-9 m)
// are dropped.
inline std::vector<FeasibleRay> feasible_rays(const PlacementRegion& region, const RayGrid& grid) {
  if (!(grid.azimuth_resolution > 0.0)) throw ConfigError("azimuth resolution must be positive");
  std::vector<FeasibleRay> out;

  std::int64_t idx_lo = 0;
  std::int64_t idx_hi = 0;
  const bool origin_inside =
      region.x_min() <= 0.0 && region.x_max() >= 0.0 && region.y_min() <= 0.0 && region.y_max() >= 0.0;
  if (origin_inside) {
    const std::int64_t n = grid.cells_per_turn();
    const auto half = n > 0 ? n / 2 : static_cast<std::int64_t>(std::ceil(kPi / grid.azimuth_resolution));
    idx_lo = -half + 1;
    idx_hi = half;
  } else {
    const double center = region.center_azimuth();
    double dmin = 0.0;
    double dmax = 0.0;
    for (double x : {region.x_min(), region.x_max()}) {
      for (double y : {region.y_min(), region.y_max()}) {
        const double d = normalize_angle(std::atan2(y, x) - center);
        dmin = std::min(dmin, d);
        dmax = std::max(dmax, d);
      }
    }
    idx_lo = static_cast<std::int64_t>(std::ceil((center + dmin) / grid.azimuth_resolution));
    idx_hi = static_cast<std::int64_t>(std::floor((center + dmax) / grid.azimuth_resolution));
  }

  for (std::int64_t raw = idx_lo; raw <= idx_hi; ++raw) {
    const int idx = grid.canonical_index(raw);
    const double azimuth = grid.azimuth_of(idx);
    for (std::size_t k = 0; k < grid.beams.size(); ++k) {
      const double elevation = grid.beams[k];
      const CartesianPoint d = range_direction({1.0, azimuth, elevation});
      const auto hit = detail::ray_box_interval(d, region);
      if (!hit || hit->second - hit->first < 1e-9 || !(hit->first > 0.0)) continue;
      out.push_back({RayId{static_cast<int>(k), idx}, elevation, azimuth, hit->first, hit->second});
    }
  }
  return out;
}

// One injected point: a fixed firing direction and a mutable range.
struct AdvPoint {
  RayId ray;
  double elevation = 0.0;
  double azimuth = 0.0;
  double range = 0.0;
  double r_min = 0.0;
  double r_max = 0.0;

  SphericalCoord spherical() const { return {range, azimuth, elevation}; }
  CartesianPoint position() const { return sph_to_cart(spherical()); }
};

struct AdvPointSet {
  double azimuth_resolution = deg_to_rad(0.2);
  std::vector<AdvPoint> points;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

namespace detail {

inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline std::size_t bounded_index(std::mt19937_64& rng, std::size_t bound) {
  const auto product = static_cast<unsigned __int128>(rng()) * bound;
  return static_cast<std::size_t>(product >> 64);
}

}  // namespace detail

inline constexpr double kDefaultWindow = deg_to_rad(10.0);

inline bool in_window(const FeasibleRay& r, double window, double center_azimuth) {
  return std::abs(normalize_angle(r.azimuth - center_azimuth)) <= 0.5 * window + 1e-12;
}

// Largest point budget sample_initial_points accepts for these rays.
inline std::size_t window_capacity(std::span<const FeasibleRay> feasible, double window, double center_azimuth) {
  return static_cast<std::size_t>(std::count_if(feasible.begin(), feasible.end(), [&](const FeasibleRay& r) {
    return in_window(r, window, center_azimuth);
  }));
}

// Draws n distinct rays among those whose azimuth lies within window/2 of
// `center_azimuth`, with ranges uniform on each ray's interval.
inline AdvPointSet sample_initial_points(std::span<const FeasibleRay> feasible, std::size_t n, double window,
                                         double center_azimuth, double azimuth_resolution, std::uint64_t seed) {
  if (n == 0) throw ConfigError("point budget must be at least 1");
  if (!(window > 0.0)) throw ConfigError("azimuth window must be positive");
  std::vector<const FeasibleRay*> pool;
  for (const FeasibleRay& r : feasible) {
    if (in_window(r, window, center_azimuth)) pool.push_back(&r);
  }
  if (pool.size() < n) throw InfeasibleBudgetError(n, pool.size());

  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(pool[i], pool[i + detail::bounded_index(rng, pool.size() - i)]);
  }
  pool.resize(n);
  std::sort(pool.begin(), pool.end(), [](const FeasibleRay* a, const FeasibleRay* b) { return a->ray < b->ray; });

  AdvPointSet set;
  set.azimuth_resolution = azimuth_resolution;
  set.points.reserve(n);
  for (const FeasibleRay* r : pool) {
    const double range = r->r_min + detail::unit_uniform(rng) * (r->r_max - r->r_min);
    set.points.push_back({r->ray, r->elevation, r->azimuth, range, r->r_min, r->r_max});
  }
  return set;
}

inline AdvPointSet sample_initial_points(std::span<const FeasibleRay> feasible, std::size_t n, double window,
                                         const PlacementRegion& region, const RayGrid& grid, std::uint64_t seed) {
  return sample_initial_points(feasible, n, window, region.center_azimuth(), grid.azimuth_resolution, seed);
}

// Smallest arc containing every azimuth.
inline double azimuth_extent(std::span<const double> azimuths) {
  if (azimuths.size() < 2) return 0.0;
  std::vector<double> a;
  a.reserve(azimuths.size());
  for (double v : azimuths) a.push_back(normalize_angle(v));
  std::sort(a.begin(), a.end());
  double largest_gap = a.front() + 2.0 * kPi - a.back();
  for (std::size_t i = 1; i < a.size(); ++i) largest_gap = std::max(largest_gap, a[i] - a[i - 1]);
  return std::max(0.0, 2.0 * kPi - largest_gap);
}

struct ValidationReport {
  bool one_point_per_ray = true;
  bool on_beam_grid = true;
  bool within_window = true;
  std::vector<std::size_t> duplicate_rays;
  std::vector<std::size_t> off_grid;
  std::vector<std::size_t> window_violations;
  double azimuth_extent = 0.0;

  bool passed() const { return one_point_per_ray && on_beam_grid && within_window; }
};

inline constexpr double kAngleTolerance = 1e-9;

inline ValidationReport validate_physical(const AdvPointSet& points, const BeamTable& beams, double window,
                                          double angle_tol = kAngleTolerance) {
  ValidationReport rep;
  const double res = points.azimuth_resolution;

  std::unordered_map<RayId, std::size_t, RayIdHash> seen;
  std::vector<double> azimuths;
  azimuths.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const AdvPoint& p = points.points[i];
    if (!seen.emplace(p.ray, i).second) rep.duplicate_rays.push_back(i);

    bool aligned = p.ray.beam >= 0 && static_cast<std::size_t>(p.ray.beam) < beams.size() &&
                   std::abs(p.elevation - beams[static_cast<std::size_t>(p.ray.beam)]) <= angle_tol;
    const double cells = p.azimuth / res;
    aligned = aligned && std::abs(cells - std::round(cells)) * res <= angle_tol &&
              std::abs(normalize_angle(p.azimuth - p.ray.azimuth_index * res)) <= angle_tol;
    if (!aligned) rep.off_grid.push_back(i);
    azimuths.push_back(p.azimuth);
  }
  rep.one_point_per_ray = rep.duplicate_rays.empty();
  rep.on_beam_grid = rep.off_grid.empty();

  rep.azimuth_extent = azimuth_extent(azimuths);
  if (rep.azimuth_extent > window + angle_tol) {
    rep.within_window = false;
    const auto [lo, hi] = std::minmax_element(azimuths.begin(), azimuths.end());
    rep.window_violations = {static_cast<std::size_t>(lo - azimuths.begin()),
                             static_cast<std::size_t>(hi - azimuths.begin())};
  }
  return rep;
}

// Recovers the injected-point set from Cartesian returns by snapping each to
// its nearest firing direction. Angles are kept as measured so validation can
// detect off-grid points. Points off every beam get ray.beam = -1.
inline AdvPointSet adv_points_from_cloud(std::span<const LidarPoint> points, const RayGrid& grid) {
  AdvPointSet set;
  set.azimuth_resolution = grid.azimuth_resolution;
  for (const LidarPoint& lp : points) {
    const SphericalCoord s = cart_to_sph(lp.position());
    const auto beam = grid.beams.nearest_beam(s.elevation);
    const RayId ray{beam ? *beam : -1, grid.nearest_azimuth_index(s.azimuth)};
    set.points.push_back({ray, s.elevation, s.azimuth, s.range, s.range, s.range});
  }
  return set;
}

inline constexpr double kDefaultInjectedIntensity = 0.9;

struct MergeResult {
  PointCloud cloud;                   // surviving scene points (input order), then surviving injected points
  std::vector<bool> injected_kept;    // per injected point
  std::vector<std::size_t> replaced;  // scene indices that lost their ray to an injected point
};

// Strongest-return merge: a firing direction records only its
// highest-intensity return. Ties keep the scene point.
inline MergeResult merge_strongest_return(std::span<const LidarPoint> scene, const AdvPointSet& adv,
                                          const RayGrid& grid, double adv_intensity = kDefaultInjectedIntensity) {
  MergeResult out;
  out.injected_kept.assign(adv.size(), true);

  std::unordered_map<RayId, std::size_t, RayIdHash> adv_by_ray;
  for (std::size_t j = 0; j < adv.size(); ++j) {
    if (!adv_by_ray.emplace(adv.points[j].ray, j).second) out.injected_kept[j] = false;
  }

  // Strongest scene return on each injected ray, and who sits there.
  std::vector<double> scene_best(adv.size(), -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> owner(scene.size(), adv.size());
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const auto ray = grid.ray_for(scene[i].position());
    if (!ray) continue;
    const auto it = adv_by_ray.find(*ray);
    if (it == adv_by_ray.end()) continue;
    owner[i] = it->second;
    scene_best[it->second] = std::max(scene_best[it->second], scene[i].intensity);
  }
  for (std::size_t j = 0; j < adv.size(); ++j) {
    if (out.injected_kept[j] && scene_best[j] >= adv_intensity) out.injected_kept[j] = false;
  }

  out.cloud.reserve(scene.size() + adv.size());
  for (std::size_t i = 0; i < scene.size(); ++i) {
    if (owner[i] < adv.size() && out.injected_kept[owner[i]]) {
      out.replaced.push_back(i);
      continue;
    }
    out.cloud.push_back(scene[i]);
  }
  for (std::size_t j = 0; j < adv.size(); ++j) {
    if (!out.injected_kept[j]) continue;
    const CartesianPoint p = adv.points[j].position();
    out.cloud.push_back({p.x, p.y, p.z, adv_intensity});
  }
  return out;
}

inline PointCloud strongest_return_merge(std::span<const LidarPoint> scene, const AdvPointSet& adv,
                                         const RayGrid& grid, double adv_intensity = kDefaultInjectedIntensity) {
  return merge_strongest_return(scene, adv, grid, adv_intensity).cloud;
}

}  // namespace spooflab
