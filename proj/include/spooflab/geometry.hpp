#pragma once

// LiDAR-frame geometry: spherical coordinates and oriented box overlap.
//
// Frame convention: x forward, y left, z up. Azimuth is measured from +x
// towards +y, elevation from the x-y plane towards +z.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <tuple>
#include <vector>

#include "spooflab/errors.hpp"

namespace spooflab {

inline constexpr double kPi = std::numbers::pi;

constexpr double deg_to_rad(double deg) { return deg * (kPi / 180.0); }
constexpr double rad_to_deg(double rad) { return rad * (180.0 / kPi); }

// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  a = std::remainder(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  return a;
}

struct CartesianPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend constexpr CartesianPoint operator+(CartesianPoint a, CartesianPoint b) {
    return {a.x + b.x, a.y + b.y, a.z + b.z};
  }
  friend constexpr CartesianPoint operator-(CartesianPoint a, CartesianPoint b) {
    return {a.x - b.x, a.y - b.y, a.z - b.z};
  }
  friend constexpr CartesianPoint operator*(double s, CartesianPoint a) {
    return {s * a.x, s * a.y, s * a.z};
  }
  friend constexpr bool operator==(const CartesianPoint&, const CartesianPoint&) = default;
};

inline double dot(CartesianPoint a, CartesianPoint b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(CartesianPoint a) { return std::sqrt(dot(a, a)); }

struct SphericalCoord {
  double range = 0.0;      // meters, > 0
  double azimuth = 0.0;    // radians, (-pi, pi]
  double elevation = 0.0;  // radians, [-pi/2, pi/2]
};

// Oriented box; (dx, dy, dz) are the full extents along the box's own axes
// before the yaw rotation about +z. KITTI (l, w, h) maps to (dx, dy, dz).
struct Box3D {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;
  double yaw = 0.0;

  CartesianPoint center() const { return {x, y, z}; }
  double volume() const { return dx * dy * dz; }
  double z_min() const { return z - 0.5 * dz; }
  double z_max() const { return z + 0.5 * dz; }

  friend constexpr bool operator==(const Box3D&, const Box3D&) = default;
};

inline Box3D make_box(double x, double y, double z, double dx, double dy, double dz, double yaw = 0.0) {
  if (!(dx > 0.0 && dy > 0.0 && dz > 0.0)) {
    throw ConfigError("box dimensions must be strictly positive");
  }
  return Box3D{x, y, z, dx, dy, dz, normalize_angle(yaw)};
}

inline SphericalCoord cart_to_sph(CartesianPoint p) {
  const double r = norm(p);
  if (!(r > 0.0)) throw DegeneratePointError("cannot convert the origin to spherical coordinates");
  double azimuth = (p.x == 0.0 && p.y == 0.0) ? 0.0 : std::atan2(p.y, p.x);
  if (azimuth <= -kPi) azimuth = kPi;
  const double elevation = std::asin(std::clamp(p.z / r, -1.0, 1.0));
  return {r, azimuth, elevation};
}

// Unit vector along the firing direction; also d(x,y,z)/dR.
inline CartesianPoint range_direction(const SphericalCoord& s) {
  const double ce = std::cos(s.elevation);
  return {ce * std::cos(s.azimuth), ce * std::sin(s.azimuth), std::sin(s.elevation)};
}

inline CartesianPoint sph_to_cart(const SphericalCoord& s) { return s.range * range_direction(s); }

// ---- bird's-eye-view polygons ----------------------------------------------

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

using Polygon = std::vector<Vec2>;

// Footprint corners in counter-clockwise order.
inline std::array<Vec2, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double hx = 0.5 * b.dx;
  const double hy = 0.5 * b.dy;
  const std::array<Vec2, 4> local{{{hx, hy}, {-hx, hy}, {-hx, -hy}, {hx, -hy}}};
  std::array<Vec2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.x + c * local[i].x - s * local[i].y, b.y + s * local[i].x + c * local[i].y};
  }
  return out;
}

inline double polygon_area(const Polygon& poly) {
  double twice = 0.0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    twice += a.x * b.y - b.x * a.y;
  }
  return 0.5 * std::abs(twice);
}

namespace detail {

inline double edge_side(Vec2 a, Vec2 b, Vec2 p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

inline Vec2 segment_line_hit(Vec2 p, Vec2 q, Vec2 a, Vec2 b) {
  const double sp = edge_side(a, b, p);
  const double sq = edge_side(a, b, q);
  const double t = sp / (sp - sq);
  return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
}

// Sutherland-Hodgman: clips `subject` against the convex CCW polygon `clip`.
inline Polygon clip_convex(Polygon subject, const std::array<Vec2, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2 a = clip[e];
    const Vec2 b = clip[(e + 1) % clip.size()];
    Polygon next;
    next.reserve(subject.size() + 2);
    for (std::size_t i = 0, n = subject.size(); i < n; ++i) {
      const Vec2 cur = subject[i];
      const Vec2 prev = subject[(i + n - 1) % n];
      const bool cur_in = edge_side(a, b, cur) >= 0.0;
      const bool prev_in = edge_side(a, b, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) next.push_back(segment_line_hit(prev, cur, a, b));
        next.push_back(cur);
      } else if (prev_in) {
        next.push_back(segment_line_hit(prev, cur, a, b));
      }
    }
    subject = std::move(next);
  }
  return subject;
}

// Canonical argument order so that f(a, b) and f(b, a) run identical arithmetic.
inline bool box_less(const Box3D& a, const Box3D& b) {
  return std::tie(a.x, a.y, a.z, a.dx, a.dy, a.dz, a.yaw) < std::tie(b.x, b.y, b.z, b.dx, b.dy, b.dz, b.yaw);
}

}  // namespace detail

inline constexpr double kMinIntersectionArea = 1e-12;

inline double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const Box3D& first = detail::box_less(b, a) ? b : a;
  const Box3D& second = detail::box_less(b, a) ? a : b;
  // Circumscribed circles disjoint => footprints disjoint.
  const double ra = 0.5 * std::hypot(first.dx, first.dy);
  const double rb = 0.5 * std::hypot(second.dx, second.dy);
  if (std::hypot(first.x - second.x, first.y - second.y) > ra + rb) return 0.0;

  const auto sc = bev_corners(first);
  const auto cc = bev_corners(second);
  const double area = polygon_area(detail::clip_convex(Polygon(sc.begin(), sc.end()), cc));
  return area < kMinIntersectionArea ? 0.0 : area;
}

inline double z_overlap(const Box3D& a, const Box3D& b) {
  return std::max(0.0, std::min(a.z_max(), b.z_max()) - std::max(a.z_min(), b.z_min()));
}

inline double iou3d(const Box3D& a, const Box3D& b) {
  if (a == b) return 1.0;
  const double h = z_overlap(a, b);
  if (h <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * h;
  if (inter <= 0.0) return 0.0;
  // Sum in canonical order keeps the union bit-identical under argument swap.
  const double va = detail::box_less(b, a) ? b.volume() : a.volume();
  const double vb = detail::box_less(b, a) ? a.volume() : b.volume();
  const double uni = va + vb - inter;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Point-in-box test used by oracles and synthetic scene generation.
inline bool box_contains(const Box3D& b, CartesianPoint p, double slack = 0.0) {
  const double c = std::cos(b.yaw);
  const double s = std::sin(b.yaw);
  const double rx = p.x - b.x;
  const double ry = p.y - b.y;
  const double u = c * rx + s * ry;
  const double v = -s * rx + c * ry;
  return std::abs(u) <= 0.5 * b.dx + slack && std::abs(v) <= 0.5 * b.dy + slack &&
         std::abs(p.z - b.z) <= 0.5 * b.dz + slack;
}

}  // namespace spooflab
