#pragma once

// Differentiable anchor-based surrogate detector.
//
// Anchors tile a bird's-eye region of interest at a fixed stride, one per
// yaw in the configured set, all sharing a template size and center height.
// For an anchor box B and its "above" box A (B lifted by its own height,
// footprint widened to at least the placement side):
//
//   S_in    = sum_p m(p; B)
//   S_above = sum_p m(p; A)
//   c       = sigmoid(b0 + b1 * S_in - b2 * S_above)
//
// with m the per-axis sigmoid membership sigmoid(k (d/2 - |u|)) multiplied
// over the box axes. Contributions below 1e-9 are dropped.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spooflab/detector.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/point_cloud.hpp"

namespace spooflab {

inline double sigmoid(double t) {
  if (t >= 0.0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline constexpr double kMembershipCutoff = 1e-9;

struct SurrogateParams {
  // Weights as calibrated on the shipped synthetic fixtures.
  double bias = -1.0;                          // b0
  double inside_weight = 0.04525483399593905;  // b1 = 0.001 * 2^5.5, per unit of membership
  double above_weight = 0.128;                 // b2 = 0.001 * 2^7, per unit of membership
  double sharpness = 4.0;       // 1/m
  double anchor_stride = 0.5;   // m
  double template_dx = 3.9;
  double template_dy = 1.6;
  double template_dz = 1.56;
  std::vector<double> yaws{0.0, 0.5 * kPi};
  double operating_threshold = 0.3;
  // Bird's-eye region tiled by anchor centers.
  double roi_x_min = 0.0;
  double roi_x_max = 40.0;
  double roi_y_min = -20.0;
  double roi_y_max = 20.0;
  // Anchor center height: a 1.56 m box resting on ground 1.73 m below the sensor.
  double anchor_z = -0.95;
  double placement_side = 3.6;

  void validate() const {
    if (!(inside_weight > 0.0 && above_weight > 0.0 && sharpness > 0.0 && anchor_stride > 0.0)) {
      throw ConfigError("surrogate weights, sharpness and stride must be positive");
    }
    if (!(template_dx > 0.0 && template_dy > 0.0 && template_dz > 0.0)) {
      throw ConfigError("surrogate template dims must be positive");
    }
    if (yaws.empty()) throw ConfigError("surrogate yaw set is empty");
    if (!(operating_threshold >= 0.0 && operating_threshold <= 1.0)) {
      throw ConfigError("operating threshold must lie in [0, 1]");
    }
    if (!(roi_x_max >= roi_x_min && roi_y_max >= roi_y_min)) throw ConfigError("empty surrogate region of interest");
  }

  friend bool operator==(const SurrogateParams&, const SurrogateParams&) = default;
};

// Smooth box indicator in (0, 1).
inline double soft_membership(CartesianPoint p, const Box3D& box, double kappa) {
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const CartesianPoint r = p - box.center();
  const double u[3] = {c * r.x + s * r.y, -s * r.x + c * r.y, r.z};
  const double h[3] = {0.5 * box.dx, 0.5 * box.dy, 0.5 * box.dz};
  double m = 1.0;
  for (int a = 0; a < 3; ++a) m *= sigmoid(kappa * (h[a] - std::abs(u[a])));
  return m;
}

// Sparse d(score)/d(point) rows for the points of interest.
struct PointGradient {
  struct Entry {
    std::size_t anchor = 0;
    CartesianPoint d_score;
  };
  std::vector<std::size_t> points;          // indices into the input cloud
  std::vector<std::vector<Entry>> entries;  // parallel to `points`
};

class SurrogateDetector final : public Detector {
 public:
  // Geometry of one anchor class (a yaw): half extents of the inside and
  // above boxes in the anchor frame, or in world axes when axis aligned.
  struct Shape {
    double yaw = 0.0;
    double cos_yaw = 1.0;
    double sin_yaw = 0.0;
    bool axis_aligned = true;
    double in_half[3] = {0.0, 0.0, 0.0};
    double above_half[3] = {0.0, 0.0, 0.0};
    double above_dz = 0.0;  // vertical offset of the above box
    double reach = 0.0;     // bird's-eye radius beyond which both memberships vanish
  };

  explicit SurrogateDetector(SurrogateParams params) : params_(std::move(params)) {
    params_.validate();
    cut_ = -std::log(kMembershipCutoff) + 0.1;  // sigmoid(-cut_) < cutoff
    nx_ = static_cast<std::size_t>(std::floor((params_.roi_x_max - params_.roi_x_min) / params_.anchor_stride + 1e-9)) + 1;
    ny_ = static_cast<std::size_t>(std::floor((params_.roi_y_max - params_.roi_y_min) / params_.anchor_stride + 1e-9)) + 1;
    const double margin = cut_ / params_.sharpness;
    for (double yaw : params_.yaws) {
      Shape sh;
      sh.yaw = normalize_angle(yaw);
      sh.cos_yaw = std::cos(sh.yaw);
      sh.sin_yaw = std::sin(sh.yaw);
      const double ax = 0.5 * params_.template_dx;
      const double ay = 0.5 * params_.template_dy;
      const double bx = 0.5 * std::max(params_.template_dx, params_.placement_side);
      const double by = 0.5 * std::max(params_.template_dy, params_.placement_side);
      const double hz = 0.5 * params_.template_dz;
      if (std::abs(sh.sin_yaw) < 1e-12) {
        sh.in_half[0] = ax, sh.in_half[1] = ay;
        sh.above_half[0] = bx, sh.above_half[1] = by;
      } else if (std::abs(sh.cos_yaw) < 1e-12) {
        sh.in_half[0] = ay, sh.in_half[1] = ax;
        sh.above_half[0] = by, sh.above_half[1] = bx;
      } else {
        sh.axis_aligned = false;
        sh.in_half[0] = ax, sh.in_half[1] = ay;
        sh.above_half[0] = bx, sh.above_half[1] = by;
      }
      sh.in_half[2] = hz;
      sh.above_half[2] = hz;
      sh.above_dz = params_.template_dz;
      sh.reach = std::hypot(bx, by) + std::hypot(margin, margin);
      shapes_.push_back(sh);
    }
  }

  const SurrogateParams& params() const { return params_; }
  std::string name() const override { return "surrogate"; }

  std::size_t anchor_count() const { return nx_ * ny_ * shapes_.size(); }

  Box3D anchor_box(std::size_t a) const {
    const std::size_t k = a % shapes_.size();
    const std::size_t cell = a / shapes_.size();
    return Box3D{anchor_x(cell / ny_), anchor_y(cell % ny_), params_.anchor_z, params_.template_dx,
                 params_.template_dy, params_.template_dz, shapes_[k].yaw};
  }

  Box3D above_box(std::size_t a) const {
    Box3D b = anchor_box(a);
    b.z += params_.template_dz;
    b.dx = std::max(b.dx, params_.placement_side);
    b.dy = std::max(b.dy, params_.placement_side);
    return b;
  }

  std::vector<Box3D> anchors() const {
    std::vector<Box3D> out(anchor_count());
    for (std::size_t a = 0; a < out.size(); ++a) out[a] = anchor_box(a);
    return out;
  }

  double score_from_sums(double s_in, double s_above) const {
    return sigmoid(params_.bias + params_.inside_weight * s_in - params_.above_weight * s_above);
  }

  // Membership sums over every anchor.
  struct Sums {
    std::vector<double> inside;
    std::vector<double> above;
  };

  Sums accumulate(std::span<const LidarPoint> cloud) const {
    Sums s{std::vector<double>(anchor_count(), 0.0), std::vector<double>(anchor_count(), 0.0)};
    for (const LidarPoint& p : cloud) add_point(p.position(), s);
    return s;
  }

  void add_point(CartesianPoint p, Sums& s) const {
    for_each_contribution(p, [&](std::size_t a, double m_in, double m_above) {
      if (m_in >= kMembershipCutoff) s.inside[a] += m_in;
      if (m_above >= kMembershipCutoff) s.above[a] += m_above;
    });
  }

  std::vector<Proposal> detect(const DetectorInput& input) override { return detect_cloud(input.cloud); }

  std::vector<Proposal> detect_cloud(std::span<const LidarPoint> cloud) const {
    const Sums s = accumulate(cloud);
    std::vector<Proposal> out(anchor_count());
    for (std::size_t a = 0; a < out.size(); ++a) out[a] = {anchor_box(a), score_from_sums(s.inside[a], s.above[a])};
    return out;
  }

  // Analytic d(score)/d(x, y, z) through the sigmoid and the memberships.
  PointGradient point_gradients(std::span<const LidarPoint> cloud, std::span<const std::size_t> points) const {
    const Sums s = accumulate(cloud);
    PointGradient g;
    g.points.assign(points.begin(), points.end());
    g.entries.resize(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      const CartesianPoint p = cloud[points[i]].position();
      for_each_anchor_near(p, [&](std::size_t a) {
        const auto in = membership_grad(a, p, false);
        const auto ab = membership_grad(a, p, true);
        const bool use_in = in.m >= kMembershipCutoff;
        const bool use_ab = ab.m >= kMembershipCutoff;
        if (!use_in && !use_ab) return;
        const double c = score_from_sums(s.inside[a], s.above[a]);
        const double dc = c * (1.0 - c);
        CartesianPoint d{};
        if (use_in) d = d + (params_.inside_weight * dc) * in.grad;
        if (use_ab) d = d - (params_.above_weight * dc) * ab.grad;
        g.entries[i].push_back({a, d});
      });
    }
    return g;
  }

  struct MembershipGrad {
    double m = 0.0;
    CartesianPoint grad;
  };

  // Membership of p in anchor a's inside (above = false) or above box.
  double membership(std::size_t a, CartesianPoint p, bool above) const {
    const Shape& sh = shapes_[a % shapes_.size()];
    const std::size_t cell = a / shapes_.size();
    const double* h = above ? sh.above_half : sh.in_half;
    const double cz = params_.anchor_z + (above ? sh.above_dz : 0.0);
    double u[2];
    local_xy(sh, p.x - anchor_x(cell / ny_), p.y - anchor_y(cell % ny_), u);
    const double fx = factor(u[0], h[0]);
    if (fx == 0.0) return 0.0;
    const double fy = factor(u[1], h[1]);
    if (fy == 0.0) return 0.0;
    const double fz = factor(p.z - cz, h[2]);
    return fx * fy * fz;
  }

  MembershipGrad membership_grad(std::size_t a, CartesianPoint p, bool above) const {
    const Shape& sh = shapes_[a % shapes_.size()];
    const std::size_t cell = a / shapes_.size();
    const double* h = above ? sh.above_half : sh.in_half;
    const double cz = params_.anchor_z + (above ? sh.above_dz : 0.0);
    double u[3];
    local_xy(sh, p.x - anchor_x(cell / ny_), p.y - anchor_y(cell % ny_), u);
    u[2] = p.z - cz;
    const double f[3] = {factor(u[0], h[0]), factor(u[1], h[1]), factor(u[2], h[2])};
    MembershipGrad out;
    if (f[0] == 0.0 || f[1] == 0.0) return out;
    out.m = f[0] * f[1] * f[2];
    double g[3];
    for (int k = 0; k < 3; ++k) {
      const double sign = u[k] > 0.0 ? 1.0 : (u[k] < 0.0 ? -1.0 : 0.0);
      g[k] = -params_.sharpness * out.m * (1.0 - f[k]) * sign;
    }
    if (sh.axis_aligned) {
      out.grad = {g[0], g[1], g[2]};
    } else {
      out.grad = {sh.cos_yaw * g[0] - sh.sin_yaw * g[1], sh.sin_yaw * g[0] + sh.cos_yaw * g[1], g[2]};
    }
    return out;
  }

  // Calls fn(anchor) for every anchor whose boxes may hold p above the cutoff.
  template <typename Fn>
  void for_each_anchor_near(CartesianPoint p, Fn&& fn) const {
    double reach = 0.0;
    for (const Shape& sh : shapes_) reach = std::max(reach, sh.reach);
    std::size_t ix0, ix1, iy0, iy1;
    if (!cell_range(p.x, params_.roi_x_min, nx_, reach, ix0, ix1)) return;
    if (!cell_range(p.y, params_.roi_y_min, ny_, reach, iy0, iy1)) return;
    for (std::size_t ix = ix0; ix <= ix1; ++ix) {
      for (std::size_t iy = iy0; iy <= iy1; ++iy) {
        for (std::size_t k = 0; k < shapes_.size(); ++k) fn((ix * ny_ + iy) * shapes_.size() + k);
      }
    }
  }

  // Calls fn(anchor, m_in, m_above) for anchors near p (values may be below the cutoff).
  template <typename Fn>
  void for_each_contribution(CartesianPoint p, Fn&& fn) const {
    for (std::size_t k = 0; k < shapes_.size(); ++k) {
      const Shape& sh = shapes_[k];
      if (sh.axis_aligned) {
        separable_pass(p, k, fn);
      } else {
        std::size_t ix0, ix1, iy0, iy1;
        if (!cell_range(p.x, params_.roi_x_min, nx_, sh.reach, ix0, ix1)) continue;
        if (!cell_range(p.y, params_.roi_y_min, ny_, sh.reach, iy0, iy1)) continue;
        for (std::size_t ix = ix0; ix <= ix1; ++ix) {
          for (std::size_t iy = iy0; iy <= iy1; ++iy) {
            const std::size_t a = (ix * ny_ + iy) * shapes_.size() + k;
            fn(a, membership(a, p, false), membership(a, p, true));
          }
        }
      }
    }
  }

  struct AnchorIndex {
    std::size_t ix = 0;
    std::size_t iy = 0;
    std::size_t shape = 0;
  };

  AnchorIndex anchor_index(std::size_t a) const {
    const std::size_t cell = a / shapes_.size();
    return {cell / ny_, cell % ny_, a % shapes_.size()};
  }
  const Shape& shape(std::size_t k) const { return shapes_[k]; }
  double anchor_x(std::size_t ix) const { return params_.roi_x_min + static_cast<double>(ix) * params_.anchor_stride; }
  double anchor_y(std::size_t iy) const { return params_.roi_y_min + static_cast<double>(iy) * params_.anchor_stride; }

  // Per-axis membership factor; exactly 0 once negligible.
  double factor(double u, double half) const {
    const double t = params_.sharpness * (half - std::abs(u));
    if (t < -cut_) return 0.0;
    return sigmoid(t);
  }

 private:

  static void local_xy(const Shape& sh, double rx, double ry, double* u) {
    if (sh.axis_aligned) {
      u[0] = rx;
      u[1] = ry;
    } else {
      u[0] = sh.cos_yaw * rx + sh.sin_yaw * ry;
      u[1] = -sh.sin_yaw * rx + sh.cos_yaw * ry;
    }
  }

  bool cell_range(double v, double origin, std::size_t n, double reach, std::size_t& lo, std::size_t& hi) const {
    const double a = std::ceil((v - reach - origin) / params_.anchor_stride);
    const double b = std::floor((v + reach - origin) / params_.anchor_stride);
    const double first = std::max(a, 0.0);
    const double last = std::min(b, static_cast<double>(n) - 1.0);
    if (last < first) return false;
    lo = static_cast<std::size_t>(first);
    hi = static_cast<std::size_t>(last);
    return true;
  }

  // Axis-aligned anchors factor per world axis; evaluates each column and row
  // once. Products match membership() bit for bit.
  template <typename Fn>
  void separable_pass(CartesianPoint p, std::size_t k, Fn& fn) const {
    const Shape& sh = shapes_[k];
    const double margin = cut_ / params_.sharpness;
    const double reach_x = std::max(sh.in_half[0], sh.above_half[0]) + margin;
    const double reach_y = std::max(sh.in_half[1], sh.above_half[1]) + margin;
    std::size_t ix0, ix1, iy0, iy1;
    if (!cell_range(p.x, params_.roi_x_min, nx_, reach_x, ix0, ix1)) return;
    if (!cell_range(p.y, params_.roi_y_min, ny_, reach_y, iy0, iy1)) return;

    const double fz_in = factor(p.z - params_.anchor_z, sh.in_half[2]);
    const double fz_ab = factor(p.z - (params_.anchor_z + sh.above_dz), sh.above_half[2]);
    if (fz_in == 0.0 && fz_ab == 0.0) return;

    thread_local std::vector<double> fx_in, fx_ab, fy_in, fy_ab;
    fx_in.resize(ix1 - ix0 + 1);
    fx_ab.resize(ix1 - ix0 + 1);
    fy_in.resize(iy1 - iy0 + 1);
    fy_ab.resize(iy1 - iy0 + 1);
    for (std::size_t ix = ix0; ix <= ix1; ++ix) {
      const double u = p.x - anchor_x(ix);
      fx_in[ix - ix0] = factor(u, sh.in_half[0]);
      fx_ab[ix - ix0] = factor(u, sh.above_half[0]);
    }
    for (std::size_t iy = iy0; iy <= iy1; ++iy) {
      const double u = p.y - anchor_y(iy);
      fy_in[iy - iy0] = factor(u, sh.in_half[1]);
      fy_ab[iy - iy0] = factor(u, sh.above_half[1]);
    }
    for (std::size_t ix = ix0; ix <= ix1; ++ix) {
      const double ax_in = fx_in[ix - ix0];
      const double ax_ab = fx_ab[ix - ix0];
      if (ax_in == 0.0 && ax_ab == 0.0) continue;
      for (std::size_t iy = iy0; iy <= iy1; ++iy) {
        const double ay_in = fy_in[iy - iy0];
        const double ay_ab = fy_ab[iy - iy0];
        const double m_in = (ax_in == 0.0 || ay_in == 0.0) ? 0.0 : ax_in * ay_in * fz_in;
        const double m_ab = (ax_ab == 0.0 || ay_ab == 0.0) ? 0.0 : ax_ab * ay_ab * fz_ab;
        if (m_in < kMembershipCutoff && m_ab < kMembershipCutoff) continue;
        fn((ix * ny_ + iy) * shapes_.size() + k, m_in, m_ab);
      }
    }
  }

  SurrogateParams params_;
  std::vector<Shape> shapes_;
  std::size_t nx_ = 0;
  std::size_t ny_ = 0;
  double cut_ = 0.0;
};

inline std::vector<Proposal> surrogate_detect(const DetectorInput& input, const SurrogateParams& params) {
  return SurrogateDetector(params).detect_cloud(input.cloud);
}

inline PointGradient surrogate_point_gradients(const DetectorInput& input, const SurrogateParams& params,
                                               std::span<const std::size_t> points) {
  return SurrogateDetector(params).point_gradients(input.cloud, points);
}

// Surrogate scores restricted to a fixed subset of anchors, over a fixed base
// cloud plus a varying set of appended points. Used by the attack loop;
// reproduces full-cloud scores bit for bit because every anchor sees the same
// sequence of additions and the same factor products.
class FocusedSurrogate {
 public:
  FocusedSurrogate(const SurrogateDetector& detector, std::span<const LidarPoint> base,
                   std::vector<std::size_t> focus)
      : det_(&detector), focus_(std::move(focus)) {
    base_in_.assign(focus_.size(), 0.0);
    base_above_.assign(focus_.size(), 0.0);
    if (focus_.empty()) return;
    // Bird's-eye bounds outside which no focus anchor can receive a contribution.
    double reach = 0.0;
    for (std::size_t i = 0; i < focus_.size(); ++i) {
      const Box3D b = detector.above_box(focus_[i]);
      reach = std::max(reach, std::hypot(0.5 * b.dx, 0.5 * b.dy));
      lo_x_ = std::min(lo_x_, b.x);
      hi_x_ = std::max(hi_x_, b.x);
      lo_y_ = std::min(lo_y_, b.y);
      hi_y_ = std::max(hi_y_, b.y);
    }
    const double margin = reach + std::sqrt(2.0) * (-std::log(kMembershipCutoff) + 0.1) / detector.params().sharpness;
    lo_x_ -= margin, hi_x_ += margin, lo_y_ -= margin, hi_y_ += margin;

    // Axis-aligned anchors share per-axis factors: index the distinct
    // (column, shape) and (row, shape) pairs once.
    slots_.resize(focus_.size());
    for (std::size_t i = 0; i < focus_.size(); ++i) {
      const auto idx = detector.anchor_index(focus_[i]);
      Slot& sl = slots_[i];
      sl.shape = idx.shape;
      sl.separable = detector.shape(idx.shape).axis_aligned;
      if (!sl.separable) continue;
      sl.col = intern(cols_, {idx.ix, idx.shape});
      sl.row = intern(rows_, {idx.iy, idx.shape});
    }
    for (const LidarPoint& p : base) add(p.position(), base_in_, base_above_);
  }

  std::span<const std::size_t> focus() const { return focus_; }
  const SurrogateDetector& detector() const { return *det_; }

  std::vector<double> scores(std::span<const CartesianPoint> added) const {
    std::vector<double> in = base_in_;
    std::vector<double> above = base_above_;
    for (const CartesianPoint& p : added) add(p, in, above);
    std::vector<double> out(focus_.size());
    for (std::size_t i = 0; i < focus_.size(); ++i) out[i] = det_->score_from_sums(in[i], above[i]);
    return out;
  }

  // sum_f weight_f * d score_f / d added_j, for every appended point j.
  std::vector<CartesianPoint> weighted_gradient(std::span<const CartesianPoint> added,
                                                std::span<const double> scores,
                                                std::span<const double> weights) const {
    const SurrogateParams& prm = det_->params();
    std::vector<CartesianPoint> out(added.size());
    bool any = false;
    for (double w : weights) any = any || w != 0.0;
    if (!any) return out;
    for (std::size_t j = 0; j < added.size(); ++j) {
      const CartesianPoint p = added[j];
      if (!near(p)) continue;
      fill_factors(p);
      CartesianPoint acc{};
      for (std::size_t i = 0; i < focus_.size(); ++i) {
        if (weights[i] == 0.0) continue;
        SurrogateDetector::MembershipGrad in;
        SurrogateDetector::MembershipGrad ab;
        if (slots_[i].separable) {
          in = separable_grad(i, false);
          ab = separable_grad(i, true);
        } else {
          in = det_->membership_grad(focus_[i], p, false);
          ab = det_->membership_grad(focus_[i], p, true);
        }
        const double dc = scores[i] * (1.0 - scores[i]);
        if (in.m >= kMembershipCutoff) acc = acc + (weights[i] * prm.inside_weight * dc) * in.grad;
        if (ab.m >= kMembershipCutoff) acc = acc - (weights[i] * prm.above_weight * dc) * ab.grad;
      }
      out[j] = acc;
    }
    return out;
  }

 private:
  struct Slot {
    std::size_t shape = 0;
    bool separable = false;
    std::size_t col = 0;
    std::size_t row = 0;
  };
  struct Key {
    std::size_t cell = 0;
    std::size_t shape = 0;
    bool operator==(const Key&) const = default;
  };
  struct Factors {
    double u = 0.0;
    double in = 0.0;
    double above = 0.0;
  };

  static std::size_t intern(std::vector<Key>& keys, Key k) {
    const auto it = std::find(keys.begin(), keys.end(), k);
    if (it != keys.end()) return static_cast<std::size_t>(it - keys.begin());
    keys.push_back(k);
    return keys.size() - 1;
  }

  bool near(CartesianPoint p) const { return p.x >= lo_x_ && p.x <= hi_x_ && p.y >= lo_y_ && p.y <= hi_y_; }

  void fill_factors(CartesianPoint p) const {
    const SurrogateParams& prm = det_->params();
    fx_.resize(cols_.size());
    fy_.resize(rows_.size());
    for (std::size_t c = 0; c < cols_.size(); ++c) {
      const auto& sh = det_->shape(cols_[c].shape);
      const double u = p.x - det_->anchor_x(cols_[c].cell);
      fx_[c] = {u, det_->factor(u, sh.in_half[0]), det_->factor(u, sh.above_half[0])};
    }
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      const auto& sh = det_->shape(rows_[r].shape);
      const double u = p.y - det_->anchor_y(rows_[r].cell);
      fy_[r] = {u, det_->factor(u, sh.in_half[1]), det_->factor(u, sh.above_half[1])};
    }
    const std::size_t nshape = prm.yaws.size();
    fz_.resize(nshape);
    fz_above_u_.resize(nshape);
    for (std::size_t k = 0; k < nshape; ++k) {
      const auto& sh = det_->shape(k);
      const double u_in = p.z - prm.anchor_z;
      const double u_ab = p.z - (prm.anchor_z + sh.above_dz);
      fz_[k] = {u_in, det_->factor(u_in, sh.in_half[2]), det_->factor(u_ab, sh.above_half[2])};
      fz_above_u_[k] = u_ab;
    }
  }

  SurrogateDetector::MembershipGrad separable_grad(std::size_t i, bool above) const {
    const Slot& sl = slots_[i];
    const Factors& x = fx_[sl.col];
    const Factors& y = fy_[sl.row];
    const Factors& z = fz_[sl.shape];
    const double f[3] = {above ? x.above : x.in, above ? y.above : y.in, above ? z.above : z.in};
    const double u[3] = {x.u, y.u, above ? fz_above_u_[sl.shape] : z.u};
    SurrogateDetector::MembershipGrad out;
    if (f[0] == 0.0 || f[1] == 0.0) return out;
    out.m = f[0] * f[1] * f[2];
    double g[3];
    for (int k = 0; k < 3; ++k) {
      const double sign = u[k] > 0.0 ? 1.0 : (u[k] < 0.0 ? -1.0 : 0.0);
      g[k] = -det_->params().sharpness * out.m * (1.0 - f[k]) * sign;
    }
    out.grad = {g[0], g[1], g[2]};
    return out;
  }

  void add(CartesianPoint p, std::vector<double>& in, std::vector<double>& above) const {
    if (!near(p)) return;
    fill_factors(p);
    for (std::size_t i = 0; i < focus_.size(); ++i) {
      double m_in;
      double m_ab;
      const Slot& sl = slots_[i];
      if (sl.separable) {
        const Factors& x = fx_[sl.col];
        const Factors& y = fy_[sl.row];
        const Factors& z = fz_[sl.shape];
        m_in = (x.in == 0.0 || y.in == 0.0) ? 0.0 : x.in * y.in * z.in;
        m_ab = (x.above == 0.0 || y.above == 0.0) ? 0.0 : x.above * y.above * z.above;
      } else {
        m_in = det_->membership(focus_[i], p, false);
        m_ab = det_->membership(focus_[i], p, true);
      }
      if (m_in >= kMembershipCutoff) in[i] += m_in;
      if (m_ab >= kMembershipCutoff) above[i] += m_ab;
    }
  }

  const SurrogateDetector* det_;
  std::vector<std::size_t> focus_;
  std::vector<Slot> slots_;
  std::vector<Key> cols_;
  std::vector<Key> rows_;
  std::vector<double> base_in_;
  std::vector<double> base_above_;
  double lo_x_ = 1e300, hi_x_ = -1e300, lo_y_ = 1e300, hi_y_ = -1e300;
  // Scratch for the current point.
  mutable std::vector<Factors> fx_, fy_, fz_;
  mutable std::vector<double> fz_above_u_;
};

}  // namespace spooflab
