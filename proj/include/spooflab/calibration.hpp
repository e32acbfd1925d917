#pragma once

// Grid search for the surrogate's (bias, inside weight, above weight) so that
// every fixture car is detected when clean and suppressed once a full point
// budget is injected above it. Membership sums do not depend on the three
// weights, so they are computed once per car and the search is arithmetic.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spooflab/attack.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/lidar_model.hpp"
#include "spooflab/scene.hpp"
#include "spooflab/surrogate.hpp"

namespace spooflab {

struct CalibrationGrid {
  std::vector<double> biases;
  std::vector<double> inside_weights;
  std::vector<double> above_weights;

  // bias in {-4, -3.5, ..., -1}; weights 0.001 * 2^(k/4) for k = 0..48.
  static CalibrationGrid standard() {
    CalibrationGrid g;
    for (int k = 0; k <= 6; ++k) g.biases.push_back(-4.0 + 0.5 * k);
    for (int k = 0; k <= 48; ++k) {
      const double w = 0.001 * std::exp2(k / 4.0);
      g.inside_weights.push_back(w);
      g.above_weights.push_back(w);
    }
    return g;
  }
};

struct CalibrationOptions {
  CalibrationGrid grid = CalibrationGrid::standard();
  SurrogateParams base{};  // everything except the three searched weights
  double clean_min = 0.8;
  double attacked_max = 0.2;
  std::size_t points = 200;
  std::uint64_t seed = 0;
  double window = kDefaultWindow;
  double azimuth_resolution = deg_to_rad(0.2);
  double injected_intensity = kDefaultInjectedIntensity;
};

// Membership sums at one car's best-overlapping anchor.
struct CalibrationTarget {
  std::string scene;
  std::size_t car = 0;
  std::size_t anchor = 0;
  double iou = 0.0;
  double clean_inside = 0.0;
  double clean_above = 0.0;
  std::optional<double> attacked_inside;  // absent when the budget does not fit above the car
  std::optional<double> attacked_above;
};

struct CalibrationResult {
  SurrogateParams params;
  double margin = 0.0;  // smallest logit slack over all constraints
  std::vector<CalibrationTarget> targets;
};

class CalibrationFailureError : public Error {
 public:
  CalibrationFailureError(const std::string& what, std::optional<SurrogateParams> best, double margin)
      : Error(what), best_(std::move(best)), margin_(margin) {}
  const std::optional<SurrogateParams>& best() const { return best_; }
  double margin() const { return margin_; }

 private:
  std::optional<SurrogateParams> best_;
  double margin_;
};

inline std::vector<CalibrationTarget> calibration_targets(std::span<const LabeledScene> scenes,
                                                          const CalibrationOptions& opt) {
  const SurrogateDetector det(opt.base);
  const RayGrid grid{hdl64e_beam_table(), opt.azimuth_resolution};
  std::vector<CalibrationTarget> out;
  std::uint64_t car_counter = 0;
  for (const LabeledScene& scene : scenes) {
    if (scene.cars.empty()) continue;
    const SurrogateDetector::Sums clean = det.accumulate(scene.cloud);
    for (std::size_t c = 0; c < scene.cars.size(); ++c, ++car_counter) {
      const Box3D& car = scene.cars[c];
      CalibrationTarget t;
      t.scene = scene.id;
      t.car = c;
      const double reach = 0.5 * std::hypot(car.dx, car.dy) +
                           0.5 * std::hypot(opt.base.template_dx, opt.base.template_dy);
      for (std::size_t a = 0; a < det.anchor_count(); ++a) {
        const Box3D b = det.anchor_box(a);
        if (std::hypot(b.x - car.x, b.y - car.y) > reach) continue;
        const double iou = iou3d(car, b);
        if (iou > t.iou) t.iou = iou, t.anchor = a;
      }
      if (t.iou <= 0.0) continue;  // outside the anchor grid
      t.clean_inside = clean.inside[t.anchor];
      t.clean_above = clean.above[t.anchor];

      const PlacementRegion region = placement_region_for(car, opt.base.placement_side);
      const std::vector<FeasibleRay> feasible = feasible_rays(region, grid);
      try {
        const AdvPointSet adv = sample_initial_points(feasible, opt.points, opt.window, region, grid,
                                                      detail::splitmix64(opt.seed + car_counter));
        const PointCloud merged = strongest_return_merge(scene.cloud, adv, grid, opt.injected_intensity);
        double in = 0.0;
        double above = 0.0;
        for (const LidarPoint& p : merged) {
          const double m_in = det.membership(t.anchor, p.position(), false);
          const double m_ab = det.membership(t.anchor, p.position(), true);
          if (m_in >= kMembershipCutoff) in += m_in;
          if (m_ab >= kMembershipCutoff) above += m_ab;
        }
        t.attacked_inside = in;
        t.attacked_above = above;
      } catch (const InfeasibleBudgetError&) {
      }
      out.push_back(t);
    }
  }
  return out;
}

inline double calibration_margin(std::span<const CalibrationTarget> targets, double b0, double b1, double b2,
                                 double clean_logit, double attacked_logit) {
  double margin = std::numeric_limits<double>::infinity();
  for (const CalibrationTarget& t : targets) {
    margin = std::min(margin, b0 + b1 * t.clean_inside - b2 * t.clean_above - clean_logit);
    if (t.attacked_inside) {
      margin = std::min(margin, attacked_logit - (b0 + b1 * *t.attacked_inside - b2 * *t.attacked_above));
    }
  }
  return margin;
}

// Picks the smallest above weight for which some (bias, inside weight)
// satisfies every constraint; among those, the largest worst-case margin.
inline CalibrationResult calibrate_surrogate(std::span<const LabeledScene> scenes,
                                             const CalibrationOptions& opt = {}) {
  opt.base.validate();
  const std::vector<CalibrationTarget> targets = calibration_targets(scenes, opt);
  if (targets.empty()) throw CalibrationFailureError("calibration fixtures contain no usable cars", std::nullopt, 0.0);

  const double clean_logit = logit(opt.clean_min);
  const double attacked_logit = logit(opt.attacked_max);
  std::optional<SurrogateParams> best;
  double best_margin = -std::numeric_limits<double>::infinity();
  auto with = [&](double b0, double b1, double b2) {
    SurrogateParams p = opt.base;
    p.bias = b0;
    p.inside_weight = b1;
    p.above_weight = b2;
    return p;
  };

  for (double b2 : opt.grid.above_weights) {
    double level_margin = -std::numeric_limits<double>::infinity();
    SurrogateParams level_best;
    for (double b0 : opt.grid.biases) {
      for (double b1 : opt.grid.inside_weights) {
        const double m = calibration_margin(targets, b0, b1, b2, clean_logit, attacked_logit);
        if (m > level_margin) level_margin = m, level_best = with(b0, b1, b2);
      }
    }
    if (level_margin >= 0.0) return {level_best, level_margin, targets};
    if (level_margin > best_margin) best_margin = level_margin, best = level_best;
  }
  throw CalibrationFailureError("no grid point satisfies every calibration constraint (best margin " +
                                    std::to_string(best_margin) + ")",
                                best, best_margin);
}

// ---- params file -------------------------------------------------------------

// Flat "key = value" text; '#' starts a comment.
inline std::map<std::string, std::string, std::less<>> parse_key_values(std::string_view text,
                                                                        const std::string& origin = "<memory>") {
  std::map<std::string, std::string, std::less<>> out;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto trim = [](std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
  };
  while (pos <= text.size()) {
    const std::size_t nl = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (const std::size_t hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw MalformedFileError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw MalformedFileError(origin + ":" + std::to_string(line_no) + ": empty key");
    out[key] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

inline std::string format_surrogate_params(const SurrogateParams& p) {
  using kitti::format_double;
  std::string yaws;
  for (std::size_t i = 0; i < p.yaws.size(); ++i) yaws += (i ? "," : "") + format_double(p.yaws[i]);
  std::string out;
  auto emit = [&](const char* key, const std::string& v) { out += std::string(key) + " = " + v + "\n"; };
  emit("bias", format_double(p.bias));
  emit("inside_weight", format_double(p.inside_weight));
  emit("above_weight", format_double(p.above_weight));
  emit("sharpness", format_double(p.sharpness));
  emit("anchor_stride", format_double(p.anchor_stride));
  emit("template_dx", format_double(p.template_dx));
  emit("template_dy", format_double(p.template_dy));
  emit("template_dz", format_double(p.template_dz));
  emit("yaws", yaws);
  emit("operating_threshold", format_double(p.operating_threshold));
  emit("roi_x_min", format_double(p.roi_x_min));
  emit("roi_x_max", format_double(p.roi_x_max));
  emit("roi_y_min", format_double(p.roi_y_min));
  emit("roi_y_max", format_double(p.roi_y_max));
  emit("anchor_z", format_double(p.anchor_z));
  emit("placement_side", format_double(p.placement_side));
  return out;
}

// Missing keys keep their defaults; unknown keys are rejected.
inline SurrogateParams parse_surrogate_params(std::string_view text, const std::string& origin = "<memory>") {
  SurrogateParams p;
  auto number = [&](const std::string& key, std::string_view v) {
    const auto tokens = kitti::split_ws(v);
    const auto d = tokens.size() == 1 ? kitti::parse_double(tokens[0]) : std::nullopt;
    if (!d) throw MalformedFileError(origin + ": value of '" + key + "' is not a number");
    return *d;
  };
  const std::map<std::string, double*, std::less<>> fields{
      {"bias", &p.bias},
      {"inside_weight", &p.inside_weight},
      {"above_weight", &p.above_weight},
      {"sharpness", &p.sharpness},
      {"anchor_stride", &p.anchor_stride},
      {"template_dx", &p.template_dx},
      {"template_dy", &p.template_dy},
      {"template_dz", &p.template_dz},
      {"operating_threshold", &p.operating_threshold},
      {"roi_x_min", &p.roi_x_min},
      {"roi_x_max", &p.roi_x_max},
      {"roi_y_min", &p.roi_y_min},
      {"roi_y_max", &p.roi_y_max},
      {"anchor_z", &p.anchor_z},
      {"placement_side", &p.placement_side},
  };
  for (const auto& [key, value] : parse_key_values(text, origin)) {
    if (key == "yaws") {
      p.yaws.clear();
      std::size_t start = 0;
      while (start <= value.size()) {
        const std::size_t comma = std::min(value.find(',', start), value.size());
        p.yaws.push_back(number(key, std::string_view(value).substr(start, comma - start)));
        start = comma + 1;
      }
      continue;
    }
    const auto it = fields.find(key);
    if (it == fields.end()) throw MalformedFileError(origin + ": unknown surrogate parameter '" + key + "'");
    *it->second = number(key, value);
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw MalformedFileError(origin + ": " + e.what());
  }
  return p;
}

inline SurrogateParams read_surrogate_params(const std::filesystem::path& path) {
  return parse_surrogate_params(kitti::read_text(path), path.string());
}

inline void write_surrogate_params(const SurrogateParams& p, const std::filesystem::path& path) {
  kitti::write_text(path, format_surrogate_params(p));
}

}  // namespace spooflab
