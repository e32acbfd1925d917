#pragma once

// Hiding attack: injects points above a target car and moves them along
// their firing directions to suppress every detection overlapping it.
//
// Loss over the proposals relevant to the target (IoU > eps_iou and
// score > eps_score):
//
//   L = sum IoU(gt, p) * log(c)
//
// Descending L drives the relevant confidences to zero. Only ranges are
// optimized; firing directions stay fixed, so the physical constraints hold
// at every iterate. Restarts re-draw the firing directions.

#include <cassert>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spooflab/detector.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/lidar_model.hpp"
#include "spooflab/surrogate.hpp"

namespace spooflab {

enum class GradientMode { analytic, finite_difference };

inline std::string to_string(GradientMode m) { return m == GradientMode::analytic ? "analytic" : "fd"; }

inline GradientMode parse_gradient_mode(std::string_view s) {
  if (s == "analytic") return GradientMode::analytic;
  if (s == "fd" || s == "finite-difference" || s == "finite_difference") return GradientMode::finite_difference;
  throw ConfigError("unknown gradient mode '" + std::string(s) + "' (expected analytic|fd)");
}

struct AttackConfig {
  std::size_t points = 200;
  std::size_t restarts = 5;
  std::size_t iterations = 500;
  double eps_iou = 0.1;
  double eps_score = 0.1;
  double step = 0.05;  // meters per unit gradient
  double success_iou = 0.5;
  double success_score = 0.3;
  GradientMode gradient = GradientMode::analytic;
  double fd_step = 0.01;                 // meters
  std::size_t max_detector_calls = 0;    // 0 = unlimited
  std::uint64_t seed = 0;
  double window = kDefaultWindow;
  double azimuth_resolution = deg_to_rad(0.2);
  double injected_intensity = kDefaultInjectedIntensity;
  double placement_side = kPlacementSide;
  double placement_height = kPlacementHeight;

  void validate() const {
    if (points < 1) throw ConfigError("attack needs at least one point");
    if (restarts < 1) throw ConfigError("attack needs at least one restart");
    for (double t : {eps_iou, eps_score, success_iou, success_score, injected_intensity}) {
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("attack thresholds and intensity must lie in [0, 1]");
    }
    if (!(step > 0.0)) throw ConfigError("step size must be positive");
    if (!(fd_step > 0.0)) throw ConfigError("finite-difference step must be positive");
    if (!(window > 0.0)) throw ConfigError("azimuth window must be positive");
    if (!(azimuth_resolution > 0.0)) throw ConfigError("azimuth resolution must be positive");
  }

  RayGrid ray_grid() const { return RayGrid{hdl64e_beam_table(), azimuth_resolution}; }
};

// ---- loss ------------------------------------------------------------------

struct RelevantProposal {
  std::size_t index = 0;  // into the proposal list
  double iou = 0.0;
  double score = 0.0;
};

inline std::vector<RelevantProposal> relevant_proposals(std::span<const Proposal> proposals, const Box3D& gt,
                                                        double eps_iou, double eps_score) {
  std::vector<RelevantProposal> out;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (!(proposals[i].score > eps_score)) continue;
    const double iou = iou3d(gt, proposals[i].box);
    if (iou > eps_iou) out.push_back({i, iou, proposals[i].score});
  }
  return out;
}

inline constexpr double kMinLogScore = 1e-12;

inline double loss_term(double iou, double score) { return iou * std::log(std::max(score, kMinLogScore)); }

inline double adversarial_loss(std::span<const RelevantProposal> relevant) {
  double total = 0.0;
  for (const RelevantProposal& r : relevant) total += loss_term(r.iou, r.score);
  return total;
}

struct LossBreakdown {
  struct Term {
    double iou = 0.0;
    double score = 0.0;
    double value = 0.0;
  };
  std::vector<Term> terms;
  double total = 0.0;
};

inline LossBreakdown loss_breakdown(std::span<const RelevantProposal> relevant) {
  LossBreakdown b;
  for (const RelevantProposal& r : relevant) {
    b.terms.push_back({r.iou, r.score, loss_term(r.iou, r.score)});
    b.total += b.terms.back().value;
  }
  return b;
}

inline bool is_hidden(std::span<const Proposal> proposals, const Box3D& gt, double iou_thresh, double score_thresh) {
  for (const Proposal& p : proposals) {
    if (p.score >= score_thresh && iou3d(gt, p.box) >= iou_thresh) return false;
  }
  return true;
}

inline AdvPointSet gradient_step(const AdvPointSet& adv, std::span<const double> grad, double step) {
  if (grad.size() != adv.size()) throw ConfigError("gradient length does not match the point set");
  AdvPointSet next = adv;
  for (std::size_t j = 0; j < next.size(); ++j) {
    if (!std::isfinite(grad[j])) throw ConfigError("non-finite gradient component");
    AdvPoint& p = next.points[j];
    p.range = std::clamp(p.range - step * grad[j], p.r_min, p.r_max);
  }
  return next;
}

// ---- objective evaluation ----------------------------------------------------

namespace detail {

// One scored proposal that can matter for the loss or the success test.
struct Candidate {
  double iou = 0.0;
  double score = 0.0;
};

struct Evaluation {
  std::vector<Candidate> candidates;
  double loss = 0.0;
  double max_score = 0.0;  // over candidates at or above the success IoU
  bool hidden = true;
};

inline Evaluation summarize(std::vector<Candidate> candidates, const AttackConfig& cfg) {
  Evaluation e;
  e.candidates = std::move(candidates);
  for (const Candidate& c : e.candidates) {
    if (c.iou > cfg.eps_iou && c.score > cfg.eps_score) e.loss += loss_term(c.iou, c.score);
    if (c.iou >= cfg.success_iou) {
      e.max_score = std::max(e.max_score, c.score);
      if (c.score >= cfg.success_score) e.hidden = false;
    }
  }
  return e;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Loss and success evaluation for a fixed scene, target and ray set.
class Objective {
 public:
  virtual ~Objective() = default;
  // Fixes the ray set; the merge topology depends on rays only.
  virtual void reset(const AdvPointSet& adv) = 0;
  virtual Evaluation evaluate(const AdvPointSet& adv) = 0;
  virtual bool has_analytic_gradient() const = 0;
  virtual std::vector<double> analytic_gradient(const AdvPointSet& adv, const Evaluation& e) = 0;
  virtual PointCloud merged_cloud(const AdvPointSet& adv) const = 0;
  std::size_t calls() const { return calls_; }

 protected:
  void count_call(const AttackConfig& cfg) {
    ++calls_;
    if (cfg.max_detector_calls != 0 && calls_ > cfg.max_detector_calls) {
      throw BudgetExceededError("detector call budget of " + std::to_string(cfg.max_detector_calls) + " exceeded");
    }
  }

 private:
  std::size_t calls_ = 0;
};

// Any detector; full detection on the merged cloud each evaluation.
class BlackBoxObjective final : public Objective {
 public:
  BlackBoxObjective(const DetectorInput& scene, const Box3D& gt, Detector& det, const AttackConfig& cfg)
      : scene_(scene), gt_(gt), det_(det), cfg_(cfg), grid_(cfg.ray_grid()) {}

  void reset(const AdvPointSet&) override {}

  Evaluation evaluate(const AdvPointSet& adv) override {
    count_call(cfg_);
    const PointCloud merged = merged_cloud(adv);
    DetectorInput in{merged, scene_.image, scene_.frame_id};
    const std::vector<Proposal> props = det_.detect(in);
    std::vector<Candidate> cands;
    for (const Proposal& p : props) {
      const double iou = iou3d(gt_, p.box);
      if (iou > cfg_.eps_iou || iou >= cfg_.success_iou) cands.push_back({iou, p.score});
    }
    return summarize(std::move(cands), cfg_);
  }

  bool has_analytic_gradient() const override { return false; }
  std::vector<double> analytic_gradient(const AdvPointSet&, const Evaluation&) override {
    throw ConfigError("analytic gradients require the surrogate detector; use finite differences");
  }

  PointCloud merged_cloud(const AdvPointSet& adv) const override {
    return strongest_return_merge(scene_.cloud, adv, grid_, cfg_.injected_intensity);
  }

 private:
  DetectorInput scene_;
  Box3D gt_;
  Detector& det_;
  const AttackConfig& cfg_;
  RayGrid grid_;
};

// Surrogate restricted to anchors overlapping the target; analytic gradients.
class SurrogateObjective final : public Objective {
 public:
  SurrogateObjective(const DetectorInput& scene, const Box3D& gt, const SurrogateDetector& det,
                     const AttackConfig& cfg)
      : scene_(scene), det_(det), cfg_(cfg), grid_(cfg.ray_grid()) {
    const double reach = 0.5 * std::hypot(gt.dx, gt.dy) +
                         0.5 * std::hypot(det.params().template_dx, det.params().template_dy);
    const bool everything = cfg.success_iou <= 0.0;
    for (std::size_t a = 0; a < det.anchor_count(); ++a) {
      const Box3D b = det.anchor_box(a);
      double iou = 0.0;
      if (std::hypot(b.x - gt.x, b.y - gt.y) <= reach) iou = iou3d(gt, b);
      if (everything || iou > cfg.eps_iou || iou >= cfg.success_iou) {
        focus_.push_back(a);
        ious_.push_back(iou);
      }
    }
  }

  void reset(const AdvPointSet& adv) override {
    merge_ = merge_strongest_return(scene_.cloud, adv, grid_, cfg_.injected_intensity);
    const std::size_t kept = std::count(merge_.injected_kept.begin(), merge_.injected_kept.end(), true);
    const std::span<const LidarPoint> base(merge_.cloud.data(), merge_.cloud.size() - kept);
    focused_.emplace(det_, base, focus_);
  }

  Evaluation evaluate(const AdvPointSet& adv) override {
    count_call(cfg_);
    scores_ = focused_->scores(kept_positions(adv));
    std::vector<Candidate> cands(focus_.size());
    for (std::size_t i = 0; i < focus_.size(); ++i) cands[i] = {ious_[i], scores_[i]};
    return summarize(std::move(cands), cfg_);
  }

  bool has_analytic_gradient() const override { return true; }

  std::vector<double> analytic_gradient(const AdvPointSet& adv, const Evaluation& e) override {
    std::vector<double> weights(focus_.size(), 0.0);
    std::vector<double> scores(focus_.size());
    for (std::size_t i = 0; i < focus_.size(); ++i) {
      const Candidate& c = e.candidates[i];
      scores[i] = c.score;
      if (c.iou > cfg_.eps_iou && c.score > cfg_.eps_score && c.score >= kMinLogScore) weights[i] = c.iou / c.score;
    }
    const std::vector<CartesianPoint> positions = kept_positions(adv);
    const std::vector<CartesianPoint> dp = focused_->weighted_gradient(positions, scores, weights);
    std::vector<double> grad(adv.size(), 0.0);
    std::size_t k = 0;
    for (std::size_t j = 0; j < adv.size(); ++j) {
      if (!merge_.injected_kept[j]) continue;
      grad[j] = dot(dp[k++], range_direction(adv.points[j].spherical()));
    }
    return grad;
  }

  PointCloud merged_cloud(const AdvPointSet& adv) const override {
    PointCloud out(merge_.cloud.begin(),
                   merge_.cloud.end() - static_cast<std::ptrdiff_t>(std::count(merge_.injected_kept.begin(),
                                                                               merge_.injected_kept.end(), true)));
    for (const CartesianPoint& p : kept_positions(adv)) out.push_back({p.x, p.y, p.z, cfg_.injected_intensity});
    return out;
  }

 private:
  std::vector<CartesianPoint> kept_positions(const AdvPointSet& adv) const {
    std::vector<CartesianPoint> out;
    out.reserve(adv.size());
    for (std::size_t j = 0; j < adv.size(); ++j) {
      if (merge_.injected_kept[j]) out.push_back(adv.points[j].position());
    }
    return out;
  }

  DetectorInput scene_;
  const SurrogateDetector& det_;
  const AttackConfig& cfg_;
  RayGrid grid_;
  std::vector<std::size_t> focus_;
  std::vector<double> ious_;
  MergeResult merge_;
  std::optional<FocusedSurrogate> focused_;
  std::vector<double> scores_;
};

inline std::unique_ptr<Objective> make_objective(const DetectorInput& scene, const Box3D& gt, Detector& det,
                                                 const AttackConfig& cfg) {
  if (const auto* s = dynamic_cast<const SurrogateDetector*>(&det)) {
    return std::make_unique<SurrogateObjective>(scene, gt, *s, cfg);
  }
  if (cfg.gradient == GradientMode::analytic) {
    throw ConfigError("analytic gradients require the surrogate detector; use --grad fd with " + det.name());
  }
  return std::make_unique<BlackBoxObjective>(scene, gt, det, cfg);
}

// Rethrows a detector error as the same concrete type with a location prefix.
[[noreturn]] inline void rethrow_with_context(const DetectorError& err, const std::string& where) {
  const std::string msg = where + ": " + err.what();
  if (dynamic_cast<const ConnectionError*>(&err)) throw ConnectionError(msg);
  if (dynamic_cast<const TimeoutError*>(&err)) throw TimeoutError(msg);
  if (dynamic_cast<const MalformedResponseError*>(&err)) throw MalformedResponseError(msg);
  if (dynamic_cast<const ProtocolVersionError*>(&err)) throw ProtocolVersionError(msg);
  throw DetectorError(msg);
}

// Central differences on each range with the other points held fixed.
inline std::vector<double> finite_difference_gradient(Objective& obj, const AdvPointSet& adv, double h) {
  std::vector<double> grad(adv.size(), 0.0);
  AdvPointSet probe = adv;
  for (std::size_t j = 0; j < adv.size(); ++j) {
    const double r = adv.points[j].range;
    probe.points[j].range = r + h;
    const double up = obj.evaluate(probe).loss;
    probe.points[j].range = r - h;
    const double down = obj.evaluate(probe).loss;
    probe.points[j].range = r;
    grad[j] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline std::vector<double> range_gradient(Objective& obj, const AdvPointSet& adv, const Evaluation& e,
                                          const AttackConfig& cfg) {
  if (cfg.gradient == GradientMode::analytic) return obj.analytic_gradient(adv, e);
  return finite_difference_gradient(obj, adv, cfg.fd_step);
}

}  // namespace detail

// dL/dR for every injected point at the current ranges.
inline std::vector<double> loss_range_gradient(const AdvPointSet& adv, const DetectorInput& scene, Detector& detector,
                                               const Box3D& gt, const AttackConfig& config) {
  config.validate();
  auto obj = detail::make_objective(scene, gt, detector, config);
  obj->reset(adv);
  const detail::Evaluation e = obj->evaluate(adv);
  return detail::range_gradient(*obj, adv, e, config);
}

// ---- driver ------------------------------------------------------------------

struct TrajectoryPoint {
  std::size_t restart = 0;
  std::size_t iteration = 0;
  double loss = 0.0;
  double max_score = 0.0;

  friend bool operator==(const TrajectoryPoint&, const TrajectoryPoint&) = default;
};

struct AttackResult {
  bool success = false;
  std::size_t restarts_used = 0;
  std::size_t iterations_used = 0;  // gradient steps over all restarts
  std::size_t detector_calls = 0;
  PointCloud final_cloud;
  AdvPointSet final_points;
  std::vector<TrajectoryPoint> trajectory;
  double wall_seconds = 0.0;
};

// Equality ignoring wall time.
inline bool same_outcome(const AttackResult& a, const AttackResult& b) {
  if (a.success != b.success || a.restarts_used != b.restarts_used || a.iterations_used != b.iterations_used ||
      a.detector_calls != b.detector_calls || a.final_cloud != b.final_cloud || a.trajectory != b.trajectory ||
      a.final_points.size() != b.final_points.size()) {
    return false;
  }
  for (std::size_t j = 0; j < a.final_points.size(); ++j) {
    const AdvPoint& p = a.final_points.points[j];
    const AdvPoint& q = b.final_points.points[j];
    if (p.ray != q.ray || p.range != q.range || p.elevation != q.elevation || p.azimuth != q.azimuth) return false;
  }
  return true;
}

// Most points the placement region above `gt` can host under `config`.
inline std::size_t point_capacity(const Box3D& gt, const AttackConfig& config) {
  const PlacementRegion region = placement_region_for(gt, config.placement_side, config.placement_height);
  return window_capacity(feasible_rays(region, config.ray_grid()), config.window, region.center_azimuth());
}

inline AttackResult run_hiding_attack(const DetectorInput& scene, const Box3D& gt, Detector& detector,
                                      const AttackConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const RayGrid grid = config.ray_grid();
  const PlacementRegion region = placement_region_for(gt, config.placement_side, config.placement_height);
  const std::vector<FeasibleRay> feasible = feasible_rays(region, grid);

  auto obj = detail::make_objective(scene, gt, detector, config);
  AttackResult result;
  AdvPointSet adv;

  for (std::size_t restart = 0; restart < config.restarts && !result.success; ++restart) {
    adv = sample_initial_points(feasible, config.points, config.window, region.center_azimuth(),
                                config.azimuth_resolution, detail::splitmix64(config.seed + restart));
    obj->reset(adv);
    result.restarts_used = restart + 1;

    for (std::size_t it = 0; it <= config.iterations; ++it) {
      try {
        const detail::Evaluation e = obj->evaluate(adv);
        result.trajectory.push_back({restart, it, e.loss, e.max_score});
        if (e.hidden) {
          result.success = true;
          break;
        }
        // The last evaluation only checks the final iterate.
        if (it == config.iterations) break;
        const std::vector<double> grad = detail::range_gradient(*obj, adv, e, config);
        adv = gradient_step(adv, grad, config.step);
      } catch (const DetectorError& err) {
        detail::rethrow_with_context(err, "restart " + std::to_string(restart) + ", iteration " + std::to_string(it));
      }
      ++result.iterations_used;
      assert(validate_physical(adv, grid.beams, config.window).passed());
    }
  }

  if (!validate_physical(adv, grid.beams, config.window).passed()) {
    throw Error("internal: final adversarial set violates the physical constraints");
  }
  result.final_points = adv;
  result.final_cloud = obj->merged_cloud(adv);
  result.detector_calls = obj->calls();
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace spooflab
