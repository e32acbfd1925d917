#pragma once

// Attack-success rates, recall-vs-IoU curves, point-count sweeps and
// distance/angle binning, plus JSON/CSV reports.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "spooflab/attack.hpp"
#include "spooflab/detector.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/geometry.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/scene.hpp"

namespace spooflab {

using nlohmann::json;

// ---- targets -----------------------------------------------------------------

struct TargetDescriptor {
  std::string frame_id;
  std::size_t car = 0;
  Box3D box;
  double distance = 0.0;  // planar, meters
  double angle = 0.0;     // degrees, 0 = straight ahead, in (-180, 180]

  friend bool operator==(const TargetDescriptor&, const TargetDescriptor&) = default;
};

inline TargetDescriptor describe_target(std::string frame_id, std::size_t car, const Box3D& box) {
  TargetDescriptor t{std::move(frame_id), car, box, std::hypot(box.x, box.y), 0.0};
  t.angle = (box.x == 0.0 && box.y == 0.0) ? 0.0 : rad_to_deg(normalize_angle(std::atan2(box.y, box.x)));
  if (t.angle <= -180.0) t.angle = 180.0;
  return t;
}

// A car inside one of the evaluated scenes.
struct TargetRef {
  std::size_t scene = 0;
  std::size_t car = 0;

  friend bool operator==(const TargetRef&, const TargetRef&) = default;
};

// Whether some proposal overlaps `gt` by at least `iou_thresh` with confidence at least `min_score`.
inline bool detected(std::span<const Proposal> proposals, const Box3D& gt, double iou_thresh, double min_score) {
  return !is_hidden(proposals, gt, iou_thresh, min_score);
}

// Cars the detector finds on the clean cloud: the attackable population.
inline std::vector<TargetRef> select_targets(std::span<const LabeledScene> scenes, Detector& detector,
                                             double iou_thresh, double min_score) {
  std::vector<TargetRef> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    if (scenes[s].cars.empty()) continue;
    const std::vector<Proposal> props = detector.detect(scenes[s].input());
    for (std::size_t c = 0; c < scenes[s].cars.size(); ++c) {
      if (detected(props, scenes[s].cars[c], iou_thresh, min_score)) out.push_back({s, c});
    }
  }
  return out;
}

// ---- metrics -------------------------------------------------------------------

inline double attack_success_rate(std::span<const AttackResult> results) {
  if (results.empty()) throw UndefinedMetricError("attack success rate of an empty result list");
  std::size_t ok = 0;
  for (const AttackResult& r : results) ok += r.success ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(results.size());
}

inline double success_rate(std::span<const bool> outcomes) {
  if (outcomes.empty()) throw UndefinedMetricError("attack success rate of an empty result list");
  return static_cast<double>(std::count(outcomes.begin(), outcomes.end(), true)) /
         static_cast<double>(outcomes.size());
}

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int k = 1; k <= 9; ++k) t.push_back(k / 10.0);
  return t;
}

// Greedy one-to-one matching in descending confidence: each proposal claims
// the unmatched ground truth it overlaps most, if that overlap reaches t.
inline std::size_t matched_count(std::span<const Proposal> proposals, std::span<const Box3D> gts, double t,
                                 double score_thresh) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (proposals[i].score >= score_thresh) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return proposals[a].score > proposals[b].score; });
  std::vector<bool> taken(gts.size(), false);
  std::size_t matched = 0;
  for (std::size_t i : order) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double iou = iou3d(gts[g], proposals[i].box);
      if (iou >= t && iou > best) best = iou, best_g = g;
    }
    if (best_g < gts.size()) {
      taken[best_g] = true;
      ++matched;
    }
  }
  return matched;
}

inline void check_thresholds(std::span<const double> thresholds) {
  if (thresholds.empty()) throw ConfigError("no IoU thresholds given");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw ConfigError("IoU thresholds must ascend");
}

// Recall per threshold over precomputed detections.
inline std::vector<double> recall_curve(std::span<const std::vector<Proposal>> detections,
                                        std::span<const std::vector<Box3D>> gts, std::span<const double> thresholds,
                                        double score_thresh) {
  check_thresholds(thresholds);
  if (detections.size() != gts.size()) throw ConfigError("detections and ground truth differ in frame count");
  std::size_t total = 0;
  for (const auto& g : gts) total += g.size();
  if (total == 0) throw UndefinedMetricError("recall with no ground-truth cars");
  std::vector<double> out;
  for (double t : thresholds) {
    std::size_t matched = 0;
    for (std::size_t f = 0; f < gts.size(); ++f) matched += matched_count(detections[f], gts[f], t, score_thresh);
    out.push_back(static_cast<double>(matched) / static_cast<double>(total));
  }
  return out;
}

inline std::vector<double> recall_at_iou(std::span<const LabeledScene> frames, Detector& detector,
                                         std::span<const double> thresholds, double score_thresh) {
  check_thresholds(thresholds);
  std::vector<std::vector<Proposal>> dets;
  std::vector<std::vector<Box3D>> gts;
  for (const LabeledScene& f : frames) {
    dets.push_back(detector.detect(f.input()));
    gts.push_back(f.cars);
  }
  return recall_curve(dets, gts, thresholds, score_thresh);
}

// ---- binning -------------------------------------------------------------------

enum class BinAxis { distance, angle };

inline std::string to_string(BinAxis a) { return a == BinAxis::distance ? "distance" : "angle"; }

struct Bin {
  std::string label;
  double lo = 0.0;
  double hi = 0.0;
  bool overflow = false;
  std::vector<std::size_t> members;  // indices into the target list
};

// Half-open bins: distance [5,15) .. [35,45) m; angle [-30,-20) .. [20,30)
// degrees. The last bin collects everything else.
inline std::vector<Bin> bin_targets(std::span<const TargetDescriptor> targets, BinAxis axis) {
  std::vector<Bin> bins;
  auto add = [&](double lo, double hi, const char* unit) {
    bins.push_back({"[" + kitti::format_double(lo) + "," + kitti::format_double(hi) + ")" + unit, lo, hi, false, {}});
  };
  if (axis == BinAxis::distance) {
    for (double lo = 5.0; lo < 45.0; lo += 10.0) add(lo, lo + 10.0, "m");
  } else {
    for (double lo = -30.0; lo < 30.0; lo += 10.0) add(lo, lo + 10.0, "deg");
  }
  bins.push_back({"overflow", std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                  true, {}});
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double v = axis == BinAxis::distance ? targets[i].distance : targets[i].angle;
    std::size_t b = bins.size() - 1;
    for (std::size_t k = 0; k + 1 < bins.size(); ++k) {
      if (v >= bins[k].lo && v < bins[k].hi) {
        b = k;
        break;
      }
    }
    bins[b].members.push_back(i);
  }
  return bins;
}

// ---- parallel execution ----------------------------------------------------------

// Runs fn(task, worker) for every task on up to `jobs` threads. Results must
// be written by task index. The failure of the lowest-indexed task wins.
template <typename Fn>
void parallel_for(std::size_t tasks, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, tasks));
  std::vector<std::exception_ptr> errors(tasks);
  std::atomic<std::size_t> next{0};
  auto worker = [&](std::size_t w) {
    for (std::size_t t = next++; t < tasks; t = next++) {
      try {
        fn(t, w);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w) pool.emplace_back(worker, w);
    for (std::thread& th : pool) th.join();
  }
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---- sweeps --------------------------------------------------------------------

// Wraps a failure inside a sweep with the point count and target it hit;
// the original error is nested (std::rethrow_if_nested).
class SweepError : public Error {
 public:
  SweepError(std::size_t points, std::string target, const std::string& cause)
      : Error("sweep at " + std::to_string(points) + " points, target " + target + ": " + cause),
        points_(points),
        target_(std::move(target)) {}
  std::size_t points() const { return points_; }
  const std::string& target() const { return target_; }

 private:
  std::size_t points_;
  std::string target_;
};

inline std::vector<std::size_t> default_point_counts() { return {20, 40, 60, 80, 100, 120, 140, 160, 180, 200}; }

struct SweepRow {
  std::size_t points = 0;
  std::size_t attempts = 0;
  std::size_t successes = 0;
  double asr = 0.0;

  friend bool operator==(const SweepRow&, const SweepRow&) = default;
};

inline std::string target_name(const LabeledScene& scene, std::size_t car) {
  return scene.id + "#" + std::to_string(car);
}

// One attack per (count, target) pair; task i uses seed config.seed + i.
inline std::vector<SweepRow> sweep_point_counts(std::span<const LabeledScene> scenes, std::span<const TargetRef> targets,
                                                const DetectorFactory& factory, std::span<const std::size_t> counts,
                                                const AttackConfig& config, std::size_t jobs = 1) {
  if (counts.empty()) throw ConfigError("sweep needs at least one point count");
  if (targets.empty()) throw UndefinedMetricError("sweep over an empty target list");
  const std::size_t tasks = counts.size() * targets.size();
  std::vector<char> success(tasks, 0);
  std::vector<std::unique_ptr<Detector>> detectors(std::max<std::size_t>(1, std::min(jobs, tasks)));
  parallel_for(tasks, jobs, [&](std::size_t task, std::size_t worker) {
    const std::size_t ci = task / targets.size();
    const TargetRef& ref = targets[task % targets.size()];
    const LabeledScene& scene = scenes[ref.scene];
    AttackConfig cfg = config;
    cfg.points = counts[ci];
    cfg.seed = config.seed + task;
    try {
      if (!detectors[worker]) detectors[worker] = factory();
      success[task] = run_hiding_attack(scene.input(), scene.cars.at(ref.car), *detectors[worker], cfg).success;
    } catch (const std::exception& e) {
      std::throw_with_nested(SweepError(counts[ci], target_name(scene, ref.car), e.what()));
    }
  });
  std::vector<SweepRow> rows;
  for (std::size_t ci = 0; ci < counts.size(); ++ci) {
    SweepRow row{counts[ci], targets.size(), 0, 0.0};
    for (std::size_t t = 0; t < targets.size(); ++t) row.successes += success[ci * targets.size() + t] ? 1 : 0;
    row.asr = static_cast<double>(row.successes) / static_cast<double>(row.attempts);
    rows.push_back(row);
  }
  return rows;
}

// ---- full evaluation -----------------------------------------------------------

struct RecallRow {
  double iou = 0.0;
  double recall_clean = 0.0;
  double recall_attacked = 0.0;

  friend bool operator==(const RecallRow&, const RecallRow&) = default;
};

struct BinRow {
  std::string axis;
  std::string label;
  double lo = 0.0;  // NaN for the overflow bin
  double hi = 0.0;
  std::size_t population = 0;
  std::size_t successes = 0;
  std::optional<double> asr;  // absent for empty bins

  friend bool operator==(const BinRow& a, const BinRow& b) {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return a.axis == b.axis && a.label == b.label && same(a.lo, b.lo) && same(a.hi, b.hi) &&
           a.population == b.population && a.successes == b.successes && a.asr == b.asr;
  }
};

struct TargetOutcome {
  TargetDescriptor target;
  bool success = false;
  std::size_t restarts_used = 0;
  std::size_t iterations_used = 0;

  friend bool operator==(const TargetOutcome&, const TargetOutcome&) = default;
};

struct EvalReport {
  json config;  // resolved run configuration, echoed verbatim
  std::size_t frames = 0;
  std::vector<TargetOutcome> targets;
  std::size_t infeasible_targets = 0;  // detected but too small a placement window
  std::optional<double> asr;  // absent with no targets
  std::vector<SweepRow> sweep;
  std::vector<RecallRow> recall;
  std::vector<BinRow> bins;
  double wall_seconds = 0.0;  // timing; ignored by same_outcome

  friend bool same_outcome(const EvalReport& a, const EvalReport& b) {
    return a.config == b.config && a.frames == b.frames && a.targets == b.targets &&
           a.infeasible_targets == b.infeasible_targets && a.asr == b.asr &&
           a.sweep == b.sweep && a.recall == b.recall && a.bins == b.bins;
  }
};

inline std::vector<BinRow> bin_rows(std::span<const TargetOutcome> outcomes) {
  std::vector<TargetDescriptor> descs;
  for (const TargetOutcome& o : outcomes) descs.push_back(o.target);
  std::vector<BinRow> rows;
  for (BinAxis axis : {BinAxis::distance, BinAxis::angle}) {
    for (const Bin& b : bin_targets(descs, axis)) {
      BinRow r{to_string(axis), b.label, b.lo, b.hi, b.members.size(), 0, std::nullopt};
      for (std::size_t i : b.members) r.successes += outcomes[i].success ? 1 : 0;
      if (r.population > 0) r.asr = static_cast<double>(r.successes) / static_cast<double>(r.population);
      rows.push_back(r);
    }
  }
  return rows;
}

struct EvalOptions {
  std::vector<double> iou_thresholds = default_iou_thresholds();
  double target_min_score = 0.3;  // clean confidence a car needs to be attacked
  std::size_t jobs = 1;
  std::vector<std::size_t> sweep_counts;  // empty = no sweep
};

// Attacks every clean-detected car once (task i uses seed config.seed + i),
// then reports ASR, per-bin ASR, and recall over the attacked population
// on clean and attacked clouds.
inline EvalReport evaluate(std::span<const LabeledScene> scenes, const DetectorFactory& factory,
                           const AttackConfig& config, const EvalOptions& opt, json config_echo = json::object()) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  check_thresholds(opt.iou_thresholds);
  EvalReport rep;
  rep.config = std::move(config_echo);
  rep.frames = scenes.size();

  const std::size_t jobs = std::max<std::size_t>(1, opt.jobs);
  std::vector<std::unique_ptr<Detector>> detectors(jobs);
  auto detector_for = [&](std::size_t w) -> Detector& {
    if (!detectors[w]) detectors[w] = factory();
    return *detectors[w];
  };

  // Clean detections, one per scene.
  std::vector<std::vector<Proposal>> clean(scenes.size());
  parallel_for(scenes.size(), jobs,
               [&](std::size_t s, std::size_t w) { clean[s] = detector_for(w).detect(scenes[s].input()); });
  // Cars that cannot host the largest budget are counted, not attacked.
  std::size_t budget = config.points;
  for (std::size_t n : opt.sweep_counts) budget = std::max(budget, n);
  std::vector<TargetRef> targets;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t c = 0; c < scenes[s].cars.size(); ++c) {
      if (!detected(clean[s], scenes[s].cars[c], config.success_iou, opt.target_min_score)) continue;
      if (point_capacity(scenes[s].cars[c], config) < budget) {
        ++rep.infeasible_targets;
        continue;
      }
      targets.push_back({s, c});
    }
  }

  std::vector<AttackResult> results(targets.size());
  std::vector<std::vector<Proposal>> attacked(targets.size());
  parallel_for(targets.size(), jobs, [&](std::size_t i, std::size_t w) {
    const LabeledScene& scene = scenes[targets[i].scene];
    AttackConfig cfg = config;
    cfg.seed = config.seed + i;
    Detector& det = detector_for(w);
    results[i] = run_hiding_attack(scene.input(), scene.cars[targets[i].car], det, cfg);
    attacked[i] = det.detect(DetectorInput{results[i].final_cloud, scene.image, scene.id});
  });

  for (std::size_t i = 0; i < targets.size(); ++i) {
    const LabeledScene& scene = scenes[targets[i].scene];
    rep.targets.push_back({describe_target(scene.id, targets[i].car, scene.cars[targets[i].car]), results[i].success,
                           results[i].restarts_used, results[i].iterations_used});
  }
  if (!results.empty()) rep.asr = attack_success_rate(results);
  rep.bins = bin_rows(rep.targets);

  if (!targets.empty()) {
    // Each attacked car is scored alone, against its own scene's clean and attacked detections.
    std::vector<std::vector<Proposal>> clean_per_target;
    std::vector<std::vector<Box3D>> gts;
    for (const TargetRef& t : targets) {
      clean_per_target.push_back(clean[t.scene]);
      gts.push_back({scenes[t.scene].cars[t.car]});
    }
    const double score = config.success_score;
    const std::vector<double> rc = recall_curve(clean_per_target, gts, opt.iou_thresholds, score);
    const std::vector<double> ra = recall_curve(attacked, gts, opt.iou_thresholds, score);
    for (std::size_t k = 0; k < opt.iou_thresholds.size(); ++k) rep.recall.push_back({opt.iou_thresholds[k], rc[k], ra[k]});
  }

  if (!opt.sweep_counts.empty() && !targets.empty()) {
    rep.sweep = sweep_point_counts(scenes, targets, factory, opt.sweep_counts, config, jobs);
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// ---- serialization -------------------------------------------------------------

inline json nan_as_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
inline double null_as_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline json box_to_json(const Box3D& b) {
  return json{{"x", b.x}, {"y", b.y}, {"z", b.z}, {"dx", b.dx}, {"dy", b.dy}, {"dz", b.dz}, {"yaw", b.yaw}};
}

inline Box3D box_from_json(const json& j) {
  return Box3D{j.at("x").get<double>(),  j.at("y").get<double>(),  j.at("z").get<double>(),  j.at("dx").get<double>(),
               j.at("dy").get<double>(), j.at("dz").get<double>(), j.at("yaw").get<double>()};
}

inline json to_json(const EvalReport& r) {
  json j;
  j["config"] = r.config;
  j["frames"] = r.frames;
  j["asr"] = r.asr ? json(*r.asr) : json(nullptr);
  json targets = json::array();
  for (const TargetOutcome& o : r.targets) {
    targets.push_back({{"frame", o.target.frame_id},
                       {"car", o.target.car},
                       {"box", box_to_json(o.target.box)},
                       {"distance", o.target.distance},
                       {"angle", o.target.angle},
                       {"success", o.success},
                       {"restarts_used", o.restarts_used},
                       {"iterations_used", o.iterations_used}});
  }
  j["targets"] = std::move(targets);
  j["infeasible_targets"] = r.infeasible_targets;
  json sweep = json::array();
  for (const SweepRow& s : r.sweep) {
    sweep.push_back({{"points", s.points}, {"attempts", s.attempts}, {"successes", s.successes}, {"asr", s.asr}});
  }
  j["sweep"] = std::move(sweep);
  json recall = json::array();
  for (const RecallRow& s : r.recall) {
    recall.push_back({{"iou", s.iou}, {"recall_clean", s.recall_clean}, {"recall_attacked", s.recall_attacked}});
  }
  j["recall"] = std::move(recall);
  json bins = json::array();
  for (const BinRow& b : r.bins) {
    bins.push_back({{"axis", b.axis},
                    {"bin", b.label},
                    {"lo", nan_as_null(b.lo)},
                    {"hi", nan_as_null(b.hi)},
                    {"population", b.population},
                    {"successes", b.successes},
                    {"asr", b.asr ? json(*b.asr) : json(nullptr)}});
  }
  j["bins"] = std::move(bins);
  j["timing"] = {{"wall_seconds", r.wall_seconds}};
  return j;
}

inline EvalReport eval_report_from_json(const json& j) {
  EvalReport r;
  try {
    r.config = j.at("config");
    r.frames = j.at("frames").get<std::size_t>();
    if (!j.at("asr").is_null()) r.asr = j.at("asr").get<double>();
    for (const json& t : j.at("targets")) {
      TargetOutcome o;
      o.target = {t.at("frame").get<std::string>(), t.at("car").get<std::size_t>(), box_from_json(t.at("box")),
                  t.at("distance").get<double>(), t.at("angle").get<double>()};
      o.success = t.at("success").get<bool>();
      o.restarts_used = t.at("restarts_used").get<std::size_t>();
      o.iterations_used = t.at("iterations_used").get<std::size_t>();
      r.targets.push_back(o);
    }
    r.infeasible_targets = j.at("infeasible_targets").get<std::size_t>();
    for (const json& s : j.at("sweep")) {
      r.sweep.push_back({s.at("points").get<std::size_t>(), s.at("attempts").get<std::size_t>(),
                         s.at("successes").get<std::size_t>(), s.at("asr").get<double>()});
    }
    for (const json& s : j.at("recall")) {
      r.recall.push_back(
          {s.at("iou").get<double>(), s.at("recall_clean").get<double>(), s.at("recall_attacked").get<double>()});
    }
    for (const json& b : j.at("bins")) {
      BinRow row{b.at("axis").get<std::string>(),
                 b.at("bin").get<std::string>(),
                 null_as_nan(b.at("lo")),
                 null_as_nan(b.at("hi")),
                 b.at("population").get<std::size_t>(),
                 b.at("successes").get<std::size_t>(),
                 std::nullopt};
      if (!b.at("asr").is_null()) row.asr = b.at("asr").get<double>();
      r.bins.push_back(row);
    }
    if (j.contains("timing")) r.wall_seconds = j.at("timing").at("wall_seconds").get<double>();
  } catch (const json::exception& e) {
    throw MalformedFileError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

// JSON of one attack: outcome, config echo, trajectory, injected points, timing.
inline json attack_report_json(const AttackResult& r, const TargetDescriptor& target, const json& config_echo) {
  json j;
  j["config"] = config_echo;
  j["target"] = {{"frame", target.frame_id},
                 {"car", target.car},
                 {"box", box_to_json(target.box)},
                 {"distance", target.distance},
                 {"angle", target.angle}};
  j["success"] = r.success;
  j["restarts_used"] = r.restarts_used;
  j["iterations_used"] = r.iterations_used;
  j["detector_calls"] = r.detector_calls;
  json traj = json::array();
  for (const TrajectoryPoint& t : r.trajectory) {
    traj.push_back({{"restart", t.restart}, {"iteration", t.iteration}, {"loss", t.loss}, {"max_score", t.max_score}});
  }
  j["trajectory"] = std::move(traj);
  json pts = json::array();
  for (const AdvPoint& p : r.final_points.points) {
    const CartesianPoint c = p.position();
    pts.push_back({{"beam", p.ray.beam},
                   {"azimuth_index", p.ray.azimuth_index},
                   {"elevation", p.elevation},
                   {"azimuth", p.azimuth},
                   {"range", p.range},
                   {"r_min", p.r_min},
                   {"r_max", p.r_max},
                   {"xyz", {c.x, c.y, c.z}}});
  }
  j["points"] = std::move(pts);
  j["final_cloud_points"] = r.final_cloud.size();
  j["timing"] = {{"wall_seconds", r.wall_seconds}};
  return j;
}

enum class ReportFormat { json, csv };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  throw ConfigError("unknown report format '" + std::string(s) + "' (expected json|csv)");
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::string out = "points,asr\n";
  for (const SweepRow& r : rows) out += std::to_string(r.points) + "," + kitti::format_double(r.asr) + "\n";
  return out;
}

inline std::string recall_csv(std::span<const RecallRow> rows) {
  std::string out = "iou,recall_clean,recall_attacked\n";
  for (const RecallRow& r : rows) {
    out += kitti::format_double(r.iou) + "," + kitti::format_double(r.recall_clean) + "," +
           kitti::format_double(r.recall_attacked) + "\n";
  }
  return out;
}

inline std::string bins_csv(std::span<const BinRow> rows) {
  std::string out = "axis,bin,lo,hi,population,successes,asr\n";
  auto num = [](double v) { return std::isnan(v) ? std::string() : kitti::format_double(v); };
  for (const BinRow& r : rows) {
    out += r.axis + "," + r.label + "," + num(r.lo) + "," + num(r.hi) + "," + std::to_string(r.population) + "," +
           std::to_string(r.successes) + "," + (r.asr ? kitti::format_double(*r.asr) : std::string()) + "\n";
  }
  return out;
}

// JSON: writes `path`. CSV: treats `path` minus extension as a stem and
// writes <stem>_sweep.csv, <stem>_recall.csv and <stem>_bins.csv.
// Returns the files written.
inline std::vector<std::filesystem::path> emit_report(const EvalReport& report, ReportFormat format,
                                                      const std::filesystem::path& path) {
  auto write = [](const std::filesystem::path& p, const std::string& text) {
    try {
      kitti::write_text(p, text);
    } catch (const IoError& e) {
      throw IoError(std::string("cannot write report: ") + e.what());
    }
  };
  if (format == ReportFormat::json) {
    write(path, to_json(report).dump(2) + "\n");
    return {path};
  }
  std::filesystem::path stem = path;
  stem.replace_extension();
  const std::vector<std::filesystem::path> files{stem.string() + "_sweep.csv", stem.string() + "_recall.csv",
                                                 stem.string() + "_bins.csv"};
  write(files[0], sweep_csv(report.sweep));
  write(files[1], recall_csv(report.recall));
  write(files[2], bins_csv(report.bins));
  return files;
}

}  // namespace spooflab
