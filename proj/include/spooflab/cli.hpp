#pragma once

// Command-line front end: `spooflab <command> [flags]`.
//
// Settings resolve as defaults < config file < flags. The config file is
// flat "key = value" text whose keys are flag names without the leading
// dashes; it comes from --config or, failing that, $SPOOFLAB_CONFIG.
//
// Exit codes: 0 success, 1 attack or validation failed, 2 usage error,
// 3 I/O or detector protocol error.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "spooflab/attack.hpp"
#include "spooflab/calibration.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/eval.hpp"
#include "spooflab/external_detector.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/lidar_model.hpp"
#include "spooflab/scene.hpp"
#include "spooflab/surrogate.hpp"
#include "spooflab/synthetic.hpp"

namespace spooflab {

namespace fs = std::filesystem;

enum class ExitCode : int { ok = 0, failed = 1, usage = 2, io = 3 };

struct RunConfig {
  std::string command;
  std::string config_file;  // resolved source of file settings, empty if none

  std::string dataset;
  std::string frame;
  std::size_t target = 0;
  std::size_t points = 200;
  std::size_t iters = 500;
  std::size_t restarts = 5;
  double step = 0.05;
  double window_deg = 10.0;
  double az_res_deg = 0.2;
  std::string detector = "surrogate";
  std::string surrogate;  // params file; empty = built-in calibrated defaults
  std::string grad = "auto";
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string format = "json";
  std::size_t jobs = 1;
  std::vector<std::size_t> counts;
  double fd_step = 0.01;
  std::size_t max_calls = 0;
  double eps_iou = 0.1;
  double eps_score = 0.1;
  double success_iou = 0.5;
  std::optional<double> success_score;  // default: detector operating threshold
  std::optional<double> min_score;      // eval target filter; default: operating threshold
  double intensity = kDefaultInjectedIntensity;
  int timeout_ms = 30000;
  int retries = 1;
  std::string cloud;
  std::string baseline;
  double angle_tol = 1e-6;
  std::string model = "hdl64e";
  std::size_t scenes = 30;

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"command", command},
            {"dataset", dataset},
            {"frame", frame},
            {"target", target},
            {"points", points},
            {"iters", iters},
            {"restarts", restarts},
            {"step", step},
            {"window-deg", window_deg},
            {"az-res-deg", az_res_deg},
            {"detector", detector},
            {"surrogate", surrogate},
            {"grad", grad},
            {"seed", seed},
            {"out", out},
            {"format", format},
            {"jobs", jobs},
            {"counts", counts},
            {"fd-step", fd_step},
            {"max-calls", max_calls},
            {"eps-iou", eps_iou},
            {"eps-score", eps_score},
            {"success-iou", success_iou},
            {"success-score", opt(success_score)},
            {"min-score", opt(min_score)},
            {"intensity", intensity},
            {"timeout-ms", timeout_ms},
            {"retries", retries},
            {"cloud", cloud},
            {"baseline", baseline},
            {"angle-tol", angle_tol},
            {"model", model},
            {"scenes", scenes}};
  }
};

namespace cli_detail {

// Detector construction shared by every command.
struct DetectorChoice {
  DetectorFactory factory;
  double operating_threshold = 0.3;
  bool surrogate = true;
  std::optional<SurrogateParams> params;
};

inline DetectorChoice choose_detector(const RunConfig& c) {
  DetectorChoice d;
  if (c.detector == "surrogate") {
    SurrogateParams p = c.surrogate.empty() ? SurrogateParams{} : read_surrogate_params(c.surrogate);
    d.operating_threshold = p.operating_threshold;
    d.params = p;
    auto shared = std::make_shared<const SurrogateDetector>(p);
    d.factory = [shared] { return std::make_unique<SurrogateDetector>(*shared); };
    return d;
  }
  if (c.detector.starts_with("external:")) {
    const std::string endpoint = c.detector.substr(9);
    if (endpoint.empty()) throw ConfigError("--detector external: needs an endpoint");
    const ExternalDetectorOptions opt{c.timeout_ms, c.retries};
    d.surrogate = false;
    d.factory = [endpoint, opt] { return std::make_unique<ExternalDetector>(endpoint, opt); };
    return d;
  }
  throw ConfigError("unknown detector '" + c.detector + "' (expected surrogate or external:<endpoint>)");
}

inline AttackConfig attack_config(const RunConfig& c, const DetectorChoice& d) {
  AttackConfig a;
  a.points = c.points;
  a.restarts = c.restarts;
  a.iterations = c.iters;
  a.eps_iou = c.eps_iou;
  a.eps_score = c.eps_score;
  a.step = c.step;
  a.success_iou = c.success_iou;
  a.success_score = c.success_score.value_or(d.operating_threshold);
  if (c.grad == "auto") {
    a.gradient = d.surrogate ? GradientMode::analytic : GradientMode::finite_difference;
  } else {
    a.gradient = parse_gradient_mode(c.grad);
  }
  a.fd_step = c.fd_step;
  a.max_detector_calls = c.max_calls;
  a.seed = c.seed;
  if (!(c.window_deg > 0.0)) throw ConfigError("--window-deg must be positive");
  if (!(c.az_res_deg > 0.0)) throw ConfigError("--az-res-deg must be positive");
  a.window = deg_to_rad(c.window_deg);
  a.azimuth_resolution = deg_to_rad(c.az_res_deg);
  a.injected_intensity = c.intensity;
  if (d.params) a.placement_side = d.params->placement_side;
  a.validate();
  return a;
}

inline std::vector<LabeledScene> load_scenes(const RunConfig& c) {
  if (c.dataset.empty()) throw ConfigError("--dataset is required");
  std::vector<std::string> ids;
  if (!c.frame.empty()) {
    ids.push_back(kitti::format_frame_id(c.frame));
  } else {
    ids = kitti::list_frames(c.dataset);
  }
  std::vector<LabeledScene> out;
  for (const std::string& id : ids) out.push_back(to_labeled(kitti::load_frame(c.dataset, id)));
  return out;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  kitti::write_text(path, j.dump(2) + "\n");
}

// ---- commands --------------------------------------------------------------------

inline int cmd_beams(const RunConfig& c, std::ostream& out) {
  if (c.model != "hdl64e") throw ConfigError("unknown LiDAR model '" + c.model + "' (supported: hdl64e)");
  const BeamTable t = hdl64e_beam_table();
  out << "beam,elevation_deg,elevation_rad\n";
  for (std::size_t k = 0; k < t.size(); ++k) {
    out << k << "," << kitti::format_double(rad_to_deg(t[k])) << "," << kitti::format_double(t[k]) << "\n";
  }
  return 0;
}

inline int cmd_attack(const RunConfig& c, std::ostream& out) {
  if (c.frame.empty()) throw ConfigError("--frame is required");
  const DetectorChoice d = choose_detector(c);
  const AttackConfig a = attack_config(c, d);
  const LabeledScene scene = load_scenes(c).front();
  if (c.target >= scene.cars.size()) {
    throw ConfigError("--target " + std::to_string(c.target) + " out of range: frame " + scene.id + " has " +
                      std::to_string(scene.cars.size()) + " cars");
  }
  const Box3D& gt = scene.cars[c.target];
  auto det = d.factory();
  const AttackResult r = run_hiding_attack(scene.input(), gt, *det, a);

  fs::create_directories(c.out);
  const fs::path cloud_path = fs::path(c.out) / (scene.id + "_adv.bin");
  const fs::path report_path = fs::path(c.out) / (scene.id + "_report.json");
  kitti::write_point_cloud(r.final_cloud, cloud_path);
  write_json(report_path, attack_report_json(r, describe_target(scene.id, c.target, gt), c.to_json()));
  out << (r.success ? "hidden" : "not hidden") << ": frame " << scene.id << " target " << c.target << " after "
      << r.restarts_used << " restart(s), " << r.iterations_used << " step(s)\n"
      << cloud_path.string() << "\n"
      << report_path.string() << "\n";
  return r.success ? 0 : 1;
}

inline int cmd_validate(const RunConfig& c, std::ostream& out) {
  if (c.cloud.empty() || c.baseline.empty()) throw ConfigError("validate needs --cloud and --baseline");
  if (!(c.az_res_deg > 0.0) || !(c.window_deg > 0.0)) throw ConfigError("angles must be positive");
  const PointCloud cloud = kitti::read_point_cloud(c.cloud);
  const PointCloud base = kitti::read_point_cloud(c.baseline);

  // Multiset difference on exact values: injected = cloud - baseline, removed = baseline - cloud.
  auto key = [](const LidarPoint& p) { return std::array<double, 4>{p.x, p.y, p.z, p.intensity}; };
  std::map<std::array<double, 4>, std::ptrdiff_t> balance;
  for (const LidarPoint& p : base) ++balance[key(p)];
  for (const LidarPoint& p : cloud) --balance[key(p)];
  PointCloud injected;
  PointCloud removed;
  for (const auto& [k, n] : balance) {
    const LidarPoint p{k[0], k[1], k[2], k[3]};
    for (std::ptrdiff_t i = 0; i < -n; ++i) injected.push_back(p);
    for (std::ptrdiff_t i = 0; i < n; ++i) removed.push_back(p);
  }

  const RayGrid grid{hdl64e_beam_table(), deg_to_rad(c.az_res_deg)};
  const AdvPointSet adv = adv_points_from_cloud(injected, grid);
  const ValidationReport rep = validate_physical(adv, grid.beams, deg_to_rad(c.window_deg), c.angle_tol);

  // Strongest return: a scene point may only vanish from a ray that now carries an injected point.
  std::set<RayId> injected_rays;
  for (const AdvPoint& p : adv.points) injected_rays.insert(p.ray);
  std::size_t unexplained = 0;
  for (const LidarPoint& p : removed) {
    const auto ray = grid.ray_for(p.position());
    if (!ray || !injected_rays.contains(*ray)) ++unexplained;
  }
  const bool passed = rep.passed() && unexplained == 0;

  nlohmann::json j{{"cloud", c.cloud},
                   {"baseline", c.baseline},
                   {"injected_points", injected.size()},
                   {"removed_points", removed.size()},
                   {"one_point_per_ray", rep.one_point_per_ray},
                   {"on_beam_grid", rep.on_beam_grid},
                   {"within_window", rep.within_window},
                   {"duplicate_rays", rep.duplicate_rays.size()},
                   {"off_grid", rep.off_grid.size()},
                   {"azimuth_extent_deg", rad_to_deg(rep.azimuth_extent)},
                   {"window_deg", c.window_deg},
                   {"angle_tol", c.angle_tol},
                   {"unexplained_removals", unexplained},
                   {"passed", passed}};
  out << j.dump(2) << "\n";
  return passed ? 0 : 1;
}

inline fs::path report_path(const RunConfig& c, const std::string& stem) {
  return fs::path(c.out) / (stem + (c.format == "json" ? ".json" : ".csv"));
}

inline int cmd_eval(const RunConfig& c, std::ostream& out, bool sweep_only) {
  const ReportFormat format = parse_report_format(c.format);
  const DetectorChoice d = choose_detector(c);
  const AttackConfig a = attack_config(c, d);
  const std::vector<LabeledScene> scenes = load_scenes(c);
  const double min_score = c.min_score.value_or(d.operating_threshold);

  EvalReport rep;
  if (sweep_only) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> counts = c.counts.empty() ? default_point_counts() : c.counts;
    auto det = d.factory();
    const std::size_t budget = *std::max_element(counts.begin(), counts.end());
    std::vector<TargetRef> targets;
    for (const TargetRef& t : select_targets(scenes, *det, a.success_iou, min_score)) {
      if (point_capacity(scenes[t.scene].cars[t.car], a) >= budget) {
        targets.push_back(t);
      } else {
        ++rep.infeasible_targets;
      }
    }
    rep.config = c.to_json();
    rep.frames = scenes.size();
    rep.sweep = sweep_point_counts(scenes, targets, d.factory, counts, a, c.jobs);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } else {
    EvalOptions opt;
    opt.target_min_score = min_score;
    opt.jobs = c.jobs;
    opt.sweep_counts = c.counts;
    rep = evaluate(scenes, d.factory, a, opt, c.to_json());
  }
  fs::create_directories(c.out);
  for (const fs::path& p : emit_report(rep, format, report_path(c, sweep_only ? "sweep" : "eval"))) {
    out << p.string() << "\n";
  }
  if (!sweep_only) {
    out << "targets: " << rep.targets.size() << " (" << rep.infeasible_targets
        << " skipped: budget does not fit), asr: " << (rep.asr ? kitti::format_double(*rep.asr) : "n/a") << "\n";
  }
  for (const SweepRow& r : rep.sweep) out << "points " << r.points << ": asr " << kitti::format_double(r.asr) << "\n";
  return 0;
}

inline int cmd_calibrate(const RunConfig& c, std::ostream& out, std::ostream& err) {
  std::vector<LabeledScene> scenes =
      c.dataset.empty() ? to_labeled_all(calibration_fixtures()) : load_scenes(c);
  CalibrationOptions opt;
  if (!c.surrogate.empty()) opt.base = read_surrogate_params(c.surrogate);
  opt.points = c.points;
  opt.seed = c.seed;
  opt.window = deg_to_rad(c.window_deg);
  opt.azimuth_resolution = deg_to_rad(c.az_res_deg);
  opt.injected_intensity = c.intensity;
  try {
    const CalibrationResult r = calibrate_surrogate(scenes, opt);
    fs::create_directories(c.out);
    const fs::path path = fs::path(c.out) / "surrogate.cfg";
    write_surrogate_params(r.params, path);
    out << format_surrogate_params(r.params) << "# margin " << kitti::format_double(r.margin) << "\n"
        << path.string() << "\n";
    return 0;
  } catch (const CalibrationFailureError& e) {
    err << "spooflab: calibration failed: " << e.what() << "\n";
    if (e.best()) err << "# best found\n" << format_surrogate_params(*e.best());
    return 1;
  }
}

inline int cmd_synth(const RunConfig& c, std::ostream& out) {
  const std::vector<SyntheticScene> scenes = c.scenes == 0 ? calibration_fixtures() : scene_suite(c.scenes, c.seed);
  write_kitti_dataset(c.out, scenes);
  out << "wrote " << scenes.size() << " frames to " << c.out << "\n";
  return 0;
}

// Exit code for an error, looking through nested causes.
inline ExitCode classify(const std::exception& e) {
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    return classify(inner);
  }
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const InfeasibleBudgetError*>(&e)) return ExitCode::usage;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const MalformedFileError*>(&e) ||
      dynamic_cast<const FrameIncompleteError*>(&e) || dynamic_cast<const NonInvertibleCalibrationError*>(&e) ||
      dynamic_cast<const DetectorError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e) ||
      dynamic_cast<const DegeneratePointError*>(&e)) {
    return ExitCode::io;
  }
  return ExitCode::failed;
}

}  // namespace cli_detail

// Parses and runs one command. Diagnostics go to `err`.
inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  RunConfig c;
  CLI::App app{"LiDAR hiding-attack toolkit"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "Flat key = value settings file (default: $SPOOFLAB_CONFIG)");

  auto* beams = app.add_subcommand("beams", "Print the beam elevation table as CSV");
  auto* attack = app.add_subcommand("attack", "Hide one labeled car in one frame");
  auto* validate = app.add_subcommand("validate", "Check an attacked cloud against the physical constraints");
  auto* eval = app.add_subcommand("eval", "Attack every detected car; report ASR, bins and recall");
  auto* sweep = app.add_subcommand("sweep", "Attack success rate as a function of the point budget");
  auto* calibrate = app.add_subcommand("calibrate", "Fit the surrogate detector's weights to fixture cars");
  auto* synth = app.add_subcommand("synth", "Write a synthetic KITTI-layout dataset");
  const std::vector<CLI::App*> all{beams, attack, validate, eval, sweep, calibrate, synth};

  beams->add_option("--model", c.model, "LiDAR model")->capture_default_str();

  auto attack_flags = [&](CLI::App* s) {
    s->add_option("--points", c.points, "Injected point budget")->capture_default_str();
    s->add_option("--iters", c.iters, "Iterations per restart")->capture_default_str();
    s->add_option("--restarts", c.restarts, "Random restarts")->capture_default_str();
    s->add_option("--step", c.step, "Gradient step (m per unit gradient)")->capture_default_str();
    s->add_option("--window-deg", c.window_deg, "Horizontal spoofing window")->capture_default_str();
    s->add_option("--az-res-deg", c.az_res_deg, "Azimuth resolution")->capture_default_str();
    s->add_option("--detector", c.detector, "surrogate | external:<endpoint>")->capture_default_str();
    s->add_option("--surrogate", c.surrogate, "Surrogate params file (from calibrate)");
    s->add_option("--grad", c.grad, "auto | analytic | fd")->capture_default_str();
    s->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    s->add_option("--fd-step", c.fd_step, "Finite-difference step (m)")->capture_default_str();
    s->add_option("--max-calls", c.max_calls, "Detector call budget per attack (0 = unlimited)")->capture_default_str();
    s->add_option("--eps-iou", c.eps_iou, "Relevant-proposal IoU threshold")->capture_default_str();
    s->add_option("--eps-score", c.eps_score, "Relevant-proposal score threshold")->capture_default_str();
    s->add_option("--success-iou", c.success_iou, "IoU at which a proposal still counts as a detection")
        ->capture_default_str();
    s->add_option("--success-score", c.success_score, "Score at which a proposal counts (default: operating threshold)");
    s->add_option("--intensity", c.intensity, "Intensity of injected returns")->capture_default_str();
    s->add_option("--timeout-ms", c.timeout_ms, "External detector timeout")->capture_default_str();
    s->add_option("--retries", c.retries, "External detector retries")->capture_default_str();
    s->add_option("--dataset", c.dataset, "KITTI-layout dataset root");
    s->add_option("--frame", c.frame, "Frame id");
    s->add_option("--out", c.out, "Output directory")->capture_default_str();
  };
  for (CLI::App* s : {attack, eval, sweep}) attack_flags(s);
  attack->add_option("--target", c.target, "Index of the car among the frame's Car labels")->capture_default_str();
  for (CLI::App* s : {eval, sweep}) {
    s->add_option("--format", c.format, "json | csv")->capture_default_str();
    s->add_option("--jobs", c.jobs, "Parallel attacks")->capture_default_str();
    s->add_option("--counts", c.counts, "Point budgets, comma separated")->delimiter(',');
    s->add_option("--min-score", c.min_score, "Clean score a car needs to be attacked (default: operating threshold)");
  }

  validate->add_option("--cloud", c.cloud, "Attacked cloud (.bin)");
  validate->add_option("--baseline", c.baseline, "Clean cloud (.bin)");
  validate->add_option("--window-deg", c.window_deg, "Horizontal spoofing window")->capture_default_str();
  validate->add_option("--az-res-deg", c.az_res_deg, "Azimuth resolution")->capture_default_str();
  validate->add_option("--angle-tol", c.angle_tol, "Angle tolerance (rad); float32 storage needs ~1e-6")
      ->capture_default_str();

  calibrate->add_option("--dataset", c.dataset, "Fixture dataset root (default: built-in synthetic fixtures)");
  calibrate->add_option("--surrogate", c.surrogate, "Params file supplying the non-searched settings");
  calibrate->add_option("--points", c.points, "Injected point budget")->capture_default_str();
  calibrate->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  calibrate->add_option("--window-deg", c.window_deg, "Horizontal spoofing window")->capture_default_str();
  calibrate->add_option("--az-res-deg", c.az_res_deg, "Azimuth resolution")->capture_default_str();
  calibrate->add_option("--intensity", c.intensity, "Intensity of injected returns")->capture_default_str();
  calibrate->add_option("--out", c.out, "Output directory")->capture_default_str();

  synth->add_option("--out", c.out, "Dataset root to create")->capture_default_str();
  synth->add_option("--scenes", c.scenes, "Number of random scenes (0 = calibration fixtures)")->capture_default_str();
  synth->add_option("--seed", c.seed, "Random seed")->capture_default_str();

  // Settings from the config file become flags placed right after the
  // command, so explicit flags (parsed later) win.
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // --config may appear anywhere; it is consumed here.
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config") {
        if (i + 1 >= args.size()) throw ConfigError("--config needs a file name");
        config_path = args[++i];
      } else if (args[i].starts_with("--config=")) {
        config_path = args[i].substr(9);
      } else {
        rest.push_back(args[i]);
      }
    }
    args = std::move(rest);
    if (config_path.empty()) {
      if (const char* env = std::getenv("SPOOFLAB_CONFIG"); env != nullptr && *env != '\0') config_path = env;
    }
    if (!config_path.empty()) {
      std::size_t cmd_pos = args.size();
      CLI::App* cmd = nullptr;
      for (std::size_t i = 0; i < args.size() && !cmd; ++i) {
        for (CLI::App* s : all) {
          if (args[i] == s->get_name()) cmd = s, cmd_pos = i;
        }
      }
      std::vector<std::string> injected;
      for (const auto& [key, value] : parse_key_values(kitti::read_text(config_path), config_path)) {
        bool known = false;
        for (CLI::App* s : all) known = known || s->get_option_no_throw("--" + key) != nullptr;
        if (!known || key == "config") throw ConfigError(config_path + ": unknown setting '" + key + "'");
        if (cmd && cmd->get_option_no_throw("--" + key)) injected.push_back("--" + key + "=" + value);
      }
      if (cmd) args.insert(args.begin() + static_cast<std::ptrdiff_t>(cmd_pos) + 1, injected.begin(), injected.end());
      c.config_file = config_path;
    }
  } catch (const std::exception& e) {
    err << "spooflab: " << e.what() << "\n";
    return static_cast<int>(cli_detail::classify(e));
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "spooflab: " << e.what() << "\n" << "run 'spooflab --help' for usage\n";
    return static_cast<int>(ExitCode::usage);
  }

  for (CLI::App* s : all) {
    if (s->parsed()) c.command = s->get_name();
  }
  try {
    if (c.command == "beams") return cli_detail::cmd_beams(c, out);
    if (c.command == "attack") return cli_detail::cmd_attack(c, out);
    if (c.command == "validate") return cli_detail::cmd_validate(c, out);
    if (c.command == "eval") return cli_detail::cmd_eval(c, out, false);
    if (c.command == "sweep") return cli_detail::cmd_eval(c, out, true);
    if (c.command == "calibrate") return cli_detail::cmd_calibrate(c, out, err);
    if (c.command == "synth") return cli_detail::cmd_synth(c, out);
  } catch (const std::exception& e) {
    err << "spooflab: " << e.what() << "\n";
    return static_cast<int>(cli_detail::classify(e));
  }
  err << "spooflab: no command given\n";
  return static_cast<int>(ExitCode::usage);
}

}  // namespace spooflab
