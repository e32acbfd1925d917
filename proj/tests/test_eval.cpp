#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "spooflab/eval.hpp"
#include "spooflab/kitti_io.hpp"
#include "spooflab/synthetic.hpp"

using namespace spooflab;

namespace {

AttackResult outcome(bool ok) {
  AttackResult r;
  r.success = ok;
  return r;
}

TargetDescriptor at_xy(double x, double y) { return describe_target("000000", 0, ground_car(x, y)); }

// Scripted detector: returns a fixed list regardless of input.
class Fixed final : public Detector {
 public:
  explicit Fixed(std::vector<Proposal> p) : p_(std::move(p)) {}
  std::vector<Proposal> detect(const DetectorInput&) override { return p_; }
  std::string name() const override { return "fixed"; }

 private:
  std::vector<Proposal> p_;
};

DetectorFactory surrogate_factory() {
  return [] { return std::make_unique<SurrogateDetector>(SurrogateParams{}); };
}

const std::vector<LabeledScene>& small_suite() {
  static const std::vector<LabeledScene> s = to_labeled_all(scene_suite(4, 11));
  return s;
}

// The designated target of each suite scene; distractors may sit too far out to host 200 points.
std::vector<TargetRef> suite_targets(const std::vector<LabeledScene>& scenes) {
  SurrogateDetector det(SurrogateParams{});
  std::vector<TargetRef> out;
  for (const TargetRef& t : select_targets(scenes, det, 0.5, 0.3)) {
    if (t.car == 0) out.push_back(t);
  }
  return out;
}

AttackConfig quick_config() {
  AttackConfig c;
  c.points = 60;
  c.iterations = 60;
  c.restarts = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(Asr, Examples) {
  std::vector<AttackResult> r;
  for (int i = 0; i < 10; ++i) r.push_back(outcome(i < 4));
  EXPECT_DOUBLE_EQ(attack_success_rate(r), 0.4);
  std::vector<AttackResult> all(3, outcome(true));
  EXPECT_EQ(attack_success_rate(all), 1.0);
  EXPECT_THROW(attack_success_rate(std::vector<AttackResult>{}), UndefinedMetricError);
  EXPECT_THROW(success_rate(std::span<const bool>{}), UndefinedMetricError);
}

TEST(Asr, PermutationInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<AttackResult> r;
    const std::size_t n = 1 + rng() % 20;
    for (std::size_t i = 0; i < n; ++i) r.push_back(outcome(rng() & 1U));
    const double a = attack_success_rate(r);
    std::shuffle(r.begin(), r.end(), rng);
    EXPECT_EQ(attack_success_rate(r), a);
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Targets, DistanceAndAngle) {
  const TargetDescriptor t = at_xy(3.0, 4.0);
  EXPECT_NEAR(t.distance, 5.0, 1e-12);
  EXPECT_NEAR(t.angle, 53.13010235415598, 1e-9);
  EXPECT_NEAR(at_xy(10.0, -10.0).angle, -45.0, 1e-12);
  EXPECT_EQ(at_xy(-10.0, 0.0).angle, 180.0);
  EXPECT_EQ(at_xy(0.0, 0.0).angle, 0.0);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 1000; ++i) {
    const TargetDescriptor d = at_xy(u(rng), u(rng));
    EXPECT_GT(d.angle, -180.0);
    EXPECT_LE(d.angle, 180.0);
    EXPECT_GE(d.distance, 0.0);
  }
}

TEST(Bins, Examples) {
  const std::vector<TargetDescriptor> ts{at_xy(20.0, 0.0), at_xy(50.0, 0.0), at_xy(15.0, 0.0), at_xy(4.99, 0.0),
                                         at_xy(45.0, 0.0)};
  const auto d = bin_targets(ts, BinAxis::distance);
  ASSERT_EQ(d.size(), 5u);
  EXPECT_EQ(d[0].label, "[5,15)m");
  EXPECT_EQ(d[1].label, "[15,25)m");
  EXPECT_EQ(d[1].members, (std::vector<std::size_t>{0, 2}));
  EXPECT_TRUE(d[4].overflow);
  EXPECT_EQ(d[4].members, (std::vector<std::size_t>{1, 3, 4}));

  const auto a = bin_targets(ts, BinAxis::angle);
  ASSERT_EQ(a.size(), 7u);
  EXPECT_EQ(a[3].label, "[0,10)deg");
  EXPECT_EQ(a[3].members.size(), 5u);
  const auto b = bin_targets(std::vector<TargetDescriptor>{at_xy(10.0, -10.0), at_xy(10.0, 10.0 * std::tan(deg_to_rad(-25.0)))},
                             BinAxis::angle);
  EXPECT_EQ(b[6].members, std::vector<std::size_t>{0});
  EXPECT_EQ(b[0].members, std::vector<std::size_t>{1});
}

TEST(Bins, PopulationsPartitionTargets) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-60.0, 60.0);
  std::vector<TargetDescriptor> ts;
  for (int i = 0; i < 300; ++i) ts.push_back(at_xy(u(rng), u(rng)));
  for (BinAxis axis : {BinAxis::distance, BinAxis::angle}) {
    std::vector<int> seen(ts.size(), 0);
    std::size_t total = 0;
    for (const Bin& b : bin_targets(ts, axis)) {
      total += b.members.size();
      for (std::size_t i : b.members) ++seen[i];
    }
    EXPECT_EQ(total, ts.size());
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }));
  }
}

TEST(Recall, PerfectAndEmptyDetectors) {
  const std::vector<std::vector<Box3D>> gts{{ground_car(10.0, 0.0), ground_car(20.0, 5.0)}, {ground_car(15.0, -3.0)}};
  std::vector<std::vector<Proposal>> perfect;
  for (const auto& g : gts) {
    std::vector<Proposal> p;
    for (const Box3D& b : g) p.push_back({b, 1.0});
    perfect.push_back(p);
  }
  const auto t = default_iou_thresholds();
  ASSERT_EQ(t.size(), 9u);
  for (double r : recall_curve(perfect, gts, t, 0.3)) EXPECT_EQ(r, 1.0);
  const std::vector<std::vector<Proposal>> none(2);
  for (double r : recall_curve(none, gts, t, 0.3)) EXPECT_EQ(r, 0.0);
}

TEST(Recall, GreedyMatchingIsOneToOne) {
  const Box3D g = ground_car(10.0, 0.0);
  Box3D near = g;
  near.x += 0.2;
  // Two proposals on one car: one match. One proposal on two coincident cars: one match.
  EXPECT_EQ(matched_count(std::vector<Proposal>{{g, 0.9}, {near, 0.8}}, std::vector<Box3D>{g}, 0.5, 0.3), 1u);
  EXPECT_EQ(matched_count(std::vector<Proposal>{{g, 0.9}}, std::vector<Box3D>{g, g}, 0.5, 0.3), 1u);
  // Higher confidence picks first: the exact box claims g, leaving `near` for the second car.
  const Box3D g2 = near;
  EXPECT_EQ(matched_count(std::vector<Proposal>{{near, 0.5}, {g, 0.9}}, std::vector<Box3D>{g, g2}, 0.9, 0.3), 2u);
  // Below the score threshold never matches.
  EXPECT_EQ(matched_count(std::vector<Proposal>{{g, 0.29}}, std::vector<Box3D>{g}, 0.1, 0.3), 0u);
}

TEST(Recall, NonIncreasingOnRandomDetections) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::vector<Box3D>> gts(3);
    std::vector<std::vector<Proposal>> dets(3);
    for (int f = 0; f < 3; ++f) {
      for (int k = 0; k < 3; ++k) {
        const Box3D g = ground_car(10.0 + 8.0 * k, 10.0 * u(rng) - 5.0, u(rng));
        gts[f].push_back(g);
        for (int j = 0; j < 2; ++j) {
          Box3D p = g;
          p.x += 2.0 * u(rng) - 1.0;
          p.y += u(rng) - 0.5;
          p.yaw += 0.4 * u(rng) - 0.2;
          dets[f].push_back({p, u(rng)});
        }
      }
    }
    const auto c = recall_curve(dets, gts, default_iou_thresholds(), 0.3);
    for (std::size_t i = 1; i < c.size(); ++i) EXPECT_LE(c[i], c[i - 1]);
  }
}

TEST(Recall, Errors) {
  const std::vector<std::vector<Box3D>> gts{{ground_car(10.0, 0.0)}};
  const std::vector<std::vector<Proposal>> dets(1);
  EXPECT_THROW(recall_curve(dets, gts, std::vector<double>{0.5, 0.3}, 0.3), ConfigError);
  EXPECT_THROW(recall_curve(dets, gts, std::vector<double>{}, 0.3), ConfigError);
  EXPECT_THROW(recall_curve(dets, std::vector<std::vector<Box3D>>{{}}, std::vector<double>{0.5}, 0.3),
               UndefinedMetricError);
}

TEST(Recall, SurrogateOnSuite) {
  SurrogateDetector det(SurrogateParams{});
  const auto c = recall_at_iou(small_suite(), det, default_iou_thresholds(), 0.3);
  EXPECT_GT(c.front(), 0.5);
  for (std::size_t i = 1; i < c.size(); ++i) EXPECT_LE(c[i], c[i - 1]);
}

TEST(Sweep, SingletonCountHasOneRow) {
  const auto& scenes = small_suite();
  const auto targets = suite_targets(scenes);
  ASSERT_FALSE(targets.empty());
  const std::vector<std::size_t> counts{200};
  const auto rows = sweep_point_counts(scenes, targets, surrogate_factory(), counts, quick_config());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].points, 200u);
  EXPECT_EQ(rows[0].attempts, targets.size());
  EXPECT_DOUBLE_EQ(rows[0].asr, static_cast<double>(rows[0].successes) / static_cast<double>(targets.size()));
}

TEST(Sweep, ParallelMatchesSerial) {
  const auto& scenes = small_suite();
  const auto targets = suite_targets(scenes);
  const std::vector<std::size_t> counts{20, 100};
  AttackConfig cfg = quick_config();
  cfg.iterations = 20;
  const auto serial = sweep_point_counts(scenes, targets, surrogate_factory(), counts, cfg, 1);
  const auto parallel = sweep_point_counts(scenes, targets, surrogate_factory(), counts, cfg, 3);
  EXPECT_EQ(serial, parallel);
}

TEST(Sweep, ErrorsCarryCountAndTarget) {
  const auto& scenes = small_suite();
  const std::vector<TargetRef> targets{{1, 0}};
  EXPECT_THROW(sweep_point_counts(scenes, targets, surrogate_factory(), std::vector<std::size_t>{}, quick_config()),
               ConfigError);
  EXPECT_THROW(sweep_point_counts(scenes, std::vector<TargetRef>{}, surrogate_factory(),
                                  std::vector<std::size_t>{20}, quick_config()),
               UndefinedMetricError);
  try {
    sweep_point_counts(scenes, targets, surrogate_factory(), std::vector<std::size_t>{20, 100000}, quick_config());
    FAIL();
  } catch (const SweepError& e) {
    EXPECT_EQ(e.points(), 100000u);
    EXPECT_EQ(e.target(), scenes[1].id + "#0");
    try {
      std::rethrow_if_nested(e);
      FAIL();
    } catch (const InfeasibleBudgetError& inner) {
      EXPECT_EQ(inner.requested(), 100000u);
    }
  }
}

TEST(Evaluate, InvariantsAndDeterminism) {
  const auto& scenes = small_suite();
  EvalOptions opt;
  opt.sweep_counts = {20, 200};
  const EvalReport a = evaluate(scenes, surrogate_factory(), quick_config(), opt, json{{"k", 1}});
  const EvalReport b = evaluate(scenes, surrogate_factory(), quick_config(), opt, json{{"k", 1}});
  EXPECT_TRUE(same_outcome(a, b));
  opt.jobs = 2;
  EXPECT_TRUE(same_outcome(a, evaluate(scenes, surrogate_factory(), quick_config(), opt, json{{"k", 1}})));

  EXPECT_EQ(a.frames, 4u);
  // The far distractor in the last scene is detected but cannot host 200 points.
  EXPECT_EQ(a.infeasible_targets, 1u);
  SurrogateDetector det(SurrogateParams{});
  EXPECT_EQ(a.targets.size() + a.infeasible_targets, select_targets(scenes, det, 0.5, 0.3).size());
  ASSERT_FALSE(a.targets.empty());
  ASSERT_TRUE(a.asr.has_value());
  EXPECT_GE(*a.asr, 0.0);
  EXPECT_LE(*a.asr, 1.0);
  ASSERT_EQ(a.recall.size(), 9u);
  for (std::size_t i = 0; i < a.recall.size(); ++i) {
    EXPECT_LE(a.recall[i].recall_attacked, a.recall[i].recall_clean);
    if (i > 0) {
      EXPECT_LE(a.recall[i].recall_clean, a.recall[i - 1].recall_clean);
      EXPECT_LE(a.recall[i].recall_attacked, a.recall[i - 1].recall_attacked);
    }
  }
  // Targets were clean-detected at IoU 0.5, and hidden ones drop out of the attacked recall.
  const auto hidden = std::count_if(a.targets.begin(), a.targets.end(), [](const TargetOutcome& o) { return o.success; });
  EXPECT_EQ(a.recall[4].recall_clean, 1.0);
  EXPECT_LE(a.recall[4].recall_attacked,
            1.0 - static_cast<double>(hidden) / static_cast<double>(a.targets.size()) + 1e-12);

  std::size_t population = 0;
  for (const BinRow& r : a.bins) {
    if (r.axis == "distance") population += r.population;
  }
  EXPECT_EQ(population, a.targets.size());
  ASSERT_EQ(a.sweep.size(), 2u);
  EXPECT_EQ(a.sweep[0].points, 20u);
}

TEST(Evaluate, NoDetectedTargets) {
  const auto& scenes = small_suite();
  const DetectorFactory blind = [] { return std::make_unique<Fixed>(std::vector<Proposal>{}); };
  const EvalReport r = evaluate(scenes, blind, quick_config(), EvalOptions{});
  EXPECT_TRUE(r.targets.empty());
  EXPECT_FALSE(r.asr.has_value());
  EXPECT_TRUE(r.recall.empty());
  const json j = to_json(r);
  EXPECT_TRUE(j["asr"].is_null());
  EXPECT_TRUE(same_outcome(eval_report_from_json(j), r));
}

TEST(Report, JsonRoundTrip) {
  EvalReport r;
  r.config = json{{"points", 200}, {"detector", "surrogate"}};
  r.frames = 3;
  r.targets.push_back({at_xy(20.0, 1.0), true, 1, 0});
  r.targets.push_back({at_xy(50.0, -3.0), false, 5, 2500});
  r.asr = 0.5;
  r.sweep = {{20, 2, 1, 0.5}, {200, 2, 2, 1.0}};
  r.recall = {{0.1, 1.0, 0.5}, {0.5, 0.5, 0.0}};
  r.bins = bin_rows(r.targets);
  r.wall_seconds = 1.25;
  const std::string text = to_json(r).dump(2);
  const EvalReport back = eval_report_from_json(json::parse(text));
  EXPECT_TRUE(same_outcome(back, r));
  EXPECT_EQ(back.wall_seconds, 1.25);
  EXPECT_EQ(to_json(back).dump(2), text);
  EXPECT_THROW(eval_report_from_json(json{{"frames", 1}}), MalformedFileError);
}

TEST(Report, CsvFormats) {
  EXPECT_EQ(sweep_csv(std::vector<SweepRow>{{20, 10, 4, 0.4}, {200, 10, 10, 1.0}}), "points,asr\n20,0.4\n200,1\n");
  EXPECT_EQ(recall_csv(std::vector<RecallRow>{{0.1, 1.0, 0.25}}), "iou,recall_clean,recall_attacked\n0.1,1,0.25\n");
  const std::vector<TargetOutcome> outs{{at_xy(20.0, 0.0), true, 1, 0}};
  const std::string bins = bins_csv(bin_rows(outs));
  EXPECT_EQ(bins.substr(0, bins.find('\n')), "axis,bin,lo,hi,population,successes,asr");
  EXPECT_NE(bins.find("distance,[15,25)m,15,25,1,1,1\n"), std::string::npos);
  EXPECT_NE(bins.find("distance,[5,15)m,5,15,0,0,\n"), std::string::npos);
  EXPECT_NE(bins.find("angle,overflow,,,0,0,\n"), std::string::npos);
}

TEST(Report, EmitWritesFilesAndNamesBadPaths) {
  EvalReport r;
  r.sweep = {{20, 1, 1, 1.0}};
  const auto dir = std::filesystem::temp_directory_path() / "spooflab_emit_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto files = emit_report(r, ReportFormat::csv, dir / "rep.json");
  ASSERT_EQ(files.size(), 3u);
  EXPECT_EQ(files[0], dir / "rep_sweep.csv");
  EXPECT_EQ(kitti::read_text(files[0]), "points,asr\n20,1\n");
  const auto js = emit_report(r, ReportFormat::json, dir / "rep.json");
  EXPECT_TRUE(same_outcome(eval_report_from_json(json::parse(kitti::read_text(js[0]))), r));
  try {
    emit_report(r, ReportFormat::json, dir / "missing" / "sub" / "rep.json");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing"), std::string::npos) << e.what();
  }
  EXPECT_EQ(parse_report_format("csv"), ReportFormat::csv);
  EXPECT_THROW(parse_report_format("xml"), ConfigError);
  std::filesystem::remove_all(dir);
}
