#include <doctest.h>

#include <cmath>
#include <numbers>

#include "softtouch/tasks.hpp"

using namespace softtouch;
using namespace softtouch::tasks;

namespace {

const TaskId kAll[] = {TaskId::PressHold, TaskId::Wipe, TaskId::Insert, TaskId::BimanualInsert};

}  // namespace

TEST_CASE("uniform draws stay in range and are portable") {
  std::mt19937_64 a(11);
  std::mt19937_64 b(11);
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform(a, -2.0, 3.0);
    CHECK(u >= -2.0);
    CHECK(u < 3.0);
    CHECK(u == -2.0 + 5.0 * (static_cast<double>(b() >> 11) * 0x1.0p-53));
  }
  CHECK(trialSeed(5, 0) != trialSeed(5, 1));
  CHECK(trialSeed(5, 3) == trialSeed(5, 3));
}

TEST_CASE("randomisation respects its bounds") {
  for (TaskId id : kAll) {
    const TaskSpec spec = TaskSpec::defaults(id);
    const double yaw_limit = spec.yaw_limit_deg * std::numbers::pi / 180.0;
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
      const TrialSetup s = sampleTrial(spec, seed);
      CHECK(s.seed == seed);
      if (id == TaskId::PressHold) {
        CHECK(std::abs(std::abs(s.model_scale - 1.0) - spec.model_error) < 1e-15);
      } else {
        CHECK(s.model_scale == 1.0);
      }
      if (id == TaskId::Wipe) {
        CHECK(s.stiffness_scale >= spec.stiffness_min);
        CHECK(s.stiffness_scale <= spec.stiffness_max);
        CHECK(std::abs(s.mark) <= spec.mark_offset);
        CHECK(std::abs(s.tilt) <= spec.tilt_max);
        CHECK(s.bump_center >= 0.0);
        CHECK(s.bump_center <= spec.path_length);
      }
      if (id == TaskId::Insert || id == TaskId::BimanualInsert) {
        CHECK(std::abs(s.yaw) <= yaw_limit);
        CHECK(std::abs(s.box[0]) <= spec.box_error);
        CHECK(std::abs(s.box[1]) <= spec.box_error);
      } else {
        CHECK(s.yaw == 0.0);
      }
    }
    const TrialSetup x = sampleTrial(spec, 77);
    const TrialSetup y = sampleTrial(spec, 77);
    CHECK(x.yaw == y.yaw);
    CHECK(x.stiffness_scale == y.stiffness_scale);
  }
}

TEST_CASE("task specs validate") {
  for (TaskId id : kAll) {
    CHECK_NOTHROW(TaskSpec::defaults(id).validate());
    CHECK(parseTask(taskName(id)) == id);
  }
  CHECK_THROWS_AS(parseTask("Juggle"), ConfigError);
  TaskSpec s = TaskSpec::defaults(TaskId::Insert);
  s.arms = 2;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TaskSpec::defaults(TaskId::BimanualInsert);
  s.f_des.pop_back();
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TaskSpec::defaults(TaskId::Wipe);
  s.stiffness_max = 0.1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TaskSpec::defaults(TaskId::PressHold);
  s.f_des = {20.0};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = TaskSpec::defaults(TaskId::PressHold);
  s.time_limit = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  for (Source src : {Source::Scripted, Source::Weights, Source::FixedCompliance, Source::NoField})
    CHECK(parseSource(sourceName(src)) == src);
  CHECK_THROWS_AS(parseSource("oracle"), ConfigError);
}

TEST_CASE("press and hold settles inside the band") {
  const TaskSpec spec = TaskSpec::defaults(TaskId::PressHold);
  for (int i = 0; i < 5; ++i) {
    const TrialResult r = runTrial(Source::Scripted, spec, trialSeed(3, i));
    CHECK(r.success);
    CHECK(r.contact_time >= 0.0);
    CHECK(r.settle_time >= 0.0);
    CHECK(r.settle_time < 2.0);
    CHECK(r.peak_force <= spec.max_force);
  }
}

TEST_CASE("a zero-length wipe succeeds without traverse samples") {
  TaskSpec spec = TaskSpec::defaults(TaskId::Wipe);
  spec.path_length = 0.0;
  const EpisodeRun run = scriptedExpert(spec, 4);
  CHECK(run.result.success);
  CHECK(run.result.in_band_fraction == 1.0);
  for (const dataset::Frame& f : run.episode.frames) CHECK(f.phase != Phase::Traverse);
}

TEST_CASE("zero clearance cannot be demonstrated") {
  TaskSpec spec = TaskSpec::defaults(TaskId::Insert);
  spec.tolerance = 0.0;
  spec.time_limit = 3.0;
  CHECK_THROWS_AS(scriptedExpert(spec, 1), GenerationError);
  try {
    scriptedExpert(spec, 1);
  } catch (const GenerationError& e) {
    const std::string what = e.what();
    CHECK(what.find("Engage") != std::string::npos);
    CHECK(what.find("seed 1") != std::string::npos);
  }
}

TEST_CASE("a zero time limit fails every trial") {
  for (TaskId id : kAll) {
    TaskSpec spec = TaskSpec::defaults(id);
    spec.time_limit = 0.0;
    const EvalTable t = evaluate(Source::Scripted, spec, 3, 9);
    CHECK(t.successRate() == 0.0);
    CHECK(t.failures_by_phase[0] == 3);
    for (const TrialResult& r : t.trials) CHECK(r.sim_time == 0.0);
  }
}

TEST_CASE("identical seeds give identical result files") {
  for (TaskId id : {TaskId::Wipe, TaskId::Insert}) {
    const TaskSpec spec = TaskSpec::defaults(id);
    const EvalTable a = evaluate(Source::FixedCompliance, spec, 4, 21);
    const EvalTable b = evaluate(Source::FixedCompliance, spec, 4, 21);
    CHECK(formatResults({a}) == formatResults({b}));
    CHECK(formatResults({a}).find("wall") == std::string::npos);
    int failures = 0;
    for (int n : a.failures_by_phase) failures += n;
    CHECK(failures == 4 - a.successes());
  }
}

TEST_CASE("recorded demonstrations replay exactly") {
  for (TaskId id : kAll) {
    const TaskSpec spec = TaskSpec::defaults(id);
    const EpisodeRun run = scriptedExpert(spec, 12);
    REQUIRE(!run.episode.frames.empty());
    CHECK(run.episode.header.task == taskName(id));
    CHECK(run.episode.header.arms == spec.arms);
    CHECK(determinismAudit(spec, run.episode) <= 1e-9);
    // Through the file format as well.
    const dataset::Episode disk = dataset::parseEpisode(dataset::serializeEpisode(run.episode));
    CHECK(determinismAudit(spec, disk) <= 1e-9);
  }
}

TEST_CASE("the audit notices a tampered action") {
  const TaskSpec spec = TaskSpec::defaults(TaskId::PressHold);
  EpisodeRun run = scriptedExpert(spec, 2);
  REQUIRE(run.episode.frames.size() > 5);
  run.episode.frames[3].arms[0].action.compliance = spec.presets[control::PresetLevel::High];
  CHECK(determinismAudit(spec, run.episode) > 1e-6);
}

TEST_CASE("phases only move forward") {
  for (TaskId id : kAll) {
    const TaskSpec spec = TaskSpec::defaults(id);
    for (Source src : {Source::Scripted, Source::FixedCompliance}) {
      dataset::Episode e;
      runTrial(src, spec, 31, nullptr, {}, &e);
      for (std::size_t i = 1; i < e.frames.size(); ++i) CHECK(e.frames[i].phase >= e.frames[i - 1].phase);
      for (std::size_t i = 1; i < e.frames.size(); ++i)
        CHECK(std::abs(e.frames[i].timestamp - e.frames[i - 1].timestamp - 0.1) < 1e-9);
    }
  }
}

TEST_CASE("compliance schedules beat frozen compliance") {
  for (TaskId id : {TaskId::Insert, TaskId::Wipe}) {
    const TaskSpec spec = TaskSpec::defaults(id);
    const EvalTable scheduled = evaluate(Source::Scripted, spec, 20, 0);
    const EvalTable frozen = evaluate(Source::FixedCompliance, spec, 20, 0);
    CHECK(scheduled.successRate() == 1.0);
    CHECK(frozen.successRate() < scheduled.successRate());
  }
}

TEST_CASE("rig rejects bad actions") {
  const TaskSpec spec = TaskSpec::defaults(TaskId::BimanualInsert);
  TaskRig rig(spec, sampleTrial(spec, 0));
  policy::MultiAction one(1);
  CHECK_THROWS_AS(rig.step(one), ShapeError);
  policy::MultiAction two(2);
  two[1].compliance.lambda1 = 1000.0;
  CHECK_THROWS_AS(rig.step(two), ConfigError);
  two[1].compliance.lambda1 = 250.0;
  two[0].position[0] = NAN;
  CHECK_THROWS_AS(rig.step(two), NumericError);
  CHECK(rig.tick() == 0);

  TaskSpec quick = TaskSpec::defaults(TaskId::PressHold);
  quick.time_limit = 0.2;
  TaskRig short_rig(quick, sampleTrial(quick, 0));
  CHECK_THROWS_AS(short_rig.cycle(), NotReadyError);
  policy::MultiAction a(1);
  short_rig.step(a);
  short_rig.step(a);
  CHECK(short_rig.finished());
  CHECK_THROWS_AS(short_rig.step(a), SessionError);
}

TEST_CASE("quantized actions keep compliance inside the ranges") {
  policy::MultiAction a(1);
  a[0].compliance = {control::kStiffnessRange.hi, control::kDampingRange.lo, control::kDiffusionRange.hi};
  a[0].position = {0.1, 0.2, 0.3};
  const policy::MultiAction q = quantizeAction(a);
  CHECK(control::withinRanges(q[0].compliance));
  CHECK(q[0].position[0] == static_cast<double>(0.1f));
  a[0].compliance = {control::kStiffnessRange.lo, control::kDampingRange.hi, control::kDiffusionRange.lo};
  CHECK(control::withinRanges(quantizeAction(a)[0].compliance));
  CHECK(quantizeAction(q) == q);
}

TEST_CASE("weights drive the rig through the chunk scheduler") {
  const TaskSpec spec = TaskSpec::defaults(TaskId::Insert);
  TaskSpec quick = spec;
  quick.time_limit = 1.0;
  const policy::PolicyRuntime one_arm(policy::seededBundle(policy::Architecture{}, 42));
  for (bool ensemble : {true, false}) {
    EvalOptions opt;
    opt.ensemble = ensemble;
    const EvalTable a = evaluate(Source::Weights, quick, 2, 5, &one_arm, opt);
    const EvalTable b = evaluate(Source::Weights, quick, 2, 5, &one_arm, opt);
    CHECK(formatResults({a}) == formatResults({b}));
    for (const TrialResult& r : a.trials) CHECK(r.sim_time == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(evaluate(Source::Weights, quick, 1, 5, nullptr), ConfigError);
  policy::Architecture two;
  two.arms = 2;
  const policy::PolicyRuntime two_arm(policy::seededBundle(two, 42));
  CHECK_THROWS_AS(evaluate(Source::Weights, quick, 1, 5, &two_arm), ConfigError);
}

TEST_CASE("demo counts") {
  CHECK(demoCount(TaskId::BimanualInsert) == 20);
  CHECK(demoCount(TaskId::Insert) == 30);
  CHECK(demoCount(TaskId::Wipe) == 20);
  CHECK(demoCount(TaskId::PressHold) == 20);
}
