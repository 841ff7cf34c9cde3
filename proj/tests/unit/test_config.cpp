#include <doctest.h>

#include <map>
#include <string>

#include "softtouch/config.hpp"

using namespace softtouch;
using namespace softtouch::config;

namespace {

std::string errorOf(const std::string& text) {
  try {
    parse(text, "t.cfg");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("a bare version gives the defaults") {
  const Settings s = parse("config_version = 1\n");
  CHECK(s.material == sim::MaterialParams{});
  CHECK(s.loop.virtual_mass == 1e-3);
  CHECK(s.teleop.motion_scale == 1.5);
  CHECK(s.teleop.stream_hz == 60.0);
  CHECK_FALSE(s.task.has_value());
  CHECK_FALSE(s.seed.has_value());
}

TEST_CASE("version handling") {
  CHECK(errorOf("") .find("missing config_version") != std::string::npos);
  CHECK(errorOf("config_version = 2\n").find("unsupported") != std::string::npos);
  CHECK(errorOf("task = Wipe\nconfig_version = 1\n").find("first setting") != std::string::npos);
  CHECK(errorOf("# comment\n\n  config_version = 1   # trailing\n").empty());
}

TEST_CASE("unknown, duplicate and malformed keys") {
  CHECK(errorOf("config_version = 1\nmaterial.k_x = 3\n").find("t.cfg:2: unknown key 'material.k_x'") !=
        std::string::npos);
  CHECK(errorOf("config_version = 1\nseed = 1\nseed = 2\n").find("duplicate") != std::string::npos);
  CHECK(errorOf("config_version = 1\nmaterial.k_e = stiff\n").find("t.cfg:2") != std::string::npos);
  CHECK_FALSE(errorOf("config_version = 1\nmaterial.k_e = nan\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\nmaterial.k_e = -5\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\njust words\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\ncontrol.observer = maybe\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\npreset.low = 60 0.3\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\npreset.low = 600 0.3 0.08\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\ntask = Juggle\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\ntrials = -1\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\ntask.schedule.arm0 = Mid Mid Low\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\ntask.schedule.arm0 = Mid Mid Soft Low Low Low Mid\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\ncontrol.servo_dt = 0\n").empty());
  CHECK_FALSE(errorOf("config_version = 1\nteleop.port = 70000\n").empty());
}

TEST_CASE("format and parse round trip") {
  Settings s;
  s.material.k_e = 1.7e6;
  s.material.tau = 0.3;
  s.grid.edges = EdgeCondition::DirichletZero;
  s.loop.edges = EdgeCondition::DirichletZero;
  s.loop.inner_gain = 4.0;
  s.loop.observer_enabled = false;
  s.presets.mid = {200.0, 1.5, 0.04};
  s.task = tasks::TaskId::Wipe;
  s.seed = 99;
  s.trials = 7;
  s.eval.ensemble = false;
  s.teleop.port = 9000;
  s.teleop.session = "bench";
  s.reserved_eps2 = 0.03;
  s.task_overrides = {{"task.path_length", "0.05"}, {"task.f_des", "2"}};
  const std::string text = format(s);
  const Settings back = parse(text);
  CHECK(format(back) == text);
  CHECK(back.material == s.material);
  CHECK(back.grid.edges == EdgeCondition::DirichletZero);
  CHECK(back.loop.edges == EdgeCondition::DirichletZero);
  CHECK_FALSE(back.loop.observer_enabled);
  CHECK(back.presets.mid == s.presets.mid);
  CHECK(back.task == tasks::TaskId::Wipe);
  CHECK(back.seed == 99u);
  CHECK(back.trials == 7);
  CHECK(back.teleop.session == "bench");
  CHECK(back.reserved_eps2 == 0.03);
}

TEST_CASE("task overrides apply over the task defaults") {
  const Settings s = parse(
      "config_version = 1\nmaterial.k_e = 1.8e6\ntask.tolerance = 0\ntask.time_limit = 4\n"
      "preset.low = 70 0.4 0.07\ncontrol.inner_gain = 6\n");
  const tasks::TaskSpec spec = s.taskSpec(tasks::TaskId::Insert);
  CHECK(spec.tolerance == 0.0);
  CHECK(spec.time_limit == 4.0);
  CHECK(spec.material.k_e == 1.8e6);
  CHECK(spec.presets.low == control::ComplianceParams{70.0, 0.4, 0.07});
  CHECK(spec.loop.inner_gain == 6.0);
  CHECK(spec.f_des == tasks::TaskSpec::defaults(tasks::TaskId::Insert).f_des);

  const Settings two = parse("config_version = 1\ntask.f_des = 3 1.5\n");
  CHECK_THROWS_AS(two.taskSpec(tasks::TaskId::Insert), ConfigError);
  CHECK(two.taskSpec(tasks::TaskId::BimanualInsert).f_des == std::vector<double>{3.0, 1.5});

  const Settings sched = parse("config_version = 1\ntask.schedule.arm0 = Mid Mid High High High High Low\n");
  CHECK(sched.taskSpec(tasks::TaskId::Wipe).schedule[0][2] == control::PresetLevel::High);

  const Settings grid = parse("config_version = 1\ngrid.width = 16\n");
  CHECK_THROWS_AS(grid.taskSpec(tasks::TaskId::PressHold), ConfigError);
}

TEST_CASE("environment overrides") {
  Settings s = parse("config_version = 1\nteleop.port = 9000\n");
  std::map<std::string, std::string> env{{"SOFTTOUCH_PORT", "9100"}, {"SOFTTOUCH_STREAM_HZ", "30"}};
  auto lookup = [&](const char* name) -> const char* {
    const auto it = env.find(name);
    return it == env.end() ? nullptr : it->second.c_str();
  };
  applyEnvironment(s, lookup);
  CHECK(s.teleop.port == 9100);
  CHECK(s.teleop.stream_hz == 30.0);
  env["SOFTTOUCH_STREAM_HZ"] = "fast";
  CHECK_THROWS_AS(applyEnvironment(s, lookup), ConfigError);
  env.clear();
  Settings untouched = parse("config_version = 1\n");
  applyEnvironment(untouched, lookup);
  CHECK(untouched.teleop.port == 8765);
}

TEST_CASE("the shipped example parses and every key is documented") {
  const Settings s = loadFile(std::string(SOFTTOUCH_SOURCE_DIR) + "/config/desk.cfg");
  CHECK(s.task == tasks::TaskId::Insert);
  CHECK_NOTHROW(s.taskSpec(tasks::TaskId::Insert));
  const auto keys = schema();
  CHECK(keys.size() > 40);
  for (const auto& [k, doc] : keys) CHECK_FALSE(doc.empty());
  CHECK_THROWS_AS(loadFile("/nonexistent/file.cfg"), ConfigError);
}
