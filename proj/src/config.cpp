#include "softtouch/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "softtouch/errors.hpp"

namespace softtouch::config {

using control::PresetLevel;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

double toDouble(const std::string& v) {
  const char* begin = v.c_str();
  char* end = nullptr;
  const double d = std::strtod(begin, &end);
  if (v.empty() || end != begin + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  if (!std::isfinite(d)) throw ConfigError("non-finite number '" + v + "'");
  return d;
}

template <typename T>
T toInteger(const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected an integer, got '" + v + "'");
  return out;
}

bool toBool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<double> toDoubles(const std::string& v) {
  std::vector<double> out;
  for (const std::string& w : words(v)) out.push_back(toDouble(w));
  if (out.empty()) throw ConfigError("expected at least one number");
  return out;
}

control::ComplianceParams toCompliance(const std::string& v) {
  const auto d = toDoubles(v);
  if (d.size() != 3) throw ConfigError("a preset needs three numbers: lambda1 lambda2 eps");
  return {d[0], d[1], d[2]};
}

tasks::PhaseSchedule toSchedule(const std::string& v) {
  const auto w = words(v);
  if (w.size() != tasks::kPhaseCount) {
    throw ConfigError("a schedule lists one preset per phase (" + std::to_string(tasks::kPhaseCount) + ")");
  }
  tasks::PhaseSchedule s;
  for (std::size_t i = 0; i < w.size(); ++i) s[i] = control::parsePreset(w[i]);
  return s;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string boolean(bool b) { return b ? "true" : "false"; }

std::string compliance(const control::ComplianceParams& c) {
  return num(c.lambda1) + " " + num(c.lambda2) + " " + num(c.eps);
}

std::string edgeName(EdgeCondition e) { return e == EdgeCondition::Neumann ? "neumann" : "dirichlet"; }

EdgeCondition toEdges(const std::string& v) {
  if (v == "neumann") return EdgeCondition::Neumann;
  if (v == "dirichlet") return EdgeCondition::DirichletZero;
  throw ConfigError("edges must be neumann or dirichlet, got '" + v + "'");
}

struct Key {
  const char* name;
  const char* doc;
  std::function<void(Settings&, const std::string&)> set;
  std::function<std::string(const Settings&)> get;
};

#define CF_DOUBLE(key, field, doc) \
  Key { key, doc, [](Settings& s, const std::string& v) { s.field = toDouble(v); }, [](const Settings& s) { return num(s.field); } }
#define CF_INT(key, field, doc) \
  Key { key, doc, [](Settings& s, const std::string& v) { s.field = toInteger<int>(v); }, [](const Settings& s) { return std::to_string(s.field); } }
#define CF_BOOL(key, field, doc) \
  Key { key, doc, [](Settings& s, const std::string& v) { s.field = toBool(v); }, [](const Settings& s) { return boolean(s.field); } }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      CF_DOUBLE("material.k_e", material.k_e, "elastic stiffness, Pa/m"),
      CF_DOUBLE("material.k_v", material.k_v, "viscous coefficient, Pa s/m"),
      CF_DOUBLE("material.k_m", material.k_m, "Maxwell branch stiffness, Pa/m"),
      CF_DOUBLE("material.tau", material.tau, "Maxwell relaxation time, s"),
      CF_DOUBLE("material.D", material.D, "lateral diffusion, m^2/s"),
      CF_INT("grid.width", grid.width, "nodes along x (tasks need 12)"),
      CF_INT("grid.height", grid.height, "nodes along y (tasks need 10)"),
      CF_DOUBLE("grid.spacing", grid.spacing, "node pitch, m (tasks need 0.002)"),
      Key{"grid.edges", "neumann or dirichlet",
          [](Settings& s, const std::string& v) { s.grid.edges = s.loop.edges = toEdges(v); },
          [](const Settings& s) { return edgeName(s.grid.edges); }},
      CF_DOUBLE("control.servo_dt", loop.servo_dt, "servo tick, s"),
      CF_INT("control.ticks_per_cycle", loop.ticks_per_cycle, "servo ticks per control cycle"),
      CF_INT("control.sensor_every", loop.sensor_every, "servo ticks between tactile samples"),
      CF_DOUBLE("control.virtual_mass", loop.virtual_mass, "admittance virtual mass, kg"),
      CF_DOUBLE("control.inner_gain", loop.inner_gain, "inner-loop proportional gain K_p, 1/s"),
      CF_DOUBLE("control.max_force", loop.limits.max_force, "safety force ceiling, N"),
      CF_DOUBLE("control.max_depth", loop.limits.max_depth, "safety deformation ceiling, m"),
      CF_DOUBLE("control.sensor_noise", loop.sensor_noise_rms, "tactile noise rms, kPa"),
      CF_DOUBLE("control.smoothing", loop.smoothing_lambda, "deformation smoothing, m^2"),
      CF_BOOL("control.observer", loop.observer_enabled, "online parameter identification"),
      CF_DOUBLE("control.retract_rate", loop.retract_rate, "lift-off speed when disengaged, m/s"),
      Key{"control.eps2", "reserved second diffusion coefficient, m^2/s (accepted, unused)",
          [](Settings& s, const std::string& v) { s.reserved_eps2 = toDouble(v); },
          [](const Settings& s) { return s.reserved_eps2 ? num(*s.reserved_eps2) : std::string(); }},
      Key{"preset.low", "lambda1 lambda2 eps", [](Settings& s, const std::string& v) { s.presets.low = toCompliance(v); },
          [](const Settings& s) { return compliance(s.presets.low); }},
      Key{"preset.mid", "lambda1 lambda2 eps", [](Settings& s, const std::string& v) { s.presets.mid = toCompliance(v); },
          [](const Settings& s) { return compliance(s.presets.mid); }},
      Key{"preset.high", "lambda1 lambda2 eps",
          [](Settings& s, const std::string& v) { s.presets.high = toCompliance(v); },
          [](const Settings& s) { return compliance(s.presets.high); }},
      Key{"task", "PressHold, Wipe, Insert or BimanualInsert",
          [](Settings& s, const std::string& v) { s.task = tasks::parseTask(v); },
          [](const Settings& s) { return s.task ? std::string(tasks::taskName(*s.task)) : std::string(); }},
      Key{"seed", "base seed for randomised runs",
          [](Settings& s, const std::string& v) { s.seed = toInteger<std::uint64_t>(v); },
          [](const Settings& s) { return s.seed ? std::to_string(*s.seed) : std::string(); }},
      Key{"trials", "evaluation trial count",
          [](Settings& s, const std::string& v) {
            s.trials = toInteger<int>(v);
            if (*s.trials < 0) throw ConfigError("trials must be >= 0");
          },
          [](const Settings& s) { return s.trials ? std::to_string(*s.trials) : std::string(); }},
      CF_BOOL("eval.ensemble", eval.ensemble, "temporal ensembling of policy chunks"),
      CF_DOUBLE("eval.ensemble_decay", eval.ensemble_decay, "ensembling weight decay m"),
      CF_INT("teleop.port", teleop.port, "WebSocket port (env SOFTTOUCH_PORT)"),
      CF_DOUBLE("teleop.stream_hz", teleop.stream_hz, "state stream rate, Hz (env SOFTTOUCH_STREAM_HZ)"),
      CF_DOUBLE("teleop.motion_scale", teleop.motion_scale, "robot motion per unit hand motion"),
      CF_DOUBLE("teleop.cue_force", teleop.cue_force, "force cue threshold, N"),
      CF_DOUBLE("teleop.cue_deformation", teleop.cue_deformation, "deformation cue threshold, mm"),
      CF_DOUBLE("teleop.workspace", teleop.workspace, "lateral workspace half-width, m"),
      Key{"teleop.session", "session id", [](Settings& s, const std::string& v) { s.teleop.session = v; },
          [](const Settings& s) { return s.teleop.session; }},
      Key{"teleop.record_dir", "directory for recorded episodes",
          [](Settings& s, const std::string& v) { s.teleop.record_dir = v; },
          [](const Settings& s) { return s.teleop.record_dir; }},
  };
  return table;
}

#undef CF_DOUBLE
#undef CF_INT
#undef CF_BOOL

struct TaskKey {
  const char* name;
  const char* doc;
  std::function<void(tasks::TaskSpec&, const std::string&)> set;
};

#define CF_TASK(field, doc) \
  TaskKey { "task." #field, doc, [](tasks::TaskSpec& t, const std::string& v) { t.field = toDouble(v); } }

const std::vector<TaskKey>& taskKeys() {
  static const std::vector<TaskKey> table = {
      TaskKey{"task.f_des", "force target per arm, N", [](tasks::TaskSpec& t, const std::string& v) { t.f_des = toDoubles(v); }},
      TaskKey{"task.schedule.arm0", "preset per phase for arm 0 (Approach .. Release)",
              [](tasks::TaskSpec& t, const std::string& v) {
                t.schedule.resize(std::max<std::size_t>(t.schedule.size(), 1));
                t.schedule[0] = toSchedule(v);
              }},
      TaskKey{"task.schedule.arm1", "preset per phase for arm 1",
              [](tasks::TaskSpec& t, const std::string& v) {
                t.schedule.resize(std::max<std::size_t>(t.schedule.size(), 2));
                t.schedule[1] = toSchedule(v);
              }},
      CF_TASK(time_limit, "trial time limit, s"),
      CF_TASK(max_force, "success force ceiling, N"),
      CF_TASK(model_error, "PressHold relative prior error"),
      CF_TASK(hold_band, "PressHold relative force band"),
      CF_TASK(hold_time, "PressHold hold duration, s"),
      CF_TASK(mark_offset, "Wipe mark position range, m"),
      CF_TASK(path_length, "Wipe path length, m"),
      CF_TASK(traverse_speed, "Wipe expert speed, m/s"),
      CF_TASK(stiffness_min, "Wipe board stiffness multiplier, low end"),
      CF_TASK(stiffness_max, "Wipe board stiffness multiplier, high end"),
      CF_TASK(tilt_max, "Wipe surface slope range"),
      CF_TASK(bump_height, "Wipe bump height, m"),
      CF_TASK(wipe_band, "Wipe relative force band"),
      CF_TASK(wipe_fraction, "Wipe share of traverse in band"),
      CF_TASK(yaw_limit_deg, "Insert peg yaw range, deg"),
      CF_TASK(box_error, "Insert hole position error per axis, m"),
      CF_TASK(tolerance, "Insert clearance, m"),
      CF_TASK(capture_radius, "Insert chamfer capture radius, m"),
      CF_TASK(guidance, "Insert chamfer lateral force per newton"),
      CF_TASK(yaw_lever, "Insert tip offset per unit sin(yaw), m"),
      CF_TASK(insert_depth, "Insert target depth, m"),
      CF_TASK(insert_speed, "Insert speed, m/s"),
      CF_TASK(fixture_gain, "BimanualInsert fixture push per newton"),
  };
  return table;
}

#undef CF_TASK

const TaskKey* findTaskKey(const std::string& name) {
  for (const TaskKey& k : taskKeys())
    if (name == k.name) return &k;
  return nullptr;
}

}  // namespace

void TeleopSettings::validate() const {
  if (port < 0 || port > 65535) throw ConfigError("teleop.port must lie in [0, 65535]");
  if (!(stream_hz > 0.0) || stream_hz > 1000.0) throw ConfigError("teleop.stream_hz must lie in (0, 1000]");
  if (!(motion_scale > 0.0)) throw ConfigError("teleop.motion_scale must be positive");
  if (!(cue_force > 0.0) || !(cue_deformation > 0.0)) throw ConfigError("teleop cue thresholds must be positive");
  if (!(workspace > 0.0)) throw ConfigError("teleop.workspace must be positive");
  if (session.empty()) throw ConfigError("teleop.session must not be empty");
}

tasks::TaskSpec Settings::taskSpec(tasks::TaskId id) const {
  if (grid.width != kSensorWidth || grid.height != kSensorHeight || std::abs(grid.spacing - kSensorPitch) > 1e-15) {
    throw ConfigError("tasks run on the 12x10 sensor grid at 2 mm pitch");
  }
  tasks::TaskSpec spec = tasks::TaskSpec::defaults(id);
  spec.material = material;
  spec.loop = loop;
  spec.presets = presets;
  for (const auto& [key, value] : task_overrides) findTaskKey(key)->set(spec, value);
  spec.loop.validate();
  spec.validate();
  return spec;
}

Settings parse(const std::string& text, const std::string& origin) {
  Settings s;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  bool versioned = false;
  std::set<std::string> seen;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    if (!versioned) {
      if (key != "config_version") throw ConfigError(where + "the first setting must be config_version");
      if (value != std::to_string(kConfigVersion)) {
        throw ConfigError(where + "unsupported config_version '" + value + "' (expected " +
                          std::to_string(kConfigVersion) + ")");
      }
      versioned = true;
      continue;
    }
    try {
      if (const TaskKey* tk = findTaskKey(key)) {
        tasks::TaskSpec scratch = tasks::TaskSpec::defaults(tasks::TaskId::BimanualInsert);
        tk->set(scratch, value);  // syntax check; ranges are checked against the chosen task
        s.task_overrides.emplace_back(key, value);
        continue;
      }
      bool known = false;
      for (const Key& k : keys()) {
        if (key == k.name) {
          k.set(s, value);
          known = true;
          break;
        }
      }
      if (!known) throw ConfigError("unknown key '" + key + "'");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.rfind(origin, 0) == 0 ? msg : where + msg);
    }
  }
  if (!versioned) throw ConfigError(origin + ": missing config_version");
  try {
    s.material.validate();
    s.loop.validate();
    s.presets.validate();
    s.teleop.validate();
    if (s.grid.width < 3 || s.grid.height < 3 || !(s.grid.spacing > 0.0)) {
      throw ConfigError("grid must be at least 3x3 with positive spacing");
    }
    if (s.reserved_eps2 && !(*s.reserved_eps2 > 0.0)) throw ConfigError("control.eps2 must be positive");
    if (!(s.eval.ensemble_decay >= 0.0)) throw ConfigError("eval.ensemble_decay must be >= 0");
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return s;
}

Settings loadFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse(text.str(), path);
}

void applyEnvironment(Settings& s, const std::function<const char*(const char*)>& getenv) {
  try {
    if (const char* port = getenv("SOFTTOUCH_PORT")) s.teleop.port = toInteger<int>(port);
    if (const char* hz = getenv("SOFTTOUCH_STREAM_HZ")) s.teleop.stream_hz = toDouble(hz);
    s.teleop.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("environment: ") + e.what());
  }
}

std::vector<std::pair<std::string, std::string>> schema() {
  std::vector<std::pair<std::string, std::string>> out;
  out.emplace_back("config_version", "must be 1, first setting in the file");
  for (const Key& k : keys()) out.emplace_back(k.name, k.doc);
  for (const TaskKey& k : taskKeys()) out.emplace_back(k.name, k.doc);
  return out;
}

std::string format(const Settings& s) {
  std::ostringstream out;
  out << "config_version = " << kConfigVersion << '\n';
  for (const Key& k : keys()) {
    const std::string v = k.get(s);
    if (!v.empty()) out << k.name << " = " << v << '\n';
  }
  for (const auto& [key, value] : s.task_overrides) out << key << " = " << value << '\n';
  return out.str();
}

}  // namespace softtouch::config
