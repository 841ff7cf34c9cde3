#pragma once

// Versioned plain-text configuration: one `key = value` per line, `#`
// comments, blank lines ignored. The first setting must be
// `config_version = 1`. Unknown keys, duplicates and malformed values are
// ConfigErrors naming the line.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "softtouch/continuum.hpp"
#include "softtouch/control_loop.hpp"
#include "softtouch/tasks.hpp"

namespace softtouch::config {

inline constexpr int kConfigVersion = 1;

struct GridSettings {
  int width = kSensorWidth;
  int height = kSensorHeight;
  double spacing = kSensorPitch;  // m
  EdgeCondition edges = EdgeCondition::Neumann;
};

struct TeleopSettings {
  int port = 8765;
  double stream_hz = 60.0;
  double motion_scale = 1.5;
  double cue_force = 10.0;        // N
  double cue_deformation = 8.0;   // mm
  double workspace = 0.1;         // m, half-width of the lateral workspace
  std::string session = "desk";
  std::string record_dir = ".";

  void validate() const;
};

struct Settings {
  sim::MaterialParams material;
  GridSettings grid;
  control::LoopConfig loop;
  control::PresetTable presets;
  std::optional<tasks::TaskId> task;
  /// Task fields set in the file, applied over the task's defaults.
  std::vector<std::pair<std::string, std::string>> task_overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  tasks::EvalOptions eval;
  TeleopSettings teleop;
  std::optional<double> reserved_eps2;  // second diffusion coefficient, accepted and unused

  /// Task spec for `id` with this file's material, loop, presets and task
  /// overrides applied. ConfigError if the result does not validate.
  tasks::TaskSpec taskSpec(tasks::TaskId id) const;
};

/// Parses a whole file. Every key must be known.
Settings parse(const std::string& text, const std::string& origin = "config");
Settings loadFile(const std::string& path);

/// Environment overrides, looked up through `getenv` so tests can inject
/// their own: SOFTTOUCH_PORT and SOFTTOUCH_STREAM_HZ.
void applyEnvironment(Settings& s, const std::function<const char*(const char*)>& getenv);

/// Every accepted key with a one-line description, in documentation order.
std::vector<std::pair<std::string, std::string>> schema();

/// Canonical text form of a settings object; parse(format(s)) == s for every
/// field the file can express.
std::string format(const Settings& s);

}  // namespace softtouch::config
