#pragma once

// Simulated manipulation tasks, the scripted expert that demonstrates them,
// and the evaluation harness. A TaskRig owns one ContactLoop per arm and
// advances in 0.1 s action periods; its phase machine only looks at
// measurable quantities, so every action source is judged the same way.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "softtouch/control_loop.hpp"
#include "softtouch/dataset.hpp"
#include "softtouch/policy.hpp"

namespace softtouch::tasks {

enum class TaskId : std::uint8_t { PressHold = 0, Wipe, Insert, BimanualInsert };

const char* taskName(TaskId id);
/// ConfigError on unknown names.
TaskId parseTask(const std::string& name);

inline constexpr int kPhaseCount = 7;
using dataset::Phase;
using PhaseSchedule = std::array<control::PresetLevel, kPhaseCount>;

struct TaskSpec {
  TaskId id = TaskId::PressHold;
  int arms = 1;
  std::vector<double> f_des;             // N, per arm
  std::vector<PhaseSchedule> schedule;   // per arm
  control::PresetTable presets;
  sim::MaterialParams material;
  control::LoopConfig loop;
  double time_limit = 8.0;               // s
  double max_force = 15.0;               // N, success ceiling

  // PressHold
  double model_error = 0.10;             // relative prior error on every constant
  double hold_band = 0.05;
  double hold_time = 1.0;                // s

  // Wipe
  double mark_offset = 0.05;             // m, mark centre within +-
  double path_length = 0.08;             // m
  double traverse_speed = 0.04;          // m/s
  double stiffness_min = 0.25;           // board stiffness multiplier range
  double stiffness_max = 1.0;
  double tilt_max = 0.01;                // surface slope along the path
  double bump_height = 5e-4;             // m
  double wipe_band = 0.25;
  double wipe_fraction = 0.90;

  // Insert / BimanualInsert
  double yaw_limit_deg = 15.0;
  double box_error = 0.004;              // m, per axis
  double tolerance = 0.002;              // m, hole clearance
  double capture_radius = 0.008;         // m
  double guidance = 0.27;                // chamfer lateral force per newton of normal force
  double yaw_lever = 0.02;               // m, tip offset per unit sin(yaw)
  double insert_depth = 0.015;           // m
  double insert_speed = 0.01;            // m/s
  double fixture_gain = 0.2;             // fixture push per newton of insertion force (bimanual)

  static TaskSpec defaults(TaskId id);
  /// ConfigError on inconsistent sizes or out-of-range values.
  void validate() const;
};

/// Everything a trial randomises, drawn from the trial seed.
struct TrialSetup {
  std::uint64_t seed = 0;
  double model_scale = 1.0;              // PressHold prior = truth * scale
  double stiffness_scale = 1.0;          // Wipe board
  double mark = 0.0;                     // m
  double tilt = 0.0;
  double bump_center = 0.0;              // m along the path from its start
  double yaw = 0.0;                      // rad
  std::array<double, 2> box{0.0, 0.0};   // m
};

/// Uniform double in [lo, hi) from the top 53 bits of one draw; identical on
/// every standard library, unlike std::uniform_real_distribution.
double uniform(std::mt19937_64& rng, double lo, double hi);
/// Per-trial seed derived from a base seed and trial index (splitmix64).
std::uint64_t trialSeed(std::uint64_t base, int index);
TrialSetup sampleTrial(const TaskSpec& spec, std::uint64_t seed);

struct TrialResult {
  bool success = false;
  Phase phase_reached = Phase::Approach;
  double peak_force = 0.0;        // N
  double in_band_fraction = 0.0;  // share of engaged cycles inside the task band
  double contact_time = -1.0;     // s, first touch
  double settle_time = -1.0;      // s after contact, PressHold only
  double sim_time = 0.0;          // s
  double wall_time = 0.0;         // s
};

class TaskRig {
 public:
  TaskRig(const TaskSpec& spec, const TrialSetup& setup);

  /// Latest pose and tactile fields per arm.
  policy::Observation observe() const;
  /// Executes one action per arm for one 0.1 s period (ten control cycles).
  void step(const policy::MultiAction& action);
  /// Latches a new action without advancing time; the wipe tool heads for
  /// the new position over the following period.
  void setAction(const policy::MultiAction& action);
  /// Advances one control cycle under the latched action.
  void cycle();
  /// Overrides the force target of one arm (teleoperation); nullopt restores
  /// the task's own target. Phase thresholds always use the task target.
  void setForceTarget(int arm, std::optional<double> f_des);
  int cyclesPerStep() const { return cycles_per_step_; }
  long cycles() const { return cycles_; }
  /// Field feedback on or off in every arm's inner loop.
  void setFieldFeedback(bool on);

  /// Recording frame for the current instant: observation and controller
  /// channels, action left default for the caller to fill in.
  dataset::Frame snapshot() const;

  Phase phase() const { return phase_; }
  double time() const;
  /// Whole action periods elapsed.
  long tick() const { return cycles_ / cycles_per_step_; }
  bool finished() const;
  TrialResult result() const;

  int arms() const { return static_cast<int>(arms_.size()); }
  const control::ContactLoop& loop(int arm) const { return arms_[static_cast<std::size_t>(arm)].loop; }
  double measuredForce(int arm) const;
  /// Force-field centroid in grid units for the latest sample.
  std::array<double, 2> centroid(int arm) const;
  double insertionDepth() const { return depth_; }
  /// Wipe tool position along the path, m from its start.
  double toolPosition() const { return tool_x_; }
  /// Insert: tip-to-hole distance after compliance and fixture motion, m.
  double alignmentError() const { return effective_error_; }
  const TaskSpec& spec() const { return spec_; }
  const TrialSetup& setup() const { return setup_; }
  const std::vector<std::string>& trace() const { return trace_; }

 private:
  struct Arm {
    control::ContactLoop loop;
    control::CycleReport last;
    std::array<double, 2> target{0.0, 0.0};
    std::array<double, 3> orientation{0.0, 0.0, 0.0};
    double z_cmd = -1.0;
    bool engaged = false;
  };

  void updateSurface();
  void insertion(const std::vector<control::CycleCommand>& cmds, double dt);
  void advancePhase(double t);
  void enter(Phase p, double t);
  bool inBand(double band) const;
  int primary() const { return spec_.arms - 1; }

  TaskSpec spec_;
  TrialSetup setup_;
  std::vector<Arm> arms_;
  Phase phase_ = Phase::Approach;
  long cycles_ = 0;
  int cycles_per_step_ = 10;
  std::vector<control::CycleCommand> cmds_;
  std::vector<std::optional<double>> force_override_;
  bool latched_ = false;
  int since_action_ = 0;
  double wipe_from_ = 0.0;
  double wipe_to_ = 0.0;
  // Wipe
  double tool_x_ = 0.0;
  bool path_done_ = false;
  // Insert
  double depth_ = 0.0;
  double deflection_ = 0.0;
  double effective_error_ = 0.0;
  // Bookkeeping
  bool done_ = false;
  double release_time_ = -1.0;
  double band_since_ = -1.0;
  double settle_time_ = -1.0;
  bool hold_done_ = false;
  int band_cycles_ = 0;
  int engaged_cycles_ = 0;
  int traverse_cycles_ = 0;
  int traverse_in_band_ = 0;
  double peak_force_ = 0.0;
  double contact_time_ = -1.0;
  std::vector<std::string> trace_;
};

/// Phase-aware demonstrator. Reads only what the rig exposes to any policy
/// (phase, time, measured force, force-field centroid).
class ScriptedExpert {
 public:
  enum class Variant { Scheduled, FixedMid, NoField };

  ScriptedExpert(const TaskSpec& spec, Variant variant = Variant::Scheduled);

  /// Action for the coming period, already rounded to float32 so recorded
  /// and executed actions agree bit for bit.
  policy::MultiAction act(const TaskRig& rig);
  /// Preset label per arm for the action last returned.
  const std::vector<control::PresetLevel>& presets() const { return presets_; }

 private:
  TaskSpec spec_;
  Variant variant_;
  std::vector<control::PresetLevel> presets_;
  std::optional<double> yaw_estimate_;
  double engage_start_ = -1.0;
  double x_cmd_ = 0.0;
};

/// Rounds every component to float32, keeping compliance inside its ranges.
policy::MultiAction quantizeAction(const policy::MultiAction& a);

struct EpisodeRun {
  dataset::Episode episode;
  TrialResult result;
};

/// Runs the expert for one seeded trial and records it. GenerationError
/// carrying the phase trace when the expert does not succeed.
EpisodeRun scriptedExpert(const TaskSpec& spec, std::uint64_t seed);

/// Re-simulates the recorded actions from the recorded seed and returns the
/// largest deviation between recorded and re-simulated observations.
double determinismAudit(const TaskSpec& spec, const dataset::Episode& episode);

/// Demonstrations per task in the bundled demo sets.
int demoCount(TaskId id);

enum class Source : std::uint8_t { Scripted = 0, Weights, FixedCompliance, NoField };
const char* sourceName(Source s);
Source parseSource(const std::string& name);

struct EvalTable {
  TaskId task = TaskId::PressHold;
  Source source = Source::Scripted;
  std::uint64_t seed = 0;
  std::vector<TrialResult> trials;
  std::array<int, kPhaseCount> failures_by_phase{};

  int successes() const;
  double successRate() const;
};

struct EvalOptions {
  bool ensemble = true;
  double ensemble_decay = 0.1;
};

/// Runs n seeded trials. ConfigError when the weights do not match the
/// task's arm count or are missing for Source::Weights.
EvalTable evaluate(Source source, const TaskSpec& spec, int n_trials, std::uint64_t seed,
                   const policy::PolicyRuntime* policy = nullptr, const EvalOptions& options = {});

/// Runs one trial with the given source; exposed for tests and benchmarks.
TrialResult runTrial(Source source, const TaskSpec& spec, std::uint64_t seed,
                     const policy::PolicyRuntime* policy = nullptr, const EvalOptions& options = {},
                     dataset::Episode* record = nullptr);

/// Results file body: stable field order, no wall-clock values.
std::string formatResults(const std::vector<EvalTable>& tables);
/// Human-readable success table.
std::string formatTable(const std::vector<EvalTable>& tables);

}  // namespace softtouch::tasks
