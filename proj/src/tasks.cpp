#include "softtouch/tasks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "softtouch/errors.hpp"

namespace softtouch::tasks {

using control::PresetLevel;

namespace {

constexpr double kReleaseSettle = 0.3;  // s with every arm off the surface before a trial ends
constexpr double kBumpWidth = 0.004;    // m
constexpr double kYawSpan = 6.0;        // grid units of cap travel per unit sin(yaw)
constexpr double kCentroidFloor = 1.0;  // kPa, cells below this are ignored for the centroid
constexpr double kEngageSettle = 0.5;   // s the expert waits in Engage before committing
constexpr double kSlack = 1e-6;         // m, float32 position commands land just short of their targets

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool insertTask(TaskId id) { return id == TaskId::Insert || id == TaskId::BimanualInsert; }

PhaseSchedule uniformSchedule(PresetLevel level) {
  PhaseSchedule s;
  s.fill(level);
  return s;
}

PhaseSchedule engagedSchedule(PresetLevel engaged) {
  PhaseSchedule s = uniformSchedule(PresetLevel::Mid);
  for (Phase p : {Phase::Engage, Phase::Hold, Phase::Traverse, Phase::Insert}) s[static_cast<std::size_t>(p)] = engaged;
  return s;
}

Mask diskMask(double cx, double cy, double r) {
  Mask m(kSensorWidth, kSensorHeight, 0);
  for (int y = 0; y < kSensorHeight; ++y)
    for (int x = 0; x < kSensorWidth; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < r * r) m(x, y) = 1;
  return m;
}

double roundInside(double v, const control::Range& r) {
  v = std::clamp(v, r.lo, r.hi);
  float f = static_cast<float>(v);
  if (f > r.hi) f = std::nextafter(f, -INFINITY);
  if (f < r.lo) f = std::nextafter(f, INFINITY);
  return f;
}

double f32(double v) { return static_cast<float>(v); }

}  // namespace

const char* taskName(TaskId id) {
  switch (id) {
    case TaskId::PressHold: return "PressHold";
    case TaskId::Wipe: return "Wipe";
    case TaskId::Insert: return "Insert";
    case TaskId::BimanualInsert: return "BimanualInsert";
  }
  return "?";
}

TaskId parseTask(const std::string& name) {
  for (TaskId id : {TaskId::PressHold, TaskId::Wipe, TaskId::Insert, TaskId::BimanualInsert})
    if (name == taskName(id)) return id;
  throw ConfigError("unknown task '" + name + "'");
}

TaskSpec TaskSpec::defaults(TaskId id) {
  TaskSpec s;
  s.id = id;
  switch (id) {
    case TaskId::PressHold:
      s.f_des = {3.0};
      s.schedule = {uniformSchedule(PresetLevel::Mid)};
      s.time_limit = 6.0;
      break;
    case TaskId::Wipe:
      s.f_des = {2.5};
      s.schedule = {engagedSchedule(PresetLevel::Low)};
      break;
    case TaskId::Insert:
      s.f_des = {1.5};
      s.schedule = {engagedSchedule(PresetLevel::Low)};
      break;
    case TaskId::BimanualInsert:
      s.arms = 2;
      s.f_des = {3.0, 1.5};
      s.schedule = {engagedSchedule(PresetLevel::High), engagedSchedule(PresetLevel::Low)};
      break;
  }
  return s;
}

void TaskSpec::validate() const {
  const int want = id == TaskId::BimanualInsert ? 2 : 1;
  if (arms != want) throw ConfigError(std::string("task ") + taskName(id) + " needs " + std::to_string(want) + " arm(s)");
  if (static_cast<int>(f_des.size()) != arms || static_cast<int>(schedule.size()) != arms) {
    throw ConfigError("task: f_des and schedule need one entry per arm");
  }
  for (double f : f_des)
    if (!(f > 0.0) || !(f < max_force)) throw ConfigError("task: f_des must lie in (0, max_force)");
  presets.validate();
  material.validate();
  auto finite_nonneg = [](double v, const char* what) {
    if (!std::isfinite(v) || v < 0.0) throw ConfigError(std::string("task: ") + what + " must be finite and >= 0");
  };
  auto positive = [](double v, const char* what) {
    if (!std::isfinite(v) || !(v > 0.0)) throw ConfigError(std::string("task: ") + what + " must be positive");
  };
  auto fraction = [](double v, const char* what) {
    if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string("task: ") + what + " must lie in (0, 1)");
  };
  finite_nonneg(time_limit, "time_limit");
  positive(max_force, "max_force");
  if (!(model_error >= 0.0 && model_error < 0.5)) throw ConfigError("task: model_error must lie in [0, 0.5)");
  fraction(hold_band, "hold_band");
  finite_nonneg(hold_time, "hold_time");
  finite_nonneg(mark_offset, "mark_offset");
  finite_nonneg(path_length, "path_length");
  positive(traverse_speed, "traverse_speed");
  positive(stiffness_min, "stiffness_min");
  if (!(stiffness_max >= stiffness_min) || !std::isfinite(stiffness_max)) {
    throw ConfigError("task: stiffness_max must be >= stiffness_min");
  }
  finite_nonneg(tilt_max, "tilt_max");
  finite_nonneg(bump_height, "bump_height");
  fraction(wipe_band, "wipe_band");
  if (!(wipe_fraction >= 0.0 && wipe_fraction <= 1.0)) throw ConfigError("task: wipe_fraction must lie in [0, 1]");
  if (!(yaw_limit_deg >= 0.0 && yaw_limit_deg <= 45.0)) throw ConfigError("task: yaw_limit_deg must lie in [0, 45]");
  finite_nonneg(box_error, "box_error");
  finite_nonneg(tolerance, "tolerance");
  positive(capture_radius, "capture_radius");
  finite_nonneg(guidance, "guidance");
  finite_nonneg(yaw_lever, "yaw_lever");
  positive(insert_depth, "insert_depth");
  positive(insert_speed, "insert_speed");
  finite_nonneg(fixture_gain, "fixture_gain");
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

std::uint64_t trialSeed(std::uint64_t base, int index) {
  return splitmix64(base + static_cast<std::uint64_t>(index));
}

TrialSetup sampleTrial(const TaskSpec& spec, std::uint64_t seed) {
  // Every draw happens for every task, in a fixed order, so a seed means the
  // same thing whatever the task.
  std::mt19937_64 rng(seed);
  TrialSetup s;
  s.seed = seed;
  const double sign = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;
  const double log_k = uniform(rng, std::log(spec.stiffness_min), std::log(spec.stiffness_max));
  const double mark = uniform(rng, -spec.mark_offset, spec.mark_offset);
  const double tilt = uniform(rng, -spec.tilt_max, spec.tilt_max);
  const double bump = uniform(rng, 0.0, 1.0);
  const double yaw_limit = spec.yaw_limit_deg * std::numbers::pi / 180.0;
  const double yaw = uniform(rng, -yaw_limit, yaw_limit);
  const double bx = uniform(rng, -spec.box_error, spec.box_error);
  const double by = uniform(rng, -spec.box_error, spec.box_error);
  switch (spec.id) {
    case TaskId::PressHold: s.model_scale = 1.0 + sign * spec.model_error; break;
    case TaskId::Wipe:
      s.stiffness_scale = std::exp(log_k);
      s.mark = mark;
      s.tilt = tilt;
      s.bump_center = bump * spec.path_length;
      break;
    case TaskId::Insert:
    case TaskId::BimanualInsert:
      s.yaw = yaw;
      s.box = {bx, by};
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------

TaskRig::TaskRig(const TaskSpec& spec, const TrialSetup& setup) : spec_(spec), setup_(setup) {
  spec_.validate();
  const control::LoopConfig& loop = spec_.loop;
  const double n = policy::kChunkPeriod / loop.cyclePeriod();
  cycles_per_step_ = static_cast<int>(std::lround(n));
  if (cycles_per_step_ < 1 || std::abs(n - cycles_per_step_) > 1e-9) {
    throw ConfigError("task: the control cycle must divide the 0.1 s action period");
  }
  for (int a = 0; a < spec_.arms; ++a) {
    sim::MaterialParams truth = spec_.material;
    sim::MaterialParams model = spec_.material;
    Mask patch = rectMask(kSensorWidth, kSensorHeight, 2, 2, 8, 6);
    control::TemplateGeometry shape;
    switch (spec_.id) {
      case TaskId::PressHold:
        model.k_e *= setup_.model_scale;
        model.k_v *= setup_.model_scale;
        model.k_m *= setup_.model_scale;
        model.tau *= setup_.model_scale;
        model.D *= setup_.model_scale;
        break;
      case TaskId::Wipe:
        truth.k_e *= setup_.stiffness_scale;
        truth.k_v *= setup_.stiffness_scale;
        truth.k_m *= setup_.stiffness_scale;
        patch = fullMask(kSensorWidth, kSensorHeight);
        break;
      case TaskId::Insert:
      case TaskId::BimanualInsert:
        if (a == primary()) {
          shape.kind = control::Template::SphericalCap;
          shape.center_x = 0.5 * (kSensorWidth - 1) + kYawSpan * std::sin(setup_.yaw);
          shape.center_y = 0.5 * (kSensorHeight - 1);
          shape.radius = 4.0;
          patch = diskMask(shape.center_x, shape.center_y, shape.radius);
        }
        break;
    }
    const std::uint64_t sensor_seed = splitmix64(setup_.seed ^ (0x5eed0000ULL + static_cast<std::uint64_t>(a)));
    arms_.push_back(Arm{control::ContactLoop(truth, model, patch, shape, loop, sensor_seed), {}});
    Arm& arm = arms_.back();
    arm.last.controller.f_des = spec_.f_des[static_cast<std::size_t>(a)];
    arm.last.observer.model = model;
  }
  force_override_.assign(static_cast<std::size_t>(spec_.arms), std::nullopt);
  trace_.push_back("0.00 Approach");
  if (spec_.id == TaskId::Wipe) updateSurface();
}

void TaskRig::setFieldFeedback(bool on) {
  for (Arm& a : arms_) a.loop.setFieldFeedback(on);
}

double TaskRig::measuredForce(int arm) const { return arms_.at(static_cast<std::size_t>(arm)).loop.measuredForce(); }

std::array<double, 2> TaskRig::centroid(int arm) const {
  const Field& p = arms_.at(static_cast<std::size_t>(arm)).loop.forceField().pressures;
  double total = 0.0;
  double sx = 0.0;
  double sy = 0.0;
  for (int y = 0; y < p.height(); ++y) {
    for (int x = 0; x < p.width(); ++x) {
      const double v = p(x, y);
      if (v < kCentroidFloor) continue;
      total += v;
      sx += v * x;
      sy += v * y;
    }
  }
  if (!(total > 0.0)) return {0.5 * (p.width() - 1), 0.5 * (p.height() - 1)};
  return {sx / total, sy / total};
}

void TaskRig::updateSurface() {
  const double start = setup_.mark - 0.5 * spec_.path_length;
  const double bump_at = start + setup_.bump_center;
  for (Arm& arm : arms_) {
    Field offset(kSensorWidth, kSensorHeight);
    for (int y = 0; y < kSensorHeight; ++y) {
      for (int x = 0; x < kSensorWidth; ++x) {
        const double pos = start + tool_x_ + (x - 0.5 * (kSensorWidth - 1)) * kSensorPitch;
        const double d = (pos - bump_at) / kBumpWidth;
        offset(x, y) = setup_.tilt * pos - spec_.bump_height * std::exp(-d * d);
      }
    }
    arm.loop.setSurfaceOffset(offset);
  }
}

policy::Observation TaskRig::observe() const {
  policy::Observation obs;
  obs.timestamp = time();
  for (int a = 0; a < arms(); ++a) {
    const Arm& arm = arms_[static_cast<std::size_t>(a)];
    policy::ArmObservation o;
    double x = arm.target[0];
    double y = arm.target[1];
    double z = -arm.loop.admittance().ref_depth;
    if (spec_.id == TaskId::Wipe) x = tool_x_, y = 0.0;
    if (insertTask(spec_.id) && a == primary()) z -= depth_;
    o.pose = {x, y, z, arm.orientation[0], arm.orientation[1], arm.orientation[2]};
    o.force = arm.loop.forceField();
    o.deformation = arm.loop.deformationField();
    obs.arms.push_back(std::move(o));
  }
  return obs;
}

dataset::Frame TaskRig::snapshot() const {
  const policy::Observation obs = observe();
  dataset::Frame f;
  f.timestamp = time();
  f.phase = phase_;
  for (int a = 0; a < arms(); ++a) {
    const Arm& arm = arms_[static_cast<std::size_t>(a)];
    const auto& o = obs.arms[static_cast<std::size_t>(a)];
    dataset::ArmRecord r;
    r.pose = o.pose;
    r.force = o.force.pressures;
    r.deformation = o.deformation.displacements;
    r.preset = arm.last.controller.preset;
    r.model = arm.last.observer.model;
    r.residual_rms = arm.last.observer.residual_rms;
    r.confident = arm.last.observer.confident;
    const auto& fo = force_override_[static_cast<std::size_t>(a)];
    r.f_des = fo ? *fo : spec_.f_des[static_cast<std::size_t>(a)];
    r.f_meas = arm.loop.measuredForce();
    r.ref_depth = arm.loop.admittance().ref_depth;
    r.engaged = arm.engaged;
    r.saturated = arm.last.controller.saturated;
    r.violations = arm.last.controller.violations;
    f.arms.push_back(std::move(r));
  }
  return f;
}

bool TaskRig::finished() const { return done_ || time() >= spec_.time_limit - 1e-9; }

bool TaskRig::inBand(double band) const {
  const double f_des = spec_.f_des[static_cast<std::size_t>(primary())];
  return std::abs(measuredForce(primary()) - f_des) <= band * f_des;
}

void TaskRig::enter(Phase p, double t) {
  phase_ = p;
  if (p == Phase::Release) release_time_ = t;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f %s", t, dataset::phaseName(p));
  trace_.emplace_back(buf);
}

void TaskRig::advancePhase(double t) {
  bool all_touch = true;
  bool all_engaged = true;
  bool all_off = true;
  for (int a = 0; a < arms(); ++a) {
    const double f = measuredForce(a);
    all_touch = all_touch && f > 0.0;
    all_engaged = all_engaged && f >= 0.5 * spec_.f_des[static_cast<std::size_t>(a)];
    all_off = all_off && f == 0.0 && !arms_[static_cast<std::size_t>(a)].engaged;
  }
  // Transitions only move forward; several may fire in one cycle.
  for (;;) {
    const Phase before = phase_;
    switch (phase_) {
      case Phase::Approach:
        if (all_touch) enter(Phase::Contact, t);
        break;
      case Phase::Contact:
        if (all_engaged) enter(Phase::Engage, t);
        break;
      case Phase::Engage:
        if (spec_.id == TaskId::PressHold && inBand(spec_.hold_band)) {
          band_since_ = t;
          enter(Phase::Hold, t);
        } else if (spec_.id == TaskId::Wipe && inBand(spec_.wipe_band)) {
          enter(Phase::Traverse, t);
        } else if (insertTask(spec_.id) && depth_ > 0.0) {
          enter(Phase::Insert, t);
        }
        break;
      case Phase::Hold:
        if (inBand(spec_.hold_band)) {
          if (band_since_ < 0.0) band_since_ = t;
          if (t - band_since_ >= spec_.hold_time - 1e-9) {
            hold_done_ = true;
            if (contact_time_ >= 0.0) settle_time_ = band_since_ - contact_time_;
            enter(Phase::Release, t);
          }
        } else {
          band_since_ = -1.0;
        }
        break;
      case Phase::Traverse:
        if (tool_x_ >= spec_.path_length - kSlack) {
          path_done_ = true;
          enter(Phase::Release, t);
        }
        break;
      case Phase::Insert:
        if (depth_ >= spec_.insert_depth - kSlack) enter(Phase::Release, t);
        break;
      case Phase::Release:
        if (all_off && t - release_time_ >= kReleaseSettle - 1e-9) done_ = true;
        break;
    }
    if (phase_ == before) break;
  }
}

void TaskRig::insertion(const std::vector<control::CycleCommand>& cmds, double dt) {
  const int p = primary();
  const Arm& arm = arms_[static_cast<std::size_t>(p)];
  const control::ComplianceParams& c = cmds[static_cast<std::size_t>(p)].compliance;
  const double f_n = measuredForce(p);
  const double ex = arm.target[0] + spec_.yaw_lever * std::sin(setup_.yaw) - setup_.box[0];
  const double ey = arm.target[1] - setup_.box[1];
  const double raw = std::hypot(ex, ey);

  // Chamfer guidance pushes the tip towards the hole; the wrist yields
  // through its lateral compliance, lambda2 d' + lambda1 d = guidance * F_n.
  double target = 0.0;
  if (arm.engaged && f_n > 0.0 && raw < spec_.capture_radius) target = spec_.guidance * f_n / c.lambda1;
  target = std::min(target, raw);
  deflection_ = target + (deflection_ - target) * std::exp(-c.lambda1 * dt / c.lambda2);
  deflection_ = std::min(deflection_, raw);

  double wobble = 0.0;
  bool fixture_ok = true;
  if (spec_.id == TaskId::BimanualInsert) {
    const double lambda_fixture = cmds[0].compliance.lambda1;
    wobble = spec_.fixture_gain * f_n / lambda_fixture;
    fixture_ok = arms_[0].engaged && measuredForce(0) >= 0.5 * spec_.f_des[0];
  }
  effective_error_ = std::max(0.0, raw - deflection_) + wobble;

  const double goal = std::min(arm.z_cmd, spec_.insert_depth);
  const bool pushing = arm.engaged && f_n >= 0.5 * spec_.f_des[static_cast<std::size_t>(p)];
  if (pushing && fixture_ok && effective_error_ < spec_.tolerance && goal > depth_) {
    depth_ = std::min(goal, depth_ + spec_.insert_speed * dt);
  }
}

double TaskRig::time() const {
  const long whole = cycles_ / cycles_per_step_;
  const long part = cycles_ % cycles_per_step_;
  return static_cast<double>(whole) * policy::kChunkPeriod + static_cast<double>(part) * spec_.loop.cyclePeriod();
}

void TaskRig::setForceTarget(int arm, std::optional<double> f_des) {
  if (arm < 0 || arm >= arms()) throw ShapeError("task: no arm " + std::to_string(arm));
  if (f_des && (!std::isfinite(*f_des) || *f_des < 0.0)) throw ConfigError("task: force target must be finite and >= 0");
  force_override_[static_cast<std::size_t>(arm)] = f_des;
  if (latched_) cmds_[static_cast<std::size_t>(arm)].f_des = f_des ? *f_des : spec_.f_des[static_cast<std::size_t>(arm)];
}

void TaskRig::setAction(const policy::MultiAction& action) {
  if (static_cast<int>(action.size()) != arms()) {
    throw ShapeError("task: expected " + std::to_string(arms()) + " arm action(s), got " +
                     std::to_string(action.size()));
  }
  std::vector<control::CycleCommand> cmds;
  for (int a = 0; a < arms(); ++a) {
    const auto ai = static_cast<std::size_t>(a);
    const policy::Action& act = action[ai];
    for (double v : act.toVector())
      if (!std::isfinite(v)) throw NumericError("task: non-finite action component");
    control::requireWithinRanges(act.compliance);
    const bool engage = act.position[2] >= 0.0;
    cmds.push_back({engage, force_override_[ai] ? *force_override_[ai] : spec_.f_des[ai], act.compliance,
                    spec_.presets.nearestByStiffness(act.compliance.lambda1)});
  }
  for (int a = 0; a < arms(); ++a) {
    const policy::Action& act = action[static_cast<std::size_t>(a)];
    Arm& arm = arms_[static_cast<std::size_t>(a)];
    arm.target = {act.position[0], act.position[1]};
    arm.z_cmd = act.position[2];
    arm.orientation = act.orientation;
    arm.engaged = act.position[2] >= 0.0;
  }
  cmds_ = std::move(cmds);
  latched_ = true;
  since_action_ = 0;
  // The wipe tool only advances once the traverse has begun.
  wipe_from_ = tool_x_;
  wipe_to_ = tool_x_;
  if (spec_.id == TaskId::Wipe && phase_ == Phase::Traverse) {
    const double goal = std::clamp(action[0].position[0], 0.0, spec_.path_length);
    const double reach = 1.5 * spec_.traverse_speed * policy::kChunkPeriod;
    wipe_to_ = wipe_from_ + std::clamp(goal - wipe_from_, -reach, reach);
  }
}

void TaskRig::step(const policy::MultiAction& action) {
  if (finished()) throw SessionError("task: the trial has already ended");
  setAction(action);
  for (int k = 0; k < cycles_per_step_ && !finished(); ++k) cycle();
}

void TaskRig::cycle() {
  if (!latched_) throw NotReadyError("task: no action latched");
  if (finished()) throw SessionError("task: the trial has already ended");
  const double dt = spec_.loop.cyclePeriod();
  if (spec_.id == TaskId::Wipe) {
    const int k = std::min(since_action_ + 1, cycles_per_step_);
    tool_x_ = wipe_from_ + (wipe_to_ - wipe_from_) * k / cycles_per_step_;
    updateSurface();
  }
  ++since_action_;
  for (int a = 0; a < arms(); ++a) {
    Arm& arm = arms_[static_cast<std::size_t>(a)];
    arm.last = arm.loop.runCycle(cmds_[static_cast<std::size_t>(a)]);
    peak_force_ = std::max(peak_force_, arm.last.peak_force);
  }
  if (insertTask(spec_.id)) insertion(cmds_, dt);

  ++cycles_;
  const double t = time();
  bool touching = false;
  for (int a = 0; a < arms(); ++a) touching = touching || measuredForce(a) > 0.0;
  if (touching && contact_time_ < 0.0) contact_time_ = t;
  if (phase_ >= Phase::Engage && phase_ < Phase::Release) {
    ++engaged_cycles_;
    if (inBand(spec_.id == TaskId::PressHold ? spec_.hold_band : spec_.wipe_band)) ++band_cycles_;
  }
  if (phase_ == Phase::Traverse) {
    ++traverse_cycles_;
    if (inBand(spec_.wipe_band)) ++traverse_in_band_;
  }
  advancePhase(t);
}

TrialResult TaskRig::result() const {
  TrialResult r;
  r.phase_reached = phase_;
  r.peak_force = peak_force_;
  r.in_band_fraction = engaged_cycles_ > 0 ? static_cast<double>(band_cycles_) / engaged_cycles_ : 0.0;
  r.contact_time = contact_time_;
  r.settle_time = settle_time_;
  r.sim_time = time();
  const bool safe = peak_force_ <= spec_.max_force;
  switch (spec_.id) {
    case TaskId::PressHold: r.success = safe && hold_done_; break;
    case TaskId::Wipe: {
      const double frac = traverse_cycles_ > 0 ? static_cast<double>(traverse_in_band_) / traverse_cycles_ : 1.0;
      r.success = safe && path_done_ && frac >= spec_.wipe_fraction;
      r.in_band_fraction = frac;
      break;
    }
    case TaskId::Insert:
    case TaskId::BimanualInsert:
      r.success = safe && depth_ >= spec_.insert_depth - kSlack;
      break;
  }
  return r;
}

// ---------------------------------------------------------------------------

policy::MultiAction quantizeAction(const policy::MultiAction& a) {
  policy::MultiAction out = a;
  for (policy::Action& act : out) {
    for (double& v : act.position) v = f32(v);
    for (double& v : act.orientation) v = f32(v);
    for (double& v : act.hand_joints) v = f32(v);
    act.compliance.lambda1 = roundInside(act.compliance.lambda1, control::kStiffnessRange);
    act.compliance.lambda2 = roundInside(act.compliance.lambda2, control::kDampingRange);
    act.compliance.eps = roundInside(act.compliance.eps, control::kDiffusionRange);
  }
  return out;
}

ScriptedExpert::ScriptedExpert(const TaskSpec& spec, Variant variant) : spec_(spec), variant_(variant) {
  spec_.validate();
  presets_.assign(static_cast<std::size_t>(spec_.arms), PresetLevel::Mid);
}

policy::MultiAction ScriptedExpert::act(const TaskRig& rig) {
  const Phase phase = rig.phase();
  const double t = rig.time();
  policy::MultiAction out(static_cast<std::size_t>(spec_.arms));
  const int inserter = spec_.arms - 1;

  if (insertTask(spec_.id) && phase == Phase::Engage) {
    if (engage_start_ < 0.0) engage_start_ = t;
    const double f_des = spec_.f_des[static_cast<std::size_t>(inserter)];
    const bool steady = std::abs(rig.measuredForce(inserter) - f_des) <= 0.1 * f_des;
    if (!yaw_estimate_ && steady && t - engage_start_ >= kEngageSettle - 1e-9) {
      // The cap sits off centre by the peg's yaw in the grasp.
      double s = 0.0;
      if (variant_ != Variant::NoField) s = (rig.centroid(inserter)[0] - 0.5 * (kSensorWidth - 1)) / kYawSpan;
      yaw_estimate_ = std::clamp(s, -1.0, 1.0);
    }
  }

  for (int a = 0; a < spec_.arms; ++a) {
    const auto ai = static_cast<std::size_t>(a);
    PresetLevel level = spec_.schedule[ai][static_cast<std::size_t>(phase)];
    if (variant_ == Variant::FixedMid) level = PresetLevel::Mid;
    presets_[ai] = level;
    policy::Action& act = out[ai];
    act.compliance = spec_.presets[level];
    act.position = {0.0, 0.0, 0.0};
    if (spec_.id == TaskId::Wipe) {
      x_cmd_ = rig.toolPosition();
      if (phase == Phase::Traverse) x_cmd_ = std::min(spec_.path_length, x_cmd_ + spec_.traverse_speed * policy::kChunkPeriod);
      act.position[0] = x_cmd_;
    }
    if (insertTask(spec_.id) && a == inserter) {
      act.hand_joints.fill(0.6);  // closed grasp on the peg
      if (yaw_estimate_) {
        act.position[0] = -spec_.yaw_lever * *yaw_estimate_;
        act.position[2] = spec_.insert_depth;
      }
    }
    if (phase == Phase::Release) act.position[2] = -1.0;
  }
  return quantizeAction(out);
}

// ---------------------------------------------------------------------------

const char* sourceName(Source s) {
  switch (s) {
    case Source::Scripted: return "scripted";
    case Source::Weights: return "weights";
    case Source::FixedCompliance: return "fixed-compliance";
    case Source::NoField: return "no-field";
  }
  return "?";
}

Source parseSource(const std::string& name) {
  for (Source s : {Source::Scripted, Source::Weights, Source::FixedCompliance, Source::NoField})
    if (name == sourceName(s)) return s;
  throw ConfigError("unknown action source '" + name + "'");
}

TrialResult runTrial(Source source, const TaskSpec& spec, std::uint64_t seed, const policy::PolicyRuntime* policy,
                     const EvalOptions& options, dataset::Episode* record) {
  const auto start = std::chrono::steady_clock::now();
  spec.validate();
  if (source == Source::Weights) {
    if (policy == nullptr) throw ConfigError("evaluate: the weights source needs a weight bundle");
    if (policy->architecture().arms != spec.arms) {
      throw ConfigError("evaluate: weights are for " + std::to_string(policy->architecture().arms) +
                        " arm(s), task " + taskName(spec.id) + " has " + std::to_string(spec.arms));
    }
  }
  const TrialSetup setup = sampleTrial(spec, seed);
  TaskRig rig(spec, setup);
  if (source == Source::NoField) rig.setFieldFeedback(false);
  ScriptedExpert::Variant variant = ScriptedExpert::Variant::Scheduled;
  if (source == Source::FixedCompliance) variant = ScriptedExpert::Variant::FixedMid;
  if (source == Source::NoField) variant = ScriptedExpert::Variant::NoField;
  ScriptedExpert expert(spec, variant);
  policy::ChunkScheduler scheduler(options.ensemble_decay, options.ensemble);
  const int horizon = policy != nullptr ? policy->architecture().chunk : 1;

  if (record != nullptr) {
    record->header = {};
    record->header.task = taskName(spec.id);
    record->header.arms = spec.arms;
    record->header.material_hash = dataset::materialHash(spec.material);
    record->header.seed = seed;
    record->header.meta = {{"source", sourceName(source)}};
    record->frames.clear();
    record->truncated = false;
  }

  while (!rig.finished()) {
    dataset::Frame frame;
    if (record != nullptr) frame = rig.snapshot();
    policy::MultiAction action;
    std::vector<PresetLevel> presets;
    if (source == Source::Weights) {
      if (options.ensemble || rig.tick() % horizon == 0) scheduler.addChunk(policy->predictChunk(rig.observe(), rig.tick()));
      action = quantizeAction(scheduler.next());
      for (const policy::Action& a : action) presets.push_back(spec.presets.nearestByStiffness(a.compliance.lambda1));
    } else {
      action = expert.act(rig);
      presets = expert.presets();
    }
    rig.step(action);
    if (record != nullptr) {
      for (std::size_t a = 0; a < frame.arms.size(); ++a) {
        frame.arms[a].action = action[a];
        frame.arms[a].preset = presets[a];
      }
      record->frames.push_back(std::move(frame));
    }
  }
  TrialResult r = rig.result();
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

EpisodeRun scriptedExpert(const TaskSpec& spec, std::uint64_t seed) {
  EpisodeRun run;
  run.result = runTrial(Source::Scripted, spec, seed, nullptr, {}, &run.episode);
  if (!run.result.success) {
    // Replay for the phase trace; trials are deterministic.
    TaskRig rig(spec, sampleTrial(spec, seed));
    ScriptedExpert expert(spec);
    while (!rig.finished()) rig.step(expert.act(rig));
    std::string msg = std::string("expert failed ") + taskName(spec.id) + " seed " + std::to_string(seed) +
                      " in phase " + dataset::phaseName(run.result.phase_reached) + "; trace:";
    for (const std::string& line : rig.trace()) msg += " [" + line + "]";
    throw GenerationError(msg);
  }
  return run;
}

double determinismAudit(const TaskSpec& spec, const dataset::Episode& episode) {
  TaskRig rig(spec, sampleTrial(spec, episode.header.seed));
  if (episode.header.arms != spec.arms || episode.header.task != taskName(spec.id)) {
    throw ConfigError("audit: episode does not belong to task " + std::string(taskName(spec.id)));
  }
  for (const auto& [key, value] : episode.header.meta)
    if (key == "source" && value == sourceName(Source::NoField)) rig.setFieldFeedback(false);
  double worst = 0.0;
  auto dev = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  for (const dataset::Frame& stored : episode.frames) {
    // Episodes read from disk are already float32; fresh ones are not.
    const dataset::Frame recorded = dataset::quantize(stored);
    const dataset::Frame now = dataset::quantize(rig.snapshot());
    if (now.phase != recorded.phase || now.arms.size() != recorded.arms.size()) return INFINITY;
    dev(now.timestamp, recorded.timestamp);
    policy::MultiAction action;
    for (std::size_t a = 0; a < now.arms.size(); ++a) {
      // Teleoperated episodes carry their own force targets.
      const double f_rec = recorded.arms[a].f_des;
      const double f_task = static_cast<float>(spec.f_des[a]);
      rig.setForceTarget(static_cast<int>(a), f_rec == f_task ? std::nullopt : std::optional<double>(f_rec));
    }
    for (std::size_t a = 0; a < now.arms.size(); ++a) {
      const dataset::ArmRecord& x = now.arms[a];
      const dataset::ArmRecord& y = recorded.arms[a];
      for (std::size_t i = 0; i < x.pose.size(); ++i) dev(x.pose[i], y.pose[i]);
      for (int i = 0; i < x.force.size(); ++i) dev(x.force[i], y.force[i]);
      for (int i = 0; i < x.deformation.size(); ++i) dev(x.deformation[i], y.deformation[i]);
      dev(x.f_meas, y.f_meas);
      dev(x.ref_depth, y.ref_depth);
      action.push_back(y.action);
    }
    if (rig.finished()) return INFINITY;
    rig.step(action);
  }
  return worst;
}

int demoCount(TaskId id) {
  switch (id) {
    case TaskId::PressHold: return 20;
    case TaskId::Wipe: return 20;
    case TaskId::Insert: return 30;
    case TaskId::BimanualInsert: return 20;
  }
  return 0;
}

int EvalTable::successes() const {
  return static_cast<int>(std::count_if(trials.begin(), trials.end(), [](const TrialResult& r) { return r.success; }));
}

double EvalTable::successRate() const {
  return trials.empty() ? 0.0 : static_cast<double>(successes()) / static_cast<double>(trials.size());
}

EvalTable evaluate(Source source, const TaskSpec& spec, int n_trials, std::uint64_t seed,
                   const policy::PolicyRuntime* policy, const EvalOptions& options) {
  if (n_trials < 0) throw UsageError("evaluate: trial count must be >= 0");
  EvalTable table;
  table.task = spec.id;
  table.source = source;
  table.seed = seed;
  for (int i = 0; i < n_trials; ++i) {
    const TrialResult r = runTrial(source, spec, trialSeed(seed, i), policy, options);
    if (!r.success) ++table.failures_by_phase[static_cast<std::size_t>(r.phase_reached)];
    table.trials.push_back(r);
  }
  return table;
}

std::string formatResults(const std::vector<EvalTable>& tables) {
  std::ostringstream out;
  char buf[256];
  out << "softtouch-results 1\n";
  for (const EvalTable& t : tables) {
    std::snprintf(buf, sizeof buf, "table %s %s seed %llu trials %zu successes %d rate %.6f\n", taskName(t.task),
                  sourceName(t.source), static_cast<unsigned long long>(t.seed), t.trials.size(), t.successes(),
                  t.successRate());
    out << buf << "failures";
    for (int p = 0; p < kPhaseCount; ++p)
      out << ' ' << dataset::phaseName(static_cast<Phase>(p)) << '=' << t.failures_by_phase[static_cast<std::size_t>(p)];
    out << '\n';
    for (std::size_t i = 0; i < t.trials.size(); ++i) {
      const TrialResult& r = t.trials[i];
      std::snprintf(buf, sizeof buf, "trial %zu %s %s peak %.9g band %.9g contact %.9g settle %.9g sim %.9g\n", i,
                    r.success ? "ok" : "fail", dataset::phaseName(r.phase_reached), r.peak_force, r.in_band_fraction,
                    r.contact_time, r.settle_time, r.sim_time);
      out << buf;
    }
  }
  return out.str();
}

std::string formatTable(const std::vector<EvalTable>& tables) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-15s %-17s %7s %8s  %s\n", "task", "source", "trials", "success", "failed in");
  out << buf;
  for (const EvalTable& t : tables) {
    std::string failed;
    for (int p = 0; p < kPhaseCount; ++p) {
      const int n = t.failures_by_phase[static_cast<std::size_t>(p)];
      if (n > 0) failed += std::string(failed.empty() ? "" : ", ") + dataset::phaseName(static_cast<Phase>(p)) + " " + std::to_string(n);
    }
    std::snprintf(buf, sizeof buf, "%-15s %-17s %7zu %7.1f%%  %s\n", taskName(t.task), sourceName(t.source),
                  t.trials.size(), 100.0 * t.successRate(), failed.empty() ? "-" : failed.c_str());
    out << buf;
  }
  return out.str();
}

}  // namespace softtouch::tasks
