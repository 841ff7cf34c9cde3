#include "softtouch/control_loop.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "softtouch/laplacian.hpp"

namespace softtouch::control {

void LoopConfig::validate() const {
  if (!(servo_dt > 0.0) || servo_dt > 0.01) throw ConfigError("control: servo_dt must lie in (0, 0.01] s");
  if (ticks_per_cycle < 1 || sensor_every < 1) throw ConfigError("control: tick counts must be positive");
  if (!(virtual_mass > 0.0)) throw ConfigError("control: virtual_mass must be positive");
  if (!(inner_gain >= 0.0) || inner_gain * servo_dt >= 1.0) {
    throw ConfigError("control: inner_gain must satisfy 0 <= K_p dt < 1");
  }
  if (!(limits.max_force > 0.0) || !(limits.max_depth > 0.0)) throw ConfigError("control: limits must be positive");
  if (!(sensor_noise_rms >= 0.0) || !(smoothing_lambda >= 0.0)) throw ConfigError("control: negative sensor setting");
  if (history_capacity == 0 || observer_nodes < 1 || observer_free_nodes < 0) {
    throw ConfigError("control: observer sizes must be positive");
  }
  if (!(retract_rate > 0.0)) throw ConfigError("control: retract_rate must be positive");
}

ContactLoop::ContactLoop(sim::MaterialParams truth, sim::MaterialParams model, Mask patch, TemplateGeometry shape,
                         LoopConfig config, std::uint64_t sensor_seed)
    : stepper_(truth, config.edges),
      model_(model),
      patch_(std::move(patch)),
      shape_(shape),
      config_(config),
      inner_(config.inner_gain),
      sensor_(sensor_seed, config.sensor_noise_rms, config.smoothing_lambda),
      history_(config.history_capacity) {
  config_.validate();
  model_.validate();
  state_ = sim::SurfaceState::zero(patch_.width(), patch_.height());
  command_ = sim::ContactCommand::uniform(patch_, 0.0);
  offset_ = Field(patch_.width(), patch_.height());
  admittance_.virtual_mass = config_.virtual_mass;
  admittance_.max_depth = config_.limits.max_depth;
  force_field_ = {Field(patch_.width(), patch_.height()), 0.0};
  deformation_field_ = {Field(patch_.width(), patch_.height()), 0.0};
  observer_.model = model_;
}

void ContactLoop::setSurfaceOffset(const Field& offset) {
  requireSameShape(offset_, offset, "setSurfaceOffset");
  if (!allFinite(offset)) throw NumericError("setSurfaceOffset: non-finite offset");
  offset_ = offset;
}

void ContactLoop::setPatch(const Mask& patch, const TemplateGeometry& shape) {
  requireSameShape(patch_, patch, "setPatch");
  const bool changed = !(patch == patch_);
  patch_ = patch;
  shape_ = shape;
  if (changed) {
    sim::ContactCommand next = sim::ContactCommand::uniform(patch_, 0.0);
    for (int i = 0; i < patch_.size(); ++i)
      if (patch_[i]) next.indentation[i] = command_.mask[i] ? command_.indentation[i] : 0.0;
    command_ = next;
    resetObserver();
  }
}

double ContactLoop::measuredForce() const { return sim::contactForce(state_, stepper_.params()); }

void ContactLoop::resetObserver() {
  history_.clear();
  identifier_.reset();
  nodes_.clear();
  free_nodes_.clear();
}

void ContactLoop::chooseNodes() {
  const Field& p = force_field_.pressures;
  std::vector<int> candidates;
  for (int i = 0; i < patch_.size(); ++i)
    if (patch_[i] && state_.contact[i]) candidates.push_back(i);
  // Highest pressure first, lower index on ties.
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) { return p[a] > p[b]; });
  const auto keep = std::min<std::size_t>(candidates.size(), static_cast<std::size_t>(config_.observer_nodes));
  nodes_.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep));

  Field phi_m(state_.width(), state_.height());
  for (int i = 0; i < phi_m.size(); ++i) phi_m[i] = deformation_field_.displacements[i] * 1e-3;
  const Field lap = laplacian(phi_m, state_.h, config_.edges);
  std::vector<int> free;
  for (int i = 0; i < patch_.size(); ++i)
    if (!state_.contact[i] && lap[i] != 0.0) free.push_back(i);
  std::stable_sort(free.begin(), free.end(), [&](int a, int b) { return std::abs(lap[a]) > std::abs(lap[b]); });
  const auto keep_free = std::min<std::size_t>(free.size(), static_cast<std::size_t>(config_.observer_free_nodes));
  free_nodes_.assign(free.begin(), free.begin() + static_cast<std::ptrdiff_t>(keep_free));
}

void ContactLoop::sample() {
  force_field_ = sensor_.sampleForceField(state_, stepper_.params(), time_);
  deformation_field_ = sensor_.sampleDeformationField(state_, time_);
  if (!config_.observer_enabled) return;
  if (!engaged_ || !inContact()) {
    if (!history_.empty()) resetObserver();
    return;
  }
  if (nodes_.empty()) {
    // Wait for a clear pressure signal before fixing the node set.
    if (!(maxAbs(force_field_.pressures) > 1.0)) return;
    chooseNodes();
  }
  observer::ObserverSample s;
  s.timestamp = time_;
  for (int i : nodes_) {
    s.phi.push_back(deformation_field_.displacements[i] * 1e-3);
    s.phi_dot.push_back(state_.phi_dot[i]);
    s.pressure.push_back(force_field_.pressures[i] * 1e3);
  }
  if (!free_nodes_.empty()) {
    Field phi_m(state_.width(), state_.height());
    for (int i = 0; i < phi_m.size(); ++i) phi_m[i] = deformation_field_.displacements[i] * 1e-3;
    for (int i : free_nodes_) {
      s.free_phi.push_back(phi_m[i]);
      s.free_phi_dot.push_back(state_.phi_dot[i]);
      s.free_laplacian.push_back(laplacianAt(phi_m, i % phi_m.width(), i / phi_m.width(), state_.h, config_.edges));
    }
  }
  history_.push(std::move(s));
}

CycleReport ContactLoop::runCycle(const CycleCommand& cmd) {
  if (!std::isfinite(cmd.f_des) || cmd.f_des < 0.0) throw ConfigError("runCycle: f_des must be finite and >= 0");
  requireWithinRanges(cmd.compliance);

  CycleReport report;
  report.controller.f_des = cmd.f_des;
  report.controller.preset = cmd.preset;
  report.controller.compliance = cmd.compliance;
  report.controller.engaged = cmd.engage;
  if (cmd.engage && !engaged_) resetObserver();
  engaged_ = cmd.engage;

  const double dt = config_.servo_dt;
  const double h2 = state_.h * state_.h;
  const double shape_sum = templateShapeSum(shape_, patch_);
  const sim::MaterialParams& truth = stepper_.params();
  Field phi_ref;
  for (int tick = 0; tick < config_.ticks_per_cycle; ++tick) {
    const double f_meas = sim::contactForce(state_, truth);
    report.peak_force = std::max(report.peak_force, f_meas);
    admittance_.max_depth = config_.limits.max_depth;
    admittance_.virtual_mass = config_.virtual_mass;
    if (engaged_) {
      admittance_.anchor_depth = shape_sum > 0.0 ? cmd.f_des / (model_.k_e * shape_sum * h2) : 0.0;
      const AdmittanceResult r = admittanceStep(admittance_, cmd.f_des, f_meas, cmd.compliance, dt);
      admittance_ = r.state;
      report.controller.saturated = report.controller.saturated || r.saturated;
    } else {
      admittance_.anchor_depth = 0.0;
      admittance_.ref_velocity = 0.0;
      admittance_.ref_depth = std::max(0.0, admittance_.ref_depth - config_.retract_rate * dt);
    }

    phi_ref = synthesizeReference(shape_, admittance_.ref_depth, patch_);
    if (engaged_) {
      const Field& phi_meas = config_.field_feedback ? state_.phi : command_.indentation;
      command_ = inner_.step(command_, phi_ref, phi_meas, cmd.compliance.eps, dt);
    } else {
      // Lift-off is a kinematic retraction at a fixed rate.
      for (int i = 0; i < patch_.size(); ++i)
        if (patch_[i]) command_.indentation[i] = std::max(0.0, command_.indentation[i] - config_.retract_rate * dt);
    }
    const ClampResult clamp = safetyClamp(command_, config_.limits, model_, state_.h);
    command_ = clamp.command;
    report.controller.violations.force = report.controller.violations.force || clamp.violations.force;
    report.controller.violations.depth = report.controller.violations.depth || clamp.violations.depth;

    bool touching = engaged_;
    sim::ContactCommand applied = sim::ContactCommand::uniform(patch_, 0.0);
    for (int i = 0; i < patch_.size(); ++i) {
      if (!patch_[i]) continue;
      applied.indentation[i] = std::max(0.0, command_.indentation[i] - offset_[i]);
      touching = touching || applied.indentation[i] > 0.0;
    }
    if (!touching) applied = sim::ContactCommand::none(patch_.width(), patch_.height());
    state_ = stepper_.step(state_, applied, dt);

    ++tick_;
    time_ = static_cast<double>(tick_) * dt;
    if (tick_ % config_.sensor_every == 0) sample();
  }

  observer_.updated = false;
  if (config_.observer_enabled && engaged_) {
    if (auto est = identifier_.advance(history_)) {
      observer_.updated = true;
      observer_.residual_rms = est->residual_rms;
      observer_.confident = est->confident;
      if (est->confident) model_ = est->params;
    }
  }
  observer_.model = model_;
  observer_.samples = static_cast<int>(history_.size());

  const double f_end = sim::contactForce(state_, truth);
  report.peak_force = std::max(report.peak_force, f_end);
  report.time = time_;
  report.controller.f_meas = f_end;
  report.controller.ref_depth = admittance_.ref_depth;
  report.observer = observer_;
  for (int i = 0; i < patch_.size(); ++i)
    if (patch_[i]) report.tracking_error = std::max(report.tracking_error, std::abs(phi_ref[i] - state_.phi[i]));
  return report;
}

}  // namespace softtouch::control
