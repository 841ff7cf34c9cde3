#pragma once

// One contact patch under closed-loop compliance control: the simulated
// surface, its tactile sensor, the observer and both control loops, advanced
// in 10 ms control cycles made of 1 ms servo ticks.

#include <cstdint>
#include <optional>
#include <vector>

#include "softtouch/continuum.hpp"
#include "softtouch/controller.hpp"
#include "softtouch/observer.hpp"
#include "softtouch/tactile.hpp"

namespace softtouch::control {

struct LoopConfig {
  double servo_dt = 1e-3;          // s
  int ticks_per_cycle = 10;        // 10 ms cycle
  int sensor_every = 5;            // ticks between tactile samples (200 Hz)
  double virtual_mass = 1e-3;      // kg
  double inner_gain = 5.0;         // 1/s
  SafetyLimits limits;
  double sensor_noise_rms = 0.2;   // kPa
  double smoothing_lambda = 0.0;   // m^2
  std::size_t history_capacity = 400;
  int observer_nodes = 5;
  int observer_free_nodes = 5;
  bool observer_enabled = true;
  bool field_feedback = true;      // false: inner loop tracks its own command
  double retract_rate = 0.02;      // m/s reference withdrawal when disengaged
  EdgeCondition edges = EdgeCondition::Neumann;

  void validate() const;
  double cyclePeriod() const { return servo_dt * ticks_per_cycle; }
};

struct CycleCommand {
  bool engage = false;
  double f_des = 0.0;  // N
  ComplianceParams compliance;
  PresetLevel preset = PresetLevel::Mid;
};

struct ControllerChannel {
  double f_des = 0.0;
  double f_meas = 0.0;
  double ref_depth = 0.0;
  PresetLevel preset = PresetLevel::Mid;
  ComplianceParams compliance;
  Violations violations;
  bool saturated = false;
  bool engaged = false;
};

struct ObserverChannel {
  sim::MaterialParams model;
  double residual_rms = 0.0;
  bool confident = false;
  bool updated = false;  // a sweep completed during this cycle
  int samples = 0;
};

struct CycleReport {
  double time = 0.0;  // end of cycle, s
  ControllerChannel controller;
  ObserverChannel observer;
  double tracking_error = 0.0;  // max |phi_ref - phi| on the patch, m
  double peak_force = 0.0;      // largest servo-tick force in the cycle, N
};

class ContactLoop {
 public:
  /// `truth` drives the simulator; `model` seeds the controller's estimate.
  ContactLoop(sim::MaterialParams truth, sim::MaterialParams model, Mask patch, TemplateGeometry shape,
              LoopConfig config = {}, std::uint64_t sensor_seed = 0);

  CycleReport runCycle(const CycleCommand& cmd);

  /// Surface height below the nominal plane per node (m); the applied
  /// indentation is max(0, u - offset).
  void setSurfaceOffset(const Field& offset);
  /// Changing the patch restarts the observer window.
  void setPatch(const Mask& patch, const TemplateGeometry& shape);
  void setFieldFeedback(bool on) { config_.field_feedback = on; }

  const sim::SurfaceState& state() const { return state_; }
  const sim::MaterialParams& truth() const { return stepper_.params(); }
  const sim::MaterialParams& model() const { return model_; }
  const LoopConfig& config() const { return config_; }
  const Mask& patch() const { return patch_; }
  const TemplateGeometry& shape() const { return shape_; }
  const AdmittanceState& admittance() const { return admittance_; }
  const sim::ContactCommand& command() const { return command_; }
  const tactile::ForceField& forceField() const { return force_field_; }
  const tactile::DeformationField& deformationField() const { return deformation_field_; }
  const observer::HistoryBuffer& history() const { return history_; }
  double time() const { return time_; }
  double measuredForce() const;
  bool inContact() const { return countSet(state_.contact) > 0; }

 private:
  void sample();
  void resetObserver();
  void chooseNodes();

  sim::ImplicitStepper stepper_;
  sim::MaterialParams model_;
  Mask patch_;
  TemplateGeometry shape_;
  LoopConfig config_;
  InnerLoop inner_;
  tactile::TactileSensor sensor_;
  observer::HistoryBuffer history_;
  observer::AmortizedIdentifier identifier_;

  sim::SurfaceState state_;
  sim::ContactCommand command_;
  Field offset_;
  AdmittanceState admittance_;
  tactile::ForceField force_field_;
  tactile::DeformationField deformation_field_;
  std::vector<int> nodes_;
  std::vector<int> free_nodes_;
  ObserverChannel observer_;
  double time_ = 0.0;
  long tick_ = 0;
  bool engaged_ = false;
};

}  // namespace softtouch::control
