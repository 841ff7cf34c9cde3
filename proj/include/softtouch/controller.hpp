#pragma once

// Dual-loop compliance control. The outer admittance law turns the normal force
// error into a deformation reference depth; the inner loop drives the
// prescribed indentation so the deformation error field obeys a
// reaction-diffusion law, de/dt = eps lap(e) - K_p e, on the contact patch.

#include <cstdint>
#include <memory>
#include <string>

#include "softtouch/continuum.hpp"
#include "softtouch/grid.hpp"

namespace softtouch::control {

struct ComplianceParams {
  double lambda1 = 250.0;  // stiffness, N/m
  double lambda2 = 2.0;    // damping, N s/m
  double eps = 0.05;       // diffusion, m^2/s
  bool operator==(const ComplianceParams&) const = default;
};

struct Range {
  double lo;
  double hi;
  double mid() const { return 0.5 * (lo + hi); }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

inline constexpr Range kStiffnessRange{50.0, 500.0};
inline constexpr Range kDampingRange{0.1, 5.0};
inline constexpr Range kDiffusionRange{0.01, 0.1};

bool withinRanges(const ComplianceParams& c);
ComplianceParams clampToRanges(const ComplianceParams& c);
/// ConfigError when any component is outside its hard range or non-finite.
void requireWithinRanges(const ComplianceParams& c);

enum class PresetLevel : std::uint8_t { Low = 0, Mid = 1, High = 2 };

const char* presetName(PresetLevel level);
PresetLevel parsePreset(const std::string& name);

struct CompliancePreset {
  PresetLevel name = PresetLevel::Mid;
  ComplianceParams values;
};

struct PresetTable {
  ComplianceParams low{60.0, 0.3, 0.08};
  ComplianceParams mid{250.0, 2.0, 0.05};
  ComplianceParams high{480.0, 4.0, 0.02};

  const ComplianceParams& operator[](PresetLevel level) const;
  CompliancePreset preset(PresetLevel level) const { return {level, (*this)[level]}; }
  /// Preset whose lambda1 is closest to `lambda1`.
  PresetLevel nearestByStiffness(double lambda1) const;
  /// Ranges respected and Low < Mid < High in lambda1.
  void validate() const;
};

struct AdmittanceState {
  double ref_depth = 0.0;       // m
  double ref_velocity = 0.0;    // m/s
  double virtual_mass = 1e-3;   // kg
  double anchor_depth = 0.0;    // x0, m
  double max_depth = 0.012;     // safe deformation ceiling, m
  bool operator==(const AdmittanceState&) const = default;
};

struct AdmittanceResult {
  AdmittanceState state;
  bool saturated = false;
};

/// One step of M v' + lambda2 v + lambda1 (x - x0) = f_des - f_meas with the
/// force error held over the step, integrated exactly (zero-order hold).
/// The depth is clamped to [0, max_depth]; hitting either bound zeroes the
/// velocity and raises `saturated`.
AdmittanceResult admittanceStep(const AdmittanceState& a, double f_des, double f_meas, const ComplianceParams& c,
                                double dt);

enum class Template : std::uint8_t { FlatPunch = 0, SphericalCap = 1 };

struct TemplateGeometry {
  Template kind = Template::FlatPunch;
  double center_x = 0.5 * (kSensorWidth - 1);   // grid units
  double center_y = 0.5 * (kSensorHeight - 1);
  double radius = 4.0;                          // grid units, SphericalCap only
};

/// Dirichlet reference on the mask: FlatPunch gives `depth` everywhere,
/// SphericalCap gives depth (1 - r^2 / R^2) clipped at zero. Zero off the mask.
Field synthesizeReference(const TemplateGeometry& geometry, double depth, const Mask& mask);

/// Sum over the mask of the unit-depth template; steady force per metre of
/// depth is k_e * shapeSum * h^2.
double templateShapeSum(const TemplateGeometry& geometry, const Mask& mask);

/// Inner boundary-control step on the contact nodes:
///   e = phi_ref - phi_meas,  (I - dt eps L_mask) e' = (1 - dt K_p) e,  u' = u + (e - e')
/// L_mask is the Laplacian restricted to the mask. Indentation stays >= 0.
sim::ContactCommand innerBoundaryStep(const sim::ContactCommand& u, const Field& phi_ref, const Field& phi_meas,
                                      double eps, double dt, double gain = 5.0, double spacing = kSensorPitch);

/// innerBoundaryStep with the mask system factorised once per (mask, eps, dt).
class InnerLoop {
 public:
  explicit InnerLoop(double gain = 5.0, double spacing = kSensorPitch);
  ~InnerLoop();
  InnerLoop(InnerLoop&&) noexcept;
  InnerLoop& operator=(InnerLoop&&) noexcept;

  sim::ContactCommand step(const sim::ContactCommand& u, const Field& phi_ref, const Field& phi_meas, double eps,
                           double dt);
  double gain() const { return gain_; }
  int factorizations() const { return factorizations_; }

 private:
  struct Cache;
  double gain_;
  double spacing_;
  std::unique_ptr<Cache> cache_;
  int factorizations_ = 0;
};

struct SafetyLimits {
  double max_force = 15.0;   // N
  double max_depth = 0.012;  // m
};

struct Violations {
  bool force = false;
  bool depth = false;
  bool any() const { return force || depth; }
  bool operator==(const Violations&) const = default;
};

struct ClampResult {
  sim::ContactCommand command;
  Violations violations;
  double predicted_force = 0.0;  // after clamping, N
};

/// Caps each node at max_depth, then scales the pattern so the predicted
/// steady force k_e * sum(depth) * h^2 does not exceed max_force.
ClampResult safetyClamp(const sim::ContactCommand& cmd, const SafetyLimits& limits, const sim::MaterialParams& model,
                        double spacing = kSensorPitch);

double predictedSteadyForce(const sim::ContactCommand& cmd, const sim::MaterialParams& model,
                            double spacing = kSensorPitch);

}  // namespace softtouch::control
