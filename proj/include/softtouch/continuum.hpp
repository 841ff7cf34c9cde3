#pragma once

// Viscoelastic contact surface: a W x H grid of nodes, each a standard linear
// solid (Kelvin-Voigt element in parallel with a Maxwell branch), coupled
// laterally by diffusion. Nodes under the tool are prescribed (Dirichlet);
// free nodes relax by
//
//   d(phi)/dt = D lap(phi) - (k_e / k_v) phi
//
// integrated with backward Euler. The Maxwell stress takes the exact
// exponential update for a linear deformation ramp over the step, and the
// node pressure is p = k_e phi + k_v phi_dot + sigma_m.

#include <array>
#include <cstdint>
#include <memory>
#include <vector>

#include "softtouch/grid.hpp"
#include "softtouch/laplacian.hpp"

namespace softtouch::sim {

struct MaterialParams {
  double k_e = 2e6;   // Pa/m
  double k_v = 1e4;   // Pa s/m
  double k_m = 5e5;   // Pa/m
  double tau = 0.5;   // s
  double D = 0.02;    // m^2/s

  /// Throws ConfigError on non-positive constants, tau < 1 ms or D outside [0, 1].
  void validate() const;
  double decayRate() const { return k_e / k_v; }
  bool operator==(const MaterialParams&) const = default;
};

struct SurfaceState {
  Field phi;
  Field phi_dot;
  Field sigma_m;
  Mask contact;
  double h = kSensorPitch;

  static SurfaceState zero(int width, int height, double spacing = kSensorPitch);
  int width() const { return phi.width(); }
  int height() const { return phi.height(); }
  /// Shape consistency; NumericError on non-finite entries.
  void validate() const;
  bool operator==(const SurfaceState&) const = default;
};

struct ContactCommand {
  Field indentation;  // m, Dirichlet values on mask nodes
  Mask mask;
  std::array<double, 2> tangential_velocity{0.0, 0.0};

  static ContactCommand none(int width, int height);
  static ContactCommand uniform(const Mask& mask, double depth);
  void validate() const;
};

/// Backward-Euler stepper that caches the sparse factorisation of the free-node
/// system between calls with the same (mask, dt, spacing).
class ImplicitStepper {
 public:
  explicit ImplicitStepper(MaterialParams params, EdgeCondition edges = EdgeCondition::Neumann);
  ~ImplicitStepper();
  ImplicitStepper(ImplicitStepper&&) noexcept;
  ImplicitStepper& operator=(ImplicitStepper&&) noexcept;
  ImplicitStepper(const ImplicitStepper&) = delete;
  ImplicitStepper& operator=(const ImplicitStepper&) = delete;

  SurfaceState step(const SurfaceState& state, const ContactCommand& cmd, double dt);

  const MaterialParams& params() const { return params_; }
  EdgeCondition edges() const { return edges_; }
  /// Number of factorisations performed so far.
  int factorizations() const { return factorizations_; }

 private:
  struct Cache;
  MaterialParams params_;
  EdgeCondition edges_;
  std::unique_ptr<Cache> cache_;
  int factorizations_ = 0;
};

/// Single step with a throwaway stepper. dt must lie in (0, 10 ms].
SurfaceState step(const SurfaceState& state, const ContactCommand& cmd, const MaterialParams& params, double dt,
                  EdgeCondition edges = EdgeCondition::Neumann);

/// Constitutive pressure k_e phi + k_v phi_dot + sigma_m at every node (Pa).
Field nodePressure(const SurfaceState& state, const MaterialParams& params);

/// Pressure transmitted to the tool: constitutive pressure clipped at zero on
/// contact nodes (the tool cannot pull), zero elsewhere.
Field contactPressure(const SurfaceState& state, const MaterialParams& params);

/// Total normal force, sum over contact nodes of pressure * h^2 (N).
double contactForce(const SurfaceState& state, const MaterialParams& params);

struct SteadyStateOptions {
  EdgeCondition edges = EdgeCondition::Neumann;
  int max_refinements = 8;
  double tolerance = 1e-13;  // max-norm residual relative to max indentation
};

/// Fixed point of step() for a held command: prescribed nodes at their
/// indentation, free nodes solving D lap(phi) = (k_e/k_v) phi, no rate, no
/// Maxwell stress.
SurfaceState steadyState(const ContactCommand& cmd, const MaterialParams& params, double spacing = kSensorPitch,
                         const SteadyStateOptions& options = {});

}  // namespace softtouch::sim
