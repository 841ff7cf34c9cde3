#include "softtouch/continuum.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cmath>
#include <string>

namespace softtouch::sim {

namespace {

// Free-node system alpha * I - beta * L_ff, with L the grid Laplacian and the
// prescribed (mask) nodes moved to the right-hand side.
struct FreeSystem {
  std::vector<int> free_nodes;  // grid index of each unknown
  std::vector<int> unknown_of;  // grid index -> unknown index or -1
  Eigen::SparseMatrix<double> matrix;
};

FreeSystem assemble(const Mask& mask, double alpha, double beta, double h, EdgeCondition edges) {
  FreeSystem sys;
  const int w = mask.width();
  const int hgt = mask.height();
  sys.unknown_of.assign(static_cast<std::size_t>(mask.size()), -1);
  for (int i = 0; i < mask.size(); ++i) {
    if (!mask[i]) {
      sys.unknown_of[static_cast<std::size_t>(i)] = static_cast<int>(sys.free_nodes.size());
      sys.free_nodes.push_back(i);
    }
  }
  const int n = static_cast<int>(sys.free_nodes.size());
  const double inv_h2 = 1.0 / (h * h);
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(n) * 5);
  for (int k = 0; k < n; ++k) {
    const int idx = sys.free_nodes[static_cast<std::size_t>(k)];
    const int x = idx % w;
    const int y = idx / w;
    int inside = 0;
    auto visit = [&](int nx, int ny) {
      if (nx < 0 || ny < 0 || nx >= w || ny >= hgt) return;
      ++inside;
      const int nb = sys.unknown_of[static_cast<std::size_t>(ny * w + nx)];
      if (nb >= 0) triplets.emplace_back(k, nb, -beta * inv_h2);
    };
    visit(x - 1, y);
    visit(x + 1, y);
    visit(x, y - 1);
    visit(x, y + 1);
    const int diag = edges == EdgeCondition::Neumann ? inside : 4;
    triplets.emplace_back(k, k, alpha + beta * diag * inv_h2);
  }
  sys.matrix.resize(n, n);
  sys.matrix.setFromTriplets(triplets.begin(), triplets.end());
  return sys;
}

// beta * (coupling of free node k to prescribed neighbours).
double prescribedCoupling(const Field& values, const Mask& mask, int idx, double beta, double h) {
  const int w = mask.width();
  const int hgt = mask.height();
  const int x = idx % w;
  const int y = idx / w;
  double acc = 0.0;
  auto visit = [&](int nx, int ny) {
    if (nx < 0 || ny < 0 || nx >= w || ny >= hgt) return;
    if (mask(nx, ny)) acc += values(nx, ny);
  };
  visit(x - 1, y);
  visit(x + 1, y);
  visit(x, y - 1);
  visit(x, y + 1);
  return beta * acc / (h * h);
}

void requireDt(double dt) {
  if (!(dt > 0.0) || dt > 0.01 + 1e-15) {
    throw ConfigError("step: dt must lie in (0, 0.01] s, got " + std::to_string(dt));
  }
}

}  // namespace

void MaterialParams::validate() const {
  if (!(std::isfinite(k_e) && std::isfinite(k_v) && std::isfinite(k_m) && std::isfinite(tau) && std::isfinite(D))) {
    throw NumericError("material parameters must be finite");
  }
  if (!(k_e > 0.0 && k_v > 0.0 && k_m > 0.0)) throw ConfigError("material stiffness and viscosity must be positive");
  if (tau < 1e-3) throw ConfigError("material tau must be at least 1 ms");
  if (D < 0.0 || D > 1.0) throw ConfigError("material D must lie in [0, 1] m^2/s");
}

SurfaceState SurfaceState::zero(int width, int height, double spacing) {
  SurfaceState s;
  s.phi = Field(width, height);
  s.phi_dot = Field(width, height);
  s.sigma_m = Field(width, height);
  s.contact = Mask(width, height, 0);
  s.h = spacing;
  return s;
}

void SurfaceState::validate() const {
  requireSameShape(phi, phi_dot, "SurfaceState.phi_dot");
  requireSameShape(phi, sigma_m, "SurfaceState.sigma_m");
  requireSameShape(phi, contact, "SurfaceState.contact");
  if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("SurfaceState: node spacing must be positive");
  if (!allFinite(phi) || !allFinite(phi_dot) || !allFinite(sigma_m)) {
    throw NumericError("SurfaceState: non-finite field entry");
  }
}

ContactCommand ContactCommand::none(int width, int height) {
  return ContactCommand{Field(width, height), Mask(width, height, 0), {0.0, 0.0}};
}

ContactCommand ContactCommand::uniform(const Mask& mask, double depth) {
  ContactCommand c{Field(mask.width(), mask.height()), mask, {0.0, 0.0}};
  for (int i = 0; i < mask.size(); ++i) c.indentation[i] = mask[i] ? depth : 0.0;
  return c;
}

void ContactCommand::validate() const {
  requireSameShape(indentation, mask, "ContactCommand");
  if (!allFinite(indentation) || !std::isfinite(tangential_velocity[0]) || !std::isfinite(tangential_velocity[1])) {
    throw NumericError("ContactCommand: non-finite entry");
  }
  for (int i = 0; i < mask.size(); ++i) {
    if (!mask[i] && indentation[i] != 0.0) throw ConfigError("ContactCommand: indentation must be zero off the mask");
  }
}

struct ImplicitStepper::Cache {
  Mask mask;
  double dt = 0.0;
  double h = 0.0;
  FreeSystem system;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
};

ImplicitStepper::ImplicitStepper(MaterialParams params, EdgeCondition edges) : params_(params), edges_(edges) {
  params_.validate();
}
ImplicitStepper::~ImplicitStepper() = default;
ImplicitStepper::ImplicitStepper(ImplicitStepper&&) noexcept = default;
ImplicitStepper& ImplicitStepper::operator=(ImplicitStepper&&) noexcept = default;

SurfaceState ImplicitStepper::step(const SurfaceState& state, const ContactCommand& cmd, double dt) {
  requireDt(dt);
  state.validate();
  cmd.validate();
  requireSameShape(state.phi, cmd.mask, "step");

  const double h = state.h;
  const double beta = dt * params_.D;
  if (!cache_ || cache_->dt != dt || cache_->h != h || !(cache_->mask == cmd.mask)) {
    auto fresh = std::make_unique<Cache>();
    fresh->mask = cmd.mask;
    fresh->dt = dt;
    fresh->h = h;
    fresh->system = assemble(cmd.mask, 1.0 + dt * params_.decayRate(), beta, h, edges_);
    if (!fresh->system.free_nodes.empty()) {
      fresh->solver.compute(fresh->system.matrix);
      if (fresh->solver.info() != Eigen::Success) throw NumericError("step: factorisation of free-node system failed");
    }
    cache_ = std::move(fresh);
    ++factorizations_;
  }

  SurfaceState next = state;
  next.contact = cmd.mask;
  const auto& sys = cache_->system;
  const int n = static_cast<int>(sys.free_nodes.size());
  if (n > 0) {
    Eigen::VectorXd rhs(n);
    for (int k = 0; k < n; ++k) {
      const int idx = sys.free_nodes[static_cast<std::size_t>(k)];
      rhs[k] = state.phi[idx] + prescribedCoupling(cmd.indentation, cmd.mask, idx, beta, h);
    }
    const Eigen::VectorXd sol = cache_->solver.solve(rhs);
    for (int k = 0; k < n; ++k) next.phi[sys.free_nodes[static_cast<std::size_t>(k)]] = sol[k];
  }
  for (int i = 0; i < cmd.mask.size(); ++i) {
    if (cmd.mask[i]) next.phi[i] = cmd.indentation[i];
  }

  const double decay = std::exp(-dt / params_.tau);
  const double gain = params_.k_m * (params_.tau / dt) * (1.0 - decay);
  for (int i = 0; i < next.phi.size(); ++i) {
    const double delta = next.phi[i] - state.phi[i];
    next.phi_dot[i] = delta / dt;
    next.sigma_m[i] = state.sigma_m[i] * decay + gain * delta;
  }
  if (!allFinite(next.phi) || !allFinite(next.sigma_m)) throw NumericError("step: non-finite result");
  return next;
}

SurfaceState step(const SurfaceState& state, const ContactCommand& cmd, const MaterialParams& params, double dt,
                  EdgeCondition edges) {
  ImplicitStepper stepper(params, edges);
  return stepper.step(state, cmd, dt);
}

Field nodePressure(const SurfaceState& state, const MaterialParams& params) {
  Field p(state.width(), state.height());
  for (int i = 0; i < p.size(); ++i) {
    p[i] = params.k_e * state.phi[i] + params.k_v * state.phi_dot[i] + state.sigma_m[i];
  }
  return p;
}

Field contactPressure(const SurfaceState& state, const MaterialParams& params) {
  Field p = nodePressure(state, params);
  for (int i = 0; i < p.size(); ++i) p[i] = state.contact[i] ? std::max(0.0, p[i]) : 0.0;
  return p;
}

double contactForce(const SurfaceState& state, const MaterialParams& params) {
  const Field p = contactPressure(state, params);
  const double area = state.h * state.h;
  double total = 0.0;
  for (int i = 0; i < p.size(); ++i) total += p[i] * area;
  if (!std::isfinite(total)) throw NumericError("contactForce: non-finite force");
  return total;
}

SurfaceState steadyState(const ContactCommand& cmd, const MaterialParams& params, double spacing,
                         const SteadyStateOptions& options) {
  params.validate();
  cmd.validate();
  SurfaceState out = SurfaceState::zero(cmd.mask.width(), cmd.mask.height(), spacing);
  out.contact = cmd.mask;
  for (int i = 0; i < cmd.mask.size(); ++i) {
    if (cmd.mask[i]) out.phi[i] = cmd.indentation[i];
  }
  if (countSet(cmd.mask) == 0) return out;

  const FreeSystem sys = assemble(cmd.mask, params.decayRate(), params.D, spacing, options.edges);
  const int n = static_cast<int>(sys.free_nodes.size());
  if (n == 0) return out;

  Eigen::VectorXd rhs(n);
  for (int k = 0; k < n; ++k) {
    rhs[k] = prescribedCoupling(cmd.indentation, cmd.mask, sys.free_nodes[static_cast<std::size_t>(k)], params.D,
                                spacing);
  }
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(sys.matrix);
  if (solver.info() != Eigen::Success) throw NumericError("steadyState: factorisation failed");
  Eigen::VectorXd sol = solver.solve(rhs);

  const double scale =
      std::max(maxAbs(cmd.indentation), 1e-300) * (params.decayRate() + 8.0 * params.D / (spacing * spacing));
  bool converged = false;
  for (int it = 0; it <= options.max_refinements; ++it) {
    const Eigen::VectorXd residual = rhs - sys.matrix * sol;
    if (!residual.allFinite()) break;
    if (residual.lpNorm<Eigen::Infinity>() <= options.tolerance * scale) {
      converged = true;
      break;
    }
    sol += solver.solve(residual);
  }
  if (!converged) throw NumericError("steadyState: no convergence within the refinement cap");
  for (int k = 0; k < n; ++k) out.phi[sys.free_nodes[static_cast<std::size_t>(k)]] = sol[k];
  return out;
}

}  // namespace softtouch::sim
