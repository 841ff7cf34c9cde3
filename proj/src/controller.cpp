#include "softtouch/controller.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cmath>

namespace softtouch::control {

bool withinRanges(const ComplianceParams& c) {
  return kStiffnessRange.contains(c.lambda1) && kDampingRange.contains(c.lambda2) && kDiffusionRange.contains(c.eps);
}

ComplianceParams clampToRanges(const ComplianceParams& c) {
  return {std::clamp(c.lambda1, kStiffnessRange.lo, kStiffnessRange.hi),
          std::clamp(c.lambda2, kDampingRange.lo, kDampingRange.hi),
          std::clamp(c.eps, kDiffusionRange.lo, kDiffusionRange.hi)};
}

void requireWithinRanges(const ComplianceParams& c) {
  if (!withinRanges(c)) {
    throw ConfigError("compliance (" + std::to_string(c.lambda1) + ", " + std::to_string(c.lambda2) + ", " +
                      std::to_string(c.eps) + ") outside [50,500] x [0.1,5] x [0.01,0.1]");
  }
}

const char* presetName(PresetLevel level) {
  switch (level) {
    case PresetLevel::Low:
      return "Low";
    case PresetLevel::Mid:
      return "Mid";
    case PresetLevel::High:
      return "High";
  }
  return "?";
}

PresetLevel parsePreset(const std::string& name) {
  if (name == "Low" || name == "low") return PresetLevel::Low;
  if (name == "Mid" || name == "mid") return PresetLevel::Mid;
  if (name == "High" || name == "high") return PresetLevel::High;
  throw ConfigError("unknown compliance preset '" + name + "'");
}

const ComplianceParams& PresetTable::operator[](PresetLevel level) const {
  switch (level) {
    case PresetLevel::Low:
      return low;
    case PresetLevel::High:
      return high;
    case PresetLevel::Mid:
      break;
  }
  return mid;
}

PresetLevel PresetTable::nearestByStiffness(double lambda1) const {
  PresetLevel best = PresetLevel::Low;
  double best_gap = std::abs(lambda1 - low.lambda1);
  for (PresetLevel level : {PresetLevel::Mid, PresetLevel::High}) {
    const double gap = std::abs(lambda1 - (*this)[level].lambda1);
    if (gap < best_gap) {
      best_gap = gap;
      best = level;
    }
  }
  return best;
}

void PresetTable::validate() const {
  requireWithinRanges(low);
  requireWithinRanges(mid);
  requireWithinRanges(high);
  if (!(low.lambda1 < mid.lambda1 && mid.lambda1 < high.lambda1)) {
    throw ConfigError("preset table: lambda1 must increase Low < Mid < High");
  }
}

namespace {

// exp(A t) for A = [[0, 1], [-k, -c]], written as
//   e^{mu t} [C(t) I + S(t) (A - mu I)],  mu = -c/2,  q^2 = c^2/4 - k
// with C, S the cosh/sinh (q^2 > 0) or cos/sin (q^2 < 0) pair and S -> t at q = 0.
struct Propagator {
  double a00, a01, a10, a11;
};

Propagator propagator(double k, double c, double t) {
  const double mu = -0.5 * c;
  const double q2 = 0.25 * c * c - k;
  double cpart;  // e^{mu t} C(t)
  double spart;  // e^{mu t} S(t)
  const double q = std::sqrt(std::abs(q2));
  if (q * t < 1e-6) {
    const double e = std::exp(mu * t);
    const double z = q2 * t * t;
    cpart = e * (1.0 + z / 2.0);
    spart = e * t * (1.0 + z / 6.0);
  } else if (q2 > 0.0) {
    // Sum of exponentials avoids cosh/sinh overflow in the overdamped regime.
    const double ep = std::exp((mu + q) * t);
    const double em = std::exp((mu - q) * t);
    cpart = 0.5 * (ep + em);
    spart = 0.5 * (ep - em) / q;
  } else {
    const double e = std::exp(mu * t);
    cpart = e * std::cos(q * t);
    spart = e * std::sin(q * t) / q;
  }
  // A - mu I = [[-mu, 1], [-k, -c - mu]]
  return {cpart - mu * spart, spart, -k * spart, cpart + (-c - mu) * spart};
}

}  // namespace

AdmittanceResult admittanceStep(const AdmittanceState& a, double f_des, double f_meas, const ComplianceParams& c,
                                double dt) {
  if (!std::isfinite(f_des) || !std::isfinite(f_meas)) throw NumericError("admittanceStep: non-finite force");
  if (!(dt > 0.0) || dt > 0.01 + 1e-15) throw ConfigError("admittanceStep: dt must lie in (0, 0.01] s");
  requireWithinRanges(c);
  if (!(a.virtual_mass > 0.0)) throw ConfigError("admittanceStep: virtual mass must be positive");

  const double equilibrium = a.anchor_depth + (f_des - f_meas) / c.lambda1;
  const Propagator p = propagator(c.lambda1 / a.virtual_mass, c.lambda2 / a.virtual_mass, dt);
  const double dx = a.ref_depth - equilibrium;
  const double dv = a.ref_velocity;

  AdmittanceResult out;
  out.state = a;
  out.state.ref_depth = equilibrium + p.a00 * dx + p.a01 * dv;
  out.state.ref_velocity = p.a10 * dx + p.a11 * dv;
  if (!std::isfinite(out.state.ref_depth) || !std::isfinite(out.state.ref_velocity)) {
    throw NumericError("admittanceStep: non-finite state");
  }
  if (out.state.ref_depth < 0.0) {
    out.state.ref_depth = 0.0;
    out.state.ref_velocity = 0.0;
    out.saturated = true;
  } else if (out.state.ref_depth > a.max_depth) {
    out.state.ref_depth = a.max_depth;
    out.state.ref_velocity = 0.0;
    out.saturated = true;
  }
  return out;
}

namespace {

double templateValue(const TemplateGeometry& g, int x, int y) {
  if (g.kind == Template::FlatPunch) return 1.0;
  const double dx = x - g.center_x;
  const double dy = y - g.center_y;
  const double r2 = dx * dx + dy * dy;
  return std::max(0.0, 1.0 - r2 / (g.radius * g.radius));
}

}  // namespace

Field synthesizeReference(const TemplateGeometry& geometry, double depth, const Mask& mask) {
  if (!(depth >= 0.0) || !std::isfinite(depth)) throw ConfigError("synthesizeReference: depth must be >= 0");
  if (geometry.kind == Template::SphericalCap && !(geometry.radius > 0.0)) {
    throw ConfigError("synthesizeReference: cap radius must be positive");
  }
  Field out(mask.width(), mask.height());
  if (depth == 0.0) return out;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask(x, y)) out(x, y) = depth * templateValue(geometry, x, y);
  return out;
}

double templateShapeSum(const TemplateGeometry& geometry, const Mask& mask) {
  double sum = 0.0;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask(x, y)) sum += templateValue(geometry, x, y);
  return sum;
}

struct InnerLoop::Cache {
  Mask mask;
  double eps = -1.0;
  double dt = -1.0;
  std::vector<int> nodes;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
};

InnerLoop::InnerLoop(double gain, double spacing) : gain_(gain), spacing_(spacing) {
  if (!(gain >= 0.0) || !(spacing > 0.0)) throw ConfigError("InnerLoop: gain must be >= 0 and spacing > 0");
}
InnerLoop::~InnerLoop() = default;
InnerLoop::InnerLoop(InnerLoop&&) noexcept = default;
InnerLoop& InnerLoop::operator=(InnerLoop&&) noexcept = default;

sim::ContactCommand InnerLoop::step(const sim::ContactCommand& u, const Field& phi_ref, const Field& phi_meas,
                                    double eps, double dt) {
  u.validate();
  requireSameShape(u.indentation, phi_ref, "innerBoundaryStep(phi_ref)");
  requireSameShape(u.indentation, phi_meas, "innerBoundaryStep(phi_meas)");
  if (!allFinite(phi_ref) || !allFinite(phi_meas)) throw NumericError("innerBoundaryStep: non-finite field");
  if (!(dt > 0.0) || !(eps >= 0.0)) throw ConfigError("innerBoundaryStep: invalid dt or eps");

  const Mask& mask = u.mask;
  if (!cache_ || cache_->eps != eps || cache_->dt != dt || !(cache_->mask == mask)) {
    auto fresh = std::make_unique<Cache>();
    fresh->mask = mask;
    fresh->eps = eps;
    fresh->dt = dt;
    const int w = mask.width();
    const int h = mask.height();
    std::vector<int> unknown_of(static_cast<std::size_t>(mask.size()), -1);
    for (int i = 0; i < mask.size(); ++i) {
      if (mask[i]) {
        unknown_of[static_cast<std::size_t>(i)] = static_cast<int>(fresh->nodes.size());
        fresh->nodes.push_back(i);
      }
    }
    const int n = static_cast<int>(fresh->nodes.size());
    if (n > 0) {
      const double c = dt * eps / (spacing_ * spacing_);
      std::vector<Eigen::Triplet<double>> triplets;
      triplets.reserve(static_cast<std::size_t>(n) * 5);
      for (int k = 0; k < n; ++k) {
        const int i = fresh->nodes[static_cast<std::size_t>(k)];
        const int x = i % w;
        const int y = i / w;
        int links = 0;
        auto visit = [&](int nx, int ny) {
          if (nx < 0 || ny < 0 || nx >= w || ny >= h) return;
          const int nb = unknown_of[static_cast<std::size_t>(ny * w + nx)];
          if (nb < 0) return;
          ++links;
          triplets.emplace_back(k, nb, -c);
        };
        visit(x - 1, y);
        visit(x + 1, y);
        visit(x, y - 1);
        visit(x, y + 1);
        triplets.emplace_back(k, k, 1.0 + c * links);
      }
      Eigen::SparseMatrix<double> a(n, n);
      a.setFromTriplets(triplets.begin(), triplets.end());
      fresh->solver.compute(a);
      if (fresh->solver.info() != Eigen::Success) throw NumericError("innerBoundaryStep: factorisation failed");
    }
    cache_ = std::move(fresh);
    ++factorizations_;
  }

  sim::ContactCommand out = u;
  const auto& nodes = cache_->nodes;
  const int n = static_cast<int>(nodes.size());
  if (n == 0) return out;
  Eigen::VectorXd e(n);
  bool zero_error = true;
  for (int k = 0; k < n; ++k) {
    const int i = nodes[static_cast<std::size_t>(k)];
    e[k] = phi_ref[i] - phi_meas[i];
    zero_error = zero_error && e[k] == 0.0;
  }
  if (zero_error) return out;
  const Eigen::VectorXd next = cache_->solver.solve((1.0 - dt * gain_) * e);
  for (int k = 0; k < n; ++k) {
    const int i = nodes[static_cast<std::size_t>(k)];
    out.indentation[i] = std::max(0.0, u.indentation[i] + (e[k] - next[k]));
  }
  return out;
}

sim::ContactCommand innerBoundaryStep(const sim::ContactCommand& u, const Field& phi_ref, const Field& phi_meas,
                                      double eps, double dt, double gain, double spacing) {
  InnerLoop loop(gain, spacing);
  return loop.step(u, phi_ref, phi_meas, eps, dt);
}

double predictedSteadyForce(const sim::ContactCommand& cmd, const sim::MaterialParams& model, double spacing) {
  double sum = 0.0;
  for (int i = 0; i < cmd.mask.size(); ++i)
    if (cmd.mask[i]) sum += cmd.indentation[i];
  return model.k_e * sum * spacing * spacing;
}

ClampResult safetyClamp(const sim::ContactCommand& cmd, const SafetyLimits& limits, const sim::MaterialParams& model,
                        double spacing) {
  if (!(limits.max_force > 0.0) || !(limits.max_depth > 0.0)) throw ConfigError("safetyClamp: limits must be positive");
  ClampResult out{cmd, {}, 0.0};
  for (int i = 0; i < cmd.mask.size(); ++i) {
    if (cmd.mask[i] && out.command.indentation[i] > limits.max_depth) {
      out.command.indentation[i] = limits.max_depth;
      out.violations.depth = true;
    }
  }
  double force = predictedSteadyForce(out.command, model, spacing);
  if (force > limits.max_force) {
    out.violations.force = true;
    const double scale = limits.max_force / force;
    for (int i = 0; i < cmd.mask.size(); ++i) out.command.indentation[i] *= scale;
    force = predictedSteadyForce(out.command, model, spacing);
    // Rounding can leave the scaled sum one ulp high.
    while (force > limits.max_force) {
      for (int i = 0; i < cmd.mask.size(); ++i) {
        out.command.indentation[i] = std::nextafter(out.command.indentation[i], 0.0);
      }
      force = predictedSteadyForce(out.command, model, spacing);
    }
  }
  out.predicted_force = force;
  return out;
}

}  // namespace softtouch::control
