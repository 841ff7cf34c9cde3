#include "softtouch/tactile.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <cmath>
#include <numbers>

namespace softtouch::tactile {

double gaussian(std::mt19937_64& rng) {
  constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * kScale;  // (0, 1]
  const double u2 = static_cast<double>(rng() >> 11) * kScale;          // [0, 1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

ForceField sampleForceField(const sim::SurfaceState& state, const sim::MaterialParams& params, double noise_rms_kpa,
                            std::mt19937_64& rng, double timestamp, double normal_cosine) {
  state.validate();
  if (!state.phi.sameShape(kSensorWidth, kSensorHeight)) {
    throw ConfigError("sampleForceField: state grid " + std::to_string(state.width()) + "x" +
                      std::to_string(state.height()) + " does not match the 12x10 sensor");
  }
  if (!(noise_rms_kpa >= 0.0)) throw ConfigError("sampleForceField: noise rms must be non-negative");
  const Field p = sim::contactPressure(state, params);
  ForceField out{Field(state.width(), state.height()), timestamp};
  for (int i = 0; i < p.size(); ++i) {
    double v = p[i] * 1e-3 * normal_cosine;
    if (noise_rms_kpa > 0.0) v += noise_rms_kpa * gaussian(rng);
    out.pressures[i] = std::clamp(v, 0.0, kMaxPressureKPa);
  }
  return out;
}

TactileSensor::TactileSensor(std::uint64_t seed, double noise_rms_kpa, double smoothing_lambda)
    : rng_(seed), noise_rms_(noise_rms_kpa), smoothing_lambda_(smoothing_lambda) {}

ForceField TactileSensor::sampleForceField(const sim::SurfaceState& state, const sim::MaterialParams& params,
                                           double timestamp) {
  return tactile::sampleForceField(state, params, noise_rms_, rng_, timestamp, normal_cosine_);
}

DeformationField TactileSensor::sampleDeformationField(const sim::SurfaceState& state, double timestamp) const {
  state.validate();
  DeformationField raw{Field(state.width(), state.height()), timestamp};
  for (int i = 0; i < raw.displacements.size(); ++i) raw.displacements[i] = std::max(0.0, state.phi[i] * 1e3);
  if (smoothing_lambda_ > 0.0) return poissonSmooth(raw, smoothing_lambda_, state.h);
  return raw;
}

DeformationField poissonSmooth(const DeformationField& raw, double lambda, double spacing) {
  if (!(lambda >= 0.0)) throw ConfigError("poissonSmooth: lambda must be non-negative");
  if (!allFinite(raw.displacements)) throw NumericError("poissonSmooth: non-finite input");
  if (lambda == 0.0) return raw;

  const Field& f = raw.displacements;
  const int w = f.width();
  const int h = f.height();
  const int n = f.size();
  const double c = lambda / (spacing * spacing);
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(n) * 5);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      int inside = 0;
      auto visit = [&](int nx, int ny) {
        if (nx < 0 || ny < 0 || nx >= w || ny >= h) return;
        ++inside;
        triplets.emplace_back(i, ny * w + nx, -c);
      };
      visit(x - 1, y);
      visit(x + 1, y);
      visit(x, y - 1);
      visit(x, y + 1);
      triplets.emplace_back(i, i, 1.0 + c * inside);
    }
  }
  Eigen::SparseMatrix<double> a(n, n);
  a.setFromTriplets(triplets.begin(), triplets.end());
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(a);
  if (solver.info() != Eigen::Success) throw NumericError("poissonSmooth: solver breakdown");
  Eigen::VectorXd rhs(n);
  for (int i = 0; i < n; ++i) rhs[i] = f[i];
  const Eigen::VectorXd sol = solver.solve(rhs);
  if (!sol.allFinite()) throw NumericError("poissonSmooth: solver breakdown");
  DeformationField out{Field(w, h), raw.timestamp};
  for (int i = 0; i < n; ++i) out.displacements[i] = sol[i];
  return out;
}

FieldFeatures features(const ForceField& f, const DeformationField& d) {
  const Field& p = f.pressures;
  FieldFeatures out;
  const double cx = 0.5 * (p.width() - 1);
  const double cy = 0.5 * (p.height() - 1);
  double total = 0.0;
  double sx = 0.0;
  double sy = 0.0;
  for (int y = 0; y < p.height(); ++y) {
    for (int x = 0; x < p.width(); ++x) {
      const double v = p(x, y);
      out.max_force = std::max(out.max_force, v);
      total += v;
      sx += v * x;
      sy += v * y;
    }
  }
  for (double v : d.displacements.values()) out.max_deformation = std::max(out.max_deformation, v);
  if (total > 0.0) {
    out.force_centroid = {sx / total, sy / total};
  } else {
    out.force_centroid = {cx, cy};
  }
  const double half_diag = std::hypot(cx, cy);
  if (half_diag > 0.0) {
    const double r = std::hypot(out.force_centroid[0] - cx, out.force_centroid[1] - cy);
    out.asymmetry = std::clamp(r / half_diag, 0.0, 1.0);
  }
  return out;
}

}  // namespace softtouch::tactile
