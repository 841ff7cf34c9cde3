#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "softtouch/continuum.hpp"
#include "softtouch/grid.hpp"

namespace softtouch::tactile {

inline constexpr double kMaxPressureKPa = 50.0;

struct ForceField {
  Field pressures;  // kPa, clamped to [0, 50]
  double timestamp = 0.0;
};

struct DeformationField {
  Field displacements;  // mm, non-negative
  double timestamp = 0.0;
};

struct FieldFeatures {
  double max_force = 0.0;        // kPa
  double max_deformation = 0.0;  // mm
  std::array<double, 2> force_centroid{0.0, 0.0};  // grid units (x, y)
  double asymmetry = 0.0;        // [0, 1]
  bool operator==(const FieldFeatures&) const = default;
};

/// Standard normal draw from a 64-bit Mersenne twister: Box-Muller on two
/// 53-bit uniforms, returning the cosine branch only. Portable across
/// standard libraries, unlike std::normal_distribution.
double gaussian(std::mt19937_64& rng);

/// Per-sensor noise stream. Instances are single-threaded.
class TactileSensor {
 public:
  explicit TactileSensor(std::uint64_t seed = 0, double noise_rms_kpa = 0.2, double smoothing_lambda = 0.0);

  /// Contact pressure projected on the sensor normal, plus one Gaussian draw
  /// per cell in row-major order, clamped to [0, 50] kPa.
  ForceField sampleForceField(const sim::SurfaceState& state, const sim::MaterialParams& params, double timestamp);

  /// Surface displacement in mm, optionally Poisson-smoothed.
  DeformationField sampleDeformationField(const sim::SurfaceState& state, double timestamp) const;

  double noiseRms() const { return noise_rms_; }
  void setNoiseRms(double rms) { noise_rms_ = rms; }
  /// Cosine between the sensor normal and the surface normal.
  void setNormalCosine(double c) { normal_cosine_ = c; }

 private:
  std::mt19937_64 rng_;
  double noise_rms_;
  double smoothing_lambda_;
  double normal_cosine_ = 1.0;
};

/// Stateless form of TactileSensor::sampleForceField; `rng` supplies the noise.
ForceField sampleForceField(const sim::SurfaceState& state, const sim::MaterialParams& params, double noise_rms_kpa,
                            std::mt19937_64& rng, double timestamp = 0.0, double normal_cosine = 1.0);

/// Screened-Poisson smoothing: solves (I - lambda lap) out = raw with zero-flux
/// edges. lambda in m^2, spacing in m.
DeformationField poissonSmooth(const DeformationField& raw, double lambda, double spacing = kSensorPitch);

/// Peak values, force-weighted centroid and centroid offset from the grid
/// centre normalised by the half diagonal. An all-zero force field has its
/// centroid at the centre.
FieldFeatures features(const ForceField& f, const DeformationField& d);

}  // namespace softtouch::tactile
