#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "softtouch/tactile.hpp"
#include "doctest.h"

using namespace softtouch;
using namespace softtouch::tactile;

namespace {

sim::SurfaceState pressedState(double depth) {
  sim::SurfaceState s = sim::SurfaceState::zero(12, 10);
  s.contact = rectMask(12, 10, 2, 2, 6, 5);
  for (int i = 0; i < s.phi.size(); ++i)
    if (s.contact[i]) s.phi[i] = depth;
  return s;
}

DeformationField zeroDeformation() { return {Field(12, 10), 0.0}; }

}  // namespace

TEST_CASE("zero state without noise gives a zero field") {
  TactileSensor sensor(1, 0.0);
  const ForceField f = sensor.sampleForceField(sim::SurfaceState::zero(12, 10), {}, 0.0);
  CHECK(maxAbs(f.pressures) == 0.0);
}

TEST_CASE("pressures clamp at 50 kPa") {
  sim::MaterialParams m;
  const sim::SurfaceState s = pressedState(60e3 / m.k_e);
  TactileSensor sensor(1, 0.0);
  const ForceField f = sensor.sampleForceField(s, m, 0.0);
  CHECK(f.pressures(3, 3) == 50.0);
  CHECK(f.pressures(0, 0) == 0.0);
}

TEST_CASE("seeded noise equals an independently regenerated noise table") {
  sim::MaterialParams m;
  const sim::SurfaceState s = pressedState(10e3 / m.k_e);
  TactileSensor sensor(77, 0.5);
  const ForceField f = sensor.sampleForceField(s, m, 0.005);

  std::mt19937_64 rng(77);
  const Field clean = sim::contactPressure(s, m);
  for (int y = 0; y < 10; ++y) {
    for (int x = 0; x < 12; ++x) {
      const double u1 = (static_cast<double>(rng() >> 11) + 1.0) / 9007199254740992.0;
      const double u2 = static_cast<double>(rng() >> 11) / 9007199254740992.0;
      const double n = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
      const double expect = std::min(50.0, std::max(0.0, clean(x, y) / 1000.0 + 0.5 * n));
      CHECK(f.pressures(x, y) == doctest::Approx(expect).epsilon(1e-15));
    }
  }
}

TEST_CASE("sampling twice without noise is idempotent") {
  sim::MaterialParams m;
  const sim::SurfaceState s = pressedState(3e-3);
  TactileSensor sensor(3, 0.0);
  const ForceField a = sensor.sampleForceField(s, m, 0.0);
  const ForceField b = sensor.sampleForceField(s, m, 0.0);
  CHECK(a.pressures == b.pressures);
}

TEST_CASE("grid mismatch is a configuration error") {
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(sampleForceField(sim::SurfaceState::zero(10, 10), {}, 0.0, rng), ConfigError);
}

TEST_CASE("poissonSmooth identity, constants, and mean conservation") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  DeformationField raw{Field(12, 10), 0.0};
  for (int i = 0; i < raw.displacements.size(); ++i) raw.displacements[i] = u(rng);

  CHECK(poissonSmooth(raw, 0.0).displacements == raw.displacements);

  DeformationField flat{Field(12, 10, 2.5), 0.0};
  const DeformationField flat_out = poissonSmooth(flat, 3e-5);
  for (double v : flat_out.displacements.values()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));

  for (double lambda : {1e-7, 4e-6, 1e-4}) {
    const DeformationField out = poissonSmooth(raw, lambda);
    double in_mean = 0.0, out_mean = 0.0;
    for (int i = 0; i < raw.displacements.size(); ++i) {
      in_mean += raw.displacements[i];
      out_mean += out.displacements[i];
    }
    CHECK(std::abs(in_mean - out_mean) / 120.0 < 1e-9);
    CHECK(maxAbs(out.displacements) <= maxAbs(raw.displacements) + 1e-12);
  }
}

TEST_CASE("impulse smoothing matches the dense SPD solve") {
  const int w = 12, h = 10, n = w * h;
  const double spacing = kSensorPitch;
  const double lambda = spacing * spacing;
  DeformationField raw{Field(w, h), 0.0};
  raw.displacements(6, 5) = 1.0;
  const DeformationField out = poissonSmooth(raw, lambda, spacing);

  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
  const double c = lambda / (spacing * spacing);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int k = 0; k < 4; ++k) {
        if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
        a(i, i) += c;
        a(i, ny[k] * w + nx[k]) -= c;
      }
    }
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs[5 * w + 6] = 1.0;
  const Eigen::VectorXd oracle = a.llt().solve(rhs);
  for (int i = 0; i < n; ++i) CHECK(std::abs(out.displacements[i] - oracle[i]) <= 1e-10);
}

TEST_CASE("features of uniform, corner and random fields") {
  ForceField uniform{Field(12, 10, 7.0), 0.0};
  FieldFeatures f = features(uniform, zeroDeformation());
  CHECK(f.asymmetry == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(f.force_centroid[0] == doctest::Approx(5.5));
  CHECK(f.force_centroid[1] == doctest::Approx(4.5));
  CHECK(f.max_force == 7.0);

  ForceField corner{Field(12, 10), 0.0};
  corner.pressures(11, 9) = 12.0;
  CHECK(features(corner, zeroDeformation()).asymmetry == doctest::Approx(1.0));

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 50.0);
  for (int trial = 0; trial < 10; ++trial) {
    ForceField r{Field(12, 10), 0.0};
    DeformationField d{Field(12, 10), 0.0};
    for (int i = 0; i < 120; ++i) {
      r.pressures[i] = u(rng);
      d.displacements[i] = u(rng) / 10.0;
    }
    long double sw = 0, sx = 0, sy = 0;
    double dmax = 0;
    for (int i = 0; i < 120; ++i) {
      sw += r.pressures[i];
      sx += r.pressures[i] * (i % 12);
      sy += r.pressures[i] * (i / 12);
      dmax = std::max(dmax, d.displacements[i]);
    }
    const FieldFeatures g = features(r, d);
    CHECK(std::abs(g.force_centroid[0] - static_cast<double>(sx / sw)) <= 1e-12);
    CHECK(std::abs(g.force_centroid[1] - static_cast<double>(sy / sw)) <= 1e-12);
    CHECK(g.max_deformation == dmax);
    CHECK(g.asymmetry >= 0.0);
    CHECK(g.asymmetry <= 1.0);

    // Mirror in x.
    ForceField mirrored{Field(12, 10), 0.0};
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 12; ++x) mirrored.pressures(11 - x, y) = r.pressures(x, y);
    const FieldFeatures gm = features(mirrored, d);
    CHECK(gm.force_centroid[0] == doctest::Approx(11.0 - g.force_centroid[0]).epsilon(1e-12));
    CHECK(gm.asymmetry == doctest::Approx(g.asymmetry).epsilon(1e-12));
  }
}

TEST_CASE("deformation field reports millimetres") {
  const sim::SurfaceState s = pressedState(3e-3);
  TactileSensor sensor;
  const DeformationField d = sensor.sampleDeformationField(s, 0.0);
  CHECK(d.displacements(3, 3) == doctest::Approx(3.0));
  CHECK(d.displacements(0, 0) == 0.0);
}
