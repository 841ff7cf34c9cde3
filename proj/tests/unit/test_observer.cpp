#include <cmath>
#include <random>

#include "softtouch/observer.hpp"
#include "softtouch/tactile.hpp"
#include "doctest.h"

using namespace softtouch;
using namespace softtouch::observer;

namespace {

// Two-tone indentation on the full pad, sampled every 5 ms from a 1 ms
// simulation.
HistoryBuffer synthetic(double noise_rms_pa, std::uint64_t seed, double pressure_scale = 1.0) {
  sim::MaterialParams m;
  sim::ImplicitStepper stepper(m);
  const Mask mask = fullMask(kSensorWidth, kSensorHeight);
  sim::SurfaceState s = sim::SurfaceState::zero(kSensorWidth, kSensorHeight);
  std::mt19937_64 rng(seed);
  HistoryBuffer buf(400);
  const double dt = 1e-3;
  const int nodes[5] = {0, 17, 42, 77, 119};
  for (int k = 1; k <= 2600; ++k) {
    const double t = k * dt;
    const double depth = 3e-3 + 1.2e-3 * std::sin(2.0 * M_PI * 0.7 * t) + 0.6e-3 * std::sin(2.0 * M_PI * 3.1 * t);
    s = stepper.step(s, sim::ContactCommand::uniform(mask, depth), dt);
    if (k % 5 != 0) continue;
    const Field p = sim::nodePressure(s, m);
    ObserverSample sample;
    sample.timestamp = t;
    for (int n : nodes) {
      sample.phi.push_back(s.phi[n]);
      sample.phi_dot.push_back(s.phi_dot[n]);
      sample.pressure.push_back(pressure_scale * p[n] + noise_rms_pa * tactile::gaussian(rng));
    }
    buf.push(std::move(sample));
  }
  return buf;
}

ObserverSample single(double t, std::size_t nodes = 1) {
  ObserverSample s;
  s.timestamp = t;
  s.phi.assign(nodes, 0.0);
  s.phi_dot.assign(nodes, 0.0);
  s.pressure.assign(nodes, 0.0);
  return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST_CASE("history buffer push, eviction and ordering") {
  HistoryBuffer buf(3);
  buf.push(single(0.0));
  CHECK(buf.size() == 1);
  buf.push(single(0.1));
  buf.push(single(0.2));
  buf.push(single(0.3));
  CHECK(buf.size() == 3);
  CHECK(buf.front().timestamp == 0.1);
  CHECK_THROWS_AS(buf.push(single(0.25)), OrderingError);
  CHECK_THROWS_AS(buf.push(single(0.3)), OrderingError);
  CHECK_THROWS_AS(buf.push(single(0.4, 2)), ConfigError);
  CHECK_THROWS_AS(HistoryBuffer(0), ConfigError);
}

TEST_CASE("tau grid is log spaced and contains 0.5 s") {
  const auto grid = logTauGrid();
  REQUIRE(grid.size() == 25);
  CHECK(grid.front() == doctest::Approx(0.05));
  CHECK(grid.back() == 5.0);
  CHECK(grid[12] == doctest::Approx(0.5).epsilon(1e-12));
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] / grid[i - 1] == doctest::Approx(grid[1] / grid[0]));
}

TEST_CASE("noiseless recovery within 1 percent") {
  const HistoryBuffer buf = synthetic(0.0, 1);
  const ParamEstimate est = identify(buf);
  sim::MaterialParams truth;
  CHECK(est.status == EstimateStatus::Identified);
  CHECK(est.confident);
  CHECK(rel(est.params.k_e, truth.k_e) < 0.01);
  CHECK(rel(est.params.k_v, truth.k_v) < 0.01);
  CHECK(rel(est.params.k_m, truth.k_m) < 0.01);
  CHECK(std::abs(est.tau_index - 12) <= 1);
}

TEST_CASE("recovery within 5 percent at 0.2 kPa noise") {
  const HistoryBuffer buf = synthetic(200.0, 2);
  const ParamEstimate est = identify(buf);
  sim::MaterialParams truth;
  CHECK(rel(est.params.k_e, truth.k_e) < 0.05);
  CHECK(rel(est.params.k_v, truth.k_v) < 0.05);
  CHECK(rel(est.params.k_m, truth.k_m) < 0.05);
}

TEST_CASE("selected tau has the smallest residual on the grid") {
  const HistoryBuffer buf = synthetic(200.0, 3);
  const IdentifyOptions opts;
  const ParamEstimate est = identify(buf, opts);
  REQUIRE(est.tau_index >= 0);
  for (double tau : opts.tau_grid) {
    const TauFit f = fitForTau(buf, tau, opts);
    if (f.full_rank) CHECK(f.residual_rms >= est.residual_rms);
  }
}

TEST_CASE("scaling pressures scales the stiffnesses and keeps tau") {
  const HistoryBuffer base = synthetic(0.0, 4);
  const HistoryBuffer scaled = synthetic(0.0, 4, 1.7);
  const ParamEstimate a = identify(base);
  const ParamEstimate b = identify(scaled);
  CHECK(a.tau_index == b.tau_index);
  CHECK(b.params.k_e == doctest::Approx(1.7 * a.params.k_e).epsilon(1e-9));
  CHECK(b.params.k_v == doctest::Approx(1.7 * a.params.k_v).epsilon(1e-9));
  CHECK(b.params.k_m == doctest::Approx(1.7 * a.params.k_m).epsilon(1e-9));
}

TEST_CASE("zero excitation is unidentifiable") {
  HistoryBuffer buf(400);
  for (int k = 0; k < 60; ++k) buf.push(single(k * 0.005, 5));
  const ParamEstimate est = identify(buf);
  CHECK(est.status == EstimateStatus::Unidentifiable);
  CHECK_FALSE(est.confident);
  CHECK(est.params.k_e > 0.0);
}

TEST_CASE("constant deformation is rank deficient") {
  HistoryBuffer buf(400);
  for (int k = 0; k < 80; ++k) {
    ObserverSample s = single(k * 0.005, 2);
    s.phi = {2e-3, 2e-3};
    s.pressure = {4e3, 4e3};
    buf.push(s);
  }
  const ParamEstimate est = identify(buf);
  CHECK_FALSE(est.confident);
  CHECK(est.status == EstimateStatus::Unidentifiable);
}

TEST_CASE("too few samples is not ready") {
  HistoryBuffer buf(400);
  for (int k = 0; k < 10; ++k) buf.push(single(k * 0.005));
  CHECK_THROWS_AS(identify(buf), NotReadyError);
}

TEST_CASE("negative solutions are clamped positive and flagged") {
  HistoryBuffer buf(400);
  for (int k = 0; k < 100; ++k) {
    ObserverSample s = single(k * 0.005, 1);
    const double t = k * 0.005;
    s.phi = {1e-3 + 5e-4 * std::sin(9.0 * t)};
    s.phi_dot = {5e-4 * 9.0 * std::cos(9.0 * t)};
    // Pressure falling with deformation: negative stiffness fit.
    s.pressure = {8e3 - 2e6 * s.phi[0] + 3e3};
    buf.push(s);
  }
  const ParamEstimate est = identify(buf);
  CHECK(est.params.k_e > 0.0);
  CHECK(est.params.k_v > 0.0);
  CHECK(est.params.k_m > 0.0);
  CHECK_FALSE(est.confident);
}

TEST_CASE("amortized sweep reproduces the full identification") {
  const HistoryBuffer buf = synthetic(200.0, 6);
  AmortizedIdentifier amortized;
  std::optional<ParamEstimate> est;
  int cycles = 0;
  while (!est) {
    est = amortized.advance(buf);
    ++cycles;
  }
  CHECK(cycles == 25);
  const ParamEstimate full = identify(buf);
  CHECK(est->params == full.params);
  CHECK(est->tau_index == full.tau_index);
}

TEST_CASE("diffusion is fitted from free-node decay") {
  // Free node channel generated from phi_dot = D lap - a phi exactly.
  sim::MaterialParams truth;
  truth.D = 0.035;
  HistoryBuffer buf = synthetic(0.0, 7);
  HistoryBuffer with_free(400);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t j = 0; j < buf.size(); ++j) {
    ObserverSample s = buf[j];
    for (int k = 0; k < 3; ++k) {
      const double phi = 1e-3 * (1.0 + u(rng));
      const double lap = 50.0 * u(rng);
      s.free_phi.push_back(phi);
      s.free_laplacian.push_back(lap);
      s.free_phi_dot.push_back(truth.D * lap - truth.decayRate() * phi);
    }
    with_free.push(s);
  }
  const ParamEstimate est = identify(with_free);
  CHECK(est.params.D == doctest::Approx(truth.D).epsilon(0.02));
  CHECK(identify(buf).params.D == IdentifyOptions{}.prior_D);
}
