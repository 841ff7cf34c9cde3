#pragma once

// Benchmarks behind the command line and the acceptance suite. Each returns
// the measured numbers plus a pass flag against the stated threshold, so a
// failing run still reports how far off it was.

#include <cstdint>
#include <string>
#include <vector>

#include "softtouch/continuum.hpp"
#include "softtouch/control_loop.hpp"
#include "softtouch/observer.hpp"
#include "softtouch/tasks.hpp"

namespace softtouch::bench {

struct ForceRun {
  double model_scale = 1.0;  // controller prior relative to the true material
  double contact_time = -1.0;
  double settle_time = -1.0;  // s after contact; -1 if never settled
  double worst_after = 0.0;   // largest |f - f_des| / f_des once settled
  double final_force = 0.0;
};

struct ForceTracking {
  std::vector<ForceRun> runs;
  double wall = 0.0;  // s for all runs
  bool pass = false;
};

/// Closed-loop press on an 8x6 flat patch at f_des with the observer running
/// and the controller's prior off by +-`error`; each run lasts `duration` s.
ForceTracking forceTracking(double f_des = 3.0, double error = 0.10, double duration = 6.0,
                            const control::LoopConfig& loop = {}, const sim::MaterialParams& truth = {});

struct DeformationRun {
  double depth = 0.0;  // m
  double eps = 0.0;
  double error = 0.0;  // m, max-norm over the patch after settling
};

struct DeformationTracking {
  std::vector<DeformationRun> runs;
  double worst = 0.0;
  bool pass = false;
};

/// Inner loop against the simulator for flat-punch references 1..10 mm at
/// every preset's eps, `settle` s each.
DeformationTracking deformationTracking(double settle = 3.0, const control::PresetTable& presets = {},
                                        const sim::MaterialParams& truth = {});

struct PdeCheck {
  double oracle_error = 0.0;        // worst |phi - dense solve| over the oracle cases
  double principle_excess = 0.0;    // worst max|phi| / bound - 1 (<= 0 passes)
  double energy_excess = 0.0;       // worst energy ratio - 1 on unforced steps (<= 0 passes)
  long steps = 0;
  bool pass = false;
};

/// Dense direct-solve comparison on 4x4 grids, then `steps` randomized steps
/// checking the maximum principle (forced) and dissipativity (unforced).
PdeCheck pdeCheck(long steps = 100000, std::uint64_t seed = 2024);

struct ObserverRun {
  double noise = 0.0;  // Pa RMS
  double err_ke = 0.0, err_kv = 0.0, err_km = 0.0;  // relative
  int tau_offset = 0;  // grid points from the true tau
};

struct ObserverCheck {
  std::vector<ObserverRun> runs;
  bool pass = false;
};

/// Two-tone excitation history sampled at 200 Hz from the simulator.
observer::HistoryBuffer syntheticHistory(const sim::MaterialParams& truth, double noise_pa, std::uint64_t seed);
/// Noiseless within 1% (tau within one grid point) and 0.2 kPa within 5%.
ObserverCheck observerCheck(const sim::MaterialParams& truth = {}, int noisy_seeds = 5);

struct PolicyCheck {
  int action_dim = 0;
  long range_violations = 0;
  long actions_checked = 0;
  bool golden_match = false;
  std::string golden_detail;
  long scheduler_gaps = 0;
  bool pass = false;
};

/// Output width, compliance ranges over random observations, the seed-42
/// golden chunks in `golden_dir` and 10 Hz scheduling.
PolicyCheck policyCheck(const std::string& golden_dir, int random_observations = 200);

struct CycleBudget {
  int cycles = 0;
  double mean = 0.0;  // s
  double p99 = 0.0;
  double max = 0.0;
  bool pass = false;
};

/// Times ContactLoop::runCycle while pressing with the observer on.
CycleBudget cycleBudget(int cycles = 1000, const control::LoopConfig& loop = {});

struct Ordering {
  tasks::TaskId task = tasks::TaskId::Insert;
  tasks::EvalTable scheduled;
  tasks::EvalTable frozen;
  bool pass = false;
};

/// Scheduled-preset expert against the frozen-Mid baseline on the same seeds.
Ordering ordering(const tasks::TaskSpec& spec, int trials = 20, std::uint64_t seed = 0);

}  // namespace softtouch::bench
