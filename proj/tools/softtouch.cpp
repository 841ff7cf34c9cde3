// Command-line entry point. Exit codes: 0 success, 1 acceptance failure or
// runtime error, 2 usage error, 3 configuration error.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "softtouch/bench.hpp"
#include "softtouch/config.hpp"
#include "softtouch/continuum.hpp"
#include "softtouch/dataset.hpp"
#include "softtouch/errors.hpp"
#include "softtouch/policy.hpp"
#include "softtouch/tasks.hpp"
#include "softtouch/teleop.hpp"

namespace fs = std::filesystem;
using namespace softtouch;

namespace {

constexpr int kExitAcceptance = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct Common {
  std::string config;
  std::string task;
  std::string weights;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  std::string out = ".";
  bool headless = false;
};

// Config problems surface as exit 3 regardless of which exception type
// the loader used.
struct ConfigFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

config::Settings loadSettings(const Common& c) {
  config::Settings s;
  try {
    if (!c.config.empty()) s = config::loadFile(c.config);
    config::applyEnvironment(s, [](const char* name) { return std::getenv(name); });
  } catch (const Error& e) {
    throw ConfigFailure(e.what());
  }
  return s;
}

tasks::TaskSpec specFor(const config::Settings& s, tasks::TaskId id) {
  try {
    return s.taskSpec(id);
  } catch (const Error& e) {
    throw ConfigFailure(e.what());
  }
}

std::vector<tasks::TaskId> tasksFor(const Common& c, const config::Settings& s) {
  if (c.task == "all") {
    return {tasks::TaskId::PressHold, tasks::TaskId::Wipe, tasks::TaskId::Insert, tasks::TaskId::BimanualInsert};
  }
  if (!c.task.empty()) {
    try {
      return {tasks::parseTask(c.task)};
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
  if (s.task) return {*s.task};
  throw UsageError("--task is required (or set `task` in the config)");
}

std::uint64_t seedFor(const Common& c, const config::Settings& s) {
  if (c.seed) return *c.seed;
  if (s.seed) return *s.seed;
  return 0;
}

fs::path outDir(const Common& c) {
  fs::path p(c.out);
  fs::create_directories(p);
  return p;
}

void writeText(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::atomic<bool> g_interrupted{false};

// simulate -----------------------------------------------------------------

int runSimulate(const Common& c, double dt, double duration, double depth) {
  if (!(dt > 0.0) || dt > 0.01) throw UsageError("--dt must lie in (0, 0.01] s");
  if (!(duration > 0.0)) throw UsageError("--duration must be > 0");
  if (!(depth >= 0.0) || depth > 0.02) throw UsageError("--depth must lie in [0, 0.02] m");
  const config::Settings s = loadSettings(c);
  const Mask mask = rectMask(s.grid.width, s.grid.height, 2, 2, std::min(8, s.grid.width - 2),
                             std::min(6, s.grid.height - 2));
  sim::ImplicitStepper stepper(s.material, s.grid.edges);
  sim::SurfaceState state = sim::SurfaceState::zero(s.grid.width, s.grid.height, s.grid.spacing);
  const sim::ContactCommand cmd = sim::ContactCommand::uniform(mask, depth);
  const long steps = std::lround(duration / dt);
  const long every = std::max(1L, std::lround(0.1 / dt));

  std::ostringstream res;
  res << "softtouch-simulate 1\n";
  res << "dt " << fmt("%.9g", dt) << " duration " << fmt("%.9g", duration) << " depth " << fmt("%.9g", depth)
      << " material " << dataset::materialHash(s.material) << "\n";
  std::cout << "simulate: flat punch " << depth * 1e3 << " mm, dt " << dt * 1e3 << " ms, " << duration << " s\n";
  for (long k = 1; k <= steps; ++k) {
    state = stepper.step(state, cmd, dt);
    if (k % every == 0 || k == steps) {
      const double t = static_cast<double>(k) * dt;
      const double f = sim::contactForce(state, s.material);
      double sigma = 0.0;
      for (double v : state.sigma_m.values()) sigma = std::max(sigma, std::abs(v));
      res << "t " << fmt("%.6f", t) << " force " << fmt("%.9g", f) << " max_phi " << fmt("%.9g", maxAbs(state.phi))
          << " max_sigma_m " << fmt("%.9g", sigma) << "\n";
      std::cout << "  t " << fmt("%6.3f", t) << " s  force " << fmt("%8.4f", f) << " N\n";
    }
  }
  const fs::path file = outDir(c) / "simulate.txt";
  writeText(file, res.str());
  std::cout << "results: " << file.string() << "\n";
  return 0;
}

// demo-gen -----------------------------------------------------------------

int runDemoGen(const Common& c) {
  const config::Settings s = loadSettings(c);
  const std::uint64_t seed = seedFor(c, s);
  const fs::path dir = outDir(c);
  dataset::Manifest manifest;
  std::vector<dataset::Episode> episodes;
  int failures = 0;
  for (tasks::TaskId id : tasksFor(c, s)) {
    const tasks::TaskSpec spec = specFor(s, id);
    const int n = c.trials ? *c.trials : (s.trials ? *s.trials : tasks::demoCount(id));
    if (n < 1) throw UsageError("--trials must be >= 1");
    std::cout << "demo-gen: " << tasks::taskName(id) << " x" << n << "\n";
    for (int i = 0; i < n; ++i) {
      const std::uint64_t trial = tasks::trialSeed(seed, static_cast<std::uint64_t>(i));
      try {
        tasks::EpisodeRun run = tasks::scriptedExpert(spec, trial);
        char name[96];
        std::snprintf(name, sizeof name, "%s-%03d.cfep", tasks::taskName(id), i);
        dataset::writeEpisodeFile(run.episode, (dir / name).string());
        manifest.episodes.push_back({dataset::splitFor(static_cast<int>(manifest.episodes.size())),
                                     tasks::taskName(id), static_cast<int>(run.episode.frames.size()), name});
        episodes.push_back(std::move(run.episode));
      } catch (const GenerationError& e) {
        ++failures;
        std::cerr << "demo-gen: " << e.what() << "\n";
      }
    }
  }
  if (episodes.empty()) {
    std::cerr << "demo-gen: no episodes generated\n";
    return kExitAcceptance;
  }
  manifest.stats = dataset::computeStats(episodes);
  writeText(dir / "manifest.txt", dataset::formatManifest(manifest));
  std::cout << "wrote " << episodes.size() << " episodes and " << (dir / "manifest.txt").string() << "\n";
  return failures == 0 ? 0 : kExitAcceptance;
}

// benches ------------------------------------------------------------------

int runIdentifyBench(const Common& c) {
  const config::Settings s = loadSettings(c);
  const bench::ObserverCheck r = bench::observerCheck(s.material);
  std::ostringstream res;
  res << "softtouch-identify-bench 1\nmaterial " << dataset::materialHash(s.material) << "\n";
  for (const bench::ObserverRun& run : r.runs) {
    res << "noise " << fmt("%.1f", run.noise) << " err_k_e " << fmt("%.6e", run.err_ke) << " err_k_v "
        << fmt("%.6e", run.err_kv) << " err_k_m " << fmt("%.6e", run.err_km) << " tau_offset " << run.tau_offset
        << "\n";
    std::cout << "noise " << fmt("%5.0f", run.noise) << " Pa  k_e " << fmt("%.3f%%", 100 * run.err_ke) << "  k_v "
              << fmt("%.3f%%", 100 * run.err_kv) << "  k_m " << fmt("%.3f%%", 100 * run.err_km) << "  tau offset "
              << run.tau_offset << "\n";
  }
  res << "pass " << (r.pass ? 1 : 0) << "\n";
  writeText(outDir(c) / "identify-bench.txt", res.str());
  std::cout << (r.pass ? "PASS" : "FAIL") << " observer recovery\n";
  return r.pass ? 0 : kExitAcceptance;
}

int runControlBench(const Common& c) {
  const config::Settings s = loadSettings(c);
  const bench::ForceTracking f = bench::forceTracking(3.0, 0.10, 6.0, s.loop, s.material);
  const bench::DeformationTracking d = bench::deformationTracking(3.0, s.presets, s.material);
  const bench::CycleBudget cb = bench::cycleBudget(1000, s.loop);
  std::ostringstream res;
  res << "softtouch-control-bench 1\nmaterial " << dataset::materialHash(s.material) << "\n";
  for (const bench::ForceRun& r : f.runs) {
    res << "force model_scale " << fmt("%.2f", r.model_scale) << " contact " << fmt("%.3f", r.contact_time)
        << " settle " << fmt("%.3f", r.settle_time) << " worst_after " << fmt("%.6f", r.worst_after) << " final "
        << fmt("%.6f", r.final_force) << "\n";
    std::cout << "force: prior x" << r.model_scale << "  settled " << fmt("%.2f", r.settle_time)
              << " s after contact, worst after " << fmt("%.2f%%", 100 * r.worst_after) << "\n";
  }
  for (const bench::DeformationRun& r : d.runs) {
    res << "deformation depth " << fmt("%.4f", r.depth) << " eps " << fmt("%.3f", r.eps) << " error "
        << fmt("%.6e", r.error) << "\n";
  }
  std::cout << "deformation: worst steady error " << fmt("%.4g", d.worst * 1e3) << " mm over 1..10 mm references\n";
  std::cout << "cycle: mean " << fmt("%.3f", cb.mean * 1e3) << " ms, p99 " << fmt("%.3f", cb.p99 * 1e3)
            << " ms, max " << fmt("%.3f", cb.max * 1e3) << " ms over " << cb.cycles << " cycles\n";
  // Timings stay out of the results file so reruns compare equal.
  res << "force_pass " << f.pass << "\ndeformation_pass " << d.pass << "\ncycle_pass " << cb.pass << "\n";
  writeText(outDir(c) / "control-bench.txt", res.str());
  const bool pass = f.pass && d.pass && cb.pass;
  std::cout << (pass ? "PASS" : "FAIL") << " control bench\n";
  return pass ? 0 : kExitAcceptance;
}

// serve --------------------------------------------------------------------

int runServe(const Common& c, double duration) {
  const config::Settings s = loadSettings(c);
  const tasks::TaskSpec spec = specFor(s, tasksFor(c, s).front());
  teleop::TeleopServer server(s.teleop, spec, seedFor(c, s));
  const int port = server.start();
  std::cout << "serve: session '" << s.teleop.session << "' task " << tasks::taskName(spec.id)
            << " on ws://127.0.0.1:" << port << " (" << s.teleop.stream_hz << " Hz state stream)\n";
  if (!c.headless) std::cout << "serve: point the teleoperation UI at the address above\n";
  std::cout.flush();
  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  const auto start = std::chrono::steady_clock::now();
  while (!g_interrupted) {
    if (duration > 0.0 && std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() >= duration)
      break;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  server.stop();
  std::cout << "serve: stopped after " << server.packetsSent() << " packets, worst command latency "
            << fmt("%.2f", server.worstApplyLatency() * 1e3) << " ms\n";
  return 0;
}

// evaluate -----------------------------------------------------------------

int runEvaluate(const Common& c, const std::string& source_name, std::optional<double> expect) {
  const config::Settings s = loadSettings(c);
  tasks::Source source;
  try {
    source = tasks::parseSource(source_name);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  if (source == tasks::Source::Weights && c.weights.empty()) throw UsageError("--source weights needs --weights");
  std::optional<policy::PolicyRuntime> runtime;
  if (!c.weights.empty()) {
    if (!fs::exists(c.weights)) throw UsageError("--weights: no such file " + c.weights);
    runtime.emplace(policy::loadWeightsFile(c.weights));
  }
  const int n = c.trials ? *c.trials : (s.trials ? *s.trials : 20);
  if (n < 1) throw UsageError("--trials must be >= 1");
  std::vector<tasks::EvalTable> tables;
  for (tasks::TaskId id : tasksFor(c, s)) {
    const tasks::TaskSpec spec = specFor(s, id);
    tables.push_back(tasks::evaluate(source, spec, n, seedFor(c, s), runtime ? &*runtime : nullptr, s.eval));
  }
  std::cout << tasks::formatTable(tables);
  const fs::path file = outDir(c) / "evaluate.txt";
  writeText(file, tasks::formatResults(tables));
  std::cout << "results: " << file.string() << "\n";
  if (expect) {
    for (const tasks::EvalTable& t : tables) {
      if (t.successRate() + 1e-12 < *expect) {
        std::cerr << "evaluate: " << tasks::taskName(t.task) << " success rate " << t.successRate()
                  << " below expected " << *expect << "\n";
        return kExitAcceptance;
      }
    }
  }
  return 0;
}

// export-goldens -----------------------------------------------------------

int runExportGoldens(const Common& c, const std::string& check_dir) {
  const fs::path dir = outDir(c);
  int mismatches = 0;
  for (int arms : {1, 2}) {
    policy::Architecture arch;
    arch.arms = arms;
    const policy::PolicyRuntime rt(policy::seededBundle(arch, 42));
    const std::string text = policy::chunkToHex(rt.predictChunk(policy::goldenObservation(arms)));
    const std::string name = "policy_seed42_arms" + std::to_string(arms) + ".txt";
    writeText(dir / name, text);
    std::cout << "wrote " << (dir / name).string() << "\n";
    if (!check_dir.empty()) {
      std::ifstream in(fs::path(check_dir) / name, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      if (!in || ss.str() != text) {
        ++mismatches;
        std::cerr << "export-goldens: " << name << " differs from " << check_dir << "\n";
      }
    }
  }
  return mismatches == 0 ? 0 : kExitAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"softtouch: contact-rich manipulation on a simulated compliant tactile pad"};
  app.require_subcommand(1);
  Common c;
  auto common = [&c](CLI::App* sub) {
    sub->add_option("--config", c.config, "Settings file (key = value)");
    sub->add_option("--task", c.task, "PressHold | Wipe | Insert | BimanualInsert | all");
    sub->add_option("--weights", c.weights, "Policy weight bundle (.cfa)");
    sub->add_option("--seed", c.seed, "Base seed");
    sub->add_option("--trials", c.trials, "Trial or episode count");
    sub->add_option("--out", c.out, "Output directory")->capture_default_str();
    sub->add_flag("--headless", c.headless, "Run without a UI");
  };

  double dt = 1e-3, duration = 1.0, depth = 3e-3;
  auto* simulate = app.add_subcommand("simulate", "Hold a flat punch on the simulated pad and log the force");
  common(simulate);
  simulate->add_option("--dt", dt, "Step (s), in (0, 0.01]")->capture_default_str();
  simulate->add_option("--duration", duration, "Simulated time (s)")->capture_default_str();
  simulate->add_option("--depth", depth, "Indentation (m)")->capture_default_str();

  auto* demo = app.add_subcommand("demo-gen", "Record scripted demonstrations and a manifest");
  common(demo);
  auto* identify = app.add_subcommand("identify-bench", "Observer parameter recovery benchmark");
  common(identify);
  auto* control = app.add_subcommand("control-bench", "Force, deformation and cycle-time benchmarks");
  common(control);

  double serve_duration = 0.0;
  auto* serve = app.add_subcommand("serve", "Teleoperation WebSocket server");
  common(serve);
  serve->add_option("--duration", serve_duration, "Stop after this many seconds (0 = until interrupted)");

  std::string source = "scripted";
  std::optional<double> expect;
  auto* evaluate = app.add_subcommand("evaluate", "Seeded success-rate table");
  common(evaluate);
  evaluate->add_option("--source", source, "scripted | weights | fixed-compliance | no-field")->capture_default_str();
  evaluate->add_option("--expect-rate", expect, "Exit 1 if any task's success rate is below this (0..1)");

  std::string check_dir;
  auto* goldens = app.add_subcommand("export-goldens", "Write the seed-42 policy golden chunks");
  common(goldens);
  goldens->add_option("--check", check_dir, "Compare against the goldens in this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*simulate) return runSimulate(c, dt, duration, depth);
    if (*demo) return runDemoGen(c);
    if (*identify) return runIdentifyBench(c);
    if (*control) return runControlBench(c);
    if (*serve) return runServe(c, serve_duration);
    if (*evaluate) return runEvaluate(c, source, expect);
    if (*goldens) return runExportGoldens(c, check_dir);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigFailure& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAcceptance;
  }
  return kExitUsage;
}
