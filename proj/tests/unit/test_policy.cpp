#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "softtouch/detmath.hpp"
#include "softtouch/policy.hpp"

using namespace softtouch;
using namespace softtouch::policy;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string readFile(const std::string& path) {
  std::ifstream in(path);
  REQUIRE_MESSAGE(in.good(), "missing fixture " << path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Observation randomObservation(int arms, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Observation obs;
  for (int a = 0; a < arms; ++a) {
    ArmObservation arm;
    for (double& v : arm.pose) v = u(rng) - 0.5;
    arm.force.pressures = Field(kSensorWidth, kSensorHeight);
    arm.deformation.displacements = Field(kSensorWidth, kSensorHeight);
    for (int i = 0; i < arm.force.pressures.size(); ++i) {
      arm.force.pressures[i] = 50.0 * u(rng);
      arm.deformation.displacements[i] = 12.0 * u(rng);
    }
    obs.arms.push_back(arm);
  }
  return obs;
}

Action rampAction(double base) {
  std::array<double, kActionDim> v{};
  for (int i = 0; i < kActionDim; ++i) v[i] = base + 0.01 * i;
  Action a = Action::fromVector(v);
  a.compliance = {100.0 + base, 1.0 + 0.1 * base, 0.02 + 0.001 * base};
  return a;
}

ActionChunk constantChunk(long start, int horizon, double base, int arms = 1) {
  ActionChunk c;
  c.start_tick = start;
  for (int s = 0; s < horizon; ++s) c.actions.push_back(MultiAction(static_cast<std::size_t>(arms), rampAction(base + s)));
  return c;
}

bool compliant(const control::ComplianceParams& c) {
  return c.lambda1 >= 50.0 && c.lambda1 <= 500.0 && c.lambda2 >= 0.1 && c.lambda2 <= 5.0 && c.eps >= 0.01 &&
         c.eps <= 0.1;
}

}  // namespace

TEST_CASE("detmath exp tracks libm to a few ulp") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-700.0, 700.0);
  for (int i = 0; i < 20000; ++i) {
    const double x = i < 10000 ? u(rng) : u(rng) / 350.0;
    const double ref = std::exp(x);
    CHECK(std::abs(detmath::exp(x) - ref) <= 8e-16 * ref);
  }
  CHECK(detmath::exp(0.0) == 1.0);
  CHECK(detmath::exp(-1000.0) == 0.0);
  CHECK(std::isinf(detmath::exp(1000.0)));
  CHECK(detmath::sigmoid(0.0) == 0.5);
  CHECK(detmath::sigmoid(-800.0) == 0.0);
  CHECK(detmath::sigmoid(800.0) == 1.0);
  CHECK(std::abs(detmath::wrapAngle(3 * kPi / 2) + kPi / 2) < 1e-15);
}

TEST_CASE("action vector layout") {
  const Action a = rampAction(1.0);
  const auto v = a.toVector();
  CHECK(v.size() == 22);
  CHECK(Action::fromVector(v) == a);
  CHECK(v[19] == a.compliance.lambda1);
  CHECK(v[21] == a.compliance.eps);
  std::vector<double> short_vec(21, 0.0);
  CHECK_THROWS_AS(Action::fromVector(short_vec), ShapeError);
}

TEST_CASE("squash midpoints and limits") {
  CHECK(squash(0.0, control::kStiffnessRange) == 275.0);
  CHECK(squash(0.0, control::kDampingRange) == static_cast<double>(2.55f));
  CHECK(squash(0.0, control::kDiffusionRange) == doctest::Approx(0.055).epsilon(1e-7));
  for (double big : {40.0, 1e6, std::numeric_limits<double>::infinity()}) {
    const double l1 = squash(big, control::kStiffnessRange);
    const double l2 = squash(big, control::kDampingRange);
    const double e = squash(big, control::kDiffusionRange);
    CHECK(l1 <= 500.0);
    CHECK(l1 == doctest::Approx(500.0).epsilon(1e-7));
    CHECK(l2 <= 5.0);
    CHECK(l2 == doctest::Approx(5.0).epsilon(1e-7));
    CHECK(e <= 0.1);
    CHECK(e == doctest::Approx(0.1).epsilon(1e-7));
    CHECK(squash(-big, control::kDiffusionRange) >= 0.01);
    CHECK(squash(-big, control::kDampingRange) >= 0.1);
  }
  CHECK_THROWS_AS(squash(std::nan(""), control::kStiffnessRange), NumericError);
}

TEST_CASE("decoded compliance stays in range for random logits") {
  std::mt19937_64 rng(11);
  std::cauchy_distribution<double> wild(0.0, 20.0);
  for (int i = 0; i < 20000; ++i) {
    std::array<double, kActionDim> raw{};
    for (double& v : raw) v = wild(rng);
    const Action a = decodeAction(raw);
    CHECK(compliant(a.compliance));
    for (double o : a.orientation) CHECK(std::abs(o) <= kPi);
  }
}

TEST_CASE("seeded bundle round trips through the container") {
  const Architecture arch;
  const WeightBundle b = seededBundle(arch, 42);
  const auto bytes = serializeBundle(b);
  const WeightBundle back = loadWeights(bytes);
  CHECK(back.descriptor == b.descriptor);
  CHECK(back.architecture() == arch);
  REQUIRE(back.tensors.size() == b.tensors.size());
  for (std::size_t i = 0; i < b.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == b.tensors[i].first);
    CHECK(back.tensors[i].second.dims == b.tensors[i].second.dims);
    CHECK(back.tensors[i].second.data == b.tensors[i].second.data);
  }
  CHECK(serializeBundle(back) == bytes);
  CHECK(seededBundle(arch, 42).tensors == b.tensors);
  CHECK_FALSE(seededBundle(arch, 43).tensors == b.tensors);
  const Tensor* g = b.find("enc.0.norm1.weight");
  REQUIRE(g);
  for (float v : g->data) CHECK(v == 1.0f);
  const Tensor* w = b.find("head.weight");
  REQUIRE(w);
  for (float v : w->data) CHECK(std::abs(v) <= 1.0f / 8.0f);
}

TEST_CASE("container errors") {
  const WeightBundle good = seededBundle(Architecture{}, 1);
  const auto bytes = serializeBundle(good);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(loadWeights(bad), FormatError);

  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(loadWeights(bad), FormatError);

  bad = bytes;
  bad[bad.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(loadWeights(bad), CorruptionError);

  bad.assign(bytes.begin(), bytes.end() - 100);
  CHECK_THROWS_AS(loadWeights(bad), CorruptionError);

  WeightBundle trunc = good;
  trunc.find("enc.0.ff1.weight")->data.pop_back();
  CHECK_THROWS_AS(loadWeights(serializeBundle(trunc)), CorruptionError);

  WeightBundle edited = good;
  edited.setDescriptor("d_model", "32");
  CHECK_THROWS_AS(loadWeights(serializeBundle(edited)), ShapeError);

  WeightBundle missing = good;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(loadWeights(serializeBundle(missing)), ShapeError);

  WeightBundle nokey = good;
  nokey.descriptor.erase(nokey.descriptor.begin());
  CHECK_THROWS_AS(loadWeights(serializeBundle(nokey)), FormatError);

  WeightBundle wide = good;
  wide.setDescriptor("action_dim", "23");
  CHECK_THROWS_AS(loadWeights(serializeBundle(wide)), ShapeError);

  WeightBundle extra = good;
  extra.tensors.emplace_back("trainer.encoder.cls", Tensor{{3}, {1.0f, 2.0f, 3.0f}});
  CHECK_NOTHROW(loadWeights(serializeBundle(extra)));

  CHECK_THROWS_AS(loadWeights(std::vector<std::uint8_t>{'C', 'F'}), FormatError);
  CHECK_THROWS_AS(PolicyRuntime{edited}, ShapeError);
}

TEST_CASE("weight files round trip on disk") {
  const WeightBundle b = seededBundle(Architecture{}, 5);
  const std::string path = (std::filesystem::temp_directory_path() / "softtouch_test_policy_weights.cfa").string();
  saveWeightsFile(b, path);
  CHECK(loadWeightsFile(path).tensors == b.tensors);
  CHECK_THROWS_AS(loadWeightsFile("does/not/exist.cfa"), FormatError);
}

TEST_CASE("predictChunk shapes, ranges and determinism") {
  std::mt19937_64 rng(8);
  for (int arms : {1, 2}) {
    Architecture arch;
    arch.arms = arms;
    const PolicyRuntime rt(seededBundle(arch, 42));
    for (int trial = 0; trial < 5; ++trial) {
      const Observation obs = randomObservation(arms, rng);
      const ActionChunk c = rt.predictChunk(obs, 7);
      CHECK(c.horizon() == arch.chunk);
      CHECK(c.arms() == arms);
      CHECK(c.start_tick == 7);
      CHECK(c.period == 0.1);
      const auto raw = rt.rawOutputs(obs);
      CHECK(raw.size() == 10);
      CHECK(raw.front().size() == static_cast<std::size_t>(22 * arms));
      for (const auto& step : c.actions) {
        for (const Action& a : step) {
          CHECK(a.toVector().size() == 22);
          CHECK(compliant(a.compliance));
        }
      }
      const ActionChunk again = rt.predictChunk(obs, 7);
      CHECK(chunkToHex(again) == chunkToHex(c));
    }
  }
}

TEST_CASE("zero weights emit the bias path") {
  Architecture arch;
  WeightBundle b = seededBundle(arch, 1);
  for (auto& [name, t] : b.tensors)
    if (name.find("norm") == std::string::npos) std::fill(t.data.begin(), t.data.end(), 0.0f);
  const PolicyRuntime rt(b);
  const ActionChunk c = rt.predictChunk(goldenObservation(1));
  for (const auto& step : c.actions) {
    const Action& a = step.front();
    CHECK(a.position == std::array<double, 3>{0, 0, 0});
    CHECK(a.compliance.lambda1 == 275.0);
  }
}

TEST_CASE("normalisation statistics apply to pose and joints only") {
  Architecture arch;
  WeightBundle b = seededBundle(arch, 2);
  Tensor mean{{22}, std::vector<float>(22, 0.25f)};
  Tensor stdev{{22}, std::vector<float>(22, 0.0f)};
  b.tensors.emplace_back("action_mean", mean);
  b.tensors.emplace_back("action_std", stdev);
  const PolicyRuntime rt(b);
  const PolicyRuntime plain(seededBundle(arch, 2));
  const Observation obs = goldenObservation(1);
  const auto raw = rt.rawOutputs(obs);
  const auto ref = plain.rawOutputs(obs);
  for (std::size_t s = 0; s < raw.size(); ++s) {
    for (int i = 0; i < 19; ++i) CHECK(raw[s][static_cast<std::size_t>(i)] == 0.25);
    for (int i = 19; i < 22; ++i) CHECK(raw[s][static_cast<std::size_t>(i)] == ref[s][static_cast<std::size_t>(i)]);
  }
  WeightBundle bad = seededBundle(arch, 2);
  bad.tensors.emplace_back("action_mean", Tensor{{21}, std::vector<float>(21, 0.0f)});
  CHECK_THROWS_AS(PolicyRuntime{bad}, ShapeError);
}

TEST_CASE("non-finite activations name the layer") {
  WeightBundle b = seededBundle(Architecture{}, 3);
  b.find("enc.1.ff1.weight")->data[5] = std::numeric_limits<float>::infinity();
  const PolicyRuntime rt(b);
  try {
    rt.predictChunk(goldenObservation(1));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("enc.1") != std::string::npos);
  }
  Observation obs = goldenObservation(1);
  obs.arms[0].force.pressures[3] = std::nan("");
  const PolicyRuntime clean(seededBundle(Architecture{}, 3));
  CHECK_THROWS_AS(clean.predictChunk(obs), NumericError);
}

TEST_CASE("observation shape checks") {
  const PolicyRuntime rt(seededBundle(Architecture{}, 4));
  CHECK_THROWS_AS(rt.predictChunk(goldenObservation(2)), ShapeError);
  Observation obs = goldenObservation(1);
  obs.arms[0].force.pressures = Field(6, 6);
  CHECK_THROWS_AS(rt.predictChunk(obs), ShapeError);
}

TEST_CASE("golden chunk for seed-42 weights") {
  for (int arms : {1, 2}) {
    Architecture arch;
    arch.arms = arms;
    const PolicyRuntime rt(seededBundle(arch, 42));
    const ActionChunk c = rt.predictChunk(goldenObservation(arms));
    const std::string path =
        std::string(SOFTTOUCH_SOURCE_DIR) + "/tests/golden/policy_seed42_arms" + std::to_string(arms) + ".txt";
    const std::string expected = readFile(path);
    CHECK(chunkToHex(c) == expected);
    const ActionChunk parsed = chunkFromHex(expected);
    CHECK(chunkToHex(parsed) == expected);
  }
  CHECK_THROWS_AS(chunkFromHex("0 0 zz\n"), FormatError);
}

TEST_CASE("rodrigues analytic cases") {
  const Matrix3 id = rodrigues({0, 0, 0});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(id[i][j] == (i == j ? 1.0 : 0.0));
  const Matrix3 rz = rodrigues({0, 0, kPi / 2});
  const double expect[3][3] = {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(std::abs(rz[i][j] - expect[i][j]) < 1e-15);
}

TEST_CASE("rodrigues orthonormality and round trip") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  for (int n = 0; n < 5000; ++n) {
    std::array<double, 3> w{u(rng), u(rng), u(rng)};
    const Matrix3 r = rodrigues(w);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += r[i][k] * r[j][k];
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
      }
    }
    const double det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) -
                       r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) +
                       r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    CHECK(std::abs(det - 1.0) < 1e-12);

    const double norm = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    const double target = std::fmod(norm, kPi - 1e-3);
    for (double& c : w) c *= norm > 0 ? target / norm : 0.0;
    const auto back = axisAngle(rodrigues(w));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(back[i] - w[i]) < 1e-9);
  }
  for (double t : {1e-9, 1e-5, kPi - 1e-3, kPi - 0.2}) {
    const std::array<double, 3> w{t * 0.6, -t * 0.8, 0.0};
    const auto back = axisAngle(rodrigues(w));
    for (int i = 0; i < 3; ++i) CHECK(std::abs(back[i] - w[i]) < 1e-9);
  }
}

TEST_CASE("ensembleStep contracts") {
  const ActionChunk a = constantChunk(0, 10, 1.0);
  const MultiAction single = ensembleStep({a}, 3);
  CHECK(single == a.actions[3]);

  const ActionChunk twin = constantChunk(0, 10, 1.0);
  CHECK(ensembleStep({a, twin}, 4) == a.actions[4]);

  // Later chunk started two ticks after the first.
  const ActionChunk b = constantChunk(2, 10, 5.0);
  const MultiAction mean = ensembleStep({b, a}, 4, 0.0);
  const auto va = a.actions[4][0].toVector();
  const auto vb = b.actions[2][0].toVector();
  const auto vm = mean[0].toVector();
  for (int i = 0; i < kActionDim; ++i) CHECK(std::abs(vm[i] - 0.5 * (va[i] + vb[i])) < 1e-12);

  const ActionChunk c = constantChunk(3, 10, 9.0);
  const MultiAction w = ensembleStep({c, b, a}, 5, 0.1);
  const double w0 = 1.0, w1 = std::exp(-0.1), w2 = std::exp(-0.2);
  const auto x0 = a.actions[5][0].toVector();
  const auto x1 = b.actions[3][0].toVector();
  const auto x2 = c.actions[2][0].toVector();
  const auto vw = w[0].toVector();
  for (int i = 0; i < kActionDim; ++i) {
    const double oracle = (w0 * x0[i] + w1 * x1[i] + w2 * x2[i]) / (w0 + w1 + w2);
    CHECK(std::abs(vw[i] - oracle) < 1e-12 * std::max(1.0, std::abs(oracle)));
  }

  CHECK_THROWS_AS(ensembleStep({a}, 10), SchedulingError);
  CHECK_THROWS_AS(ensembleStep({}, 0), SchedulingError);
  CHECK_THROWS_AS(ensembleStep({a, constantChunk(0, 10, 1.0, 2)}, 1), ShapeError);

  ActionChunk wild = constantChunk(0, 2, 0.0);
  wild.actions[0][0].compliance = {900.0, -1.0, 0.5};
  const MultiAction clamped = ensembleStep({wild}, 0);
  CHECK(clamped[0].compliance.lambda1 == 500.0);
  CHECK(clamped[0].compliance.lambda2 == 0.1);
  CHECK(clamped[0].compliance.eps == 0.1);
}

TEST_CASE("scheduler emits one action per 0.1 s without gaps") {
  for (bool ensemble : {true, false}) {
    ChunkScheduler s(0.1, ensemble);
    const PolicyRuntime rt(seededBundle(Architecture{}, 42));
    std::mt19937_64 rng(2);
    std::vector<double> times;
    for (int k = 0; k < 60; ++k) {
      // New chunk every third tick, as if inference took 0.3 s.
      if (k % 3 == 0) s.addChunk(rt.predictChunk(randomObservation(1, rng), s.tick()));
      times.push_back(s.time());
      const MultiAction a = s.next();
      CHECK(a.size() == 1);
      CHECK(compliant(a[0].compliance));
      CHECK(s.liveChunks() <= 4);
    }
    for (std::size_t i = 0; i < times.size(); ++i) CHECK(times[i] == static_cast<double>(i) * 0.1);
  }
}

TEST_CASE("scheduler without ensembling follows the newest chunk") {
  ChunkScheduler s(0.1, false);
  s.addChunk(constantChunk(0, 10, 1.0));
  s.addChunk(constantChunk(1, 10, 5.0));
  CHECK(s.next() == constantChunk(0, 10, 1.0).actions[0]);
  CHECK(s.next() == constantChunk(1, 10, 5.0).actions[0]);
}

TEST_CASE("scheduler reports gaps") {
  ChunkScheduler s;
  s.addChunk(constantChunk(0, 2, 1.0));
  s.next();
  s.next();
  CHECK(s.liveChunks() == 0);
  CHECK_THROWS_AS(s.next(), SchedulingError);
  ActionChunk odd = constantChunk(2, 2, 1.0);
  odd.period = 0.05;
  CHECK_THROWS_AS(s.addChunk(odd), SchedulingError);
  CHECK_THROWS_AS(ChunkScheduler(-1.0), ConfigError);
}
