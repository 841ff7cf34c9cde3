#pragma once

// Inference side of the action-chunking policy. Observations are tokenised
// per arm as one pose token, one token per force-field column and one per
// deformation-field row, preceded by a single latent token. A post-norm
// transformer encoder digests the tokens, a decoder cross-attends from n
// learned queries, and a linear head emits 22 values per arm per step.
// The latent is fixed to its prior mean (zero) at inference.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "softtouch/controller.hpp"
#include "softtouch/tactile.hpp"

namespace softtouch::policy {

inline constexpr int kActionDim = 22;
inline constexpr int kJointCount = 13;
inline constexpr double kChunkPeriod = 0.1;  // s
inline constexpr std::uint32_t kBundleVersion = 1;

struct Action {
  std::array<double, 3> position{};      // m
  std::array<double, 3> orientation{};   // axis-angle, each component in [-pi, pi]
  std::array<double, kJointCount> hand_joints{};  // rad
  control::ComplianceParams compliance;

  std::array<double, kActionDim> toVector() const;
  static Action fromVector(std::span<const double> v);
  bool operator==(const Action&) const = default;
};

/// One action per arm for a single time step.
using MultiAction = std::vector<Action>;

struct ActionChunk {
  std::vector<MultiAction> actions;  // [step][arm]
  long start_tick = 0;               // in units of kChunkPeriod
  double period = kChunkPeriod;

  int horizon() const { return static_cast<int>(actions.size()); }
  int arms() const { return actions.empty() ? 0 : static_cast<int>(actions.front().size()); }
  double startTime() const { return static_cast<double>(start_tick) * period; }
};

struct ArmObservation {
  std::array<double, 6> pose{};  // position (m), axis-angle (rad)
  tactile::ForceField force;
  tactile::DeformationField deformation;
};

struct Observation {
  std::vector<ArmObservation> arms;
  double timestamp = 0.0;
  std::vector<Field> views;  // optional downsampled renders; unused by the default descriptor
};

struct Architecture {
  int d_model = 64;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int chunk = 10;
  int arms = 1;
  int ff = 256;
  int latent_dim = 32;

  int tokensPerArm() const { return 1 + kSensorWidth + kSensorHeight; }
  int tokens() const { return 1 + arms * tokensPerArm(); }
  int actionWidth() const { return kActionDim * arms; }
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;

  std::size_t count() const;
  bool operator==(const Tensor&) const = default;
};

struct WeightBundle {
  std::uint32_t version = kBundleVersion;
  std::vector<std::pair<std::string, std::string>> descriptor;  // file order
  std::vector<std::pair<std::string, Tensor>> tensors;           // file order

  std::optional<std::string> descriptorValue(const std::string& key) const;
  void setDescriptor(const std::string& key, const std::string& value);
  const Tensor* find(const std::string& name) const;
  Tensor* find(const std::string& name);
  /// Architecture encoded in the descriptor; FormatError on missing or bad keys.
  Architecture architecture() const;
};

/// Descriptor for `arch` in canonical key order.
std::vector<std::pair<std::string, std::string>> describe(const Architecture& arch);

/// Every tensor the runtime reads, with its shape, in canonical order.
std::vector<std::pair<std::string, std::vector<std::uint32_t>>> requiredTensors(const Architecture& arch);

/// Deterministic initialiser: uniform(-s, s) with s = 1/sqrt(last dim) from a
/// 64-bit Mersenne twister, LayerNorm gains 1 and offsets 0.
WeightBundle seededBundle(const Architecture& arch, std::uint64_t seed);

/// Serialises without validation, so malformed bundles can be produced on
/// purpose. Tensor data are laid out back to back in table order.
std::vector<std::uint8_t> serializeBundle(const WeightBundle& bundle);

/// Parses and validates. FormatError on bad magic, version or layout;
/// CorruptionError on checksum mismatch or truncation; ShapeError when a
/// required tensor is missing or mis-shaped for the descriptor.
WeightBundle loadWeights(std::span<const std::uint8_t> bytes);
WeightBundle loadWeightsFile(const std::string& path);
void saveWeightsFile(const WeightBundle& bundle, const std::string& path);

/// Validated bundle ready for inference. Immutable and shareable.
class PolicyRuntime {
 public:
  explicit PolicyRuntime(WeightBundle bundle);

  /// Deterministic forward pass. NumericError names the first layer that
  /// produced a non-finite activation.
  ActionChunk predictChunk(const Observation& obs, long start_tick = 0) const;
  /// Raw head outputs before squashing, [step][value].
  std::vector<std::vector<double>> rawOutputs(const Observation& obs) const;

  const Architecture& architecture() const { return arch_; }
  const WeightBundle& bundle() const { return bundle_; }

 private:
  const Tensor& tensor(const std::string& name) const;

  WeightBundle bundle_;
  Architecture arch_;
  std::map<std::string, const Tensor*> index_;
};

/// Maps a raw logit into [lo, hi] through a sigmoid; the float-rounded result
/// never leaves the range.
double squash(double logit, const control::Range& range);

/// Converts a raw per-arm output row (22 values) into an Action: orientation
/// wrapped to [-pi, pi], compliance squashed into the hard ranges, every
/// value rounded to float32.
Action decodeAction(std::span<const double> raw);

/// Deterministic observation used for golden fixtures.
Observation goldenObservation(int arms);

/// Golden fixture text: one line per step and arm, 22 float32 bit patterns
/// in hex. Every action value is float-representable, so this is lossless.
std::string chunkToHex(const ActionChunk& chunk);
/// Inverse of chunkToHex; FormatError on malformed text.
ActionChunk chunkFromHex(const std::string& text);

using Matrix3 = std::array<std::array<double, 3>, 3>;

/// Rotation matrix of an axis-angle vector; zero gives the identity.
Matrix3 rodrigues(const std::array<double, 3>& axis_angle);
/// Inverse of rodrigues for rotation angles in [0, pi).
std::array<double, 3> axisAngle(const Matrix3& r);

/// Weighted combination of the actions that every covering chunk assigns to
/// `tick`, weights exp(-m k) with k = 0 for the oldest chunk. Compliance is
/// clamped back into range. SchedulingError when nothing covers the tick.
MultiAction ensembleStep(const std::vector<ActionChunk>& history, long tick, double m = 0.1);

/// Emits one MultiAction per 0.1 s tick from the chunks it has been given.
class ChunkScheduler {
 public:
  explicit ChunkScheduler(double decay = 0.1, bool ensemble = true);

  /// Chunks must start at or after the current tick minus their horizon.
  void addChunk(ActionChunk chunk);
  /// Action for the current tick; advances the tick.
  MultiAction next();

  long tick() const { return tick_; }
  double time() const { return static_cast<double>(tick_) * kChunkPeriod; }
  std::size_t liveChunks() const { return history_.size(); }
  bool ensembling() const { return ensemble_; }

 private:
  double decay_;
  bool ensemble_;
  long tick_ = 0;
  std::vector<ActionChunk> history_;
};

}  // namespace softtouch::policy
