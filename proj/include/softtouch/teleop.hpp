#pragma once

// Teleoperation: a session wraps one task rig, turns scaled relative hand
// motion into arm commands, raises safety cues and records demonstrations.
// The server exposes a session over a WebSocket with JSON envelopes
// {type, seq, payload} and binary "CFSF" frames for the field arrays.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "softtouch/config.hpp"
#include "softtouch/dataset.hpp"
#include "softtouch/tactile.hpp"
#include "softtouch/tasks.hpp"

namespace softtouch::teleop {

inline constexpr double kHoverHeight = 0.005;  // m above the surface at the reference pose

struct PoseDelta {
  std::array<double, 3> position{0.0, 0.0, 0.0};  // m, hand frame; +z presses into the surface
  std::array<double, 3> rotation{0.0, 0.0, 0.0};  // axis-angle, rad
};

struct CueFlags {
  bool force = false;        // measured or predicted force above the cue threshold
  bool deformation = false;  // max deformation above the cue threshold
  bool workspace = false;    // lateral command clipped at the workspace edge
  bool operator==(const CueFlags&) const = default;
};

struct ArmState {
  std::array<double, 6> pose{};
  tactile::ForceField force;
  tactile::DeformationField deformation;
  tactile::FieldFeatures features;
  control::PresetLevel preset = control::PresetLevel::Mid;
  CueFlags cues;
  double f_meas = 0.0;    // N
  double f_target = 0.0;  // N
  double predicted = 0.0; // N, steady force of the commanded depth before clamping
};

struct StatePacket {
  std::uint64_t sequence = 0;
  double timestamp = 0.0;  // s of session time
  dataset::Phase phase = dataset::Phase::Approach;
  std::vector<ArmState> arms;
};

struct CommandAck {
  std::uint64_t seq = 0;
  bool accepted = false;
  std::string notice;  // why a command was dropped or altered
};

struct RecordingInfo {
  std::string path;
  int frames = 0;
  bool finalized = false;
};

/// Single-threaded and deterministic: commands queue up, cycle() applies the
/// freshest one per arm and advances the simulation by one control cycle.
class TeleopSession {
 public:
  TeleopSession(config::TeleopSettings settings, tasks::TaskSpec spec, std::uint64_t seed);
  ~TeleopSession();
  TeleopSession(const TeleopSession&) = delete;
  TeleopSession& operator=(const TeleopSession&) = delete;

  const std::string& id() const { return settings_.session; }
  const config::TeleopSettings& settings() const { return settings_; }
  const tasks::TaskSpec& spec() const { return spec_; }

  /// Relative hand motion since the reference pose. Sequence numbers are
  /// shared by every command and must increase; older ones are dropped.
  CommandAck commandPose(int arm, const PoseDelta& relative, std::uint64_t seq);
  CommandAck setPreset(int arm, control::PresetLevel level, std::uint64_t seq);
  /// Makes the current commanded pose the new reference: the hand's
  /// relative motion counts from here and the arm does not move.
  CommandAck rezero(std::uint64_t seq);

  /// Frames are captured at the 0.1 s action boundaries while recording;
  /// commands then take effect on those boundaries so the episode replays
  /// exactly. SessionError if already recording.
  void startRecording();
  /// Finalises the episode file. A second call returns the same episode.
  /// SessionError if nothing was ever recorded.
  RecordingInfo stopRecording();
  bool recording() const { return writer_ != nullptr; }

  /// One control cycle.
  void cycle();
  StatePacket state() const;
  double time() const;
  std::uint64_t lastSeq() const { return last_seq_; }
  /// Commands applied so far (each pending command counts once).
  std::uint64_t applied() const { return applied_; }
  const tasks::TaskRig& rig() const { return *rig_; }

  void close();
  bool live() const { return live_; }

 private:
  struct Pending {
    std::optional<PoseDelta> pose;
    std::optional<control::PresetLevel> preset;
  };

  void requireLive(const char* what) const;
  CommandAck stale(std::uint64_t seq) const;
  void latch();
  void resetRig();

  config::TeleopSettings settings_;
  tasks::TaskSpec spec_;
  std::uint64_t seed_;
  int trial_ = 0;
  std::unique_ptr<tasks::TaskRig> rig_;
  std::vector<std::array<double, 3>> reference_;  // commanded position at the last re-zero
  std::vector<std::array<double, 3>> commanded_;
  std::vector<std::array<double, 3>> orientation_;
  std::vector<control::PresetLevel> presets_;
  std::vector<CueFlags> cues_;
  std::vector<double> predicted_;
  std::vector<double> targets_;
  std::vector<Pending> pending_;
  policy::MultiAction action_;
  std::uint64_t last_seq_ = 0;
  bool any_seq_ = false;
  std::uint64_t applied_ = 0;
  std::uint64_t cycles_ = 0;
  bool live_ = true;
  std::unique_ptr<dataset::EpisodeWriter> writer_;
  RecordingInfo last_recording_;
  int recordings_ = 0;
  double time_offset_ = 0.0;  // session time at the current rig's start
};

// Message codec ------------------------------------------------------------

struct Envelope {
  std::string type;
  std::uint64_t seq = 0;
  std::string payload;  // JSON text of the payload object
};

/// FormatError on malformed JSON or a missing type.
Envelope parseEnvelope(const std::string& text);
std::string makeEnvelope(const std::string& type, std::uint64_t seq, const std::string& payload_json);

std::string encodeHello(const TeleopSession& s);
std::string encodeState(const StatePacket& p);
std::string encodeAck(const CommandAck& a);
std::string encodeError(std::uint64_t seq, const std::string& message);
std::string encodeCue(std::uint64_t seq, int arm, const std::string& kind, bool active);

/// Binary field frame: "CFSF", u32 version 1, u64 packet sequence, f64
/// timestamp, u32 arms, u32 width, u32 height, then per arm the force field
/// (kPa) and the deformation field (mm) as row-major float32, little-endian.
std::vector<std::uint8_t> encodeFieldFrame(const StatePacket& p);

struct FieldFrame {
  std::uint64_t sequence = 0;
  double timestamp = 0.0;
  std::vector<Field> force;
  std::vector<Field> deformation;
};
/// FormatError on a bad magic, version or length.
FieldFrame decodeFieldFrame(const std::vector<std::uint8_t>& bytes);

/// Dispatches one client message against a session and returns the reply
/// envelope. Unknown types and bad payloads come back as error envelopes.
std::string handleMessage(TeleopSession& s, const Envelope& e);

// Server -------------------------------------------------------------------

/// WebSocket front end. One control thread paces session.cycle() to wall
/// time; one I/O thread accepts clients, routes their messages and streams
/// state at the configured rate.
class TeleopServer {
 public:
  TeleopServer(config::TeleopSettings settings, tasks::TaskSpec spec, std::uint64_t seed);
  ~TeleopServer();
  TeleopServer(const TeleopServer&) = delete;
  TeleopServer& operator=(const TeleopServer&) = delete;

  /// Binds (port 0 picks a free one) and starts both threads; returns the port.
  int start();
  void stop();
  int port() const;
  std::uint64_t packetsSent() const;
  /// Longest wall time from receiving a command to its first control cycle, s.
  double worstApplyLatency() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace softtouch::teleop
