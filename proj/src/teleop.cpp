#include "softtouch/teleop.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "softtouch/errors.hpp"

namespace softtouch::teleop {

using control::PresetLevel;
using nlohmann::json;

namespace {

constexpr double kOpenEnded = 1e9;  // s; teleoperated trials end when the operator releases

double f32(double v) { return static_cast<float>(v); }

// Steady force per metre of uniform depth for the arm's current patch,
// according to the controller's model.
double patchStiffness(const control::ContactLoop& loop) {
  const double h = loop.state().h;
  return loop.model().k_e * control::templateShapeSum(loop.shape(), loop.patch()) * h * h;
}

std::array<double, 3> vec3(const json& j, const char* key) {
  if (!j.contains(key)) return {0.0, 0.0, 0.0};
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 3) throw FormatError(std::string("'") + key + "' must be an array of 3 numbers");
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!v[i].is_number()) throw FormatError(std::string("'") + key + "' must be an array of 3 numbers");
    out[i] = v[i].get<double>();
    if (!std::isfinite(out[i])) throw NumericError(std::string("'") + key + "' is not finite");
  }
  return out;
}

int armOf(const json& p) {
  if (!p.contains("arm")) return 0;
  if (!p.at("arm").is_number_integer()) throw FormatError("'arm' must be an integer");
  return p.at("arm").get<int>();
}

template <typename T>
void putLE(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <typename T>
T getLE(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("field frame: truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

// Session ----------------------------------------------------------------------

TeleopSession::TeleopSession(config::TeleopSettings settings, tasks::TaskSpec spec, std::uint64_t seed)
    : settings_(std::move(settings)), spec_(std::move(spec)), seed_(seed) {
  settings_.validate();
  spec_.time_limit = kOpenEnded;
  spec_.validate();
  resetRig();
}

TeleopSession::~TeleopSession() {
  try {
    if (writer_) writer_->finalize();
  } catch (...) {
  }
}

void TeleopSession::resetRig() {
  if (rig_) time_offset_ += rig_->time();
  const std::uint64_t trial_seed = tasks::trialSeed(seed_, trial_++);
  rig_ = std::make_unique<tasks::TaskRig>(spec_, tasks::sampleTrial(spec_, trial_seed));
  const auto n = static_cast<std::size_t>(spec_.arms);
  reference_.assign(n, {0.0, 0.0, -kHoverHeight});
  commanded_ = reference_;
  orientation_.assign(n, {0.0, 0.0, 0.0});
  presets_.clear();
  for (std::size_t a = 0; a < n; ++a) presets_.push_back(spec_.schedule[a][0]);
  cues_.assign(n, CueFlags{});
  predicted_.assign(n, 0.0);
  targets_.assign(n, 0.0);
  pending_.assign(n, Pending{});
  latch();
}

void TeleopSession::requireLive(const char* what) const {
  if (!live_) throw SessionError(std::string(what) + ": no live session");
}

CommandAck TeleopSession::stale(std::uint64_t seq) const {
  return {seq, false, "stale seq " + std::to_string(seq) + " (last " + std::to_string(last_seq_) + "), dropped"};
}

CommandAck TeleopSession::commandPose(int arm, const PoseDelta& relative, std::uint64_t seq) {
  requireLive("command_pose");
  if (arm < 0 || arm >= spec_.arms) throw ShapeError("command_pose: no arm " + std::to_string(arm));
  for (double v : relative.position)
    if (!std::isfinite(v)) throw NumericError("command_pose: non-finite position");
  for (double v : relative.rotation)
    if (!std::isfinite(v)) throw NumericError("command_pose: non-finite rotation");
  if (any_seq_ && seq <= last_seq_) return stale(seq);
  last_seq_ = seq;
  any_seq_ = true;
  pending_[static_cast<std::size_t>(arm)].pose = relative;
  return {seq, true, ""};
}

CommandAck TeleopSession::setPreset(int arm, PresetLevel level, std::uint64_t seq) {
  requireLive("set_preset");
  if (arm < 0 || arm >= spec_.arms) throw ShapeError("set_preset: no arm " + std::to_string(arm));
  if (any_seq_ && seq <= last_seq_) return stale(seq);
  last_seq_ = seq;
  any_seq_ = true;
  pending_[static_cast<std::size_t>(arm)].preset = level;
  return {seq, true, ""};
}

CommandAck TeleopSession::rezero(std::uint64_t seq) {
  requireLive("rezero");
  if (any_seq_ && seq <= last_seq_) return stale(seq);
  last_seq_ = seq;
  any_seq_ = true;
  // Pending motion is measured against the old reference, so it is dropped.
  for (Pending& p : pending_) p.pose.reset();
  reference_ = commanded_;
  return {seq, true, "reference reset to the current pose"};
}

void TeleopSession::latch() {
  for (int a = 0; a < spec_.arms; ++a) {
    const auto ai = static_cast<std::size_t>(a);
    Pending& p = pending_[ai];
    if (p.preset) {
      presets_[ai] = *p.preset;
      ++applied_;
    }
    if (p.pose) {
      CueFlags cues;
      std::array<double, 3> c{};
      for (std::size_t i = 0; i < 3; ++i) c[i] = reference_[ai][i] + settings_.motion_scale * p.pose->position[i];
      for (std::size_t i = 0; i < 2; ++i) {
        const double clipped = std::clamp(c[i], -settings_.workspace, settings_.workspace);
        cues.workspace = cues.workspace || clipped != c[i];
        c[i] = clipped;
      }
      const double k = patchStiffness(rig_->loop(a));
      predicted_[ai] = c[2] > 0.0 ? k * c[2] : 0.0;
      if (predicted_[ai] > settings_.cue_force && k > 0.0) c[2] = settings_.cue_force / k;
      commanded_[ai] = c;
      orientation_[ai] = p.pose->rotation;
      cues_[ai].workspace = cues.workspace;
      ++applied_;
    }
    p = Pending{};
    const double z = commanded_[ai][2];
    targets_[ai] = z >= 0.0 ? f32(std::min(patchStiffness(rig_->loop(a)) * z, settings_.cue_force)) : 0.0;
  }
  policy::MultiAction action(static_cast<std::size_t>(spec_.arms));
  for (std::size_t a = 0; a < action.size(); ++a) {
    action[a].position = commanded_[a];
    action[a].orientation = orientation_[a];
    action[a].compliance = spec_.presets[presets_[a]];
    rig_->setForceTarget(static_cast<int>(a), targets_[a]);
  }
  action_ = tasks::quantizeAction(action);
  rig_->setAction(action_);
}

void TeleopSession::startRecording() {
  requireLive("record_start");
  if (writer_) throw SessionError("record_start: already recording");
  // A demonstration starts from a fresh trial so it can be replayed.
  resetRig();
  std::filesystem::create_directories(settings_.record_dir);
  dataset::EpisodeHeader h;
  h.task = tasks::taskName(spec_.id);
  h.arms = spec_.arms;
  h.material_hash = dataset::materialHash(spec_.material);
  h.seed = rig_->setup().seed;
  h.meta = {{"source", "teleop"}, {"session", settings_.session}};
  ++recordings_;
  const std::string path =
      (std::filesystem::path(settings_.record_dir) / (settings_.session + "-" + std::to_string(recordings_) + ".cfep"))
          .string();
  writer_ = std::make_unique<dataset::EpisodeWriter>(path, h);
  last_recording_ = {path, 0, false};
}

RecordingInfo TeleopSession::stopRecording() {
  if (writer_) {
    writer_->finalize();
    last_recording_ = {writer_->path(), writer_->frames(), true};
    writer_.reset();
    return last_recording_;
  }
  if (recordings_ == 0) throw SessionError("record_stop: nothing is being recorded");
  return last_recording_;
}

void TeleopSession::cycle() {
  requireLive("cycle");
  if (rig_->finished()) {
    if (writer_) stopRecording();
    resetRig();
  }
  const bool boundary = rig_->cycles() % rig_->cyclesPerStep() == 0;
  bool waiting = false;
  for (const Pending& p : pending_) waiting = waiting || p.pose || p.preset;
  if (writer_) {
    if (boundary) {
      // The frame is the state the action was chosen from, plus what was
      // executed: action, preset and force target.
      dataset::Frame f = rig_->snapshot();
      latch();
      for (std::size_t a = 0; a < f.arms.size(); ++a) {
        f.arms[a].action = action_[a];
        f.arms[a].preset = presets_[a];
        f.arms[a].f_des = targets_[a];
      }
      writer_->append(f);
    }
  } else if (waiting) {
    latch();
  }
  rig_->cycle();
  ++cycles_;
}

double TeleopSession::time() const { return time_offset_ + rig_->time(); }

StatePacket TeleopSession::state() const {
  StatePacket p;
  p.sequence = cycles_;
  p.timestamp = time();
  p.phase = rig_->phase();
  const policy::Observation obs = rig_->observe();
  for (int a = 0; a < spec_.arms; ++a) {
    const auto ai = static_cast<std::size_t>(a);
    ArmState s;
    s.pose = obs.arms[ai].pose;
    s.force = obs.arms[ai].force;
    s.deformation = obs.arms[ai].deformation;
    s.features = tactile::features(s.force, s.deformation);
    s.preset = presets_[ai];
    s.f_meas = rig_->measuredForce(a);
    s.f_target = targets_[ai];
    s.predicted = predicted_[ai];
    s.cues.workspace = cues_[ai].workspace;
    s.cues.force = s.f_meas > settings_.cue_force || s.predicted > settings_.cue_force;
    s.cues.deformation = s.features.max_deformation > settings_.cue_deformation;
    p.arms.push_back(std::move(s));
  }
  return p;
}

void TeleopSession::close() {
  if (!live_) return;
  if (writer_) stopRecording();
  live_ = false;
}

// Codec --------------------------------------------------------------------------

Envelope parseEnvelope(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("message is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("type") || !j.at("type").is_string()) {
    throw FormatError("message needs a string 'type'");
  }
  Envelope e;
  e.type = j.at("type").get<std::string>();
  if (j.contains("seq")) {
    if (!j.at("seq").is_number_unsigned()) throw FormatError("'seq' must be a non-negative integer");
    e.seq = j.at("seq").get<std::uint64_t>();
  }
  const json payload = j.contains("payload") ? j.at("payload") : json::object();
  if (!payload.is_object()) throw FormatError("'payload' must be an object");
  e.payload = payload.dump();
  return e;
}

std::string makeEnvelope(const std::string& type, std::uint64_t seq, const std::string& payload_json) {
  json j;
  j["type"] = type;
  j["seq"] = seq;
  j["payload"] = json::parse(payload_json);
  return j.dump();
}

std::string encodeHello(const TeleopSession& s) {
  const config::TeleopSettings& t = s.settings();
  json p;
  p["session"] = s.id();
  p["task"] = tasks::taskName(s.spec().id);
  p["arms"] = s.spec().arms;
  p["grid"] = json::array({kSensorWidth, kSensorHeight});
  p["stream_hz"] = t.stream_hz;
  p["motion_scale"] = t.motion_scale;
  p["cue_force"] = t.cue_force;
  p["cue_deformation"] = t.cue_deformation;
  p["workspace"] = t.workspace;
  json presets = json::object();
  for (PresetLevel l : {PresetLevel::Low, PresetLevel::Mid, PresetLevel::High}) {
    const control::ComplianceParams& c = s.spec().presets[l];
    presets[control::presetName(l)] = json::array({c.lambda1, c.lambda2, c.eps});
  }
  p["presets"] = presets;
  return makeEnvelope("hello", 0, p.dump());
}

std::string encodeState(const StatePacket& packet) {
  json p;
  p["timestamp"] = packet.timestamp;
  p["phase"] = dataset::phaseName(packet.phase);
  json arms = json::array();
  for (const ArmState& a : packet.arms) {
    json j;
    j["pose"] = json::array({a.pose[0], a.pose[1], a.pose[2], a.pose[3], a.pose[4], a.pose[5]});
    j["features"] = {{"max_force", a.features.max_force},
                     {"max_deformation", a.features.max_deformation},
                     {"centroid", json::array({a.features.force_centroid[0], a.features.force_centroid[1]})},
                     {"asymmetry", a.features.asymmetry}};
    j["preset"] = control::presetName(a.preset);
    j["cues"] = {{"force", a.cues.force}, {"deformation", a.cues.deformation}, {"workspace", a.cues.workspace}};
    j["f_meas"] = a.f_meas;
    j["f_target"] = a.f_target;
    j["predicted"] = a.predicted;
    arms.push_back(j);
  }
  p["arms"] = arms;
  return makeEnvelope("state", packet.sequence, p.dump());
}

std::string encodeAck(const CommandAck& a) {
  json p;
  p["accepted"] = a.accepted;
  p["notice"] = a.notice;
  return makeEnvelope("ack", a.seq, p.dump());
}

std::string encodeError(std::uint64_t seq, const std::string& message) {
  json p;
  p["message"] = message;
  return makeEnvelope("error", seq, p.dump());
}

std::string encodeCue(std::uint64_t seq, int arm, const std::string& kind, bool active) {
  json p;
  p["arm"] = arm;
  p["kind"] = kind;
  p["active"] = active;
  return makeEnvelope("cue", seq, p.dump());
}

std::vector<std::uint8_t> encodeFieldFrame(const StatePacket& p) {
  std::vector<std::uint8_t> out = {'C', 'F', 'S', 'F'};
  putLE<std::uint32_t>(out, 1);
  putLE<std::uint64_t>(out, p.sequence);
  putLE<double>(out, p.timestamp);
  putLE<std::uint32_t>(out, static_cast<std::uint32_t>(p.arms.size()));
  const int w = p.arms.empty() ? kSensorWidth : p.arms[0].force.pressures.width();
  const int h = p.arms.empty() ? kSensorHeight : p.arms[0].force.pressures.height();
  putLE<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  putLE<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  for (const ArmState& a : p.arms) {
    requireSameShape(a.force.pressures, a.deformation.displacements, "field frame");
    if (a.force.pressures.width() != w || a.force.pressures.height() != h) throw ShapeError("field frame: ragged arms");
    for (double v : a.force.pressures.values()) putLE<float>(out, static_cast<float>(v));
    for (double v : a.deformation.displacements.values()) putLE<float>(out, static_cast<float>(v));
  }
  return out;
}

FieldFrame decodeFieldFrame(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CFSF", 4) != 0) throw FormatError("field frame: bad magic");
  std::size_t pos = 4;
  if (getLE<std::uint32_t>(bytes, pos) != 1) throw FormatError("field frame: unsupported version");
  FieldFrame f;
  f.sequence = getLE<std::uint64_t>(bytes, pos);
  f.timestamp = getLE<double>(bytes, pos);
  const auto arms = getLE<std::uint32_t>(bytes, pos);
  const auto w = static_cast<int>(getLE<std::uint32_t>(bytes, pos));
  const auto h = static_cast<int>(getLE<std::uint32_t>(bytes, pos));
  const std::size_t need = static_cast<std::size_t>(arms) * 2 * static_cast<std::size_t>(w) * h * sizeof(float);
  if (bytes.size() - pos != need) throw FormatError("field frame: length does not match its header");
  for (std::uint32_t a = 0; a < arms; ++a) {
    Field force(w, h);
    Field deform(w, h);
    for (int i = 0; i < force.size(); ++i) force[i] = getLE<float>(bytes, pos);
    for (int i = 0; i < deform.size(); ++i) deform[i] = getLE<float>(bytes, pos);
    f.force.push_back(std::move(force));
    f.deformation.push_back(std::move(deform));
  }
  return f;
}

std::string handleMessage(TeleopSession& s, const Envelope& e) {
  try {
    const json p = json::parse(e.payload);
    if (e.type == "hello") return encodeHello(s);
    if (e.type == "command_pose") {
      PoseDelta d;
      d.position = vec3(p, "position");
      d.rotation = vec3(p, "rotation");
      return encodeAck(s.commandPose(armOf(p), d, e.seq));
    }
    if (e.type == "set_preset") {
      if (!p.contains("preset") || !p.at("preset").is_string()) throw FormatError("set_preset needs 'preset'");
      return encodeAck(s.setPreset(armOf(p), control::parsePreset(p.at("preset").get<std::string>()), e.seq));
    }
    if (e.type == "rezero") return encodeAck(s.rezero(e.seq));
    if (e.type == "record_start") {
      s.startRecording();
      return makeEnvelope("recording", e.seq, json{{"active", true}}.dump());
    }
    if (e.type == "record_stop") {
      const RecordingInfo r = s.stopRecording();
      return makeEnvelope("recording", e.seq, json{{"active", false}, {"path", r.path}, {"frames", r.frames}}.dump());
    }
    return encodeError(e.seq, "unknown message type '" + e.type + "'");
  } catch (const Error& err) {
    return encodeError(e.seq, err.what());
  } catch (const json::exception& err) {
    return encodeError(e.seq, std::string("bad payload: ") + err.what());
  }
}

}  // namespace softtouch::teleop
