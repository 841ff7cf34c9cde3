#include <doctest.h>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <json.hpp>

#include <cmath>
#include <filesystem>

#include "softtouch/controller.hpp"
#include "softtouch/errors.hpp"
#include "softtouch/teleop.hpp"

using namespace softtouch;
using namespace softtouch::teleop;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("softtouch_teleop_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

config::TeleopSettings settingsIn(const std::filesystem::path& dir) {
  config::TeleopSettings s;
  s.record_dir = dir.string();
  s.session = "bench";
  return s;
}

double patchStiffness(const TeleopSession& s, int arm) {
  const auto& loop = s.rig().loop(arm);
  const double h = loop.state().h;
  return loop.model().k_e * control::templateShapeSum(loop.shape(), loop.patch()) * h * h;
}

PoseDelta move(double x, double y, double z) {
  PoseDelta d;
  d.position = {x, y, z};
  return d;
}

}  // namespace

TEST_CASE("hand motion is scaled about the reference pose") {
  TeleopSession s(settingsIn(scratch("scale")), tasks::TaskSpec::defaults(tasks::TaskId::PressHold), 3);
  const double x0 = s.rig().observe().arms[0].pose[0];
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == x0);  // no motion, no change
  REQUIRE(s.commandPose(0, move(0.01, 0.0, 0.0), 1).accepted);
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == doctest::Approx(x0 + 0.015).epsilon(1e-6));
  CHECK(s.applied() == 1);

  REQUIRE(s.commandPose(0, move(0.0, 0.0, 0.0), 2).accepted);
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == doctest::Approx(x0).epsilon(1e-6));

  // After a re-zero the same hand position holds the arm where it is.
  REQUIRE(s.commandPose(0, move(0.01, 0.0, 0.0), 3).accepted);
  s.cycle();
  REQUIRE(s.rezero(4).accepted);
  REQUIRE(s.commandPose(0, move(0.0, 0.0, 0.0), 5).accepted);
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == doctest::Approx(x0 + 0.015).epsilon(1e-6));
}

TEST_CASE("stale sequence numbers are dropped") {
  TeleopSession s(settingsIn(scratch("stale")), tasks::TaskSpec::defaults(tasks::TaskId::PressHold), 3);
  CHECK(s.commandPose(0, move(0.002, 0.0, 0.0), 10).accepted);
  const CommandAck old = s.commandPose(0, move(0.05, 0.0, 0.0), 9);
  CHECK_FALSE(old.accepted);
  CHECK(old.notice.find("stale") != std::string::npos);
  CHECK_FALSE(s.setPreset(0, control::PresetLevel::High, 10).accepted);
  CHECK(s.lastSeq() == 10);
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == doctest::Approx(0.003).epsilon(1e-6));
  CHECK(s.state().arms[0].preset == control::PresetLevel::Mid);

  // Only the freshest pending command per arm is applied.
  CHECK(s.commandPose(0, move(0.004, 0.0, 0.0), 11).accepted);
  CHECK(s.commandPose(0, move(0.006, 0.0, 0.0), 12).accepted);
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == doctest::Approx(0.009).epsilon(1e-6));
  CHECK(s.applied() == 2);

  CHECK_THROWS_AS(s.commandPose(1, move(0, 0, 0), 13), ShapeError);
  CHECK_THROWS_AS(s.commandPose(0, move(NAN, 0, 0), 13), NumericError);
}

TEST_CASE("depth commands are clamped to the force cue") {
  config::TeleopSettings t = settingsIn(scratch("clamp"));
  TeleopSession s(t, tasks::TaskSpec::defaults(tasks::TaskId::PressHold), 4);
  const double k = patchStiffness(s, 0);
  REQUIRE(k > 0.0);

  // Reference sits kHoverHeight above the surface; this asks for twice the cue force.
  const double z_hand = (kHoverHeight + 2.0 * t.cue_force / k) / t.motion_scale;
  REQUIRE(s.commandPose(0, move(0.0, 0.0, z_hand), 1).accepted);
  s.cycle();
  const StatePacket p = s.state();
  CHECK(p.arms[0].predicted == doctest::Approx(2.0 * t.cue_force).epsilon(1e-9));
  CHECK(p.arms[0].cues.force);
  CHECK(p.arms[0].f_target <= t.cue_force * (1.0 + 1e-6));
  for (int i = 0; i < 300; ++i) s.cycle();
  CHECK(s.state().arms[0].f_meas <= t.cue_force * 1.05);

  // A depth under the threshold clears the cue once the measured force agrees.
  const double z_soft = (kHoverHeight + 0.5 * t.cue_force / k) / t.motion_scale;
  REQUIRE(s.commandPose(0, move(0.0, 0.0, z_soft), 2).accepted);
  for (int i = 0; i < 300; ++i) s.cycle();
  const StatePacket q = s.state();
  CHECK(q.arms[0].predicted == doctest::Approx(0.5 * t.cue_force).epsilon(1e-9));
  CHECK_FALSE(q.arms[0].cues.force);
  CHECK(q.arms[0].cues.force == (q.arms[0].f_meas > t.cue_force || q.arms[0].predicted > t.cue_force));
  CHECK(q.arms[0].cues.deformation == (q.arms[0].features.max_deformation > t.cue_deformation));
}

TEST_CASE("workspace edge clips lateral motion") {
  config::TeleopSettings t = settingsIn(scratch("workspace"));
  TeleopSession s(t, tasks::TaskSpec::defaults(tasks::TaskId::PressHold), 4);
  REQUIRE(s.commandPose(0, move(1.0, 0.0, 0.0), 1).accepted);
  s.cycle();
  CHECK(s.rig().observe().arms[0].pose[0] == doctest::Approx(t.workspace).epsilon(1e-6));
  CHECK(s.state().arms[0].cues.workspace);
  REQUIRE(s.commandPose(0, move(0.0, 0.0, 0.0), 2).accepted);
  s.cycle();
  CHECK_FALSE(s.state().arms[0].cues.workspace);
}

TEST_CASE("a recorded demonstration replays exactly") {
  const auto dir = scratch("record");
  TeleopSession s(settingsIn(dir), tasks::TaskSpec::defaults(tasks::TaskId::PressHold), 5);
  CHECK_THROWS_AS(s.stopRecording(), SessionError);
  s.startRecording();
  CHECK_THROWS_AS(s.startRecording(), SessionError);
  const double k = patchStiffness(s, 0);
  std::uint64_t seq = 0;
  // 2 s of operator input: descend, press to 3 N, soften, lift.
  for (int c = 0; c < 200; ++c) {
    if (c % 3 == 0) {
      const double goal = c < 150 ? std::min(1.0, c / 60.0) * 3.0 / k : -kHoverHeight;
      s.commandPose(0, move(0.0001 * std::sin(c * 0.05), 0.0, (kHoverHeight + goal) / 1.5), ++seq);
    }
    if (c == 90) s.setPreset(0, control::PresetLevel::Low, ++seq);
    s.cycle();
  }
  const RecordingInfo info = s.stopRecording();
  CHECK(info.finalized);
  CHECK(std::abs(info.frames - 20) <= 1);
  const RecordingInfo again = s.stopRecording();
  CHECK(again.path == info.path);
  CHECK(again.frames == info.frames);

  const dataset::Episode ep = dataset::readEpisodeFile(info.path);
  CHECK(static_cast<int>(ep.frames.size()) == info.frames);
  CHECK(ep.header.task == "PressHold");
  bool softened = false;
  for (const auto& f : ep.frames) softened = softened || f.arms[0].preset == control::PresetLevel::Low;
  CHECK(softened);
  CHECK(tasks::determinismAudit(s.spec(), ep) <= 1e-9);

  s.close();
  CHECK_FALSE(s.live());
  CHECK_THROWS_AS(s.commandPose(0, move(0, 0, 0), ++seq), SessionError);
  CHECK_THROWS_AS(s.cycle(), SessionError);
}

TEST_CASE("envelopes and field frames round trip") {
  const Envelope e = parseEnvelope(makeEnvelope("command_pose", 7, R"({"arm":0,"position":[0.01,0,0]})"));
  CHECK(e.type == "command_pose");
  CHECK(e.seq == 7);
  CHECK(json::parse(e.payload)["position"][0] == 0.01);
  CHECK_THROWS_AS(parseEnvelope("not json"), FormatError);
  CHECK_THROWS_AS(parseEnvelope(R"({"seq":1})"), FormatError);
  CHECK_THROWS_AS(parseEnvelope(R"({"type":"rezero","seq":-1})"), FormatError);

  TeleopSession s(settingsIn(scratch("codec")), tasks::TaskSpec::defaults(tasks::TaskId::BimanualInsert), 6);
  for (int i = 0; i < 50; ++i) s.cycle();
  const StatePacket p = s.state();
  const std::vector<std::uint8_t> bytes = encodeFieldFrame(p);
  CHECK(bytes.size() == 4 + 4 + 8 + 8 + 12 + 2u * 2 * kSensorWidth * kSensorHeight * 4);
  const FieldFrame f = decodeFieldFrame(bytes);
  CHECK(f.sequence == p.sequence);
  CHECK(f.timestamp == p.timestamp);
  REQUIRE(f.force.size() == 2);
  for (std::size_t a = 0; a < 2; ++a) {
    for (int i = 0; i < f.force[a].size(); ++i) {
      CHECK(f.force[a][i] == static_cast<float>(p.arms[a].force.pressures[i]));
      CHECK(f.deformation[a][i] == static_cast<float>(p.arms[a].deformation.displacements[i]));
    }
  }
  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 1);
  CHECK_THROWS_AS(decodeFieldFrame(cut), FormatError);
  std::vector<std::uint8_t> bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decodeFieldFrame(bad), FormatError);

  const json st = json::parse(encodeState(p));
  CHECK(st["type"] == "state");
  CHECK(st["payload"]["arms"].size() == 2);

  // Dispatch: errors come back as envelopes rather than exceptions.
  const json hello = json::parse(handleMessage(s, parseEnvelope(R"({"type":"hello"})")));
  CHECK(hello["type"] == "hello");
  CHECK(hello["payload"]["arms"] == 2);
  const json bogus = json::parse(handleMessage(s, parseEnvelope(R"({"type":"dance","seq":3})")));
  CHECK(bogus["type"] == "error");
  const json badarm = json::parse(handleMessage(s, parseEnvelope(R"({"type":"command_pose","seq":4,"payload":{"arm":5}})")));
  CHECK(badarm["type"] == "error");
  const json ok = json::parse(
      handleMessage(s, parseEnvelope(R"({"type":"set_preset","seq":5,"payload":{"arm":1,"preset":"High"}})")));
  CHECK(ok["type"] == "ack");
  CHECK(ok["payload"]["accepted"] == true);
  const json late = json::parse(
      handleMessage(s, parseEnvelope(R"({"type":"command_pose","seq":5,"payload":{"position":[0,0,0]}})")));
  CHECK(late["payload"]["accepted"] == false);
}

TEST_CASE("server streams state and applies commands over a websocket") {
  namespace asio = boost::asio;
  namespace beast = boost::beast;
  namespace websocket = beast::websocket;
  using tcp = asio::ip::tcp;

  config::TeleopSettings t = settingsIn(scratch("server"));
  t.port = 0;
  TeleopServer server(t, tasks::TaskSpec::defaults(tasks::TaskId::PressHold), 8);
  const int port = server.start();
  REQUIRE(port > 0);

  asio::io_context ioc;
  websocket::stream<tcp::socket> ws(ioc);
  tcp::resolver resolver(ioc);
  asio::connect(ws.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
  ws.handshake("127.0.0.1", "/");

  auto readText = [&] {
    for (;;) {
      beast::flat_buffer b;
      ws.read(b);
      if (ws.got_text()) return json::parse(beast::buffers_to_string(b.data()));
    }
  };
  auto until = [&](const std::string& type) {
    for (;;) {
      json j = readText();
      if (j["type"] == type) return j;
    }
  };

  ws.write(asio::buffer(std::string(R"({"type":"rezero","seq":1})")));
  CHECK(readText()["type"] == "error");  // hello first

  ws.write(asio::buffer(std::string(R"({"type":"hello"})")));
  const json hello = until("hello");
  CHECK(hello["payload"]["session"] == "bench");

  ws.write(asio::buffer(makeEnvelope("command_pose", 2, R"({"arm":0,"position":[0.01,0,0]})")));
  CHECK(until("ack")["payload"]["accepted"] == true);

  // A state message is followed by its binary field frame.
  bool moved = false;
  for (int i = 0; i < 60 && !moved; ++i) {
    const json st = until("state");
    beast::flat_buffer b;
    ws.read(b);
    REQUIRE_FALSE(ws.got_text());
    const std::string raw = beast::buffers_to_string(b.data());
    const FieldFrame f = decodeFieldFrame(std::vector<std::uint8_t>(raw.begin(), raw.end()));
    CHECK(f.sequence == st["seq"].get<std::uint64_t>());
    moved = std::abs(st["payload"]["arms"][0]["pose"][0].get<double>() - 0.015) < 1e-6;
  }
  CHECK(moved);

  ws.write(asio::buffer(std::string(R"({"type":"record_start","seq":3})")));
  CHECK(until("recording")["payload"]["active"] == true);
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  ws.write(asio::buffer(std::string(R"({"type":"record_stop","seq":4})")));
  const json rec = until("recording");
  CHECK(rec["payload"]["active"] == false);
  CHECK(rec["payload"]["frames"].get<int>() >= 1);
  CHECK(std::filesystem::exists(rec["payload"]["path"].get<std::string>()));

  beast::error_code ec;
  ws.close(websocket::close_code::normal, ec);
  server.stop();
  CHECK(server.packetsSent() > 0);
  CHECK(server.worstApplyLatency() < 0.1);
}
