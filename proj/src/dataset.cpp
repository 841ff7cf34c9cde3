#include "softtouch/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include <zlib.h>

#include "softtouch/errors.hpp"

namespace softtouch::dataset {

namespace {

constexpr char kFrameMagic[4] = {'F', 'R', 'M', '0'};
constexpr const char* kHeaderMagic = "CFEP";
constexpr const char* kHeaderEnd = "end";
constexpr std::uint32_t kMaxFrameBytes = 1u << 24;

constexpr const char* kPhaseNames[] = {"Approach", "Contact", "Engage", "Hold", "Traverse", "Insert", "Release"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parseDouble(const std::string& s, const char* what) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw FormatError(std::string(what) + ": bad number '" + s + "'");
  return v;
}

template <typename T>
T parseInteger(const std::string& s, const char* what) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw FormatError(std::string(what) + ": bad integer '" + s + "'");
  return v;
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

class Out {
 public:
  void u8(std::uint8_t v) { b.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(double v) { le(std::bit_cast<std::uint32_t>(static_cast<float>(v)), 4); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> b;
};

class In {
 public:
  In(const std::uint8_t* p, std::size_t n) : data(p), size(n) {}
  std::uint64_t le(int n) {
    if (static_cast<std::size_t>(n) > size - pos) throw FormatError("episode: frame payload too short");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(n);
    return v;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  double f32() { return static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(le(4)))); }
  double f64() { return std::bit_cast<double>(le(8)); }
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
};

void writeField(Out& o, const Field& f) {
  for (double v : f.values()) o.f32(v);
}

Field readField(In& in, int w, int h) {
  Field f(w, h);
  for (int i = 0; i < f.size(); ++i) f[i] = in.f32();
  return f;
}

void checkFrame(const Frame& f, const EpisodeHeader& h) {
  if (static_cast<int>(f.arms.size()) != h.arms) throw ShapeError("episode: frame arm count differs from header");
  for (const ArmRecord& a : f.arms) {
    if (!a.force.sameShape(h.grid_width, h.grid_height) || !a.deformation.sameShape(h.grid_width, h.grid_height)) {
      throw ShapeError("episode: frame grid differs from header");
    }
  }
  if (!std::isfinite(f.timestamp)) throw NumericError("episode: non-finite timestamp");
}

EpisodeHeader parseHeader(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  auto line = [&]() -> std::string {
    const auto it = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), '\n');
    if (it == bytes.end()) throw FormatError("episode: header not terminated");
    std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), it);
    pos = static_cast<std::size_t>(it - bytes.begin()) + 1;
    return s;
  };
  const std::string first = line();
  if (first.rfind(std::string(kHeaderMagic) + " ", 0) != 0) throw FormatError("episode: bad magic");
  EpisodeHeader h;
  h.version = parseInteger<std::uint32_t>(first.substr(5), "episode version");
  if (h.version != kEpisodeVersion) throw FormatError("episode: unsupported version " + std::to_string(h.version));
  bool have_task = false;
  bool have_arms = false;
  bool have_grid = false;
  for (;;) {
    const std::string l = line();
    if (l == kHeaderEnd) break;
    const auto sp = l.find(' ');
    const std::string key = l.substr(0, sp);
    const std::string val = sp == std::string::npos ? "" : l.substr(sp + 1);
    if (key == "task") {
      h.task = val;
      have_task = true;
    } else if (key == "arms") {
      h.arms = parseInteger<int>(val, "episode arms");
      have_arms = true;
    } else if (key == "grid") {
      const auto x = val.find(' ');
      if (x == std::string::npos) throw FormatError("episode: grid needs width and height");
      h.grid_width = parseInteger<int>(val.substr(0, x), "episode grid");
      h.grid_height = parseInteger<int>(val.substr(x + 1), "episode grid");
      have_grid = true;
    } else if (key == "material_hash") {
      h.material_hash = val;
    } else if (key == "period") {
      h.period = parseDouble(val, "episode period");
    } else if (key == "seed") {
      h.seed = parseInteger<std::uint64_t>(val, "episode seed");
    } else if (key == "meta") {
      const auto x = val.find(' ');
      if (x == std::string::npos) throw FormatError("episode: meta needs a key and a value");
      h.meta.emplace_back(val.substr(0, x), val.substr(x + 1));
    } else {
      throw FormatError("episode: unknown header key '" + key + "'");
    }
  }
  if (!have_task || !have_arms || !have_grid) throw FormatError("episode: header lacks task, arms or grid");
  if (h.arms < 1 || h.grid_width < 1 || h.grid_height < 1 || !(h.period > 0.0)) {
    throw FormatError("episode: header dimensions must be positive");
  }
  return h;
}

Frame decodePayload(const std::uint8_t* p, std::size_t n, const EpisodeHeader& h) {
  In in(p, n);
  Frame f;
  f.timestamp = in.f64();
  const std::uint8_t phase = in.u8();
  if (phase > static_cast<std::uint8_t>(Phase::Release)) throw FormatError("episode: bad phase label");
  f.phase = static_cast<Phase>(phase);
  const int arms = in.u8();
  if (arms != h.arms) throw FormatError("episode: frame arm count differs from header");
  for (int a = 0; a < arms; ++a) {
    ArmRecord r;
    for (double& v : r.pose) v = in.f32();
    const int w = in.u16();
    const int hh = in.u16();
    if (w != h.grid_width || hh != h.grid_height) throw FormatError("episode: frame grid differs from header");
    r.force = readField(in, w, hh);
    r.deformation = readField(in, w, hh);
    std::array<double, policy::kActionDim> act{};
    for (double& v : act) v = in.f32();
    r.action = policy::Action::fromVector(act);
    const std::uint8_t preset = in.u8();
    if (preset > static_cast<std::uint8_t>(control::PresetLevel::High)) throw FormatError("episode: bad preset");
    r.preset = static_cast<control::PresetLevel>(preset);
    r.model.k_e = in.f32();
    r.model.k_v = in.f32();
    r.model.k_m = in.f32();
    r.model.tau = in.f32();
    r.model.D = in.f32();
    r.residual_rms = in.f32();
    const std::uint8_t flags = in.u8();
    r.confident = flags & 1u;
    r.engaged = flags & 2u;
    r.violations.force = flags & 4u;
    r.violations.depth = flags & 8u;
    r.saturated = flags & 16u;
    r.f_des = in.f32();
    r.f_meas = in.f32();
    r.ref_depth = in.f32();
    f.arms.push_back(std::move(r));
  }
  if (in.pos != n) throw FormatError("episode: trailing bytes in frame payload");
  return f;
}

std::vector<std::uint8_t> readAll(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

const char* phaseName(Phase p) { return kPhaseNames[static_cast<int>(p)]; }

Phase parsePhase(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(Phase::Release); ++i)
    if (name == kPhaseNames[i]) return static_cast<Phase>(i);
  throw ConfigError("unknown phase '" + name + "'");
}

std::string materialHash(const sim::MaterialParams& p) {
  const std::string text = "k_e=" + fmt(p.k_e) + ";k_v=" + fmt(p.k_v) + ";k_m=" + fmt(p.k_m) + ";tau=" + fmt(p.tau) +
                           ";D=" + fmt(p.D);
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Frame quantize(const Frame& f) {
  Frame q = f;
  for (ArmRecord& r : q.arms) {
    for (double& v : r.pose) v = f32(v);
    for (double& v : r.force.values()) v = f32(v);
    for (double& v : r.deformation.values()) v = f32(v);
    auto act = r.action.toVector();
    for (double& v : act) v = f32(v);
    r.action = policy::Action::fromVector(act);
    r.model = {f32(r.model.k_e), f32(r.model.k_v), f32(r.model.k_m), f32(r.model.tau), f32(r.model.D)};
    r.residual_rms = f32(r.residual_rms);
    r.f_des = f32(r.f_des);
    r.f_meas = f32(r.f_meas);
    r.ref_depth = f32(r.ref_depth);
  }
  return q;
}

std::vector<std::uint8_t> encodeHeader(const EpisodeHeader& h) {
  auto clean = [](const std::string& s, const char* what) {
    if (s.find('\n') != std::string::npos) throw ConfigError(std::string("episode: newline in ") + what);
    return s;
  };
  std::string t = std::string(kHeaderMagic) + " " + std::to_string(h.version) + "\n";
  t += "task " + clean(h.task, "task") + "\n";
  t += "arms " + std::to_string(h.arms) + "\n";
  t += "grid " + std::to_string(h.grid_width) + " " + std::to_string(h.grid_height) + "\n";
  t += "material_hash " + clean(h.material_hash, "material hash") + "\n";
  t += "period " + fmt(h.period) + "\n";
  t += "seed " + std::to_string(h.seed) + "\n";
  for (const auto& [k, v] : h.meta) {
    if (k.empty() || k.find(' ') != std::string::npos) throw ConfigError("episode: meta keys must be single words");
    t += "meta " + clean(k, "meta key") + " " + clean(v, "meta value") + "\n";
  }
  t += std::string(kHeaderEnd) + "\n";
  return {t.begin(), t.end()};
}

std::vector<std::uint8_t> encodeFrame(const Frame& f, const EpisodeHeader& h) {
  checkFrame(f, h);
  Out p;
  p.f64(f.timestamp);
  p.u8(static_cast<std::uint8_t>(f.phase));
  p.u8(static_cast<std::uint8_t>(f.arms.size()));
  for (const ArmRecord& r : f.arms) {
    for (double v : r.pose) p.f32(v);
    p.u16(static_cast<std::uint16_t>(r.force.width()));
    p.u16(static_cast<std::uint16_t>(r.force.height()));
    writeField(p, r.force);
    writeField(p, r.deformation);
    for (double v : r.action.toVector()) p.f32(v);
    p.u8(static_cast<std::uint8_t>(r.preset));
    for (double v : {r.model.k_e, r.model.k_v, r.model.k_m, r.model.tau, r.model.D, r.residual_rms}) p.f32(v);
    p.u8(static_cast<std::uint8_t>((r.confident ? 1 : 0) | (r.engaged ? 2 : 0) | (r.violations.force ? 4 : 0) |
                                   (r.violations.depth ? 8 : 0) | (r.saturated ? 16 : 0)));
    p.f32(r.f_des);
    p.f32(r.f_meas);
    p.f32(r.ref_depth);
  }
  Out o;
  for (char c : kFrameMagic) o.u8(static_cast<std::uint8_t>(c));
  o.u32(static_cast<std::uint32_t>(p.b.size()));
  o.b.insert(o.b.end(), p.b.begin(), p.b.end());
  o.u32(crc(p.b.data(), p.b.size()));
  return std::move(o.b);
}

std::vector<std::uint8_t> serializeEpisode(const Episode& e) {
  std::vector<std::uint8_t> out = encodeHeader(e.header);
  std::optional<double> last;
  for (const Frame& f : e.frames) {
    requireCadence(last, f.timestamp, e.header.period);
    last = f.timestamp;
    const auto b = encodeFrame(f, e.header);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

FrameReader::FrameReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {
  header_ = parseHeader(bytes_, pos_);
}

std::optional<Frame> FrameReader::next() {
  if (truncated_ || pos_ == bytes_.size()) return std::nullopt;
  const std::size_t left = bytes_.size() - pos_;
  const std::uint8_t* p = bytes_.data() + pos_;
  if (left >= 4 && !std::equal(kFrameMagic, kFrameMagic + 4, p)) {
    throw CorruptionError("episode: bad frame marker at byte " + std::to_string(pos_));
  }
  if (left < 8) {
    truncated_ = true;
    return std::nullopt;
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(p[4 + i]) << (8 * i);
  if (len > kMaxFrameBytes) throw CorruptionError("episode: implausible frame length");
  if (left < 12 + static_cast<std::size_t>(len)) {
    truncated_ = true;
    return std::nullopt;
  }
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(p[8 + len + static_cast<std::uint32_t>(i)]) << (8 * i);
  if (stored != crc(p + 8, len)) throw CorruptionError("episode: frame checksum mismatch at byte " + std::to_string(pos_));
  Frame f = decodePayload(p + 8, len, header_);
  pos_ += 12 + static_cast<std::size_t>(len);
  return f;
}

Episode parseEpisode(std::span<const std::uint8_t> bytes) {
  FrameReader reader(std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
  Episode e;
  e.header = reader.header();
  std::optional<double> last;
  while (auto f = reader.next()) {
    requireCadence(last, f->timestamp, e.header.period);
    last = f->timestamp;
    e.frames.push_back(std::move(*f));
  }
  e.truncated = reader.truncated();
  return e;
}

Episode readEpisodeFile(const std::string& path) { return parseEpisode(readAll(path)); }

void writeEpisodeFile(const Episode& e, const std::string& path) {
  const auto bytes = serializeEpisode(e);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("short write to '" + path + "'");
}

void requireCadence(std::optional<double> prev, double next, double period) {
  if (!prev) return;
  if (!(std::abs(next - (*prev + period)) <= 1e-9)) {
    throw OrderingError("episode: frame at t = " + fmt(next) + " does not follow t = " + fmt(*prev) + " by one period");
  }
}

struct EpisodeWriter::Impl {
  std::ofstream out;
};

EpisodeWriter::EpisodeWriter(const std::string& path, EpisodeHeader header)
    : path_(path), header_(std::move(header)), impl_(std::make_unique<Impl>()) {
  impl_->out.open(path, std::ios::binary | std::ios::trunc);
  if (!impl_->out) throw ConfigError("cannot write '" + path + "'");
  const auto h = encodeHeader(header_);
  impl_->out.write(reinterpret_cast<const char*>(h.data()), static_cast<std::streamsize>(h.size()));
  impl_->out.flush();
}

EpisodeWriter::~EpisodeWriter() {
  try {
    finalize();
  } catch (...) {
  }
}

void EpisodeWriter::append(const Frame& f) {
  if (finalized_) throw SessionError("episode: append after finalize");
  requireCadence(last_time_, f.timestamp, header_.period);
  const auto b = encodeFrame(f, header_);
  impl_->out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  impl_->out.flush();
  if (!impl_->out) throw ConfigError("short write to '" + path_ + "'");
  last_time_ = f.timestamp;
  ++frames_;
}

void EpisodeWriter::finalize() {
  if (finalized_) return;
  finalized_ = true;
  impl_->out.close();
}

std::vector<double> actionVector(const Frame& f) {
  std::vector<double> v;
  for (const ArmRecord& r : f.arms) {
    const auto a = r.action.toVector();
    v.insert(v.end(), a.begin(), a.end());
  }
  return v;
}

std::vector<double> observationScalars(const Frame& f) {
  std::vector<double> v;
  for (const ArmRecord& r : f.arms) {
    v.insert(v.end(), r.pose.begin(), r.pose.end());
    v.push_back(maxAbs(r.force));
    v.push_back(maxAbs(r.deformation));
    v.push_back(r.f_meas);
  }
  return v;
}

namespace {

std::vector<DimStats> twoPass(const std::vector<std::vector<double>>& rows) {
  const std::size_t dims = rows.front().size();
  const auto n = static_cast<double>(rows.size());
  std::vector<DimStats> out(dims);
  for (std::size_t d = 0; d < dims; ++d) {
    double sum = 0.0;
    for (const auto& r : rows) sum += r[d];
    const double mean = sum / n;
    double ss = 0.0;
    for (const auto& r : rows) ss += (r[d] - mean) * (r[d] - mean);
    const double sd = std::sqrt(ss / n);
    out[d].mean = mean;
    if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
      out[d].std = 1.0;
      out[d].constant = true;
    } else {
      out[d].std = sd;
    }
  }
  return out;
}

}  // namespace

NormStats computeStats(const std::vector<Episode>& episodes) {
  std::vector<std::vector<double>> actions;
  std::vector<std::vector<double>> obs;
  for (const Episode& e : episodes) {
    for (const Frame& f : e.frames) {
      actions.push_back(actionVector(f));
      obs.push_back(observationScalars(f));
      if (actions.back().size() != actions.front().size()) throw ShapeError("computeStats: episodes differ in arm count");
    }
  }
  if (actions.empty()) throw UsageError("computeStats: no frames to summarise");
  return {twoPass(actions), twoPass(obs)};
}

std::string splitFor(int index) { return index % 5 == 4 ? "val" : "train"; }

std::string formatManifest(const Manifest& m) {
  std::string t = "softtouch-manifest 1\n";
  for (const ManifestEntry& e : m.episodes) {
    if (e.path.find('\n') != std::string::npos || e.task.find(' ') != std::string::npos) {
      throw ConfigError("manifest: task names must be single words and paths single lines");
    }
    t += "episode " + e.split + " " + e.task + " " + std::to_string(e.frames) + " " + e.path + "\n";
  }
  auto stats = [&t](const char* group, const std::vector<DimStats>& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      t += std::string("stat ") + group + " " + std::to_string(i) + " " + fmt(s[i].mean) + " " + fmt(s[i].std) + " " +
           (s[i].constant ? "1" : "0") + "\n";
    }
  };
  stats("action", m.stats.action);
  stats("observation", m.stats.observation);
  return t;
}

Manifest parseManifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "softtouch-manifest 1") throw FormatError("manifest: bad header");
  Manifest m;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "episode") {
      ManifestEntry e;
      std::string frames;
      if (!(ls >> e.split >> e.task >> frames)) throw FormatError("manifest: short episode line");
      if (e.split != "train" && e.split != "val") throw FormatError("manifest: unknown split '" + e.split + "'");
      e.frames = parseInteger<int>(frames, "manifest frames");
      std::getline(ls, e.path);
      if (e.path.size() < 2 || e.path[0] != ' ') throw FormatError("manifest: episode without a path");
      e.path.erase(0, 1);
      m.episodes.push_back(std::move(e));
    } else if (kind == "stat") {
      std::string group, idx, mean, sd, flag;
      if (!(ls >> group >> idx >> mean >> sd >> flag)) throw FormatError("manifest: short stat line");
      auto& dest = group == "action" ? m.stats.action : group == "observation" ? m.stats.observation
                                                                                : throw FormatError("manifest: bad group");
      if (parseInteger<std::size_t>(idx, "manifest stat index") != dest.size()) {
        throw FormatError("manifest: stat lines out of order");
      }
      dest.push_back({parseDouble(mean, "manifest mean"), parseDouble(sd, "manifest std"), flag == "1"});
    } else {
      throw FormatError("manifest: unknown line '" + kind + "'");
    }
  }
  return m;
}

}  // namespace softtouch::dataset
