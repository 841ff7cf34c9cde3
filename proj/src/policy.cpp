#include "softtouch/policy.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <zlib.h>

#include "softtouch/detmath.hpp"
#include "softtouch/errors.hpp"

namespace softtouch::policy {

namespace {

constexpr char kMagic[4] = {'C', 'F', 'A', '1'};
constexpr double kPi = 3.14159265358979323846;
constexpr double kLayerNormEps = 1e-5;
constexpr double kForceScale = 1.0 / 50.0;   // kPa -> model units
constexpr double kDeformScale = 1.0 / 10.0;  // mm -> model units
constexpr int kNormalizedDims = 19;          // pose and joints; compliance is squashed instead
constexpr const char* kTokenOrder = "latent,pose,force_cols,deform_rows";

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // [token][feature]

// ---------------------------------------------------------------- container

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), c, c + n);
  }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw FormatError("weights: string longer than 65535 bytes");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::size_t end) : buf(b), limit(end) {}
  void need(std::size_t n) const {
    if (n > limit - pos) throw FormatError("weights: header runs past the end of the file");
  }
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
  std::string str16() {
    const auto n = static_cast<std::size_t>(uint(2));
    need(n);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::span<const std::uint8_t> buf;
  std::size_t limit;
  std::size_t pos = 0;
};

std::uint32_t crc(std::span<const std::uint8_t> bytes) {
  uLong c = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    c = crc32(c, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(c);
}

int parseInt(const WeightBundle& b, const char* key) {
  const auto v = b.descriptorValue(key);
  if (!v) throw FormatError(std::string("weights: descriptor lacks '") + key + "'");
  int out = 0;
  const char* first = v->data();
  const char* last = first + v->size();
  const auto [p, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || p != last) throw FormatError(std::string("weights: descriptor '") + key + "' is not an integer");
  return out;
}

bool isLayerNorm(const std::string& name, bool& gain) {
  const auto dot = name.rfind('.');
  if (dot == std::string::npos) return false;
  const std::string owner = name.substr(0, dot);
  const std::string leaf = name.substr(dot + 1);
  const auto odot = owner.rfind('.');
  const std::string module = odot == std::string::npos ? owner : owner.substr(odot + 1);
  if (module.rfind("norm", 0) != 0) return false;
  gain = leaf == "weight";
  return true;
}

std::vector<std::uint32_t> u32s(std::initializer_list<int> dims) {
  std::vector<std::uint32_t> out;
  for (int d : dims) out.push_back(static_cast<std::uint32_t>(d));
  return out;
}

void addLinear(std::vector<std::pair<std::string, std::vector<std::uint32_t>>>& out, const std::string& name, int rows,
               int cols) {
  out.emplace_back(name + ".weight", u32s({rows, cols}));
  out.emplace_back(name + ".bias", u32s({rows}));
}

void addAttention(std::vector<std::pair<std::string, std::vector<std::uint32_t>>>& out, const std::string& name,
                  int d) {
  out.emplace_back(name + ".in_proj_weight", u32s({3 * d, d}));
  out.emplace_back(name + ".in_proj_bias", u32s({3 * d}));
  addLinear(out, name + ".out_proj", d, d);
}

void addNorm(std::vector<std::pair<std::string, std::vector<std::uint32_t>>>& out, const std::string& name, int d) {
  out.emplace_back(name + ".weight", u32s({d}));
  out.emplace_back(name + ".bias", u32s({d}));
}

/// Checks the descriptor and every tensor shape; returns the architecture.
Architecture validateBundle(const WeightBundle& b) {
  if (b.version != kBundleVersion) throw FormatError("weights: unsupported format version " + std::to_string(b.version));
  const Architecture arch = b.architecture();
  for (const auto& [name, dims] : requiredTensors(arch)) {
    const Tensor* t = b.find(name);
    if (!t) throw ShapeError("weights: missing tensor '" + name + "'");
    if (t->dims != dims) throw ShapeError("weights: tensor '" + name + "' has the wrong shape for the descriptor");
    if (t->data.size() != t->count()) throw ShapeError("weights: tensor '" + name + "' data size disagrees with dims");
  }
  for (const char* opt : {"action_mean", "action_std"}) {
    if (const Tensor* t = b.find(opt)) {
      if (t->dims != u32s({arch.actionWidth()}) || t->data.size() != t->count()) {
        throw ShapeError(std::string("weights: tensor '") + opt + "' must have shape [" +
                         std::to_string(arch.actionWidth()) + "]");
      }
    }
  }
  return arch;
}

// ---------------------------------------------------------------- forward pass

double at(const Tensor& t, std::size_t i) { return static_cast<double>(t.data[i]); }

// y[o] = b[o] + sum_i W[o][i] x[i], accumulated left to right.
Vec linear(const Tensor& w, const Tensor& b, const Vec& x, std::size_t row0 = 0, std::size_t rows = 0) {
  const std::size_t in = w.dims[1];
  if (rows == 0) rows = w.dims[0];
  Vec y(rows);
  for (std::size_t o = 0; o < rows; ++o) {
    const std::size_t r = row0 + o;
    double acc = at(b, r);
    const float* wr = w.data.data() + r * in;
    for (std::size_t i = 0; i < in; ++i) acc += static_cast<double>(wr[i]) * x[i];
    y[o] = acc;
  }
  return y;
}

void layerNorm(Vec& x, const Tensor& g, const Tensor& b) {
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) * inv * at(g, i) + at(b, i);
}

void requireFinite(const Mat& m, const std::string& layer) {
  for (const Vec& row : m)
    for (double v : row)
      if (!std::isfinite(v)) throw NumericError("policy: non-finite activation in layer '" + layer + "'");
}

class Forward {
 public:
  Forward(const Architecture& a, const std::map<std::string, const Tensor*>& idx) : arch(a), index(idx) {}

  const Tensor& t(const std::string& name) const { return *index.at(name); }

  Mat attention(const std::string& p, const Mat& query, const Mat& memory) const {
    const auto d = static_cast<std::size_t>(arch.d_model);
    const auto heads = static_cast<std::size_t>(arch.heads);
    const std::size_t dh = d / heads;
    const Tensor& w = t(p + ".in_proj_weight");
    const Tensor& b = t(p + ".in_proj_bias");
    Mat q, k, v;
    for (const Vec& x : query) q.push_back(linear(w, b, x, 0, d));
    for (const Vec& x : memory) {
      k.push_back(linear(w, b, x, d, d));
      v.push_back(linear(w, b, x, 2 * d, d));
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat out;
    out.reserve(query.size());
    Vec scores(memory.size());
    for (std::size_t i = 0; i < query.size(); ++i) {
      Vec concat(d, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < memory.size(); ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[i][off + c] * k[j][off + c];
          scores[j] = s * scale;
          peak = std::max(peak, scores[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < memory.size(); ++j) {
          scores[j] = detmath::exp(scores[j] - peak);
          total += scores[j];
        }
        for (std::size_t j = 0; j < memory.size(); ++j) {
          const double p_ij = scores[j] / total;
          for (std::size_t c = 0; c < dh; ++c) concat[off + c] += p_ij * v[j][off + c];
        }
      }
      out.push_back(linear(t(p + ".out_proj.weight"), t(p + ".out_proj.bias"), concat));
    }
    return out;
  }

  Vec feedForward(const std::string& p, const Vec& x) const {
    Vec hidden = linear(t(p + ".ff1.weight"), t(p + ".ff1.bias"), x);
    for (double& v : hidden) v = std::max(0.0, v);
    return linear(t(p + ".ff2.weight"), t(p + ".ff2.bias"), hidden);
  }

  static void addInto(Mat& x, const Mat& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t c = 0; c < x[i].size(); ++c) x[i][c] += y[i][c];
  }

  void norm(Mat& x, const std::string& name) const {
    for (Vec& row : x) layerNorm(row, t(name + ".weight"), t(name + ".bias"));
  }

  Mat embed(const Observation& obs) const {
    Mat tokens;
    const Vec latent(static_cast<std::size_t>(arch.latent_dim), 0.0);  // prior mean
    tokens.push_back(linear(t("latent_proj.weight"), t("latent_proj.bias"), latent));
    for (const ArmObservation& arm : obs.arms) {
      tokens.push_back(linear(t("pose_proj.weight"), t("pose_proj.bias"), Vec(arm.pose.begin(), arm.pose.end())));
      const Field& p = arm.force.pressures;
      for (int x = 0; x < kSensorWidth; ++x) {
        Vec col(kSensorHeight);
        for (int y = 0; y < kSensorHeight; ++y) col[static_cast<std::size_t>(y)] = p(x, y) * kForceScale;
        tokens.push_back(linear(t("force_proj.weight"), t("force_proj.bias"), col));
      }
      const Field& d = arm.deformation.displacements;
      for (int y = 0; y < kSensorHeight; ++y) {
        Vec row(kSensorWidth);
        for (int x = 0; x < kSensorWidth; ++x) row[static_cast<std::size_t>(x)] = d(x, y) * kDeformScale;
        tokens.push_back(linear(t("deform_proj.weight"), t("deform_proj.bias"), row));
      }
    }
    const Tensor& pos = t("pos_embed");
    const auto d = static_cast<std::size_t>(arch.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) tokens[i][c] += at(pos, i * d + c);
    return tokens;
  }

  std::vector<Vec> run(const Observation& obs) const {
    Mat mem = embed(obs);
    requireFinite(mem, "embed");
    for (int l = 0; l < arch.enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l);
      addInto(mem, attention(p + ".attn", mem, mem));
      norm(mem, p + ".norm1");
      Mat ff;
      for (const Vec& x : mem) ff.push_back(feedForward(p, x));
      addInto(mem, ff);
      norm(mem, p + ".norm2");
      requireFinite(mem, p);
    }

    const Tensor& qe = t("query_embed");
    const auto d = static_cast<std::size_t>(arch.d_model);
    Mat tgt(static_cast<std::size_t>(arch.chunk), Vec(d));
    for (std::size_t i = 0; i < tgt.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) tgt[i][c] = at(qe, i * d + c);
    for (int l = 0; l < arch.dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l);
      addInto(tgt, attention(p + ".self_attn", tgt, tgt));
      norm(tgt, p + ".norm1");
      addInto(tgt, attention(p + ".cross_attn", tgt, mem));
      norm(tgt, p + ".norm2");
      Mat ff;
      for (const Vec& x : tgt) ff.push_back(feedForward(p, x));
      addInto(tgt, ff);
      norm(tgt, p + ".norm3");
      requireFinite(tgt, p);
    }

    Mat out;
    for (const Vec& x : tgt) out.push_back(linear(t("head.weight"), t("head.bias"), x));
    requireFinite(out, "head");
    return out;
  }

  const Architecture& arch;
  const std::map<std::string, const Tensor*>& index;
};

void checkObservation(const Observation& obs, const Architecture& arch) {
  if (static_cast<int>(obs.arms.size()) != arch.arms) {
    throw ShapeError("policy: observation has " + std::to_string(obs.arms.size()) + " arms, weights expect " +
                     std::to_string(arch.arms));
  }
  for (const ArmObservation& a : obs.arms) {
    if (!a.force.pressures.sameShape(kSensorWidth, kSensorHeight) ||
        !a.deformation.displacements.sameShape(kSensorWidth, kSensorHeight)) {
      throw ShapeError("policy: observation grids must be 12x10");
    }
  }
}

float toFloatWithin(double v, double lo, double hi) {
  auto f = static_cast<float>(v);
  if (static_cast<double>(f) > hi) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
  if (static_cast<double>(f) < lo) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

}  // namespace

// ---------------------------------------------------------------- Action

std::array<double, kActionDim> Action::toVector() const {
  std::array<double, kActionDim> v{};
  std::copy(position.begin(), position.end(), v.begin());
  std::copy(orientation.begin(), orientation.end(), v.begin() + 3);
  std::copy(hand_joints.begin(), hand_joints.end(), v.begin() + 6);
  v[19] = compliance.lambda1;
  v[20] = compliance.lambda2;
  v[21] = compliance.eps;
  return v;
}

Action Action::fromVector(std::span<const double> v) {
  if (v.size() != static_cast<std::size_t>(kActionDim)) throw ShapeError("Action::fromVector: need 22 values");
  Action a;
  std::copy(v.begin(), v.begin() + 3, a.position.begin());
  std::copy(v.begin() + 3, v.begin() + 6, a.orientation.begin());
  std::copy(v.begin() + 6, v.begin() + 19, a.hand_joints.begin());
  a.compliance = {v[19], v[20], v[21]};
  return a;
}

// ---------------------------------------------------------------- bundle

void Architecture::validate() const {
  if (d_model < 1 || enc_layers < 1 || dec_layers < 1 || heads < 1 || chunk < 1 || ff < 1 || latent_dim < 1) {
    throw ConfigError("architecture: all sizes must be positive");
  }
  if (d_model % heads != 0) throw ConfigError("architecture: d_model must be divisible by heads");
  if (arms < 1 || arms > 2) throw ConfigError("architecture: arms must be 1 or 2");
}

std::size_t Tensor::count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::optional<std::string> WeightBundle::descriptorValue(const std::string& key) const {
  for (const auto& [k, v] : descriptor)
    if (k == key) return v;
  return std::nullopt;
}

void WeightBundle::setDescriptor(const std::string& key, const std::string& value) {
  for (auto& [k, v] : descriptor) {
    if (k == key) {
      v = value;
      return;
    }
  }
  descriptor.emplace_back(key, value);
}

const Tensor* WeightBundle::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

Tensor* WeightBundle::find(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

Architecture WeightBundle::architecture() const {
  Architecture a;
  a.d_model = parseInt(*this, "d_model");
  a.enc_layers = parseInt(*this, "enc_layers");
  a.dec_layers = parseInt(*this, "dec_layers");
  a.heads = parseInt(*this, "heads");
  a.chunk = parseInt(*this, "chunk");
  a.arms = parseInt(*this, "arms");
  a.ff = parseInt(*this, "ff");
  a.latent_dim = parseInt(*this, "latent_dim");
  if (parseInt(*this, "action_dim") != kActionDim) throw ShapeError("weights: action_dim must be 22");
  if (const auto order = descriptorValue("token_order"); order && *order != kTokenOrder) {
    throw FormatError("weights: unsupported token_order '" + *order + "'");
  }
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("weights: ") + e.what());
  }
  return a;
}

std::vector<std::pair<std::string, std::string>> describe(const Architecture& a) {
  return {{"d_model", std::to_string(a.d_model)},   {"enc_layers", std::to_string(a.enc_layers)},
          {"dec_layers", std::to_string(a.dec_layers)}, {"heads", std::to_string(a.heads)},
          {"chunk", std::to_string(a.chunk)},       {"arms", std::to_string(a.arms)},
          {"ff", std::to_string(a.ff)},             {"latent_dim", std::to_string(a.latent_dim)},
          {"action_dim", std::to_string(kActionDim)}, {"token_order", kTokenOrder}};
}

std::vector<std::pair<std::string, std::vector<std::uint32_t>>> requiredTensors(const Architecture& a) {
  std::vector<std::pair<std::string, std::vector<std::uint32_t>>> out;
  const int d = a.d_model;
  addLinear(out, "latent_proj", d, a.latent_dim);
  addLinear(out, "pose_proj", d, 6);
  addLinear(out, "force_proj", d, kSensorHeight);
  addLinear(out, "deform_proj", d, kSensorWidth);
  out.emplace_back("pos_embed", u32s({a.tokens(), d}));
  for (int l = 0; l < a.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    addAttention(out, p + ".attn", d);
    addNorm(out, p + ".norm1", d);
    addLinear(out, p + ".ff1", a.ff, d);
    addLinear(out, p + ".ff2", d, a.ff);
    addNorm(out, p + ".norm2", d);
  }
  out.emplace_back("query_embed", u32s({a.chunk, d}));
  for (int l = 0; l < a.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    addAttention(out, p + ".self_attn", d);
    addNorm(out, p + ".norm1", d);
    addAttention(out, p + ".cross_attn", d);
    addNorm(out, p + ".norm2", d);
    addLinear(out, p + ".ff1", a.ff, d);
    addLinear(out, p + ".ff2", d, a.ff);
    addNorm(out, p + ".norm3", d);
  }
  addLinear(out, "head", a.actionWidth(), d);
  return out;
}

WeightBundle seededBundle(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  WeightBundle b;
  b.descriptor = describe(arch);
  std::mt19937_64 rng(seed);
  for (auto& [name, dims] : requiredTensors(arch)) {
    Tensor t;
    t.dims = dims;
    t.data.resize(t.count());
    bool gain = false;
    if (isLayerNorm(name, gain)) {
      std::fill(t.data.begin(), t.data.end(), gain ? 1.0f : 0.0f);
    } else {
      const double scale = 1.0 / std::sqrt(static_cast<double>(dims.back()));
      for (float& v : t.data) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        v = static_cast<float>((2.0 * u - 1.0) * scale);
      }
    }
    b.tensors.emplace_back(name, std::move(t));
  }
  return b;
}

std::vector<std::uint8_t> serializeBundle(const WeightBundle& b) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(b.version);
  w.u32(static_cast<std::uint32_t>(b.descriptor.size()));
  for (const auto& [k, v] : b.descriptor) {
    w.str16(k);
    w.str16(v);
  }
  w.u32(static_cast<std::uint32_t>(b.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : b.tensors) {
    w.str16(name);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    w.u64(offset);
    offset += 4 * static_cast<std::uint64_t>(t.data.size());
  }
  w.u64(offset);
  for (const auto& [name, t] : b.tensors)
    for (float f : t.data) w.u32(std::bit_cast<std::uint32_t>(f));
  w.u32(crc(w.out));
  return std::move(w.out);
}

WeightBundle loadWeights(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(kMagic, kMagic + 4, bytes.begin())) throw FormatError("weights: bad magic");
  Reader head(bytes, bytes.size());
  head.pos = 4;
  WeightBundle b;
  b.version = static_cast<std::uint32_t>(head.uint(4));
  if (b.version != kBundleVersion) throw FormatError("weights: unsupported format version " + std::to_string(b.version));
  if (bytes.size() < 12) throw CorruptionError("weights: file truncated before checksum");
  const std::size_t body = bytes.size() - 4;
  Reader tail(bytes, bytes.size());
  tail.pos = body;
  if (static_cast<std::uint32_t>(tail.uint(4)) != crc(bytes.first(body))) {
    throw CorruptionError("weights: checksum mismatch");
  }

  Reader r(bytes, body);
  r.pos = 8;
  const auto ndesc = r.uint(4);
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < ndesc; ++i) {
    std::string k = r.str16();
    std::string v = r.str16();
    if (!seen.insert(k).second) throw FormatError("weights: duplicate descriptor key '" + k + "'");
    b.descriptor.emplace_back(std::move(k), std::move(v));
  }
  const auto ntensors = r.uint(4);
  std::vector<std::uint64_t> offsets;
  seen.clear();
  for (std::uint64_t i = 0; i < ntensors; ++i) {
    std::string name = r.str16();
    if (!seen.insert(name).second) throw FormatError("weights: duplicate tensor '" + name + "'");
    const auto rank = r.uint(4);
    if (rank > 8) throw FormatError("weights: tensor '" + name + "' has rank above 8");
    Tensor t;
    std::uint64_t count = 1;
    for (std::uint64_t k = 0; k < rank; ++k) {
      const auto d = static_cast<std::uint32_t>(r.uint(4));
      t.dims.push_back(d);
      count *= d;
      if (count > (std::uint64_t{1} << 32)) throw FormatError("weights: tensor '" + name + "' is implausibly large");
    }
    offsets.push_back(r.uint(8));
    b.tensors.emplace_back(std::move(name), std::move(t));
  }
  const auto data_size = r.uint(8);
  if (data_size != body - r.pos) throw CorruptionError("weights: data block length disagrees with file size");
  const std::size_t data0 = r.pos;
  std::uint64_t expected = 0;  // tensors are packed back to back in table order
  for (std::size_t i = 0; i < b.tensors.size(); ++i) {
    auto& [name, t] = b.tensors[i];
    const std::uint64_t n = t.count();
    const std::uint64_t off = offsets[i];
    if (off != expected || 4 * n > data_size - off) {
      throw CorruptionError("weights: tensor '" + name + "' does not match its table entry");
    }
    expected = off + 4 * n;
    t.data.resize(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < t.data.size(); ++k) {
      const std::size_t p = data0 + static_cast<std::size_t>(off) + 4 * k;
      std::uint32_t u = 0;
      for (int j = 0; j < 4; ++j) u |= static_cast<std::uint32_t>(bytes[p + static_cast<std::size_t>(j)]) << (8 * j);
      t.data[k] = std::bit_cast<float>(u);
    }
  }
  if (expected != data_size) throw CorruptionError("weights: trailing bytes after the last tensor");
  validateBundle(b);
  return b;
}

WeightBundle loadWeightsFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("weights: cannot open '" + path + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return loadWeights(bytes);
}

void saveWeightsFile(const WeightBundle& bundle, const std::string& path) {
  const auto bytes = serializeBundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("weights: cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("weights: short write to '" + path + "'");
}

// ---------------------------------------------------------------- runtime

PolicyRuntime::PolicyRuntime(WeightBundle bundle) : bundle_(std::move(bundle)) {
  arch_ = validateBundle(bundle_);
  for (const auto& [name, t] : bundle_.tensors) index_[name] = &t;
}

const Tensor& PolicyRuntime::tensor(const std::string& name) const { return *index_.at(name); }

std::vector<std::vector<double>> PolicyRuntime::rawOutputs(const Observation& obs) const {
  checkObservation(obs, arch_);
  std::vector<std::vector<double>> out = Forward(arch_, index_).run(obs);
  const auto mean = index_.find("action_mean");
  const auto stdev = index_.find("action_std");
  if (mean == index_.end() && stdev == index_.end()) return out;
  for (auto& row : out) {
    for (int arm = 0; arm < arch_.arms; ++arm) {
      for (int k = 0; k < kNormalizedDims; ++k) {
        const auto i = static_cast<std::size_t>(arm * kActionDim + k);
        if (stdev != index_.end()) row[i] *= at(*stdev->second, i);
        if (mean != index_.end()) row[i] += at(*mean->second, i);
      }
    }
  }
  return out;
}

ActionChunk PolicyRuntime::predictChunk(const Observation& obs, long start_tick) const {
  ActionChunk chunk;
  chunk.start_tick = start_tick;
  for (const auto& row : rawOutputs(obs)) {
    MultiAction step;
    for (int arm = 0; arm < arch_.arms; ++arm) {
      step.push_back(decodeAction(std::span<const double>(row).subspan(static_cast<std::size_t>(arm * kActionDim),
                                                                       kActionDim)));
    }
    chunk.actions.push_back(std::move(step));
  }
  return chunk;
}

double squash(double logit, const control::Range& range) {
  if (std::isnan(logit)) throw NumericError("squash: NaN logit");
  const double v = range.lo + (range.hi - range.lo) * detmath::sigmoid(logit);
  return static_cast<double>(toFloatWithin(v, range.lo, range.hi));
}

Action decodeAction(std::span<const double> raw) {
  if (raw.size() != static_cast<std::size_t>(kActionDim)) throw ShapeError("decodeAction: need 22 values");
  for (double v : raw)
    if (!std::isfinite(v)) throw NumericError("decodeAction: non-finite output");
  Action a;
  for (int i = 0; i < 3; ++i) a.position[i] = static_cast<float>(raw[i]);
  for (int i = 0; i < 3; ++i) a.orientation[i] = toFloatWithin(detmath::wrapAngle(raw[3 + i]), -kPi, kPi);
  for (int i = 0; i < kJointCount; ++i) a.hand_joints[i] = static_cast<float>(raw[6 + i]);
  a.compliance.lambda1 = squash(raw[19], control::kStiffnessRange);
  a.compliance.lambda2 = squash(raw[20], control::kDampingRange);
  a.compliance.eps = squash(raw[21], control::kDiffusionRange);
  return a;
}

Observation goldenObservation(int arms) {
  Observation obs;
  for (int arm = 0; arm < arms; ++arm) {
    ArmObservation a;
    for (int i = 0; i < 6; ++i) a.pose[i] = static_cast<double>((i + 1) * (arm % 2 == 0 ? 1 : -1)) / 16.0;
    a.force.pressures = Field(kSensorWidth, kSensorHeight);
    a.deformation.displacements = Field(kSensorWidth, kSensorHeight);
    for (int y = 0; y < kSensorHeight; ++y) {
      for (int x = 0; x < kSensorWidth; ++x) {
        a.force.pressures(x, y) = static_cast<double>((7 * x + 3 * y + 5 * arm) % 11) * 2.5;
        a.deformation.displacements(x, y) = static_cast<double>((5 * x + 9 * y + arm) % 13) * 0.25;
      }
    }
    obs.arms.push_back(std::move(a));
  }
  return obs;
}

std::string chunkToHex(const ActionChunk& chunk) {
  std::string out = "# step arm then 22 float32 bit patterns\n";
  char buf[16];
  for (int s = 0; s < chunk.horizon(); ++s) {
    for (int a = 0; a < chunk.arms(); ++a) {
      out += std::to_string(s) + " " + std::to_string(a);
      for (double v : chunk.actions[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)].toVector()) {
        std::snprintf(buf, sizeof buf, " %08x", std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        out += buf;
      }
      out += "\n";
    }
  }
  return out;
}

ActionChunk chunkFromHex(const std::string& text) {
  ActionChunk chunk;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int s = -1;
    int a = -1;
    if (!(ls >> s >> a) || s != chunk.horizon() - (a == 0 ? 0 : 1) || a < 0) {
      throw FormatError("golden: bad step/arm index in '" + line + "'");
    }
    std::array<double, kActionDim> v{};
    for (double& x : v) {
      std::string hex;
      if (!(ls >> hex) || hex.size() != 8) throw FormatError("golden: expected 22 hex words in '" + line + "'");
      std::uint32_t u = 0;
      const auto [p, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), u, 16);
      if (ec != std::errc{} || p != hex.data() + hex.size()) throw FormatError("golden: bad hex word '" + hex + "'");
      x = static_cast<double>(std::bit_cast<float>(u));
    }
    if (a == 0) chunk.actions.emplace_back();
    if (static_cast<int>(chunk.actions.back().size()) != a) throw FormatError("golden: arms out of order");
    chunk.actions.back().push_back(Action::fromVector(v));
  }
  if (chunk.actions.empty()) throw FormatError("golden: no actions");
  return chunk;
}

// ---------------------------------------------------------------- rotations

Matrix3 rodrigues(const std::array<double, 3>& w) {
  const double t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  const double t = std::sqrt(t2);
  double a = 0.0;  // sin t / t
  double b = 0.0;  // (1 - cos t) / t^2
  if (t < 1e-6) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
  }
  const Matrix3 k{{{0.0, -w[2], w[1]}, {w[2], 0.0, -w[0]}, {-w[1], w[0], 0.0}}};
  Matrix3 r{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double k2 = 0.0;
      for (int c = 0; c < 3; ++c) k2 += k[i][c] * k[c][j];
      r[i][j] = (i == j ? 1.0 : 0.0) + a * k[i][j] + b * k2;
    }
  }
  return r;
}

std::array<double, 3> axisAngle(const Matrix3& r) {
  const std::array<double, 3> s{0.5 * (r[2][1] - r[1][2]), 0.5 * (r[0][2] - r[2][0]), 0.5 * (r[1][0] - r[0][1])};
  const double sin_t = std::sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2]);
  const double cos_t = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0);
  const double t = std::atan2(sin_t, cos_t);
  if (t < 1e-6) {
    const double f = 1.0 + t * t / 6.0;  // t / sin t
    return {s[0] * f, s[1] * f, s[2] * f};
  }
  if (cos_t > -0.9) {
    const double f = t / sin_t;
    return {s[0] * f, s[1] * f, s[2] * f};
  }
  // Near pi the antisymmetric part vanishes; read the axis from the diagonal.
  int i = 0;
  for (int k = 1; k < 3; ++k)
    if (r[k][k] > r[i][i]) i = k;
  const int j = (i + 1) % 3;
  const int k = (i + 2) % 3;
  std::array<double, 3> axis{};
  axis[i] = std::sqrt(std::max(0.0, (r[i][i] - cos_t) / (1.0 - cos_t)));
  axis[j] = (r[i][j] + r[j][i]) / (2.0 * (1.0 - cos_t) * axis[i]);
  axis[k] = (r[i][k] + r[k][i]) / (2.0 * (1.0 - cos_t) * axis[i]);
  const double dot = axis[0] * s[0] + axis[1] * s[1] + axis[2] * s[2];
  const double sign = dot < 0.0 ? -1.0 : 1.0;
  const double norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  return {sign * t * axis[0] / norm, sign * t * axis[1] / norm, sign * t * axis[2] / norm};
}

// ---------------------------------------------------------------- scheduling

MultiAction ensembleStep(const std::vector<ActionChunk>& history, long tick, double m) {
  if (!std::isfinite(m) || m < 0.0) throw ConfigError("ensembleStep: decay must be finite and >= 0");
  std::vector<const ActionChunk*> covering;
  for (const ActionChunk& c : history)
    if (c.start_tick <= tick && tick < c.start_tick + c.horizon()) covering.push_back(&c);
  if (covering.empty()) throw SchedulingError("ensembleStep: no chunk covers tick " + std::to_string(tick));
  std::stable_sort(covering.begin(), covering.end(),
                   [](const ActionChunk* a, const ActionChunk* b) { return a->start_tick < b->start_tick; });

  const int arms = covering.front()->arms();
  std::vector<std::array<double, kActionDim>> acc(static_cast<std::size_t>(arms));
  double total = 0.0;
  for (std::size_t k = 0; k < covering.size(); ++k) {
    const ActionChunk& c = *covering[k];
    if (c.arms() != arms) throw ShapeError("ensembleStep: chunks disagree on arm count");
    const MultiAction& step = c.actions[static_cast<std::size_t>(tick - c.start_tick)];
    const double w = detmath::exp(-m * static_cast<double>(k));
    total += w;
    const double frac = w / total;
    for (int a = 0; a < arms; ++a) {
      const auto v = step[static_cast<std::size_t>(a)].toVector();
      auto& out = acc[static_cast<std::size_t>(a)];
      for (int i = 0; i < kActionDim; ++i) out[i] = k == 0 ? v[i] : out[i] + frac * (v[i] - out[i]);
    }
  }
  MultiAction result;
  for (const auto& v : acc) {
    Action a = Action::fromVector(v);
    a.compliance = control::clampToRanges(a.compliance);
    result.push_back(a);
  }
  return result;
}

ChunkScheduler::ChunkScheduler(double decay, bool ensemble) : decay_(decay), ensemble_(ensemble) {
  if (!std::isfinite(decay) || decay < 0.0) throw ConfigError("ChunkScheduler: decay must be finite and >= 0");
}

void ChunkScheduler::addChunk(ActionChunk chunk) {
  if (chunk.horizon() < 1) throw ShapeError("ChunkScheduler: empty chunk");
  if (chunk.period != kChunkPeriod) throw SchedulingError("ChunkScheduler: chunk period must be 0.1 s");
  for (const MultiAction& step : chunk.actions)
    if (static_cast<int>(step.size()) != chunk.arms()) throw ShapeError("ChunkScheduler: ragged chunk");
  if (!history_.empty() && history_.front().arms() != chunk.arms()) {
    throw ShapeError("ChunkScheduler: chunk arm count differs from history");
  }
  if (chunk.start_tick + chunk.horizon() <= tick_) return;  // entirely in the past
  history_.push_back(std::move(chunk));
}

MultiAction ChunkScheduler::next() {
  MultiAction out;
  if (ensemble_) {
    out = ensembleStep(history_, tick_, decay_);
  } else {
    const ActionChunk* newest = nullptr;
    for (const ActionChunk& c : history_)
      if (c.start_tick <= tick_ && tick_ < c.start_tick + c.horizon() && (!newest || c.start_tick >= newest->start_tick))
        newest = &c;
    if (!newest) throw SchedulingError("ChunkScheduler: no chunk covers tick " + std::to_string(tick_));
    out = newest->actions[static_cast<std::size_t>(tick_ - newest->start_tick)];
  }
  ++tick_;
  std::erase_if(history_, [&](const ActionChunk& c) { return c.start_tick + c.horizon() <= tick_; });
  return out;
}

}  // namespace softtouch::policy
