#pragma once

// Demonstration episodes: one file per episode, a text header followed by
// CRC-framed little-endian binary frames at the 0.1 s action cadence. The
// manifest lists episodes, their splits and the normalisation statistics.

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "softtouch/continuum.hpp"
#include "softtouch/controller.hpp"
#include "softtouch/policy.hpp"

namespace softtouch::dataset {

inline constexpr std::uint32_t kEpisodeVersion = 1;

enum class Phase : std::uint8_t { Approach = 0, Contact, Engage, Hold, Traverse, Insert, Release };

const char* phaseName(Phase p);
/// ConfigError on unknown names.
Phase parsePhase(const std::string& name);

struct ArmRecord {
  std::array<double, 6> pose{};  // m, axis-angle rad
  Field force;                   // kPa
  Field deformation;             // mm
  policy::Action action;         // executed
  control::PresetLevel preset = control::PresetLevel::Mid;
  // observer channel
  sim::MaterialParams model;
  double residual_rms = 0.0;
  bool confident = false;
  // controller channel
  double f_des = 0.0;
  double f_meas = 0.0;
  double ref_depth = 0.0;
  bool engaged = false;
  bool saturated = false;
  control::Violations violations;

  bool operator==(const ArmRecord&) const = default;
};

struct Frame {
  double timestamp = 0.0;  // s
  Phase phase = Phase::Approach;
  std::vector<ArmRecord> arms;

  bool operator==(const Frame&) const = default;
};

struct EpisodeHeader {
  std::uint32_t version = kEpisodeVersion;
  std::string task;
  int arms = 1;
  int grid_width = kSensorWidth;
  int grid_height = kSensorHeight;
  std::string material_hash;
  double period = policy::kChunkPeriod;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> meta;  // free-form, order preserved

  bool operator==(const EpisodeHeader&) const = default;
};

struct Episode {
  EpisodeHeader header;
  std::vector<Frame> frames;
  bool truncated = false;  // salvaged from a file cut mid-frame
};

/// FNV-1a over the canonical text form of the constants, as 16 hex digits.
std::string materialHash(const sim::MaterialParams& p);

/// The frame as it will read back: every stored value rounded to float32.
Frame quantize(const Frame& f);

std::vector<std::uint8_t> encodeHeader(const EpisodeHeader& h);
std::vector<std::uint8_t> encodeFrame(const Frame& f, const EpisodeHeader& h);
std::vector<std::uint8_t> serializeEpisode(const Episode& e);

/// Streams frames out of an in-memory file. FormatError on a bad or
/// unsupported header; CorruptionError on a damaged frame that is followed
/// by more data. A frame cut off by end of file ends the stream and sets
/// truncated().
class FrameReader {
 public:
  explicit FrameReader(std::vector<std::uint8_t> bytes);

  const EpisodeHeader& header() const { return header_; }
  std::optional<Frame> next();
  bool truncated() const { return truncated_; }

 private:
  std::vector<std::uint8_t> bytes_;
  EpisodeHeader header_;
  std::size_t pos_ = 0;
  bool truncated_ = false;
};

Episode parseEpisode(std::span<const std::uint8_t> bytes);
Episode readEpisodeFile(const std::string& path);
void writeEpisodeFile(const Episode& e, const std::string& path);

/// Append-only recorder. The header goes out on construction, each frame is
/// flushed as it arrives. Timestamps must advance by exactly one period.
class EpisodeWriter {
 public:
  EpisodeWriter(const std::string& path, EpisodeHeader header);
  ~EpisodeWriter();
  EpisodeWriter(const EpisodeWriter&) = delete;
  EpisodeWriter& operator=(const EpisodeWriter&) = delete;

  void append(const Frame& f);
  /// Closes the file; later calls do nothing.
  void finalize();
  bool finalized() const { return finalized_; }
  int frames() const { return frames_; }
  const std::string& path() const { return path_; }

 private:
  struct Impl;
  std::string path_;
  EpisodeHeader header_;
  std::unique_ptr<Impl> impl_;
  std::optional<double> last_time_;
  int frames_ = 0;
  bool finalized_ = false;
};

/// OrderingError unless `next` follows `prev` by one period (1e-9 s slack).
void requireCadence(std::optional<double> prev, double next, double period);

struct DimStats {
  double mean = 0.0;
  double std = 1.0;
  bool constant = false;
  bool operator==(const DimStats&) const = default;
};

struct NormStats {
  std::vector<DimStats> action;       // 22 per arm
  std::vector<DimStats> observation;  // per arm: pose(6), max force, max deformation, measured force
  bool operator==(const NormStats&) const = default;
};

std::vector<double> actionVector(const Frame& f);
std::vector<double> observationScalars(const Frame& f);

/// Two-pass mean and population standard deviation over every frame of
/// every episode. Dimensions whose spread is below 1e-12 of their scale get
/// std = 1 and the constant flag. UsageError on an empty set.
NormStats computeStats(const std::vector<Episode>& episodes);

struct ManifestEntry {
  std::string split;  // "train" or "val"
  std::string task;
  int frames = 0;
  std::string path;   // relative to the manifest
  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  std::vector<ManifestEntry> episodes;
  NormStats stats;
  bool operator==(const Manifest&) const = default;
};

/// Every fifth episode (index 4, 9, ...) is held out for validation.
std::string splitFor(int index);

std::string formatManifest(const Manifest& m);
/// FormatError on anything it cannot read back.
Manifest parseManifest(const std::string& text);

}  // namespace softtouch::dataset
