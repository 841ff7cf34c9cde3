#pragma once

// Online identification of the viscoelastic surface constants from a short
// history of deformation, deformation rate and pressure at a few contact
// nodes. For each relaxation-time candidate the normalised Maxwell strain
// s_tau is rebuilt recursively from the deformation history, and
//
//   p = k_e phi + k_v phi_dot + k_m s_tau + sum_k sigma0_k exp(-(t - t0) / tau) [node k]
//
// is solved by linear least squares. The last term absorbs the unknown
// Maxwell stress already present when the window opens. The candidate with the
// smallest residual wins.

#include <cstddef>
#include <deque>
#include <optional>
#include <vector>

#include "softtouch/continuum.hpp"

namespace softtouch::observer {

struct ObserverSample {
  double timestamp = 0.0;
  std::vector<double> phi;       // m, one entry per representative node
  std::vector<double> phi_dot;   // m/s
  std::vector<double> pressure;  // Pa
  // Optional free-node channel used to fit the diffusion coefficient.
  std::vector<double> free_phi;
  std::vector<double> free_phi_dot;
  std::vector<double> free_laplacian;  // 1/m
};

class HistoryBuffer {
 public:
  explicit HistoryBuffer(std::size_t capacity = 400);

  /// Appends a sample, evicting the oldest at capacity. OrderingError unless
  /// the timestamp is strictly later than the newest; ConfigError if the node
  /// count differs from earlier samples.
  void push(ObserverSample sample);
  void clear() { samples_.clear(); }

  std::size_t size() const { return samples_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return samples_.empty(); }
  const ObserverSample& operator[](std::size_t i) const { return samples_[i]; }
  const ObserverSample& front() const { return samples_.front(); }
  const ObserverSample& back() const { return samples_.back(); }
  std::size_t nodeCount() const { return samples_.empty() ? 0 : samples_.front().phi.size(); }

 private:
  std::size_t capacity_;
  std::deque<ObserverSample> samples_;
};

/// n log-spaced relaxation times from lo to hi inclusive.
std::vector<double> logTauGrid(double lo = 0.05, double hi = 5.0, int n = 25);

struct IdentifyOptions {
  std::vector<double> tau_grid = logTauGrid();
  double confidence_fraction = 0.02;  // residual_rms / mean pressure
  std::size_t min_samples = 50;
  double prior_D = 0.02;
  double rank_tolerance = 1e-9;
  double pressure_ceiling = 49.9e3;  // Pa; rows at the sensor clamp are skipped
};

enum class EstimateStatus { Identified, Unidentifiable };

struct ParamEstimate {
  sim::MaterialParams params;
  double residual_rms = 0.0;  // Pa
  bool confident = false;
  EstimateStatus status = EstimateStatus::Unidentifiable;
  int tau_index = -1;
  double mean_pressure = 0.0;
};

struct TauFit {
  double tau = 0.0;
  bool full_rank = false;
  double k_e = 0.0;
  double k_v = 0.0;
  double k_m = 0.0;
  double residual_rms = 0.0;
  double mean_pressure = 0.0;
  std::size_t rows = 0;
};

TauFit fitForTau(const HistoryBuffer& buffer, double tau, const IdentifyOptions& options = {});

/// Full sweep over options.tau_grid. NotReadyError below min_samples.
ParamEstimate identify(const HistoryBuffer& buffer, const IdentifyOptions& options = {});

/// Same estimator spread over control cycles: each advance() evaluates one tau
/// candidate on a snapshot taken when the sweep started, and returns an
/// estimate once the sweep completes.
class AmortizedIdentifier {
 public:
  explicit AmortizedIdentifier(IdentifyOptions options = {});

  std::optional<ParamEstimate> advance(const HistoryBuffer& live);
  const IdentifyOptions& options() const { return options_; }
  void reset();

 private:
  IdentifyOptions options_;
  std::optional<HistoryBuffer> snapshot_;
  std::vector<TauFit> fits_;
};

}  // namespace softtouch::observer
