#include "softtouch/observer.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <string>

namespace softtouch::observer {

namespace {

constexpr double kMinPositive = 1e-9;

bool rowUsable(double pressure, const IdentifyOptions& options) {
  return pressure > 0.0 && pressure < options.pressure_ceiling && std::isfinite(pressure);
}

double fitDiffusion(const HistoryBuffer& buffer, double decay_rate, double prior) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t j = 0; j < buffer.size(); ++j) {
    const auto& s = buffer[j];
    for (std::size_t k = 0; k < s.free_laplacian.size(); ++k) {
      const double lap = s.free_laplacian[k];
      num += lap * (s.free_phi_dot[k] + decay_rate * s.free_phi[k]);
      den += lap * lap;
    }
  }
  // Needs curvature well above round-off to be worth fitting.
  if (!(den > 1e-12) || !std::isfinite(num)) return prior;
  return std::clamp(num / den, 0.0, 1.0);
}

ParamEstimate finalize(const HistoryBuffer& buffer, const std::vector<TauFit>& fits, const IdentifyOptions& options) {
  ParamEstimate est;
  est.params.D = options.prior_D;
  int best = -1;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    if (!fits[i].full_rank) continue;
    if (best < 0 || fits[i].residual_rms < fits[static_cast<std::size_t>(best)].residual_rms) best = static_cast<int>(i);
  }
  if (best < 0) return est;

  const TauFit& f = fits[static_cast<std::size_t>(best)];
  est.status = EstimateStatus::Identified;
  est.tau_index = best;
  est.residual_rms = f.residual_rms;
  est.mean_pressure = f.mean_pressure;
  const bool positive = f.k_e > 0.0 && f.k_v > 0.0 && f.k_m > 0.0;
  est.params.k_e = std::max(f.k_e, kMinPositive);
  est.params.k_v = std::max(f.k_v, kMinPositive);
  est.params.k_m = std::max(f.k_m, kMinPositive);
  est.params.tau = f.tau;
  est.params.D = fitDiffusion(buffer, est.params.k_e / est.params.k_v, options.prior_D);
  est.confident = positive && f.residual_rms <= options.confidence_fraction * f.mean_pressure;
  return est;
}

}  // namespace

HistoryBuffer::HistoryBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("HistoryBuffer: capacity must be positive");
}

void HistoryBuffer::push(ObserverSample sample) {
  if (sample.phi.size() != sample.phi_dot.size() || sample.phi.size() != sample.pressure.size()) {
    throw ConfigError("HistoryBuffer: sample channels differ in length");
  }
  if (sample.free_phi.size() != sample.free_phi_dot.size() || sample.free_phi.size() != sample.free_laplacian.size()) {
    throw ConfigError("HistoryBuffer: free-node channels differ in length");
  }
  if (!samples_.empty()) {
    if (!(sample.timestamp > samples_.back().timestamp)) {
      throw OrderingError("HistoryBuffer: timestamp " + std::to_string(sample.timestamp) +
                          " does not follow " + std::to_string(samples_.back().timestamp));
    }
    if (sample.phi.size() != samples_.front().phi.size()) {
      throw ConfigError("HistoryBuffer: node count changed within the buffer");
    }
  }
  if (samples_.size() == capacity_) samples_.pop_front();
  samples_.push_back(std::move(sample));
}

std::vector<double> logTauGrid(double lo, double hi, int n) {
  if (n < 2 || !(lo > 0.0) || !(hi > lo)) throw ConfigError("logTauGrid: need n >= 2 and 0 < lo < hi");
  std::vector<double> grid(static_cast<std::size_t>(n));
  const double ratio = std::log(hi / lo);
  for (int i = 0; i < n; ++i) grid[static_cast<std::size_t>(i)] = lo * std::exp(ratio * i / (n - 1));
  grid.back() = hi;
  return grid;
}

TauFit fitForTau(const HistoryBuffer& buffer, double tau, const IdentifyOptions& options) {
  TauFit fit;
  fit.tau = tau;
  const std::size_t n = buffer.size();
  const std::size_t nodes = buffer.nodeCount();
  if (n < 2 || nodes == 0) return fit;

  // Normalised Maxwell strain per node, zero at the window start.
  std::vector<double> s(n * nodes, 0.0);
  for (std::size_t j = 1; j < n; ++j) {
    const double dt = buffer[j].timestamp - buffer[j - 1].timestamp;
    const double decay = std::exp(-dt / tau);
    const double gain = (tau / dt) * (1.0 - decay);
    for (std::size_t k = 0; k < nodes; ++k) {
      s[j * nodes + k] = s[(j - 1) * nodes + k] * decay + gain * (buffer[j].phi[k] - buffer[j - 1].phi[k]);
    }
  }

  std::size_t rows = 0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t k = 0; k < nodes; ++k) rows += rowUsable(buffer[j].pressure[k], options) ? 1 : 0;
  const auto cols = static_cast<Eigen::Index>(3 + nodes);
  if (rows < static_cast<std::size_t>(cols)) return fit;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rows), cols);
  Eigen::VectorXd b(static_cast<Eigen::Index>(rows));
  Eigen::Index r = 0;
  double pressure_sum = 0.0;
  const double t0 = buffer.front().timestamp;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& sample = buffer[j];
    const double initial_decay = std::exp(-(sample.timestamp - t0) / tau);
    for (std::size_t k = 0; k < nodes; ++k) {
      if (!rowUsable(sample.pressure[k], options)) continue;
      a(r, 0) = sample.phi[k];
      a(r, 1) = sample.phi_dot[k];
      a(r, 2) = s[j * nodes + k];
      a(r, static_cast<Eigen::Index>(3 + k)) = initial_decay;
      b[r] = sample.pressure[k];
      pressure_sum += std::abs(sample.pressure[k]);
      ++r;
    }
  }
  fit.rows = rows;
  fit.mean_pressure = pressure_sum / static_cast<double>(rows);

  Eigen::VectorXd scale(cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    const double norm = a.col(c).norm();
    scale[c] = norm > 0.0 ? 1.0 / norm : 0.0;
  }
  const Eigen::MatrixXd scaled = a * scale.asDiagonal();
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
  qr.setThreshold(options.rank_tolerance);
  if (qr.rank() < cols || (scale.array() == 0.0).any()) return fit;

  const Eigen::VectorXd x = scale.asDiagonal() * qr.solve(b);
  if (!x.allFinite()) return fit;
  fit.full_rank = true;
  fit.k_e = x[0];
  fit.k_v = x[1];
  fit.k_m = x[2];
  fit.residual_rms = std::sqrt((a * x - b).squaredNorm() / static_cast<double>(rows));
  return fit;
}

ParamEstimate identify(const HistoryBuffer& buffer, const IdentifyOptions& options) {
  if (buffer.size() < options.min_samples) {
    throw NotReadyError("identify: " + std::to_string(buffer.size()) + " samples, need " +
                        std::to_string(options.min_samples));
  }
  std::vector<TauFit> fits;
  fits.reserve(options.tau_grid.size());
  for (double tau : options.tau_grid) fits.push_back(fitForTau(buffer, tau, options));
  return finalize(buffer, fits, options);
}

AmortizedIdentifier::AmortizedIdentifier(IdentifyOptions options) : options_(std::move(options)) {
  if (options_.tau_grid.empty()) throw ConfigError("AmortizedIdentifier: empty tau grid");
}

void AmortizedIdentifier::reset() {
  snapshot_.reset();
  fits_.clear();
}

std::optional<ParamEstimate> AmortizedIdentifier::advance(const HistoryBuffer& live) {
  if (!snapshot_) {
    if (live.size() < options_.min_samples) return std::nullopt;
    snapshot_ = live;
    fits_.clear();
  }
  fits_.push_back(fitForTau(*snapshot_, options_.tau_grid[fits_.size()], options_));
  if (fits_.size() < options_.tau_grid.size()) return std::nullopt;
  ParamEstimate est = finalize(*snapshot_, fits_, options_);
  reset();
  return est;
}

}  // namespace softtouch::observer
