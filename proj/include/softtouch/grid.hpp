#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "softtouch/errors.hpp"

namespace softtouch {

// Sensor-native grid: 12 columns (x) by 10 rows (y), 2 mm pitch.
inline constexpr int kSensorWidth = 12;
inline constexpr int kSensorHeight = 10;
inline constexpr double kSensorPitch = 2e-3;

/// Dense row-major W x H grid. Element (x, y) lives at index y * width + x.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{}) : width_(width), height_(height) {
    if (width <= 0 || height <= 0) {
      throw ConfigError("grid dimensions must be positive, got " + std::to_string(width) + "x" +
                        std::to_string(height));
    }
    data_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int size() const { return width_ * height_; }
  bool empty() const { return data_.empty(); }

  T& operator()(int x, int y) { return data_[index(x, y)]; }
  const T& operator()(int x, int y) const { return data_[index(x, y)]; }
  T& operator[](int i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](int i) const { return data_[static_cast<std::size_t>(i)]; }

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  bool sameShape(int w, int h) const { return width_ == w && height_ == h; }
  template <typename U>
  bool sameShape(const Grid<U>& other) const {
    return width_ == other.width() && height_ == other.height();
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool operator==(const Grid& other) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using Field = Grid<double>;
using Mask = Grid<std::uint8_t>;

template <typename A, typename B>
void requireSameShape(const Grid<A>& a, const Grid<B>& b, const char* what) {
  if (!a.sameShape(b)) {
    throw ConfigError(std::string(what) + ": grid dimension mismatch (" + std::to_string(a.width()) + "x" +
                      std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                      std::to_string(b.height()) + ")");
  }
}

inline bool allFinite(const Field& f) {
  return std::all_of(f.values().begin(), f.values().end(), [](double v) { return std::isfinite(v); });
}

inline double maxAbs(const Field& f) {
  double m = 0.0;
  for (double v : f.values()) m = std::max(m, std::abs(v));
  return m;
}

inline int countSet(const Mask& m) {
  int n = 0;
  for (auto v : m.values()) n += v ? 1 : 0;
  return n;
}

inline Mask fullMask(int width, int height) { return Mask(width, height, 1); }

/// Axis-aligned rectangle [x0, x0 + w) x [y0, y0 + h) clipped to the grid.
inline Mask rectMask(int width, int height, int x0, int y0, int w, int h) {
  Mask m(width, height, 0);
  for (int y = std::max(0, y0); y < std::min(height, y0 + h); ++y) {
    for (int x = std::max(0, x0); x < std::min(width, x0 + w); ++x) m(x, y) = 1;
  }
  return m;
}

}  // namespace softtouch
