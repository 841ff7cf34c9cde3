#pragma once

#include "softtouch/grid.hpp"

namespace softtouch {

enum class EdgeCondition {
  Neumann,        // zero normal flux: missing neighbours mirror the centre node
  DirichletZero,  // missing neighbours are held at zero
};

/// Five-point Laplacian of `f` at node (x, y) with spacing h.
inline double laplacianAt(const Field& f, int x, int y, double h, EdgeCondition edges) {
  const double c = f(x, y);
  double sum = 0.0;
  int inside = 0;
  auto visit = [&](int nx, int ny) {
    if (nx >= 0 && ny >= 0 && nx < f.width() && ny < f.height()) {
      sum += f(nx, ny);
      ++inside;
    }
  };
  visit(x - 1, y);
  visit(x + 1, y);
  visit(x, y - 1);
  visit(x, y + 1);
  const int diag = edges == EdgeCondition::Neumann ? inside : 4;
  return (sum - diag * c) / (h * h);
}

inline Field laplacian(const Field& f, double h, EdgeCondition edges) {
  Field out(f.width(), f.height());
  for (int y = 0; y < f.height(); ++y)
    for (int x = 0; x < f.width(); ++x) out(x, y) = laplacianAt(f, x, y, h, edges);
  return out;
}

/// Laplacian over the subgraph of nodes set in `mask`, no flux across the mask
/// boundary. Nodes outside the mask get zero.
inline Field maskedLaplacian(const Field& f, const Mask& mask, double h) {
  requireSameShape(f, mask, "maskedLaplacian");
  Field out(f.width(), f.height());
  for (int y = 0; y < f.height(); ++y) {
    for (int x = 0; x < f.width(); ++x) {
      if (!mask(x, y)) continue;
      double acc = 0.0;
      auto visit = [&](int nx, int ny) {
        if (nx >= 0 && ny >= 0 && nx < f.width() && ny < f.height() && mask(nx, ny)) acc += f(nx, ny) - f(x, y);
      };
      visit(x - 1, y);
      visit(x + 1, y);
      visit(x, y - 1);
      visit(x, y + 1);
      out(x, y) = acc / (h * h);
    }
  }
  return out;
}

}  // namespace softtouch
