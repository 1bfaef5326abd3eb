// spline.hpp
// Uniform extended B-spline grids evaluated with the Cox-de Boor recursion.
//
// A grid of degree k with G intervals over [lo, hi] carries G + 2k + 1 knots
// (k extra knots extended on each side with the interior spacing) and spans
// G + k basis functions. Inputs are clamped to [lo, hi] before evaluation;
// on the interior the basis values are non-negative and sum to one.
#pragma once

#include <span>
#include <vector>

#include "rtsal/common.hpp"

namespace rtsal {

struct SplineGrid {
  int degree = 3;      // k
  int intervals = 5;   // G
  double lo = -1.0;
  double hi = 1.0;
  std::vector<double> knots;  // length G + 2k + 1, nondecreasing, uniform

  static SplineGrid make(int degree, int intervals, double lo, double hi);

  int basis_count() const { return intervals + degree; }

  // Writes all G+k basis values B_j^k(clamp(x)) into out. Entries outside the
  // local support [knot_j, knot_{j+k+1}] are exactly zero.
  void basis(double x, std::span<double> out) const;

  // Basis values plus derivatives d/dx B_j^k(clamp(x)). The derivative is the
  // standard degree-lowering formula; for k = 0 it is zero everywhere.
  void basis_and_deriv(double x, std::span<double> out, std::span<double> dout) const;
};

}  // namespace rtsal
