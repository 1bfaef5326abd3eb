#include "rtsal/spline.hpp"

#include <algorithm>
#include <cmath>

namespace rtsal {

SplineGrid SplineGrid::make(int degree, int intervals, double lo, double hi) {
  if (degree < 0) throw ConfigError("spline grid: degree must be >= 0");
  if (intervals < 1) throw ConfigError("spline grid: interval count must be >= 1");
  if (!(lo < hi)) throw ConfigError("spline grid: empty domain [lo, hi]");
  SplineGrid g;
  g.degree = degree;
  g.intervals = intervals;
  g.lo = lo;
  g.hi = hi;
  const double h = (hi - lo) / intervals;
  g.knots.resize(static_cast<size_t>(intervals + 2 * degree + 1));
  for (int i = 0; i <= intervals + 2 * degree; ++i) {
    g.knots[static_cast<size_t>(i)] = lo + (i - degree) * h;
  }
  return g;
}

namespace {

// Knot span s such that knot[k+s] <= x < knot[k+s+1], clamped to the interior.
int span_index(const SplineGrid& g, double x) {
  const double h = (g.hi - g.lo) / g.intervals;
  int s = static_cast<int>(std::floor((x - g.lo) / h));
  return std::clamp(s, 0, g.intervals - 1);
}

// Local de Boor triangle: writes the k+1 nonzero values B_{s..s+k}^k(x).
void local_basis(const SplineGrid& g, double x, int s, int degree, double* n) {
  const int i = degree + s;  // span in knot indexing for the requested degree
  n[0] = 1.0;
  std::vector<double> left(static_cast<size_t>(degree) + 1);
  std::vector<double> right(static_cast<size_t>(degree) + 1);
  for (int d = 1; d <= degree; ++d) {
    left[static_cast<size_t>(d)] = x - g.knots[static_cast<size_t>(i + 1 - d)];
    right[static_cast<size_t>(d)] = g.knots[static_cast<size_t>(i + d)] - x;
    double saved = 0.0;
    for (int r = 0; r < d; ++r) {
      const double denom = right[static_cast<size_t>(r + 1)] + left[static_cast<size_t>(d - r)];
      const double temp = n[r] / denom;
      n[r] = saved + right[static_cast<size_t>(r + 1)] * temp;
      saved = left[static_cast<size_t>(d - r)] * temp;
    }
    n[d] = saved;
  }
}

}  // namespace

void SplineGrid::basis(double x, std::span<double> out) const {
  const int count = basis_count();
  if (static_cast<int>(out.size()) != count) {
    throw DimensionError("spline basis: output span size mismatch");
  }
  std::fill(out.begin(), out.end(), 0.0);
  const double xc = std::clamp(x, lo, hi);
  const int s = span_index(*this, xc);
  std::vector<double> n(static_cast<size_t>(degree) + 1);
  local_basis(*this, xc, s, degree, n.data());
  for (int r = 0; r <= degree; ++r) out[static_cast<size_t>(s + r)] = n[static_cast<size_t>(r)];
}

void SplineGrid::basis_and_deriv(double x, std::span<double> out, std::span<double> dout) const {
  const int count = basis_count();
  if (static_cast<int>(out.size()) != count || static_cast<int>(dout.size()) != count) {
    throw DimensionError("spline basis: output span size mismatch");
  }
  std::fill(out.begin(), out.end(), 0.0);
  std::fill(dout.begin(), dout.end(), 0.0);
  const double xc = std::clamp(x, lo, hi);
  const int s = span_index(*this, xc);
  std::vector<double> n(static_cast<size_t>(degree) + 1);
  local_basis(*this, xc, s, degree, n.data());
  for (int r = 0; r <= degree; ++r) out[static_cast<size_t>(s + r)] = n[static_cast<size_t>(r)];
  if (degree == 0) return;

  // Degree k-1 values on the same span: nonzero B_{s+1..s+k}^{k-1}.
  std::vector<double> n1(static_cast<size_t>(degree));
  {
    // The degree-(k-1) triangle around span s uses knot index (k-1) + (s+1).
    const SplineGrid& g = *this;
    const int i = g.degree + s;  // same knot span
    n1[0] = 1.0;
    std::vector<double> left(static_cast<size_t>(degree));
    std::vector<double> right(static_cast<size_t>(degree));
    for (int d = 1; d <= degree - 1; ++d) {
      left[static_cast<size_t>(d)] = xc - g.knots[static_cast<size_t>(i + 1 - d)];
      right[static_cast<size_t>(d)] = g.knots[static_cast<size_t>(i + d)] - xc;
      double saved = 0.0;
      for (int r = 0; r < d; ++r) {
        const double denom = right[static_cast<size_t>(r + 1)] + left[static_cast<size_t>(d - r)];
        const double temp = n1[static_cast<size_t>(r)] / denom;
        n1[static_cast<size_t>(r)] = saved + right[static_cast<size_t>(r + 1)] * temp;
        saved = left[static_cast<size_t>(d - r)] * temp;
      }
      n1[static_cast<size_t>(d)] = saved;
    }
  }
  // n1[r] = B_{s+1+r}^{k-1}(x) for r = 0..k-1.
  auto lower = [&](int j) -> double {
    const int r = j - (s + 1);
    return (r >= 0 && r < degree) ? n1[static_cast<size_t>(r)] : 0.0;
  };
  for (int j = s; j <= s + degree; ++j) {
    const double d1 = knots[static_cast<size_t>(j + degree)] - knots[static_cast<size_t>(j)];
    const double d2 =
        knots[static_cast<size_t>(j + degree + 1)] - knots[static_cast<size_t>(j + 1)];
    dout[static_cast<size_t>(j)] = degree * (lower(j) / d1 - lower(j + 1) / d2);
  }
}

}  // namespace rtsal
