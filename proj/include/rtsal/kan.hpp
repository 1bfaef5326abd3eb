// kan.hpp
// Kolmogorov-Arnold layers: every edge (q,p) carries a learnable univariate
// function phi_{q,p}(x) = base_weight[q,p] * silu(x) + sum_j coeffs[q,p,j] * B_j(x),
// scaled per edge; node outputs are sums of edge outputs. Two stacked layers
// with a channel bottleneck form the thermal-prompt adapter.
#pragma once

#include <cstdint>

#include "rtsal/rng.hpp"
#include "rtsal/spline.hpp"
#include "rtsal/tensor.hpp"

namespace rtsal {

struct KanLayer {
  int n_in = 0;
  int n_out = 0;
  SplineGrid grid;
  Tensor spline_coeffs;  // [n_out, n_in, G+k]
  Tensor base_weight;    // [n_out, n_in]
  Tensor edge_scale;     // [n_out, n_in]

  // Trainable initialization: base path like a linear layer, small spline
  // coefficients, unit edge scales.
  static KanLayer create(int n_in, int n_out, const SplineGrid& grid, Rng& rng);

  // Zero-output initialization: coefficients and base weights zero, unit edge
  // scales. The layer maps everything to zero but still receives gradients on
  // base/spline parameters, so it can leave the zero point during training.
  // (A layer with edge scales also zero is permanently gradient-dead.)
  static KanLayer create_zero_output(int n_in, int n_out, const SplineGrid& grid);
};

// Forward through one layer; x is [..., n_in], result [..., n_out].
// Differentiable w.r.t. x and all three parameter tensors. The spline
// argument is clamped to the grid domain; the silu base path uses raw x.
Tensor kan_layer_forward(const KanLayer& layer, const Tensor& x);

// up(down(x)); the inner/outer composition of the representation.
Tensor kan_stack_forward(const KanLayer& down, const KanLayer& up, const Tensor& x);

struct KanAdapter {
  Tensor align_w;  // [C_t, C] pointwise conv aligning thermal channels
  Tensor align_b;  // [C]
  KanLayer down;   // C -> C/r
  KanLayer up;     // C/r -> C
  int reduction = 4;

  static KanAdapter create(int channels, int thermal_channels, int reduction,
                           const SplineGrid& grid, Rng& rng);
};

// Injects the thermal prompt before and after the KAN stack:
//   T' = align(resize(T));  out = F + kan_stack(F + T') + T'.
// F is [H,W,C]; T is [H',W',C_t] and is nearest-resized to HxW.
Tensor adapter_forward(const KanAdapter& adapter, const Tensor& f_rgb, const Tensor& thermal);

int64_t count_params(const KanLayer& layer);
int64_t count_params(const KanAdapter& adapter);

// Closed forms used by the parameter report.
int64_t kan_stack_param_count(int channels, int reduction, int basis_count);
int64_t mlp_adapter_param_count(int channels, int reduction);  // C -> C/r -> C, silu, biases
// Crossover bound: the KAN stack is smaller than the two-linear-layer MLP
// baseline exactly when basis_count + 2 < this threshold.
double kan_vs_mlp_threshold(int channels, int reduction);

}  // namespace rtsal
