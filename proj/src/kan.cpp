#include "rtsal/kan.hpp"

#include <cmath>
#include <memory>

namespace rtsal {

namespace {

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_layer(const KanLayer& layer) {
  if (layer.n_in <= 0 || layer.n_out <= 0) throw ConfigError("kan layer: empty dimensions");
  const int nb = layer.grid.basis_count();
  if (layer.spline_coeffs.shape() != std::vector<int>{layer.n_out, layer.n_in, nb} ||
      layer.base_weight.shape() != std::vector<int>{layer.n_out, layer.n_in} ||
      layer.edge_scale.shape() != std::vector<int>{layer.n_out, layer.n_in}) {
    throw ConfigError("kan layer: parameter shapes do not match n_in/n_out/grid");
  }
}

}  // namespace

KanLayer KanLayer::create(int n_in, int n_out, const SplineGrid& grid, Rng& rng) {
  KanLayer layer;
  layer.n_in = n_in;
  layer.n_out = n_out;
  layer.grid = grid;
  const int nb = grid.basis_count();
  const double base_bound = 1.0 / std::sqrt(static_cast<double>(n_in));
  const double coeff_bound = 0.1 / std::sqrt(static_cast<double>(nb));
  std::vector<double> coeffs(static_cast<size_t>(n_out) * n_in * nb);
  for (auto& v : coeffs) v = rng.uniform(-coeff_bound, coeff_bound);
  std::vector<double> base(static_cast<size_t>(n_out) * n_in);
  for (auto& v : base) v = rng.uniform(-base_bound, base_bound);
  layer.spline_coeffs = Tensor::from_data({n_out, n_in, nb}, std::move(coeffs), true);
  layer.base_weight = Tensor::from_data({n_out, n_in}, std::move(base), true);
  layer.edge_scale = Tensor::from_data(
      {n_out, n_in}, std::vector<double>(static_cast<size_t>(n_out) * n_in, 1.0), true);
  return layer;
}

KanLayer KanLayer::create_zero_output(int n_in, int n_out, const SplineGrid& grid) {
  KanLayer layer;
  layer.n_in = n_in;
  layer.n_out = n_out;
  layer.grid = grid;
  const int nb = grid.basis_count();
  layer.spline_coeffs = Tensor::zeros({n_out, n_in, nb}, true);
  layer.base_weight = Tensor::zeros({n_out, n_in}, true);
  layer.edge_scale = Tensor::from_data(
      {n_out, n_in}, std::vector<double>(static_cast<size_t>(n_out) * n_in, 1.0), true);
  return layer;
}

Tensor kan_layer_forward(const KanLayer& layer, const Tensor& x) {
  check_layer(layer);
  if (x.ndim() < 1 || x.shape().back() != layer.n_in) {
    throw DimensionError("kan layer: input " + shape_str(x.shape()) + " does not end in " +
                         std::to_string(layer.n_in) + " channels");
  }
  const bool flat = x.ndim() == 2;
  const Tensor x2 = flat ? x : reshape(x, {static_cast<int>(x.numel() / layer.n_in), layer.n_in});

  const int rows = x2.dim(0);
  const int n_in = layer.n_in;
  const int n_out = layer.n_out;
  const int nb = layer.grid.basis_count();
  const SplineGrid grid = layer.grid;

  const auto& xv = x2.values();
  const auto& cv = layer.spline_coeffs.values();
  const auto& bv = layer.base_weight.values();
  const auto& sv = layer.edge_scale.values();

  // Per-element caches reused by the backward rule.
  auto basis = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * n_in * nb);
  auto dbasis = std::make_shared<std::vector<double>>();
  auto act = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * n_in);
  auto dact = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * n_in);

  const bool wants_grad = grad_enabled() &&
                          (x2.requires_grad() || layer.spline_coeffs.requires_grad() ||
                           layer.base_weight.requires_grad() || layer.edge_scale.requires_grad());
  if (wants_grad) dbasis->resize(static_cast<size_t>(rows) * n_in * nb);

  for (int r = 0; r < rows; ++r) {
    for (int p = 0; p < n_in; ++p) {
      const size_t e = static_cast<size_t>(r) * n_in + p;
      const double xi = xv[e];
      std::span<double> bs(&(*basis)[e * nb], static_cast<size_t>(nb));
      if (wants_grad) {
        std::span<double> dbs(&(*dbasis)[e * nb], static_cast<size_t>(nb));
        grid.basis_and_deriv(xi, bs, dbs);
        if (xi < grid.lo || xi > grid.hi) {
          std::fill(dbs.begin(), dbs.end(), 0.0);  // clamped: no spline gradient outside
        }
      } else {
        grid.basis(xi, bs);
      }
      const double s = sigmoid_scalar(xi);
      (*act)[e] = xi * s;
      (*dact)[e] = s * (1.0 + xi * (1.0 - s));
    }
  }

  std::vector<double> out(static_cast<size_t>(rows) * n_out, 0.0);
  for (int r = 0; r < rows; ++r) {
    const double* brow = &(*basis)[static_cast<size_t>(r) * n_in * nb];
    const double* arow = &(*act)[static_cast<size_t>(r) * n_in];
    double* orow = &out[static_cast<size_t>(r) * n_out];
    for (int q = 0; q < n_out; ++q) {
      double acc = 0.0;
      const size_t edge0 = static_cast<size_t>(q) * n_in;
      for (int p = 0; p < n_in; ++p) {
        const size_t e = edge0 + p;
        double spline = 0.0;
        const double* cvec = &cv[e * nb];
        const double* bvec = &brow[static_cast<size_t>(p) * nb];
        for (int j = 0; j < nb; ++j) spline += cvec[j] * bvec[j];
        acc += sv[e] * (bv[e] * arow[p] + spline);
      }
      orow[q] = acc;
    }
  }

  Tensor x_in = x2;
  Tensor coeffs = layer.spline_coeffs;
  Tensor base = layer.base_weight;
  Tensor scale = layer.edge_scale;
  Tensor y = make_op(
      {rows, n_out}, std::move(out), {x_in, coeffs, base, scale},
      [x_in, coeffs, base, scale, basis, dbasis, act, dact, rows, n_in, n_out,
       nb](std::span<const double> g) {
        auto gx = grad_buffer(x_in);
        auto gc = grad_buffer(coeffs);
        auto gb = grad_buffer(base);
        auto gs = grad_buffer(scale);
        const auto& cv2 = coeffs.values();
        const auto& bv2 = base.values();
        const auto& sv2 = scale.values();
        for (int r = 0; r < rows; ++r) {
          const double* grow = &g[static_cast<size_t>(r) * n_out];
          const double* brow = &(*basis)[static_cast<size_t>(r) * n_in * nb];
          const double* arow = &(*act)[static_cast<size_t>(r) * n_in];
          const double* darow = &(*dact)[static_cast<size_t>(r) * n_in];
          for (int q = 0; q < n_out; ++q) {
            const double gq = grow[q];
            if (gq == 0.0) continue;
            const size_t edge0 = static_cast<size_t>(q) * n_in;
            for (int p = 0; p < n_in; ++p) {
              const size_t e = edge0 + p;
              const double* bvec = &brow[static_cast<size_t>(p) * nb];
              const double* cvec = &cv2[e * nb];
              double spline = 0.0;
              for (int j = 0; j < nb; ++j) spline += cvec[j] * bvec[j];
              const double edge_out = bv2[e] * arow[p] + spline;
              if (!gs.empty()) gs[e] += gq * edge_out;
              const double gqs = gq * sv2[e];
              if (!gb.empty()) gb[e] += gqs * arow[p];
              if (!gc.empty()) {
                double* cdst = &gc[e * nb];
                for (int j = 0; j < nb; ++j) cdst[j] += gqs * bvec[j];
              }
              if (!gx.empty()) {
                const double* dbvec = &(*dbasis)[(static_cast<size_t>(r) * n_in + p) * nb];
                double dspline = 0.0;
                for (int j = 0; j < nb; ++j) dspline += cvec[j] * dbvec[j];
                gx[static_cast<size_t>(r) * n_in + p] += gqs * (bv2[e] * darow[p] + dspline);
              }
            }
          }
        }
      });
  if (flat) return y;
  std::vector<int> out_shape = x.shape();
  out_shape.back() = n_out;
  return reshape(y, std::move(out_shape));
}

Tensor kan_stack_forward(const KanLayer& down, const KanLayer& up, const Tensor& x) {
  if (up.n_in != down.n_out) {
    throw DimensionError("kan stack: down produces " + std::to_string(down.n_out) +
                         " channels but up expects " + std::to_string(up.n_in));
  }
  return kan_layer_forward(up, kan_layer_forward(down, x));
}

KanAdapter KanAdapter::create(int channels, int thermal_channels, int reduction,
                              const SplineGrid& grid, Rng& rng) {
  if (channels <= 0 || thermal_channels <= 0) throw ConfigError("adapter: empty channel counts");
  if (reduction <= 0 || channels % reduction != 0) {
    throw ConfigError("adapter: reduction " + std::to_string(reduction) + " must divide " +
                      std::to_string(channels) + " channels");
  }
  KanAdapter a;
  a.reduction = reduction;
  const double bound = 1.0 / std::sqrt(static_cast<double>(thermal_channels));
  std::vector<double> w(static_cast<size_t>(thermal_channels) * channels);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  a.align_w = Tensor::from_data({thermal_channels, channels}, std::move(w), true);
  a.align_b = Tensor::zeros({channels}, true);
  a.down = KanLayer::create(channels, channels / reduction, grid, rng);
  a.up = KanLayer::create_zero_output(channels / reduction, channels, grid);
  return a;
}

Tensor adapter_forward(const KanAdapter& adapter, const Tensor& f_rgb, const Tensor& thermal) {
  if (f_rgb.ndim() != 3 || thermal.ndim() != 3) {
    throw DimensionError("adapter: expected [H,W,C] features, got " + shape_str(f_rgb.shape()) +
                         " and " + shape_str(thermal.shape()));
  }
  const int channels = f_rgb.dim(2);
  if (adapter.down.n_in != channels || adapter.up.n_out != channels ||
      adapter.align_w.dim(1) != channels) {
    throw ConfigError("adapter: configured for " + std::to_string(adapter.down.n_in) +
                      " channels, features have " + std::to_string(channels));
  }
  if (thermal.dim(2) != adapter.align_w.dim(0)) {
    throw ConfigError("adapter: thermal channels " + std::to_string(thermal.dim(2)) +
                      " do not match alignment projection " +
                      std::to_string(adapter.align_w.dim(0)));
  }
  const Tensor resized = nearest_resize(thermal, f_rgb.dim(0), f_rgb.dim(1));
  const Tensor prompt = pointwise_conv(resized, adapter.align_w, adapter.align_b);
  const Tensor mixed = add(f_rgb, prompt);
  const Tensor refined = kan_stack_forward(adapter.down, adapter.up, mixed);
  return add(add(f_rgb, refined), prompt);
}

int64_t count_params(const KanLayer& layer) {
  const int64_t edges = static_cast<int64_t>(layer.n_out) * layer.n_in;
  return edges * layer.grid.basis_count() + edges + edges;
}

int64_t count_params(const KanAdapter& adapter) {
  return count_params(adapter.down) + count_params(adapter.up) + adapter.align_w.numel() +
         adapter.align_b.numel();
}

int64_t kan_stack_param_count(int channels, int reduction, int basis_count) {
  const int64_t hidden = channels / reduction;
  const int64_t edges = static_cast<int64_t>(channels) * hidden;
  return 2 * edges * (basis_count + 2);
}

int64_t mlp_adapter_param_count(int channels, int reduction) {
  const int64_t hidden = channels / reduction;
  return static_cast<int64_t>(channels) * hidden + hidden +  // down linear
         hidden * channels + channels;                        // up linear
}

double kan_vs_mlp_threshold(int channels, int reduction) {
  const double edges2 = 2.0 * channels * (static_cast<double>(channels) / reduction);
  return static_cast<double>(mlp_adapter_param_count(channels, reduction)) / edges2;
}

}  // namespace rtsal
