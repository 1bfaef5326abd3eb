#include "rtsal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace rtsal {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool tl_grad_enabled = true;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

void apply_precision(std::vector<double>& v) {
  if (active_precision() == Precision::f32) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

void check_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite value produced by an operation");
  }
}

std::shared_ptr<detail::Node> new_leaf(std::vector<int> shape, std::vector<double> data,
                                       bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  apply_precision(data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->is_leaf = true;
  node->seq = g_seq.fetch_add(1);
  return node;
}

void ensure_grad(detail::Node& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// --- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                   requires_grad);
}

Tensor Tensor::constant(std::vector<int> shape, double value) {
  const int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(static_cast<size_t>(n), value), false);
}

Tensor Tensor::scalar(double value) { return constant({1}, value); }

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  Tensor t;
  t.node_ = new_leaf(std::move(shape), std::move(data), requires_grad);
  return t;
}

std::vector<double>& Tensor::mutable_values() {
  if (!node_->is_leaf) throw ContractError("mutable_values is restricted to leaf tensors");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ContractError("set_requires_grad is restricted to leaf tensors");
  node_->requires_grad = on;
}

const std::vector<double>& Tensor::grad() const {
  if (node_->grad.empty()) throw ContractError("tensor has no gradient buffer");
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

// --- tape -------------------------------------------------------------------

Tensor make_op(std::vector<int> out_shape, std::vector<double> out_value,
               const std::vector<Tensor>& inputs,
               std::function<void(std::span<const double>)> backward) {
  if (shape_numel(out_shape) != static_cast<int64_t>(out_value.size())) {
    throw DimensionError("op output length does not match shape " + shape_str(out_shape));
  }
  apply_precision(out_value);
  if (debug_checks_enabled()) check_finite(out_value);

  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(out_shape);
  node->value = std::move(out_value);
  node->is_leaf = false;
  node->seq = g_seq.fetch_add(1);

  bool needs_grad = false;
  if (tl_grad_enabled) {
    for (const Tensor& in : inputs) {
      if (in.defined() && in.node()->requires_grad) {
        needs_grad = true;
        break;
      }
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) {
      if (in.defined()) node->parents.push_back(in.node());
    }
    node->backward_fn = std::move(backward);
  }
  return Tensor(std::move(node));
}

std::span<double> grad_buffer(const Tensor& t) {
  auto& node = *t.node();
  if (!node.requires_grad) return {};
  ensure_grad(node);
  return {node.grad.data(), node.grad.size()};
}

NoGradGuard::NoGradGuard() : previous_(tl_grad_enabled) { tl_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tl_grad_enabled = previous_; }

bool grad_enabled() { return tl_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss");
  }
  auto root = loss.node();
  if (!root->requires_grad) return;

  // Reachable subgraph, then reverse creation order = topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.push_back(p.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  ensure_grad(*root);
  root->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (!n->backward_fn) continue;
    ensure_grad(*n);
    n->backward_fn(std::span<const double>(n->grad.data(), n->grad.size()));
  }
}

// --- helpers ----------------------------------------------------------------

namespace {

enum class BroadcastKind { same, a_scalar, b_scalar };

BroadcastKind binary_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return BroadcastKind::same;
  if (a.numel() == 1) return BroadcastKind::a_scalar;
  if (b.numel() == 1) return BroadcastKind::b_scalar;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()) + " are not broadcastable");
}

template <typename Fwd, typename Bwd>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  const BroadcastKind kind = binary_kind(a, b, name);
  const auto& av = a.values();
  const auto& bv = b.values();
  const size_t n = std::max(av.size(), bv.size());
  std::vector<double> out(n);
  for (size_t i = 0; i < n; ++i) {
    const double x = kind == BroadcastKind::a_scalar ? av[0] : av[i];
    const double y = kind == BroadcastKind::b_scalar ? bv[0] : bv[i];
    out[i] = fwd(x, y);
  }
  std::vector<int> shape = kind == BroadcastKind::a_scalar ? b.shape() : a.shape();
  return make_op(std::move(shape), std::move(out), {a, b},
                 [a, b, kind, bwd](std::span<const double> g) {
                   auto ga = grad_buffer(a);
                   auto gb = grad_buffer(b);
                   const auto& av2 = a.values();
                   const auto& bv2 = b.values();
                   for (size_t i = 0; i < g.size(); ++i) {
                     const size_t ia = kind == BroadcastKind::a_scalar ? 0 : i;
                     const size_t ib = kind == BroadcastKind::b_scalar ? 0 : i;
                     double dx = 0.0, dy = 0.0;
                     bwd(av2[ia], bv2[ib], g[i], dx, dy);
                     if (!ga.empty()) ga[ia] += dx;
                     if (!gb.empty()) gb[ib] += dy;
                   }
                 });
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_op(a.shape(), std::move(out), {a}, [a, deriv](std::span<const double> g) {
    auto ga = grad_buffer(a);
    if (ga.empty()) return;
    const auto& av2 = a.values();
    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(av2[i]);
  });
}

}  // namespace

// --- primitives ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av_ip = av[static_cast<size_t>(i) * k + p];
      if (av_ip == 0.0) continue;
      const double* brow = &bv[static_cast<size_t>(p) * n];
      double* orow = &out[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av_ip * brow[j];
    }
  }
  return make_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    auto ga = grad_buffer(a);
    auto gb = grad_buffer(b);
    const auto& av2 = a.values();
    const auto& bv2 = b.values();
    if (!ga.empty()) {
      // dA = dY * B^T
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          const double gij = g[static_cast<size_t>(i) * n + j];
          if (gij == 0.0) continue;
          const double* brow = &bv2[0];
          for (int p = 0; p < k; ++p) {
            ga[static_cast<size_t>(i) * k + p] += gij * brow[static_cast<size_t>(p) * n + j];
          }
        }
      }
    }
    if (!gb.empty()) {
      // dB = A^T * dY
      for (int p = 0; p < k; ++p) {
        for (int i = 0; i < m; ++i) {
          const double a_ip = av2[static_cast<size_t>(i) * k + p];
          if (a_ip == 0.0) continue;
          const double* grow = &g[static_cast<size_t>(i) * n];
          double* brow = &gb[static_cast<size_t>(p) * n];
          for (int j = 0; j < n; ++j) brow[j] += a_ip * grow[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
  return make_op({n, m}, std::move(out), {a}, [a, m, n](std::span<const double> g) {
    auto ga = grad_buffer(a);
    if (ga.empty()) return;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& dx, double& dy) {
        dx = g;
        dy = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g * y;
        dy = g * x;
      });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "divide", [](double x, double y) { return x / y; },
      [](double x, double y, double g, double& dx, double& dy) {
        dx = g / y;
        dy = -g * x / (y * y);
      });
}

Tensor add_scalar(const Tensor& a, double v) { return add(a, Tensor::scalar(v)); }

Tensor mul_scalar(const Tensor& a, double v) { return mul(a, Tensor::scalar(v)); }

Tensor silu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, [](double x) { return sigmoid_scalar(x); },
      [](double x) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 - s);
      });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {

std::vector<int> normalize_axes(const Tensor& a, const std::vector<int>& axes) {
  if (axes.empty()) {
    std::vector<int> all(static_cast<size_t>(a.ndim()));
    for (int i = 0; i < a.ndim(); ++i) all[static_cast<size_t>(i)] = i;
    return all;
  }
  std::vector<int> out = axes;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  for (int ax : out) {
    if (ax < 0 || ax >= a.ndim()) {
      throw DimensionError("reduce: invalid axis " + std::to_string(ax) + " for shape " +
                           shape_str(a.shape()));
    }
  }
  return out;
}

// Maps each flat input index to its flat output index for a reduction.
struct ReducePlan {
  std::vector<int> out_shape;
  std::vector<int64_t> out_index;  // per input element
  int64_t out_numel = 1;
  int64_t group_size = 1;
};

ReducePlan plan_reduce(const Tensor& a, const std::vector<int>& axes) {
  ReducePlan plan;
  const auto& shape = a.shape();
  std::vector<bool> reduced(shape.size(), false);
  for (int ax : axes) reduced[static_cast<size_t>(ax)] = true;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (!reduced[i]) plan.out_shape.push_back(shape[i]);
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};
  for (int d : plan.out_shape) plan.out_numel *= d;
  plan.group_size = a.numel() / plan.out_numel;

  plan.out_index.resize(static_cast<size_t>(a.numel()));
  std::vector<int> idx(shape.size(), 0);
  for (int64_t flat = 0; flat < a.numel(); ++flat) {
    int64_t out_flat = 0;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (!reduced[i]) out_flat = out_flat * shape[i] + idx[i];
    }
    plan.out_index[static_cast<size_t>(flat)] = out_flat;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes) {
  const auto norm = normalize_axes(a, axes);
  auto plan = plan_reduce(a, norm);
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(plan.out_numel), 0.0);
  for (size_t i = 0; i < av.size(); ++i) out[static_cast<size_t>(plan.out_index[i])] += av[i];
  auto out_index = std::make_shared<std::vector<int64_t>>(std::move(plan.out_index));
  return make_op(plan.out_shape, std::move(out), {a}, [a, out_index](std::span<const double> g) {
    auto ga = grad_buffer(a);
    if (ga.empty()) return;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[static_cast<size_t>((*out_index)[i])];
  });
}

Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes) {
  const auto norm = normalize_axes(a, axes);
  auto plan = plan_reduce(a, norm);
  const double inv = 1.0 / static_cast<double>(plan.group_size);
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(plan.out_numel), 0.0);
  for (size_t i = 0; i < av.size(); ++i) out[static_cast<size_t>(plan.out_index[i])] += av[i];
  for (double& v : out) v *= inv;
  auto out_index = std::make_shared<std::vector<int64_t>>(std::move(plan.out_index));
  return make_op(plan.out_shape, std::move(out), {a},
                 [a, out_index, inv](std::span<const double> g) {
                   auto ga = grad_buffer(a);
                   if (ga.empty()) return;
                   for (size_t i = 0; i < ga.size(); ++i)
                     ga[i] += inv * g[static_cast<size_t>((*out_index)[i])];
                 });
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
  }
  return make_op(std::move(new_shape), a.values(), {a}, [a](std::span<const double> g) {
    auto ga = grad_buffer(a);
    if (ga.empty()) return;
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const int rank = parts[0].ndim();
  if (axis < 0 || axis >= rank) {
    throw DimensionError("concat: invalid axis " + std::to_string(axis));
  }
  std::vector<int> out_shape = parts[0].shape();
  for (size_t i = 1; i < parts.size(); ++i) {
    const auto& s = parts[i].shape();
    if (static_cast<int>(s.size()) != rank) {
      throw DimensionError("concat: rank mismatch");
    }
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (s[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)]) {
        throw DimensionError("concat: shapes " + shape_str(parts[0].shape()) + " and " +
                             shape_str(s) + " differ off-axis");
      }
    }
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }

  // outer x axis x inner layout
  int64_t inner = 1, outer = 1;
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];

  std::vector<double> out(static_cast<size_t>(shape_numel(out_shape)));
  const int64_t out_axis = out_shape[static_cast<size_t>(axis)];
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    const int64_t p_axis = p.dim(axis);
    const auto& pv = p.values();
    for (int64_t o = 0; o < outer; ++o) {
      const double* src = &pv[static_cast<size_t>(o * p_axis * inner)];
      double* dst = &out[static_cast<size_t>((o * out_axis + offset) * inner)];
      std::memcpy(dst, src, static_cast<size_t>(p_axis * inner) * sizeof(double));
    }
    offset += p_axis;
  }
  std::vector<Tensor> inputs = parts;
  return make_op(out_shape, std::move(out), inputs,
                 [inputs, outer, inner, out_axis](std::span<const double> g) {
                   int64_t off = 0;
                   for (const Tensor& p : inputs) {
                     const int64_t p_axis = p.numel() / (outer * inner);
                     auto gp = grad_buffer(p);
                     if (!gp.empty()) {
                       for (int64_t o = 0; o < outer; ++o) {
                         const double* src = &g[static_cast<size_t>((o * out_axis + off) * inner)];
                         double* dst = &gp[static_cast<size_t>(o * p_axis * inner)];
                         for (int64_t i = 0; i < p_axis * inner; ++i) dst[i] += src[i];
                       }
                     }
                     off += p_axis;
                   }
                 });
}

namespace {

void check_hwc(const Tensor& a, const char* op) {
  if (a.ndim() != 3) {
    throw DimensionError(std::string(op) + ": expected [H,W,C], got " + shape_str(a.shape()));
  }
}

}  // namespace

Tensor nearest_upsample(const Tensor& a, int factor) {
  check_hwc(a, "nearest_upsample");
  if (factor < 1) throw ConfigError("nearest_upsample: factor must be >= 1");
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  const int oh = h * factor, ow = w * factor;
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y) {
    const int sy = y / factor;
    for (int x = 0; x < ow; ++x) {
      const int sx = x / factor;
      const double* src = &av[(static_cast<size_t>(sy) * w + sx) * c];
      double* dst = &out[(static_cast<size_t>(y) * ow + x) * c];
      std::memcpy(dst, src, static_cast<size_t>(c) * sizeof(double));
    }
  }
  return make_op({oh, ow, c}, std::move(out), {a},
                 [a, h, w, c, factor, oh, ow](std::span<const double> g) {
                   auto ga = grad_buffer(a);
                   if (ga.empty()) return;
                   for (int y = 0; y < oh; ++y) {
                     const int sy = y / factor;
                     for (int x = 0; x < ow; ++x) {
                       const int sx = x / factor;
                       const double* src = &g[(static_cast<size_t>(y) * ow + x) * c];
                       double* dst = &ga[(static_cast<size_t>(sy) * w + sx) * c];
                       for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                     }
                   }
                 });
}

Tensor nearest_resize(const Tensor& a, int out_h, int out_w) {
  check_hwc(a, "nearest_resize");
  if (out_h < 1 || out_w < 1) throw ConfigError("nearest_resize: output dims must be positive");
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  const auto& av = a.values();
  std::vector<double> out(static_cast<size_t>(out_h) * out_w * c);
  for (int y = 0; y < out_h; ++y) {
    const int sy = static_cast<int>((static_cast<int64_t>(y) * h) / out_h);
    for (int x = 0; x < out_w; ++x) {
      const int sx = static_cast<int>((static_cast<int64_t>(x) * w) / out_w);
      const double* src = &av[(static_cast<size_t>(sy) * w + sx) * c];
      double* dst = &out[(static_cast<size_t>(y) * out_w + x) * c];
      std::memcpy(dst, src, static_cast<size_t>(c) * sizeof(double));
    }
  }
  return make_op({out_h, out_w, c}, std::move(out), {a},
                 [a, h, w, c, out_h, out_w](std::span<const double> g) {
                   auto ga = grad_buffer(a);
                   if (ga.empty()) return;
                   for (int y = 0; y < out_h; ++y) {
                     const int sy = static_cast<int>((static_cast<int64_t>(y) * h) / out_h);
                     for (int x = 0; x < out_w; ++x) {
                       const int sx = static_cast<int>((static_cast<int64_t>(x) * w) / out_w);
                       const double* src = &g[(static_cast<size_t>(y) * out_w + x) * c];
                       double* dst = &ga[(static_cast<size_t>(sy) * w + sx) * c];
                       for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                     }
                   }
                 });
}

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_hwc(x, "pointwise_conv");
  if (w.ndim() != 2 || w.dim(0) != x.dim(2)) {
    throw DimensionError("pointwise_conv: weight " + shape_str(w.shape()) +
                         " does not match input channels of " + shape_str(x.shape()));
  }
  const int cin = w.dim(0), cout = w.dim(1);
  if (b.ndim() != 1 || b.dim(0) != cout) {
    throw DimensionError("pointwise_conv: bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
  }
  const int h = x.dim(0), wd = x.dim(1);
  const int64_t pixels = static_cast<int64_t>(h) * wd;
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<size_t>(pixels) * cout);
  for (int64_t p = 0; p < pixels; ++p) {
    const double* in = &xv[static_cast<size_t>(p) * cin];
    double* o = &out[static_cast<size_t>(p) * cout];
    for (int j = 0; j < cout; ++j) o[j] = bv[static_cast<size_t>(j)];
    for (int i = 0; i < cin; ++i) {
      const double xi = in[i];
      if (xi == 0.0) continue;
      const double* wrow = &wv[static_cast<size_t>(i) * cout];
      for (int j = 0; j < cout; ++j) o[j] += xi * wrow[j];
    }
  }
  return make_op({h, wd, cout}, std::move(out), {x, w, b},
                 [x, w, b, pixels, cin, cout](std::span<const double> g) {
                   auto gx = grad_buffer(x);
                   auto gw = grad_buffer(w);
                   auto gb = grad_buffer(b);
                   const auto& xv2 = x.values();
                   const auto& wv2 = w.values();
                   for (int64_t p = 0; p < pixels; ++p) {
                     const double* gout = &g[static_cast<size_t>(p) * cout];
                     const double* in = &xv2[static_cast<size_t>(p) * cin];
                     if (!gx.empty()) {
                       double* gin = &gx[static_cast<size_t>(p) * cin];
                       for (int i = 0; i < cin; ++i) {
                         const double* wrow = &wv2[static_cast<size_t>(i) * cout];
                         double acc = 0.0;
                         for (int j = 0; j < cout; ++j) acc += gout[j] * wrow[j];
                         gin[i] += acc;
                       }
                     }
                     if (!gw.empty()) {
                       for (int i = 0; i < cin; ++i) {
                         const double xi = in[i];
                         if (xi == 0.0) continue;
                         double* wrow = &gw[static_cast<size_t>(i) * cout];
                         for (int j = 0; j < cout; ++j) wrow[j] += xi * gout[j];
                       }
                     }
                     if (!gb.empty()) {
                       for (int j = 0; j < cout; ++j) gb[j] += gout[j];
                     }
                   }
                 });
}

Tensor space_to_depth(const Tensor& a, int factor) {
  check_hwc(a, "space_to_depth");
  if (factor < 1) throw ConfigError("space_to_depth: factor must be >= 1");
  const int h = a.dim(0), w = a.dim(1), c = a.dim(2);
  if (h % factor != 0 || w % factor != 0) {
    throw DimensionError("space_to_depth: " + shape_str(a.shape()) + " not divisible by " +
                         std::to_string(factor));
  }
  const int oh = h / factor, ow = w / factor, oc = factor * factor * c;
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double* dst = &out[(static_cast<size_t>(y) * ow + x) * oc];
      for (int dy = 0; dy < factor; ++dy) {
        const double* src = &av[((static_cast<size_t>(y) * factor + dy) * w + x * factor) * c];
        std::memcpy(dst + (static_cast<size_t>(dy) * factor) * c, src,
                    static_cast<size_t>(factor) * c * sizeof(double));
      }
    }
  }
  return make_op({oh, ow, oc}, std::move(out), {a},
                 [a, oh, ow, oc, factor, w, c](std::span<const double> g) {
                   auto ga = grad_buffer(a);
                   if (ga.empty()) return;
                   for (int y = 0; y < oh; ++y) {
                     for (int x = 0; x < ow; ++x) {
                       const double* src = &g[(static_cast<size_t>(y) * ow + x) * oc];
                       for (int dy = 0; dy < factor; ++dy) {
                         double* dst =
                             &ga[((static_cast<size_t>(y) * factor + dy) * w + x * factor) * c];
                         const double* row = src + (static_cast<size_t>(dy) * factor) * c;
                         for (int i = 0; i < factor * c; ++i) dst[i] += row[i];
                       }
                     }
                   }
                 });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (b.ndim() != 1 || x.ndim() < 1 || x.shape().back() != b.dim(0)) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  const int c = b.dim(0);
  const int64_t rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& bv = b.values();
  std::vector<double> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = &xv[static_cast<size_t>(r) * c];
    double* o = &out[static_cast<size_t>(r) * c];
    for (int j = 0; j < c; ++j) o[j] = in[j] + bv[static_cast<size_t>(j)];
  }
  return make_op(x.shape(), std::move(out), {x, b}, [x, b, rows, c](std::span<const double> g) {
    auto gx = grad_buffer(x);
    auto gb = grad_buffer(b);
    for (int64_t r = 0; r < rows; ++r) {
      const double* grow = &g[static_cast<size_t>(r) * c];
      if (!gx.empty()) {
        double* dst = &gx[static_cast<size_t>(r) * c];
        for (int j = 0; j < c; ++j) dst[j] += grow[j];
      }
      if (!gb.empty()) {
        for (int j = 0; j < c; ++j) gb[j] += grow[j];
      }
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() != 2) throw DimensionError("softmax_rows: expected 2-D, got " + shape_str(x.shape()));
  const int n = x.dim(0), m = x.dim(1);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (int r = 0; r < n; ++r) {
    const double* in = &xv[static_cast<size_t>(r) * m];
    double* o = &out[static_cast<size_t>(r) * m];
    double mx = in[0];
    for (int j = 1; j < m; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int j = 0; j < m; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < m; ++j) o[j] *= inv;
  }
  // Cache y for the backward rule.
  auto y_cache = std::make_shared<std::vector<double>>(out);
  return make_op({n, m}, std::move(out), {x}, [x, y_cache, n, m](std::span<const double> g) {
    auto gx = grad_buffer(x);
    if (gx.empty()) return;
    for (int r = 0; r < n; ++r) {
      const double* y = &(*y_cache)[static_cast<size_t>(r) * m];
      const double* grow = &g[static_cast<size_t>(r) * m];
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += grow[j] * y[j];
      double* dst = &gx[static_cast<size_t>(r) * m];
      for (int j = 0; j < m; ++j) dst[j] += y[j] * (grow[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.ndim() != 2) throw DimensionError("layer_norm: expected 2-D, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c) {
    throw DimensionError("layer_norm: parameter shapes do not match channel count " +
                         std::to_string(c));
  }
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int r = 0; r < n; ++r) {
    const double* in = &xv[static_cast<size_t>(r) * c];
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += in[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = in[j] - mean;
      var += d * d;
    }
    var /= c;
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = istd;
    double* xh = &(*xhat)[static_cast<size_t>(r) * c];
    double* o = &out[static_cast<size_t>(r) * c];
    for (int j = 0; j < c; ++j) {
      xh[j] = (in[j] - mean) * istd;
      o[j] = xh[j] * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
    }
  }
  return make_op({n, c}, std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, n, c](std::span<const double> g) {
                   auto gx = grad_buffer(x);
                   auto gg = grad_buffer(gamma);
                   auto gb = grad_buffer(beta);
                   const auto& gv2 = gamma.values();
                   for (int r = 0; r < n; ++r) {
                     const double* grow = &g[static_cast<size_t>(r) * c];
                     const double* xh = &(*xhat)[static_cast<size_t>(r) * c];
                     const double istd = (*inv_std)[static_cast<size_t>(r)];
                     if (!gg.empty() || !gb.empty()) {
                       for (int j = 0; j < c; ++j) {
                         if (!gg.empty()) gg[j] += grow[j] * xh[j];
                         if (!gb.empty()) gb[j] += grow[j];
                       }
                     }
                     if (!gx.empty()) {
                       double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                       for (int j = 0; j < c; ++j) {
                         const double dxh = grow[j] * gv2[static_cast<size_t>(j)];
                         sum_dxhat += dxh;
                         sum_dxhat_xhat += dxh * xh[j];
                       }
                       double* dst = &gx[static_cast<size_t>(r) * c];
                       for (int j = 0; j < c; ++j) {
                         const double dxh = grow[j] * gv2[static_cast<size_t>(j)];
                         dst[j] += istd * (dxh - (sum_dxhat + xh[j] * sum_dxhat_xhat) / c);
                       }
                     }
                   }
                 });
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  if (eps <= 0.0) throw ContractError("finite_diff_check: eps must be positive");
  const bool prior = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor y = f(x);
  if (y.numel() != 1) throw ContractError("finite_diff_check: f must return a scalar");
  backward(y);
  const std::vector<double> analytic = x.grad();

  double worst = 0.0;
  auto& data = x.mutable_values();
  {
    NoGradGuard no_grad;
    for (size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + eps;
      const double fp = f(x).item();
      data[i] = keep - eps;
      const double fm = f(x).item();
      data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  x.set_requires_grad(prior);
  return worst;
}

}  // namespace rtsal
