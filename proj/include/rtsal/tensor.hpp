// tensor.hpp
// Dense tensors with reverse-mode automatic differentiation.
//
// Every differentiable operation records a node on an implicit tape (the
// creation-order sequence of nodes). backward() walks reachable nodes in
// reverse creation order, which is a valid topological order because an
// operation's inputs always exist before its output. Gradients accumulate
// with += into zero-initialized buffers; call zero_grad() between steps.
//
// Tensors are immutable after construction except for grad buffers and
// explicit leaf updates through mutable_values() (optimizer steps). A graph
// is single-threaded; independent graphs may live on different threads.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "rtsal/common.hpp"

namespace rtsal {

namespace detail {

struct Node {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool is_leaf = true;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(std::span<const double>)> backward_fn;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor constant(std::vector<int> shape, double value);
  static Tensor scalar(double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  const std::vector<double>& values() const { return node_->value; }
  // Leaf updates only (parameters). Graphs built from the old values must
  // not be reused for backward after mutation.
  std::vector<double>& mutable_values();

  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  uint64_t node_id() const { return node_->seq; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(std::vector<int>, std::vector<double>, const std::vector<Tensor>&,
                        std::function<void(std::span<const double>)>);
  friend void backward(const Tensor&);
};

// Records one primitive application. `backward` receives the output gradient
// and must accumulate into the inputs' buffers via grad_buffer(); it is only
// invoked when gradients actually flow. Ops built on make_op inherit the
// tape/precision/finiteness plumbing.
Tensor make_op(std::vector<int> out_shape, std::vector<double> out_value,
               const std::vector<Tensor>& inputs,
               std::function<void(std::span<const double>)> backward);

// Gradient accumulation target for an input captured by an op's backward
// lambda. Empty span when the input does not require gradients.
std::span<double> grad_buffer(const Tensor& t);

// Disables tape recording within a scope (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// --- primitives ------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                   // 2-D

// Binary elementwise; shapes must match exactly or one operand is scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double v);
Tensor mul_scalar(const Tensor& a, double v);

Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);

// Reductions. Empty axis list reduces everything to a [1] scalar; reduced
// axes are dropped from the output shape.
Tensor reduce_sum(const Tensor& a, const std::vector<int>& axes = {});
Tensor reduce_mean(const Tensor& a, const std::vector<int>& axes = {});

Tensor reshape(const Tensor& a, std::vector<int> new_shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// Spatial ops on [H,W,C] tensors.
Tensor nearest_upsample(const Tensor& a, int factor);
Tensor nearest_resize(const Tensor& a, int out_h, int out_w);
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);  // w: [Cin,Cout]
Tensor space_to_depth(const Tensor& a, int factor);  // [H,W,C] -> [H/f,W/f,f*f*C]

Tensor add_bias(const Tensor& x, const Tensor& b);  // [...,C] + [C]
Tensor softmax_rows(const Tensor& x);               // [N,M], softmax over M
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);  // [N,C], normalized over C

// Runs reverse-mode accumulation from a scalar loss. Each reachable node's
// backward rule fires exactly once; leaf gradients accumulate across calls.
void backward(const Tensor& loss);

// Central-difference gradient check of f at x. Returns the worst relative
// error over all coordinates, with denominator max(|analytic|,|numeric|,1e-8).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                         double eps = 1e-5);

}  // namespace rtsal
