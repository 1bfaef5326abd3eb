// test_autograd.cpp
// Primitive-level checks: hand values, finite-difference oracles, tape
// semantics (accumulation, fan-out, determinism).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "rtsal/rng.hpp"
#include "rtsal/tensor.hpp"

using namespace rtsal;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("matmul hand values") {
  auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  auto y = matmul(eye, eye);
  CHECK(y.values() == std::vector<double>{1, 0, 0, 1});

  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor::from_data({2, 1}, {0, 1});
  auto c = matmul(a, b);
  CHECK(c.shape() == std::vector<int>{2, 1});
  CHECK(c.values() == std::vector<double>{2, 4});
}

TEST_CASE("matmul rejects mismatched shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), DimensionError);
}

TEST_CASE("matmul gradient vs finite differences") {
  Rng rng(42);
  auto b = random_tensor({7, 3}, rng);
  auto r = random_tensor({5, 3}, rng);
  auto f = [&](const Tensor& x) { return reduce_sum(mul(matmul(x, b), r)); };
  auto x = random_tensor({5, 7}, rng);
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-6);

  // gradient w.r.t. the right operand as well
  auto a = random_tensor({5, 7}, rng);
  auto f2 = [&](const Tensor& x) { return reduce_sum(mul(matmul(a, x), r)); };
  auto x2 = random_tensor({7, 3}, rng);
  CHECK(finite_diff_check(f2, x2, 1e-5) < 1e-6);
}

TEST_CASE("elementwise basics") {
  auto x = Tensor::from_data({3}, {0.5, -1.0, 2.0});
  auto y = add(x, Tensor::scalar(0.0));
  CHECK(y.values() == x.values());

  CHECK(sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));

  auto f = [](const Tensor& t) { return reduce_sum(silu(t)); };
  auto at1 = Tensor::from_data({1}, {1.0});
  CHECK(finite_diff_check(f, at1, 1e-5) < 1e-6);
}

TEST_CASE("broadcast rules") {
  auto a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  auto s = Tensor::scalar(2.0);
  CHECK(mul(a, s).values() == std::vector<double>{2, 4, 6, 8});
  CHECK(mul(s, a).values() == std::vector<double>{2, 4, 6, 8});
  auto b = Tensor::zeros({3});
  CHECK_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("reductions") {
  CHECK(reduce_sum(Tensor::constant({4}, 1.0)).item() == doctest::Approx(4.0));
  CHECK(reduce_mean(Tensor::constant({2, 3}, 1.0)).item() == doctest::Approx(1.0));

  auto x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  auto m = reduce_mean(x);
  backward(m);
  for (double g : x.grad()) CHECK(g == doctest::Approx(1.0 / 6.0));

  // axis reduction
  auto rows = reduce_sum(Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}), {1});
  CHECK(rows.shape() == std::vector<int>{2});
  CHECK(rows.values() == std::vector<double>{6, 15});
  CHECK_THROWS_AS(reduce_sum(x, {3}), DimensionError);
}

TEST_CASE("reshape, concat, upsample, pointwise conv") {
  auto one = Tensor::from_data({1, 1, 1}, {1.0});
  auto up = nearest_upsample(one, 2);
  CHECK(up.shape() == std::vector<int>{2, 2, 1});
  CHECK(up.values() == std::vector<double>{1, 1, 1, 1});

  // identity weight, zero bias leaves the input unchanged
  Rng rng(7);
  auto x = random_tensor({4, 4, 3}, rng, 0.0, 1.0);
  auto eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto zero_bias = Tensor::zeros({3});
  CHECK(pointwise_conv(x, eye, zero_bias).values() == x.values());

  auto a = Tensor::from_data({1, 2}, {1, 2});
  auto b = Tensor::from_data({1, 2}, {3, 4});
  auto cat = concat({a, b}, 0);
  CHECK(cat.shape() == std::vector<int>{2, 2});
  CHECK(cat.values() == std::vector<double>{1, 2, 3, 4});
  auto cat1 = concat({a, b}, 1);
  CHECK(cat1.shape() == std::vector<int>{1, 4});
  CHECK(cat1.values() == std::vector<double>{1, 2, 3, 4});

  CHECK(reshape(a, {2, 1}).shape() == std::vector<int>{2, 1});
  CHECK_THROWS_AS(reshape(a, {3}), DimensionError);
}

TEST_CASE("pointwise conv gradient vs finite differences") {
  Rng rng(3);
  auto w = random_tensor({3, 2}, rng);
  auto bias = random_tensor({2}, rng);
  auto r = random_tensor({4, 4, 2}, rng);
  auto f = [&](const Tensor& x) { return reduce_sum(mul(pointwise_conv(x, w, bias), r)); };
  auto x = random_tensor({4, 4, 3}, rng);
  CHECK(finite_diff_check(f, x, 1e-5) < 1e-6);

  auto x0 = random_tensor({4, 4, 3}, rng);
  auto fw = [&](const Tensor& t) { return reduce_sum(mul(pointwise_conv(x0, t, bias), r)); };
  CHECK(finite_diff_check(fw, random_tensor({3, 2}, rng), 1e-5) < 1e-6);
}

TEST_CASE("backward populates leaf gradients") {
  auto x = Tensor::constant({3}, 1.0);
  x.set_requires_grad(true);
  backward(reduce_sum(x));
  CHECK(x.grad() == std::vector<double>{1, 1, 1});

  auto y = Tensor::from_data({2}, {1, 2}, true);
  backward(reduce_sum(mul(y, y)));
  CHECK(y.grad() == std::vector<double>{2, 4});

  CHECK_THROWS_AS(backward(Tensor::zeros({2}, true)), ContractError);
}

TEST_CASE("gradients accumulate until zeroed") {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  backward(reduce_sum(x));
  backward(reduce_sum(x));
  CHECK(x.grad() == std::vector<double>{2, 2});
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0, 0});
}

TEST_CASE("shared subexpression equals unrolled duplicate graph") {
  Rng rng(11);
  auto x = random_tensor({4}, rng);
  x.set_requires_grad(true);

  // shared: s = silu(x) used twice
  x.zero_grad();
  auto s = silu(x);
  backward(reduce_sum(add(mul(s, s), s)));
  auto shared_grad = x.grad();

  // unrolled: recompute silu(x) per use
  x.zero_grad();
  backward(reduce_sum(add(mul(silu(x), silu(x)), silu(x))));
  auto unrolled_grad = x.grad();

  for (size_t i = 0; i < shared_grad.size(); ++i) {
    CHECK(shared_grad[i] == doctest::Approx(unrolled_grad[i]).epsilon(1e-12));
  }
}

TEST_CASE("finite difference harness sanity") {
  Rng rng(5);
  auto x = random_tensor({6}, rng);
  CHECK(finite_diff_check([](const Tensor& t) { return reduce_sum(t); }, x) < 1e-9);
  CHECK(finite_diff_check([](const Tensor& t) { return reduce_sum(mul(t, t)); }, x) < 1e-8);
}

TEST_CASE("every primitive passes a finite-difference check") {
  Rng rng(2024);
  const double tol = 1e-5;

  auto fd = [&](auto f, std::vector<int> shape) {
    auto x = random_tensor(shape, rng);
    return finite_diff_check(f, x, 1e-5);
  };

  auto r23 = random_tensor({2, 3}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(add(x, r23), r23)); }, {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(sub(x, r23), r23)); }, {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(mul(x, r23), r23)); }, {2, 3}) < tol);
  auto denom = Tensor::from_data({2, 3}, {1.5, 2.5, -1.25, 3.0, -2.0, 1.75});
  CHECK(fd([&](const Tensor& x) { return reduce_sum(divide(x, denom)); }, {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(silu(x)); }, {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(sigmoid(x)); }, {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(relu(x), r23)); }, {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul_scalar(reduce_mean(x, {1}), 3.0)); },
           {2, 3}) < tol);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(reshape(x, {3, 2}), transpose(r23))); },
           {2, 3}) < tol);
  auto r44 = random_tensor({4, 4, 2}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(nearest_upsample(x, 2), r44)); },
           {2, 2, 2}) < tol);
  auto r222 = random_tensor({2, 2, 2}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(nearest_resize(x, 2, 2), r222)); },
           {4, 4, 2}) < tol);
  auto r228 = random_tensor({2, 2, 8}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(space_to_depth(x, 2), r228)); },
           {4, 4, 2}) < tol);
  auto r28 = random_tensor({2, 8}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(softmax_rows(x), r28)); }, {2, 8}) < tol);
  auto bias = random_tensor({3}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(add_bias(x, bias), r23)); }, {2, 3}) < tol);
  auto gamma = random_tensor({3}, rng, 0.5, 1.5);
  auto beta = random_tensor({3}, rng);
  CHECK(fd([&](const Tensor& x) { return reduce_sum(mul(layer_norm(x, gamma, beta), r23)); },
           {2, 3}) < tol);
  auto parts_rhs = random_tensor({4, 3}, rng);
  CHECK(fd([&](const Tensor& x) {
             return reduce_sum(mul(concat({x, mul_scalar(x, 2.0)}, 0), parts_rhs));
           },
           {2, 3}) < tol);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(9);
  auto x = random_tensor({5, 7}, rng, -4.0, 4.0);
  auto y = softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) sum += y.values()[static_cast<size_t>(r) * 7 + j];
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("forward results are bit-identical across runs") {
  auto run = [] {
    Rng rng(123);
    auto x = random_tensor({6, 6}, rng);
    auto w = random_tensor({6, 6}, rng);
    return matmul(silu(x), softmax_rows(w)).values();
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad scope records nothing") {
  auto x = Tensor::from_data({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = reduce_sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
}
