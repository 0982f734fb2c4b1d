#include <doctest.h>

#include "disco3d/core/autograd.hpp"
#include "disco3d/core/params.hpp"
#include "disco3d/core/rng.hpp"
#include "unit/fd_oracle.hpp"

using namespace disco3d;
using disco3d::testing::central_difference;
using disco3d::testing::relative_error;

namespace {

// Checks d loss / d param against central differences on every element.
void check_gradients(std::vector<ag::Var> params, const std::function<ag::Var()>& loss_fn, double tol = 1e-6) {
  for (auto& p : params) p.zero_grad();
  ag::Var loss = loss_fn();
  ag::backward(loss);
  for (auto& p : params) {
    const Tensor g = p.grad();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double fd = central_difference(p.mutable_value(), i, [&] {
        ag::NoGradGuard ng;
        return loss_fn().value()[0];
      }, 1e-5);
      CHECK(relative_error(g[i], fd, 1e-7) < tol);
    }
  }
}

}  // namespace

TEST_CASE("elementwise and layout ops match finite differences") {
  Rng rng(1);
  ag::Var a = ag::parameter(rng.normal_tensor({2, 4, 4, 3}));
  ag::Var b = ag::parameter(rng.normal_tensor({2, 4, 4, 3}));
  ag::Var bias = ag::parameter(rng.normal_tensor({5}));
  ag::Var w = ag::parameter(rng.normal_tensor({5, 27}));
  ag::Var gv = ag::parameter(rng.normal_tensor({2, 5}));
  const Tensor c = rng.normal_tensor({2, 4, 4, 5});
  check_gradients({a, b, bias, w, gv}, [&] {
    ag::Var x = ag::silu(ag::add(ag::mul(a, b), ag::scale(a, 0.3)));
    ag::Var y = ag::add_bias(ag::matmul_nt(ag::im2col3x3(x), w), bias);
    y = ag::add_group_vec(y, gv);
    ag::Var p = ag::upsample2(ag::avgpool2(y));
    ag::Var z = ag::layernorm_last(ag::concat_last(p, y));
    ag::Var picked = ag::take_rows(ag::reshape(z, {2 * 16, 10}), {0, 3, 3, 31});
    ag::Var both = ag::concat_rows({picked, ag::reshape(ag::mean_middle(z), {2, 10})});
    return ag::add(ag::dot_const(both, Tensor(both.shape(), 0.1)), ag::dot_const(y, c));
  });
}

TEST_CASE("attention, reductions and combinations match finite differences") {
  Rng rng(2);
  ag::Var q = ag::parameter(rng.normal_tensor({6, 4}));
  ag::Var k = ag::parameter(rng.normal_tensor({6, 4}));
  ag::Var v = ag::parameter(rng.normal_tensor({6, 4}));
  const std::vector<std::vector<int64_t>> qg{{0, 1, 2}, {3, 4, 5}};
  const std::vector<std::vector<int64_t>> kg{{0, 2}, {1, 3, 4, 5}};
  const Tensor c = rng.normal_tensor({6, 4});
  check_gradients({q, k, v}, [&] {
    ag::Var o = ag::attention(q, k, v, qg, kg, 2);
    ag::Var m = ag::mean_middle(ag::reshape(o, {2, 3, 4}));
    ag::Var lc = ag::linear_combination({o, q}, {0.7, -1.3});
    return ag::add(ag::add(ag::dot_const(lc, c), ag::sum(ag::relu(m))),
                   ag::mse(ag::scale_groups(ag::reshape(o, {2, 3, 4}), {2.0, -0.5}), ag::reshape(v, {2, 3, 4})));
  });
}

TEST_CASE("row normalisation and cross-entropy match finite differences") {
  Rng rng(3);
  ag::Var x = ag::parameter(rng.normal_tensor({4, 5}));
  ag::Var t = ag::parameter(rng.normal_tensor({3, 5}));
  const Tensor c = rng.normal_tensor({4, 5});
  check_gradients({x, t}, [&] {
    ag::Var xn = ag::normalize_last(x);
    ag::Var logits = ag::scale(ag::matmul_nt(xn, ag::normalize_last(t)), 4.0);
    return ag::add(ag::cross_entropy(logits, {0, 2, 1, 2}), ag::dot_const(xn, c));
  });
  ag::Var u = ag::normalize_last(ag::constant(rng.normal_tensor({2, 7})));
  for (int r = 0; r < 2; ++r) {
    double ss = 0.0;
    for (int k = 0; k < 7; ++k) ss += u.value()[r * 7 + k] * u.value()[r * 7 + k];
    CHECK(ss == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK_THROWS(ag::cross_entropy(ag::constant(Tensor({2, 3})), {0, 3}));
}

TEST_CASE("no-grad scope records nothing") {
  ag::Var a = ag::parameter(Tensor({3}, 1.0));
  ag::Var out;
  {
    ag::NoGradGuard ng;
    out = ag::scale(a, 2.0);
  }
  CHECK_FALSE(out.requires_grad());
  ag::Var tracked = ag::scale(a, 2.0);
  CHECK(tracked.requires_grad());
}

TEST_CASE("shape mismatches are rejected") {
  ag::Var a = ag::constant(Tensor({2, 3}));
  ag::Var b = ag::constant(Tensor({3, 2}));
  CHECK_THROWS_AS(ag::add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(ag::matmul_nt(a, b), std::invalid_argument);
}

TEST_CASE("adam decreases a convex quadratic") {
  ag::Var x = ag::parameter(Tensor({4}, 3.0));
  Adam opt({x}, AdamConfig{0.1});
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 200; ++i) {
    ag::Var loss = ag::sum(ag::mul(x, x));
    if (i == 0) first = loss.value()[0];
    last = loss.value()[0];
    ag::backward(loss);
    opt.step();
  }
  CHECK(last < 1e-2 * first);
}
