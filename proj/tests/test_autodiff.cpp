#include <catch2/catch_amalgamated.hpp>

#include "dpf/autodiff.hpp"
#include "dpf/nn.hpp"
#include "dpf/rng.hpp"
#include "helpers.hpp"

using namespace dpf;
using Catch::Approx;

TEST_CASE("forward: matmul, relu, tanh basics") {
  ad::Var x = ad::constant(Tensor::matrix(1, 2, {1, 2}));
  ad::Var W = ad::leaf(Tensor::matrix(2, 1, {1, 1}), "W");
  ad::Var y = ad::matmul(x, W);
  CHECK(y.item() == Approx(3.0));

  ad::Var r = ad::relu(ad::constant(Tensor::row({-1, 2})));
  CHECK(r.value().data[0] == 0.0);
  CHECK(r.value().data[1] == 2.0);

  CHECK(ad::tanhv(ad::constant(0.0)).item() == 0.0);
}

TEST_CASE("forward rejects shape mismatches with a structured error") {
  ad::Var a = ad::constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  ad::Var b = ad::constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  CHECK_THROWS_AS(ad::matmul(a, b), UsageError);
  CHECK_THROWS_AS(ad::add(a, b), UsageError);
  CHECK_THROWS_WITH(ad::add(a, b), Catch::Matchers::ContainsSubstring("add"));
}

TEST_CASE("backward: power rule and sigmoid derivative") {
  ad::Var x = ad::leaf(Tensor::scalar(3.0), "x");
  ad::Var y = ad::square(x);
  ad::backward(y);
  CHECK(x.grad().data[0] == Approx(6.0));

  ad::Var z = ad::leaf(Tensor::scalar(0.0), "z");
  ad::Var s = ad::sigmoid(z);
  ad::backward(s);
  CHECK(z.grad().data[0] == Approx(0.25));
}

TEST_CASE("backward without a recorded graph is a usage error") {
  ad::Var c = ad::constant(1.0);
  CHECK_THROWS_AS(ad::backward(c), UsageError);
  CHECK_THROWS_AS(ad::backward(ad::Var{}), UsageError);
}

TEST_CASE("seed gradient shape must match the output") {
  ad::Var x = ad::leaf(Tensor::row({1, 2}), "x");
  ad::Var y = ad::square(x);
  Tensor bad_seed = Tensor::zeros({3});
  CHECK_THROWS_AS(ad::backward(y, &bad_seed), UsageError);
}

TEST_CASE("two-layer dense net gradient matches finite differences") {
  RngStream rng(42);
  ad::ParamStore store;
  ad::Var W0 = store.add("W0", ad::glorot_uniform(5, 8, rng));
  ad::Var b0 = store.add("b0", Tensor::zeros({1, 8}));
  ad::Var W1 = store.add("W1", ad::glorot_uniform(8, 1, rng));
  ad::Var b1 = store.add("b1", Tensor::zeros({1, 1}));
  Tensor xv = Tensor::zeros({1, 5});
  for (double& v : xv.data) v = rng.normal();

  auto eval = [&] {
    ad::NoGradGuard ng;
    ad::Var h = ad::dense(ad::constant(xv), W0, b0, ad::Act::Tanh);
    return ad::dense(h, W1, b1, ad::Act::Linear).item();
  };
  store.zero_grad();
  ad::Var h = ad::dense(ad::constant(xv), W0, b0, ad::Act::Tanh);
  ad::Var y = ad::dense(h, W1, b1, ad::Act::Linear);
  ad::backward(y);
  for (const auto& [name, p] : store.params) {
    INFO(name);
    CHECK(test::max_fd_rel_err(p, eval) < 1e-4);
  }
}

TEST_CASE("elementwise and reduction op gradients match finite differences") {
  RngStream rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor init = Tensor::zeros({2, 3});
    for (double& v : init.data) v = rng.normal() * 0.8 + 0.1;
    ad::Var x = ad::leaf(init, "x");
    Tensor other = Tensor::zeros({2, 3});
    for (double& v : other.data) v = rng.normal() + 2.5;  // keep div/log well-conditioned
    ad::Var c = ad::constant(other);

    auto build = [&]() -> ad::Var {
      ad::Var a = ad::mul(ad::tanhv(x), ad::sigmoid(c));
      ad::Var b = ad::div(ad::expv(ad::scale(x, 0.3)), c);
      ad::Var d = ad::atan2v(a, ad::offset(ad::square(x), 1.0));
      ad::Var e = ad::logv(ad::offset(ad::square(b), 0.5));
      ad::Var f = ad::logsumexp_all(ad::concat_cols({a, ad::sinv(d), ad::cosv(e)}));
      return ad::add(f, ad::mean_all(ad::sum_cols(ad::sub(a, b))));
    };
    x.node()->zero_grad();
    ad::backward(build());
    auto eval = [&] {
      ad::NoGradGuard ng;
      return build().item();
    };
    REQUIRE(test::max_fd_rel_err(x, eval) < 1e-4);
  }
}

TEST_CASE("structural op gradients match finite differences") {
  RngStream rng(11);
  Tensor init = Tensor::zeros({1, 4});
  for (double& v : init.data) v = rng.normal();
  ad::Var x = ad::leaf(init, "x");
  auto build = [&]() -> ad::Var {
    ad::Var r = ad::repeat_rows(x, 5);
    ad::Var s = ad::slice_cols(r, 1, 3);
    ad::Var t = ad::slice_rows(r, 0, 2);
    ad::Var u = ad::concat_rows({s, ad::square(s)});
    ad::Var v = ad::mean_rows(u);
    return ad::add(ad::sum_all(v), ad::sum_all(ad::tanhv(t)));
  };
  x.node()->zero_grad();
  ad::backward(build());
  auto eval = [&] {
    ad::NoGradGuard ng;
    return build().item();
  };
  CHECK(test::max_fd_rel_err(x, eval) < 1e-4);
}

TEST_CASE("detached nodes contribute exactly zero gradient") {
  ad::Var x = ad::leaf(Tensor::scalar(2.0), "x");
  ad::Var y = ad::mul(ad::detach(ad::square(x)), x);  // d/dx of 4*x, not x^3
  ad::backward(y);
  CHECK(x.grad().data[0] == 4.0);

  // A graph that only touches x through detach has no path to backpropagate.
  ad::Var z = ad::square(ad::detach(x));
  CHECK_FALSE(z.requires_grad());
}

TEST_CASE("wrap op wraps values and passes gradient through") {
  ad::Var x = ad::leaf(Tensor::row({3 * M_PI / 2}), "x");
  ad::Var w = ad::scale(ad::wrapv(x), 2.0);
  CHECK(w.value().data[0] == Approx(2.0 * (-M_PI / 2)));
  ad::backward(w);
  CHECK(x.grad().data[0] == Approx(2.0));
}

TEST_CASE("gradients accumulate across backward calls until zeroed") {
  ad::Var x = ad::leaf(Tensor::scalar(1.0), "x");
  ad::backward(ad::square(x));
  ad::backward(ad::square(x));
  CHECK(x.grad().data[0] == Approx(4.0));
  x.node()->zero_grad();
  CHECK(x.grad().data[0] == 0.0);
}

TEST_CASE("identical seeds yield bit-identical stochastic forward passes") {
  auto run = [](std::uint64_t seed) {
    RngStream rng(seed);
    Tensor mask = ad::dropout_mask({4, 4}, 0.5, rng);
    Tensor noise = Tensor::zeros({4, 4});
    for (double& v : noise.data) v = rng.normal();
    ad::Var out = ad::mul(ad::constant(mask), ad::constant(noise));
    return out.value().data;
  };
  CHECK(run(123) == run(123));
  CHECK(run(123) != run(124));
}
