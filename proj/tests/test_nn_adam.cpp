#include <catch2/catch_amalgamated.hpp>

#include "dpf/adam.hpp"
#include "dpf/nn.hpp"
#include "dpf/rng.hpp"
#include "helpers.hpp"

using namespace dpf;
using Catch::Approx;

TEST_CASE("dense layer examples") {
  ad::Var x = ad::constant(Tensor::row({1, 0}));
  ad::Var W = ad::constant(Tensor::identity(2));
  ad::Var b = ad::constant(Tensor::zeros({1, 2}));
  ad::Var y = ad::dense(x, W, b, ad::Act::Linear);
  CHECK(y.value().data[0] == 1.0);
  CHECK(y.value().data[1] == 0.0);

  ad::Var r = ad::dense(ad::constant(Tensor::row({1})),
                        ad::constant(Tensor::matrix(1, 1, {-2})),
                        ad::constant(Tensor::zeros({1, 1})), ad::Act::Relu);
  CHECK(r.item() == 0.0);

  ad::Var s = ad::dense(ad::constant(Tensor::row({1})),
                        ad::constant(Tensor::matrix(1, 1, {0})),
                        ad::constant(Tensor::row({0.5})), ad::Act::Sigmoid);
  CHECK(s.item() == Approx(0.6224593312).epsilon(1e-9));
}

TEST_CASE("dropout mask: degenerate keep, expectation, and bounds") {
  RngStream rng(9);
  Tensor ones = ad::dropout_mask({10, 10}, 1.0, rng);
  for (double v : ones.data) CHECK(v == 1.0);

  Tensor mask = ad::dropout_mask({100000}, 0.5, rng);
  double mean = 0;
  for (double v : mask.data) {
    CHECK((v == 0.0 || v == 2.0));
    mean += v;
  }
  mean /= static_cast<double>(mask.numel());
  CHECK(mean == Approx(1.0).margin(0.02));

  CHECK_THROWS_AS(ad::dropout_mask({2}, 0.0, rng), UsageError);
  CHECK_THROWS_AS(ad::dropout_mask({2}, -0.1, rng), UsageError);
}

TEST_CASE("dropout mask is a constant for backward") {
  RngStream rng(10);
  ad::Var x = ad::leaf(Tensor::row({1, 2, 3, 4}), "x");
  Tensor mask = ad::dropout_mask({1, 4}, 0.5, rng);
  ad::Var y = ad::sum_all(ad::mul(x, ad::constant(mask)));
  ad::backward(y);
  for (std::size_t i = 0; i < 4; ++i) CHECK(x.grad().data[i] == mask.data[i]);
}

TEST_CASE("lstm cell: zero parameters zero the state update") {
  ad::ParamStore store;
  store.add("Wx", Tensor::zeros({3, 16}));
  store.add("Wh", Tensor::zeros({4, 16}));
  store.add("b", Tensor::zeros({1, 16}));
  ad::LstmCellParams p{store.get("Wx"), store.get("Wh"), store.get("b")};
  ad::Var x = ad::constant(Tensor::row({1, -1, 2}));
  ad::Var h = ad::constant(Tensor::zeros({1, 4}));
  ad::Var c = ad::constant(Tensor::zeros({1, 4}));
  auto [h2, c2] = ad::lstm_cell(x, h, c, p);
  for (double v : h2.value().data) CHECK(v == 0.0);
  for (double v : c2.value().data) CHECK(v == 0.0);
}

TEST_CASE("lstm cell is referentially transparent") {
  RngStream rng(21);
  ad::ParamStore store;
  ad::LstmCellParams p = ad::make_lstm_cell(store, "lstm/", 3, 4, rng);
  Tensor xv = Tensor::zeros({2, 3});
  for (double& v : xv.data) v = rng.normal();
  ad::Var x = ad::constant(xv);
  ad::Var h0 = ad::constant(Tensor::zeros({2, 4}));
  ad::Var c0 = ad::constant(Tensor::zeros({2, 4}));
  auto [h1a, c1a] = ad::lstm_cell(x, h0, c0, p);
  auto [h1b, c1b] = ad::lstm_cell(x, h0, c0, p);
  CHECK(h1a.value().data == h1b.value().data);
  CHECK(c1a.value().data == c1b.value().data);
}

TEST_CASE("lstm cell gradient matches finite differences") {
  RngStream rng(22);
  ad::ParamStore store;
  ad::LstmCellParams p = ad::make_lstm_cell(store, "lstm/", 3, 5, rng);
  Tensor xv = Tensor::zeros({1, 3});
  for (double& v : xv.data) v = rng.normal();
  auto build = [&]() -> ad::Var {
    ad::Var h = ad::constant(Tensor::zeros({1, 5}));
    ad::Var c = ad::constant(Tensor::zeros({1, 5}));
    auto [h1, c1] = ad::lstm_cell(ad::constant(xv), h, c, p);
    auto [h2, c2] = ad::lstm_cell(ad::constant(xv), h1, c1, p);
    return ad::sum_all(h2);
  };
  store.zero_grad();
  ad::backward(build());
  auto eval = [&] {
    ad::NoGradGuard ng;
    return build().item();
  };
  for (const auto& [name, v] : store.params) {
    INFO(name);
    CHECK(test::max_fd_rel_err(v, eval) < 1e-4);
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ad::ParamStore store;
  ad::Var p = store.add("p", Tensor::row({1, 2, 3}));
  store.zero_grad();
  AdamState st;
  adam_step(store.all(), st);
  CHECK(p.value().data == std::vector<double>{1, 2, 3});
  CHECK(st.t == 1);
}

TEST_CASE("adam: first-step magnitude equals lr with bias correction") {
  ad::ParamStore store;
  ad::Var p = store.add("p", Tensor::scalar(0.0));
  p.grad().data[0] = 1.0;
  AdamState st;  // lr 1e-3, beta1 0.9, beta2 0.999, eps 1e-8
  adam_step(store.all(), st);
  // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
  CHECK(p.value().data[0] == Approx(-0.001).epsilon(1e-6));
}

TEST_CASE("adam: equal gradients produce equal updates") {
  ad::ParamStore store;
  ad::Var a = store.add("a", Tensor::scalar(0.5));
  ad::Var b = store.add("b", Tensor::scalar(0.5));
  a.grad().data[0] = 0.7;
  b.grad().data[0] = 0.7;
  AdamState st;
  adam_step(store.all(), st);
  CHECK(a.value().data[0] == b.value().data[0]);
}

TEST_CASE("adam: non-finite gradient raises an error naming the parameter") {
  ad::ParamStore store;
  ad::Var p = store.add("weights/W0", Tensor::scalar(0.0));
  p.grad().data[0] = std::nan("");
  AdamState st;
  CHECK_THROWS_WITH(adam_step(store.all(), st),
                    Catch::Matchers::ContainsSubstring("weights/W0"));
}

TEST_CASE("adam step counter increments by one per step") {
  ad::ParamStore store;
  ad::Var p = store.add("p", Tensor::scalar(0.0));
  AdamState st;
  for (int i = 1; i <= 5; ++i) {
    p.node()->zero_grad();
    p.grad().data[0] = 0.1;
    adam_step(store.all(), st);
    CHECK(st.t == i);
  }
}
