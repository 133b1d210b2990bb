#include <cmath>

#include "doctest.h"
#include "gradcheck_cases.hpp"
#include "test_util.hpp"
#include "vividforge/error.hpp"
#include "vividforge/gradcheck.hpp"
#include "vividforge/graph.hpp"
#include "vividforge/nn.hpp"
#include "vividforge/params.hpp"
#include "vividforge/tnsr_io.hpp"

using namespace vividforge;
using namespace vividforge::testutil;

TEST_CASE("gradcheck suite passes for every op") {
  auto cases = run_gradcheck_suite();
  CHECK(cases.size() >= 25);
  for (const auto& c : cases) {
    INFO("op case: ", c.name, " worst rel err ", c.report.worst_rel_err);
    CHECK(c.report.pass);
  }
}

TEST_CASE("gradcheck flags a deliberately wrong backward") {
  Rng rng(3, "neg");
  Tensor x = randn(rng, {4, 4});
  auto rep = check_gradients(
      [](Graph& g, const std::vector<int>& in) {
        return g.sum(g.mul(g.bad_grad(in[0]), g.bad_grad(in[0])));
      },
      {x});
  CHECK(!rep.pass);
  CHECK(rep.worst_rel_err > 1e-3);
}

TEST_CASE("simple exact gradients") {
  Graph g;
  Rng rng(5, "exact");
  Tensor x = randn(rng, {3, 3});
  int xi = g.leaf(x, true);
  int loss = g.sum(g.mul(xi, xi));
  auto grads = g.backward(loss);
  REQUIRE(!grads[size_t(xi)].data.empty());
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(grads[size_t(xi)][i] == doctest::Approx(2.0 * x[i]).epsilon(1e-14));
  }

  int lsum = g.sum(xi);
  auto gs = g.backward(lsum);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(gs[size_t(xi)][i] == 1.0);
  }
}

TEST_CASE("matmul forward matches a hand computation") {
  Graph g;
  int a = g.constant(Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}));
  int b = g.constant(Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12}));
  int c = g.matmul(a, b);
  const Tensor& v = g.value(c);
  CHECK(v.at2(0, 0) == 58.0);
  CHECK(v.at2(0, 1) == 64.0);
  CHECK(v.at2(1, 0) == 139.0);
  CHECK(v.at2(1, 1) == 154.0);
}

TEST_CASE("softmax rows are distributions and shift invariant") {
  Graph g;
  Rng rng(6, "smax");
  Tensor x = randn(rng, {5, 7}, 3.0);
  int a = g.softmax(g.constant(x));
  for (int64_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < 7; ++c) {
      double v = g.value(a).at2(r, c);
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor shifted = x;
  for (int64_t r = 0; r < 5; ++r) {
    for (int64_t c = 0; c < 7; ++c) shifted.at2(r, c) += 100.0;
  }
  int b = g.softmax(g.constant(shifted));
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(g.value(a)[i] == doctest::Approx(g.value(b)[i]).epsilon(1e-12));
  }
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
  Graph g;
  Rng rng(8, "ln");
  Tensor x = randn(rng, {4, 16}, 2.0);
  int y = g.layer_norm(g.constant(x));
  for (int64_t r = 0; r < 4; ++r) {
    double mu = 0.0, var = 0.0;
    for (int64_t c = 0; c < 16; ++c) mu += g.value(y).at2(r, c);
    mu /= 16.0;
    for (int64_t c = 0; c < 16; ++c) {
      double d = g.value(y).at2(r, c) - mu;
      var += d * d;
    }
    var /= 16.0;
    CHECK(std::fabs(mu) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("causal attention ignores the future") {
  Rng rng(9, "causal");
  Tensor q = randn(rng, {6, 8});
  Tensor k = randn(rng, {6, 8});
  Tensor v = randn(rng, {6, 8});

  auto run = [&](const Tensor& kk, const Tensor& vv) {
    Graph g;
    int mask = g.constant(causal_mask(6));
    int o = attention(g, g.constant(q), g.constant(kk), g.constant(vv), mask);
    return g.value(o);
  };
  Tensor base = run(k, v);

  Tensor k2 = k, v2 = v;
  for (int64_t c = 0; c < 8; ++c) {
    k2.at2(4, c) += 11.0;
    v2.at2(5, c) -= 7.0;
  }
  Tensor pert = run(k2, v2);
  // Rows 0..3 attend only to keys 0..3, so they are bit-identical.
  for (int64_t r = 0; r < 4; ++r) {
    for (int64_t c = 0; c < 8; ++c) {
      CHECK(base.at2(r, c) == pert.at2(r, c));
    }
  }
  // Row 4 sees the key change at position 4.
  bool row4_changed = false;
  for (int64_t c = 0; c < 8; ++c) {
    if (base.at2(4, c) != pert.at2(4, c)) row4_changed = true;
  }
  CHECK(row4_changed);
}

TEST_CASE("backward can run twice on one graph with identical results") {
  Graph g;
  Rng rng(10, "reuse");
  int x = g.leaf(randn(rng, {4, 4}), true, "x");
  int w = g.leaf(randn(rng, {4, 4}), true, "w");
  int y = g.matmul(x, w);
  int loss1 = g.sum(g.mul(y, y));
  int loss2 = g.sum(g.tanh(y));

  auto a1 = g.backward(loss1);
  auto a2 = g.backward(loss1);
  CHECK(bits_equal(a1[size_t(x)], a2[size_t(x)]));
  CHECK(bits_equal(a1[size_t(w)], a2[size_t(w)]));

  // A different loss on the same graph gives different gradients.
  auto b = g.backward(loss2);
  CHECK(!bits_equal(a1[size_t(x)], b[size_t(x)]));

  auto named = g.param_grads(loss1);
  CHECK(named.count("x") == 1);
  CHECK(named.count("w") == 1);
  CHECK(bits_equal(named.at("x"), a1[size_t(x)]));
}

TEST_CASE("stop_grad blocks the gradient path exactly") {
  Graph g;
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5});
  int xi = g.leaf(x, true);
  // y = x * sg(x); dy/dx = sg(x)
  int loss = g.sum(g.mul(xi, g.stop_grad(xi)));
  auto grads = g.backward(loss);
  for (int64_t i = 0; i < 3; ++i) {
    CHECK(grads[size_t(xi)][i] == x[i]);
  }
  // A loss that is entirely stop-gradded reaches nothing.
  int dead = g.sum(g.stop_grad(g.mul(xi, xi)));
  auto gd = g.backward(dead);
  CHECK(gd[size_t(xi)].data.empty());
}

TEST_CASE("non-finite forward values raise NumericError naming the node") {
  Graph g;
  int x = g.constant(Tensor::from({2}, {-4.0, 1.0}));
  try {
    (void)g.sqrt(x);  // sqrt(-4) = NaN
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    std::string msg = e.what();
    CHECK(msg.find("sqrt") != std::string::npos);
    CHECK(msg.find("node") != std::string::npos);
  }
}

TEST_CASE("graph rejects malformed shapes with DataError") {
  Graph g;
  int a = g.constant(Tensor::zeros({2, 3}));
  int b = g.constant(Tensor::zeros({3, 3}));
  CHECK_THROWS_AS(g.add(a, b), DataError);
  CHECK_THROWS_AS(g.matmul(b, g.constant(Tensor::zeros({2, 2}))), DataError);
  CHECK_THROWS_AS(g.embed(a, {5}), DataError);
  CHECK_THROWS_AS(g.slice(a, {0, 0}, {3, 3}), DataError);
  CHECK_THROWS_AS(g.reshape(a, {4, 2}), DataError);
  CHECK_THROWS_AS(g.backward(a), DataError);  // non-scalar loss
}

TEST_CASE("adam with zero gradients leaves parameters untouched") {
  ParamStore store;
  store.add("p", Tensor::from({3}, {1.0, 2.0, 3.0}));
  AdamState st;
  st.lr = 0.1;
  std::map<std::string, Tensor> grads;
  grads["p"] = Tensor::zeros({3});
  adam_step(store, grads, st);
  adam_step(store, grads, st);
  CHECK(store.at("p")[0] == 1.0);
  CHECK(store.at("p")[1] == 2.0);
  CHECK(store.at("p")[2] == 3.0);
  CHECK(st.step == 2);
}

TEST_CASE("adam matches the textbook update for two steps") {
  ParamStore store;
  store.add("p", Tensor::from({1}, {0.5}));
  AdamState st;
  st.lr = 0.01;
  std::map<std::string, Tensor> grads;

  // Reference computation with plain scalars.
  double p = 0.5, m = 0.0, v = 0.0;
  double g1 = 0.3, g2 = -0.2;
  auto ref_step = [&](double grad, int t) {
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad * grad;
    double mhat = m / (1.0 - std::pow(0.9, t));
    double vhat = v / (1.0 - std::pow(0.999, t));
    p -= 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
  };

  grads["p"] = Tensor::from({1}, {g1});
  adam_step(store, grads, st);
  ref_step(g1, 1);
  CHECK(store.at("p")[0] == doctest::Approx(p).epsilon(1e-15));

  grads["p"] = Tensor::from({1}, {g2});
  adam_step(store, grads, st);
  ref_step(g2, 2);
  CHECK(store.at("p")[0] == doctest::Approx(p).epsilon(1e-15));
}

TEST_CASE("adam rejects non-finite gradients") {
  ParamStore store;
  store.add("p", Tensor::from({1}, {0.5}));
  AdamState st;
  std::map<std::string, Tensor> grads;
  grads["p"] = Tensor::from({1}, {std::nan("")});
  CHECK_THROWS_AS(adam_step(store, grads, st), NumericError);
}

TEST_CASE("checkpoint round trip preserves params and optimizer state") {
  std::string dir = scratch_dir("ckpt");
  ParamStore store;
  Rng rng(12, "ck");
  store.add("a.w", randn(rng, {3, 4}));
  store.add("a.b", randn(rng, {4}));
  AdamState st;
  st.lr = 0.02;
  std::map<std::string, Tensor> grads;
  grads["a.w"] = randn(rng, {3, 4});
  grads["a.b"] = randn(rng, {4});
  adam_step(store, grads, st);

  nlohmann::json meta;
  meta["tag"] = "unit";
  save_checkpoint(dir, store, &st, meta);

  AdamState st2;
  nlohmann::json meta2;
  ParamStore back = load_checkpoint(dir, &st2, &meta2);
  CHECK(meta2["tag"] == "unit");
  CHECK(st2.step == 1);
  CHECK(st2.lr == 0.02);
  CHECK(bits_equal(back.at("a.w"), store.at("a.w")));
  CHECK(bits_equal(back.at("a.b"), store.at("a.b")));
  CHECK(bits_equal(st2.m.at("a.w"), st.m.at("a.w")));
  CHECK(bits_equal(st2.v.at("a.b"), st.v.at("a.b")));

  // Tamper with a tensor file: shape check must catch it.
  save_tensor(dir + "/a.w.tnsr", Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
}

TEST_CASE("layer initialization is deterministic and order independent") {
  Linear l1{"m.fc1", 8, 4};
  Linear l2{"m.fc2", 8, 4};
  ParamStore a, b;
  l1.init(a, 77);
  l2.init(a, 77);
  // Opposite insertion order, same seed.
  l2.init(b, 77);
  l1.init(b, 77);
  CHECK(bits_equal(a.at("m.fc1.w"), b.at("m.fc1.w")));
  CHECK(bits_equal(a.at("m.fc2.w"), b.at("m.fc2.w")));
  CHECK(!bits_equal(a.at("m.fc1.w"), a.at("m.fc2.w")));
  // Bound follows fan-in.
  double bound = 1.0 / std::sqrt(8.0);
  for (double v : a.at("m.fc1.w").data) {
    CHECK(std::fabs(v) <= bound);
  }
}

TEST_CASE("transformer block runs and is differentiable end to end") {
  ParamStore store;
  TransformerBlock block("blk", 8, 2, 16, true);
  block.init(store, 123);
  Rng rng(14, "blk");
  Tensor x = randn(rng, {5, 8}, 0.5);
  Tensor mem = randn(rng, {7, 8}, 0.5);

  Graph g;
  ModelContext ctx(g, store);
  int xi = g.constant(x);
  int mi = g.constant(mem);
  int mask = g.constant(causal_mask(5));
  int out = block.forward(ctx, xi, mi, mask, -1);
  CHECK(g.value(out).shape == std::vector<int64_t>{5, 8});

  int loss = g.sum(g.mul(out, out));
  auto grads = g.param_grads(loss);
  // Every block parameter receives some gradient.
  CHECK(grads.size() == store.tensors.size());
  bool any_nonzero = false;
  for (auto& [k, t] : grads) {
    for (double v : t.data) {
      if (v != 0.0) any_nonzero = true;
    }
  }
  CHECK(any_nonzero);
}
