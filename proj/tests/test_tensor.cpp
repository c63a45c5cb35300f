#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "priorcast/rng.hpp"
#include "priorcast/tensor.hpp"

using namespace priorcast;

namespace {

std::vector<double> random_values(std::size_t n, RandomStream& rng,
                                  double scale = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal(0.0, scale);
  return v;
}

Tensor random_param(Shape shape, RandomStream& rng, double scale = 1.0) {
  return Tensor::parameter(
      shape, random_values(static_cast<std::size_t>(shape_numel(shape)), rng, scale));
}

}  // namespace

TEST_CASE("forward primitives: worked examples", "[tensor]") {
  SECTION("matmul by identity") {
    Tensor eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor a = Tensor::constant({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(matmul(eye, a).values() == a.values());
  }
  SECTION("softmax symmetry") {
    Tensor x = Tensor::constant({2}, {0.0, 0.0});
    auto y = softmax(x, 0).values();
    CHECK(y[0] == Catch::Approx(0.5));
    CHECK(y[1] == Catch::Approx(0.5));
  }
  SECTION("layer_norm of a constant vector is zero") {
    Tensor x = Tensor::full({4}, 3.25);
    for (double v : layer_norm(x, 0, 1e-5).values())
      CHECK(v == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 5});
    CHECK_THROWS_WITH(matmul(a, b),
                      Catch::Matchers::ContainsSubstring("(2,3)") &&
                          Catch::Matchers::ContainsSubstring("(4,5)"));
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
  }
  SECTION("NaN propagates") {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    Tensor x = Tensor::constant({2}, {nan, -1.0});
    CHECK(std::isnan(relu(x).values()[0]));
    CHECK(std::isnan(gelu(x).values()[0]));
    CHECK(std::isnan(softmax(x, 0).values()[1]));
  }
}

TEST_CASE("backward: hand-derived cases", "[tensor]") {
  SECTION("quadratic") {
    Tape tape;
    Tensor w = Tensor::parameter({2}, {1.0, 2.0});
    tape.watch(w);
    Tensor loss = sum(mul(w, w));
    tape.backward(loss);
    CHECK(w.grad()[0] == Catch::Approx(2.0));
    CHECK(w.grad()[1] == Catch::Approx(4.0));
  }
  SECTION("matmul grads are outer products") {
    // loss = sum(a @ b): da = ones @ b^T, db = a^T @ ones
    Tape tape;
    Tensor a = Tensor::parameter({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::parameter({2, 2}, {5, 6, 7, 8});
    tape.watch(a);
    tape.watch(b);
    Tensor loss = sum(matmul(a, b));
    tape.backward(loss);
    CHECK(a.grad() == std::vector<double>{11, 15, 11, 15});
    CHECK(b.grad() == std::vector<double>{4, 4, 6, 6});
  }
  SECTION("non-scalar loss rejected") {
    Tape tape;
    Tensor x = tape.input({2}, {1.0, 2.0});
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
  }
  SECTION("double backward without reset rejected") {
    Tape tape;
    Tensor w = Tensor::parameter({2}, {1.0, 2.0});
    tape.watch(w);
    Tensor loss = sum(mul(w, w));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
    tape.reset();
  }
}

TEST_CASE("finite_difference_check: quadratic is exact", "[tensor][fd]") {
  Tensor x = Tensor::parameter({3}, {1.0, 2.0, 3.0});
  auto f = [](Tape&, const std::vector<Tensor>& leaves) {
    return sum(mul(leaves[0], leaves[0]));
  };
  auto report = finite_difference_check(f, {x}, 1e-4, 1e-8);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-8);
}

TEST_CASE("finite_difference_check: mutation test fails", "[tensor][fd]") {
  // forward computes x^2 but the recorded backward claims d/dx = 3x
  auto buggy_square = [](Tape& tape, const Tensor& x) {
    const auto& xv = x.values();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * xv[i];
    Tensor res = Tensor::constant(x.shape(), std::move(out));
    res.node()->tape = &tape;
    res.node()->requires_grad = true;
    res.node()->is_leaf = false;
    auto xn = x.node(), on = res.node();
    tape.record([xn, on] {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        xn->grad[i] += 3.0 * (*xn->value)[i] * on->grad[i];
    });
    return res;
  };
  Tensor x = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  auto f = [&](Tape& tape, const std::vector<Tensor>& leaves) {
    return sum(buggy_square(tape, leaves[0]));
  };
  auto report = finite_difference_check(f, {x}, 1e-4, 1e-4);
  CHECK_FALSE(report.pass);
}

namespace {

// reduces a tensor to a scalar through a fixed dense probe so gradients
// reach every coordinate
Tensor readout(Tape& tape, const Tensor& t) {
  std::vector<double> pv(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < pv.size(); ++i)
    pv[i] = 0.1 * static_cast<double>(i % 7) - 0.3;
  Tensor probe = tape.input(t.shape(), std::move(pv));
  return sum(mul(t, probe));
}

}  // namespace

TEST_CASE("finite differences cover every primitive", "[tensor][fd]") {
  RandomStream rng(2024);
  const double h = 1e-4, tol = 1e-4;

  auto run = [&](const char* name, auto f, std::vector<Tensor> leaves) {
    auto report = finite_difference_check(f, leaves, h, tol);
    INFO(name << ": max rel err " << report.max_rel_err);
    CHECK(report.pass);
  };

  for (int trial = 0; trial < 10; ++trial) {
    const std::int64_t m = rng.uniform_int(1, 5);
    const std::int64_t k = rng.uniform_int(1, 5);
    const std::int64_t n = rng.uniform_int(1, 5);

    run("add-broadcast",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, add(L[0], L[1]));
        },
        {random_param({m, k, n}, rng), random_param({n}, rng)});

    run("mul/sub",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, mul(sub(L[0], L[1]), L[0]));
        },
        {random_param({m, n}, rng), random_param({m, n}, rng)});

    run("matmul shared rhs",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, matmul(L[0], L[1]));
        },
        {random_param({2, m, k}, rng), random_param({k, n}, rng)});

    run("matmul batched",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, matmul(L[0], L[1]));
        },
        {random_param({2, m, k}, rng), random_param({2, k, n}, rng)});

    run("softmax",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, softmax(L[0], 1));
        },
        {random_param({m, k, n}, rng)});

    run("layer_norm",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, layer_norm(L[0], -1, 1e-5));
        },
        {random_param({m, k, n}, rng)});

    run("gelu/relu",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, gelu(relu(L[0])));
        },
        {random_param({m, n}, rng)});

    run("log/exp",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, log(scalar_add(exp(L[0]), 1.0)));
        },
        {random_param({m, n}, rng)});

    run("transpose/reshape/slice/concat",
        [](Tape& t, const std::vector<Tensor>& L) {
          Tensor a = transpose(L[0], {1, 0, 2});
          Tensor b = reshape(a, {a.dim(0), a.dim(1) * a.dim(2)});
          Tensor c = slice(b, 1, 0, b.dim(1) / 2 + 1);
          Tensor d = concat({c, c}, 1);
          return readout(t, d);
        },
        {random_param({m, k, 2 * n}, rng)});

    run("reductions",
        [](Tape& t, const std::vector<Tensor>& L) {
          return add(mean(sum_axis(L[0], 1)), readout(t, mean_axis(L[0], 0)));
        },
        {random_param({m, k, n}, rng)});

    run("rope",
        [](Tape& t, const std::vector<Tensor>& L) {
          return readout(t, rope_rotate(L[0], {0, 3, 7, 11}, 100.0));
        },
        {random_param({2, 4, 6}, rng)});

    run("attention full",
        [](Tape& t, const std::vector<Tensor>& L) {
          AttentionSpec spec;
          spec.heads = 2;
          return readout(t, attention(L[0], L[1], L[2], spec));
        },
        {random_param({2, 5, 4}, rng), random_param({2, 5, 4}, rng),
         random_param({2, 5, 4}, rng)});

    run("attention masked+rope",
        [](Tape& t, const std::vector<Tensor>& L) {
          AttentionSpec spec;
          spec.heads = 2;
          spec.mask_test_block = true;
          spec.t_train = 3;
          spec.rope = true;
          spec.rope_base = 50.0;
          return readout(t, attention(L[0], L[1], L[2], spec));
        },
        {random_param({2, 5, 4}, rng), random_param({2, 5, 4}, rng),
         random_param({2, 5, 4}, rng)});

    run("nll_rows",
        [](Tape&, const std::vector<Tensor>& L) {
          return nll_rows(L[0], {1, 0, 2});
        },
        {random_param({3, 4}, rng)});
  }
}

TEST_CASE("backward is linear in the loss", "[tensor][property]") {
  RandomStream rng(7);
  Tensor w = random_param({4, 4}, rng);
  RandomStream xr(3220);
  const auto xv = random_values(16, xr);

  auto grads_of = [&](double ca, double cb) {
    Tape tape;
    Tensor x = tape.input({4, 4}, xv);
    Tensor f = sum(mul(matmul(x, w), matmul(x, w)));
    Tensor g = sum(gelu(matmul(x, w)));
    Tensor loss = add(scalar_mul(f, ca), scalar_mul(g, cb));
    tape.backward(loss);
    auto out = w.grad();
    w.node()->grad.clear();
    return out;
  };

  auto gf = grads_of(1.0, 0.0);
  auto gg = grads_of(0.0, 1.0);
  auto gmix = grads_of(2.5, -1.25);
  for (std::size_t i = 0; i < gmix.size(); ++i)
    CHECK(gmix[i] == Catch::Approx(2.5 * gf[i] - 1.25 * gg[i]).margin(1e-12));
}

TEST_CASE("reshape/transpose/slice round trips are bit exact",
          "[tensor][property]") {
  RandomStream rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t a = rng.uniform_int(1, 6), b = rng.uniform_int(2, 6),
                       c = rng.uniform_int(1, 6);
    Tensor x = Tensor::constant(
        {a, b, c}, random_values(static_cast<std::size_t>(a * b * c), rng));
    CHECK(reshape(reshape(x, {a * b, c}), {a, b, c}).values() == x.values());
    CHECK(transpose(transpose(x, {2, 0, 1}), {1, 2, 0}).values() == x.values());
    Tensor lo = slice(x, 1, 0, b / 2);
    Tensor hi = slice(x, 1, b / 2, b - b / 2);
    CHECK(concat({lo, hi}, 1).values() == x.values());
  }
}

TEST_CASE("rope worked examples", "[tensor][rope]") {
  SECTION("zero offset leaves values unchanged") {
    Tensor q = Tensor::constant({1, 2}, {0.3, -0.8});
    auto r = rope_rotate(q, {0}, 10000.0);
    CHECK(r.values()[0] == Catch::Approx(0.3));
    CHECK(r.values()[1] == Catch::Approx(-0.8));
  }
  SECTION("two-dimensional closed form") {
    // q = k = (1, 0): score at positions (t+h, t) is cos(h * w0), w0 = 1
    const double base = 10000.0;
    for (std::int64_t t : {0, 5, 11}) {
      const std::int64_t h = 3;
      Tensor q = Tensor::constant({1, 2}, {1.0, 0.0});
      Tensor k = Tensor::constant({1, 2}, {1.0, 0.0});
      auto qr = rope_rotate(q, {t + h}, base).values();
      auto kr = rope_rotate(k, {t}, base).values();
      const double score = qr[0] * kr[0] + qr[1] * kr[1];
      CHECK(score == Catch::Approx(std::cos(static_cast<double>(h))).margin(1e-12));
    }
  }
  SECTION("scores depend only on the offset") {
    RandomStream rng(9);
    Tensor q = Tensor::constant({1, 8}, random_values(8, rng));
    Tensor k = Tensor::constant({1, 8}, random_values(8, rng));
    auto score_at = [&](std::int64_t tq, std::int64_t tk) {
      auto qr = rope_rotate(q, {tq}, 10000.0).values();
      auto kr = rope_rotate(k, {tk}, 10000.0).values();
      double s = 0.0;
      for (std::size_t i = 0; i < 8; ++i) s += qr[i] * kr[i];
      return s;
    };
    CHECK(score_at(5, 3) == Catch::Approx(score_at(7, 5)).margin(1e-12));
    CHECK(score_at(5, 3) == Catch::Approx(score_at(105, 103)).margin(1e-9));
  }
  SECTION("odd head dimension rejected") {
    Tensor q = Tensor::constant({1, 3}, {1.0, 0.0, 0.0});
    CHECK_THROWS_AS(rope_rotate(q, {0}, 10000.0), std::invalid_argument);
  }
}

TEST_CASE("masked attention blocks test-test interaction", "[tensor][attention]") {
  RandomStream rng(10);
  const std::int64_t n = 6, d = 4, t_train = 4;

  AttentionSpec masked;
  masked.heads = 2;
  masked.mask_test_block = true;
  masked.t_train = t_train;
  AttentionSpec full;
  full.heads = 2;

  Tensor q = Tensor::constant({n, d}, random_values(static_cast<std::size_t>(n * d), rng));
  Tensor k = Tensor::constant({n, d}, random_values(static_cast<std::size_t>(n * d), rng));
  Tensor v = Tensor::constant({n, d}, random_values(static_cast<std::size_t>(n * d), rng));

  // perturb test row 5 of k and v
  auto kv = k.values();
  auto vv = v.values();
  for (std::int64_t c = 0; c < d; ++c) {
    kv[static_cast<std::size_t>(5 * d + c)] += 7.5;
    vv[static_cast<std::size_t>(5 * d + c)] -= 2.5;
  }
  Tensor k2 = Tensor::constant({n, d}, kv);
  Tensor v2 = Tensor::constant({n, d}, vv);

  // masked: outputs at the other test row (4) are bit-identical
  auto out0 = attention(q, k, v, masked).values();
  auto out1 = attention(q, k2, v2, masked).values();
  for (std::int64_t c = 0; c < d; ++c)
    CHECK(out1[static_cast<std::size_t>(4 * d + c)] ==
          out0[static_cast<std::size_t>(4 * d + c)]);

  // full: the same perturbation leaks into row 4
  auto f0 = attention(q, k, v, full).values();
  auto f1 = attention(q, k2, v2, full).values();
  double diff = 0.0;
  for (std::int64_t c = 0; c < d; ++c)
    diff += std::abs(f1[static_cast<std::size_t>(4 * d + c)] -
                     f0[static_cast<std::size_t>(4 * d + c)]);
  CHECK(diff > 1e-8);

  // a single test row makes the mask vacuous
  AttentionSpec masked_one = masked;
  masked_one.t_train = n - 1;
  auto m1 = attention(q, k, v, masked_one).values();
  auto fl = attention(q, k, v, full).values();
  for (std::size_t i = 0; i < m1.size(); ++i)
    CHECK(m1[i] == Catch::Approx(fl[i]).margin(1e-12));
}
