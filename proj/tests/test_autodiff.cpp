#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_oracle.hpp"
#include "perpcs/autodiff.hpp"
#include "perpcs/rng.hpp"

using namespace perpcs;
using perpcs::testing::check_gradients;

namespace {

Tensor<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0, scale);
  return t;
}

// Builds a scalar loss from parameters, runs backward, and checks every
// parameter gradient against central differences.
double fd_error(const std::vector<Parameter<double>*>& params,
                const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build) {
  auto loss_value = [&] {
    Tape<double> tape(false);
    std::vector<Var> vs;
    for (auto* p : params) vs.push_back(tape.param(*p));
    return tape.value(build(tape, vs)).data[0];
  };
  for (auto* p : params) {
    p->trainable = true;
    p->zero_grad();
  }
  Tape<double> tape;
  std::vector<Var> vs;
  for (auto* p : params) vs.push_back(tape.param(*p));
  tape.backward(build(tape, vs));
  std::vector<std::vector<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  return check_gradients(loss_value, params, analytic).max_rel_err;
}

}  // namespace

TEST_CASE("matmul examples") {
  Tape<double> tape(false);
  auto m = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  auto id = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  CHECK(tape.value(tape.matmul(id, m)).data == std::vector<double>{1, 2, 3, 4});
  auto ones = tape.constant(Tensor<double>({2, 1}, {1, 1}));
  CHECK(tape.value(tape.matmul(m, ones)).data == std::vector<double>{3, 7});
  auto z = tape.constant(Tensor<double>({2, 2}));
  CHECK(tape.value(tape.matmul(z, m)).data == std::vector<double>{0, 0, 0, 0});
  CHECK_THROWS_AS(tape.matmul(ones, m), ShapeError);
}

TEST_CASE("softmax examples and properties") {
  auto s = softmax<double>(std::vector<double>{0, 0});
  CHECK(s[0] == doctest::Approx(0.5));
  s = softmax<double>(std::vector<double>{1.0, 0.5});
  CHECK(s[0] == doctest::Approx(0.6224593312018545).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(1 - 0.6224593312018545).epsilon(1e-12));
  s = softmax<double>(std::vector<double>{7, 7, 7});
  for (double v : s) CHECK(v == doctest::Approx(1.0 / 3));

  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 12);
    std::vector<double> x(static_cast<std::size_t>(n));
    for (auto& v : x) v = rng.normal(0, 20);
    const double c = rng.normal(0, 50);
    auto a = softmax<double>(x);
    for (auto& v : x) v += c;
    auto b = softmax<double>(x);
    double total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] > 0);
      CHECK(std::abs(a[i] - b[i]) <= 1e-6);
      total += a[i];
    }
    CHECK(std::abs(total - 1) <= 1e-6);
  }
  // Large magnitudes stay finite thanks to max subtraction.
  s = softmax<double>(std::vector<double>{1000, -1000, 999});
  CHECK(std::isfinite(s[0]));
}

TEST_CASE("cross entropy examples") {
  Tape<double> tape(false);
  const int v = 10;
  auto uniform = tape.constant(Tensor<double>({1, static_cast<std::size_t>(v)}));
  CHECK(tape.value(tape.cross_entropy(uniform, {3}, {1})).data[0] == doctest::Approx(std::log(v)));

  Tensor<double> peaked({1, 4}, {0, 0, 60, 0});
  CHECK(tape.value(tape.cross_entropy(tape.constant(peaked), {2}, {1})).data[0] < 1e-20);

  auto l = tape.constant(Tensor<double>({3, 3}, {1, 2, 3, 0.5, -1, 2, 9, 9, 9}));
  // third row masked out
  CHECK(tape.value(tape.cross_entropy(l, {0, 2, 1}, {1, 1, 0})).data[0] ==
        doctest::Approx(1.3244586305507688).epsilon(1e-12));
  CHECK_THROWS_AS(tape.cross_entropy(l, {0}, {1}), ShapeError);
  CHECK_THROWS_AS(tape.cross_entropy(l, {0, 1, 2}, {0, 0, 0}), ShapeError);
}

TEST_CASE("backward: linear case, constant loss, frozen tensors") {
  Parameter<double> w("w", Tensor<double>({1, 3}, {0.5, -1, 2}));
  Parameter<double> frozen("x", Tensor<double>({3, 1}, {1, 2, 3}));
  w.trainable = true;
  frozen.grad = {7, 7, 7};
  Tape<double> tape;
  auto loss = tape.sum(tape.matmul(tape.param(w), tape.param(frozen)));
  tape.backward(loss);
  CHECK(w.grad == std::vector<double>{1, 2, 3});
  CHECK(frozen.grad == std::vector<double>{7, 7, 7});
  CHECK_THROWS_AS(tape.backward(loss), TapeError);
  tape.reset();

  Parameter<double> p("p", Tensor<double>({2}, {1, 2}));
  p.trainable = true;
  Tape<double> t2;
  t2.param(p);
  auto c = t2.sum(t2.constant(Tensor<double>({1}, {5})));
  t2.backward(c);
  CHECK(p.grad == std::vector<double>{0, 0});
}

TEST_CASE("backward rejects non-scalar loss and disabled tapes") {
  Tape<double> tape;
  auto v = tape.constant(Tensor<double>({2}, {1, 2}));
  CHECK_THROWS_AS(tape.backward(v), TapeError);
  Tape<double> nograd(false);
  auto s = nograd.sum(nograd.constant(Tensor<double>({1}, {1})));
  CHECK_THROWS_AS(nograd.backward(s), TapeError);
}

TEST_CASE("non-finite outputs are errors") {
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({1, 2}, {1e308, 1e308}));
  CHECK_THROWS_AS(tape.add(x, x), NonFiniteError);
}

TEST_CASE("finite differences: every differentiable op on random shapes") {
  Rng rng(42);
  for (int trial = 0; trial < 4; ++trial) {
    const auto m = static_cast<std::size_t>(rng.uniform_int(2, 4));
    const auto k = static_cast<std::size_t>(rng.uniform_int(2, 5));
    const auto n = static_cast<std::size_t>(rng.uniform_int(2, 5));
    Parameter<double> a("a", randn({m, k}, rng)), b("b", randn({k, n}, rng)), bt("bt", randn({n, k}, rng));
    Parameter<double> c("c", randn({m, n}, rng)), row("row", randn({n}, rng)), col("col", randn({m}, rng));
    Parameter<double> g("g", randn({n}, rng, 0.5)), be("be", randn({n}, rng, 0.5));
    Parameter<double> w("w", randn({m, n}, rng));  // fixed weights to make losses non-trivial
    w.trainable = false;

    auto weighted = [&](Tape<double>& t, Var y) { return t.sum(t.mul(y, t.param(w))); };
    CAPTURE(trial);
    CHECK(fd_error({&a, &b}, [&](auto& t, auto& v) { return weighted(t, t.matmul(v[0], v[1])); }) <= 1e-4);
    CHECK(fd_error({&a, &bt}, [&](auto& t, auto& v) { return weighted(t, t.matmul_nt(v[0], v[1])); }) <= 1e-4);
    CHECK(fd_error({&c, &row}, [&](auto& t, auto& v) { return weighted(t, t.add_row(v[0], v[1])); }) <= 1e-4);
    CHECK(fd_error({&c, &col}, [&](auto& t, auto& v) { return weighted(t, t.mul_col(v[0], v[1])); }) <= 1e-4);
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return weighted(t, t.mul(v[0], v[0])); }) <= 1e-4);
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return weighted(t, t.sub(v[0], t.scale(v[0], 0.3))); }) <= 1e-4);
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return weighted(t, t.sigmoid(v[0])); }) <= 1e-4);
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return weighted(t, t.gelu(v[0])); }) <= 1e-4);
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return weighted(t, t.relu(v[0])); }) <= 1e-4);
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return weighted(t, t.softmax_rows(v[0])); }) <= 1e-4);
    CHECK(fd_error({&c, &g, &be}, [&](auto& t, auto& v) { return weighted(t, t.layer_norm(v[0], v[1], v[2])); }) <=
          1e-4);
    CHECK(fd_error({&c, &row}, [&](auto& t, auto& v) {
            return t.sum(t.mul(t.row_dot(v[0], v[1]), t.constant(Tensor<double>({m}, std::vector<double>(m, 0.7)))));
          }) <= 1e-4);
    std::vector<int> targets(m);
    std::vector<std::uint8_t> mask(m, 1);
    for (auto& tg : targets) tg = rng.uniform_int(0, static_cast<int>(n) - 1);
    mask[0] = 0;
    CHECK(fd_error({&c}, [&](auto& t, auto& v) { return t.cross_entropy(v[0], targets, mask); }) <= 1e-4);

    Parameter<double> table("table", randn({6, n}, rng));
    std::vector<int> ids{0, 3, 3, 5};
    Parameter<double> w4("w4", randn({4, n}, rng));
    CHECK(fd_error({&table}, [&](auto& t, auto& v) { return t.sum(t.mul(t.embedding(v[0], ids), t.param(w4))); }) <=
          1e-4);

    const std::size_t batch = 2, seq = 3, heads = 2, d = 4;
    Parameter<double> q("q", randn({batch * seq, d}, rng)), kk("k", randn({batch * seq, d}, rng)),
        vv("v", randn({batch * seq, d}, rng)), wa("wa", randn({batch * seq, d}, rng));
    CHECK(fd_error({&q, &kk, &vv}, [&](auto& t, auto& v) {
            return t.sum(t.mul(t.causal_attention(v[0], v[1], v[2], batch, seq, heads), t.param(wa)));
          }) <= 1e-4);
  }
}

TEST_CASE("causal attention ignores future positions") {
  Rng rng(3);
  const std::size_t seq = 4, d = 4;
  auto q = randn({seq, d}, rng), k = randn({seq, d}, rng), v = randn({seq, d}, rng);
  Tape<double> tape(false);
  auto out1 = tape.value(tape.causal_attention(tape.constant(q), tape.constant(k), tape.constant(v), 1, seq, 2));
  for (std::size_t c = 0; c < d; ++c) {
    k.data[3 * d + c] += 5;
    v.data[3 * d + c] -= 3;
  }
  auto out2 = tape.value(tape.causal_attention(tape.constant(q), tape.constant(k), tape.constant(v), 1, seq, 2));
  for (std::size_t i = 0; i < 3 * d; ++i) CHECK(out1.data[i] == out2.data[i]);
}
