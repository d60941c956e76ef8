#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bsdg/gradcheck.hpp"
#include "bsdg/ops.hpp"
#include "bsdg/params.hpp"
#include "bsdg/random.hpp"

using namespace bsdg;
using namespace bsdg::ad;

namespace {

Tensor<double> random_tensor(Shape shape, RngStream& rng, double sd = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.values()) v = rng.normal() * sd;
  return t;
}

// Keeps relu inputs away from the kink so central differences stay valid.
void push_from_zero(Tensor<double>& t, double margin = 1e-2) {
  for (auto& v : t.values())
    if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
}

}  // namespace

TEST_CASE("softmax values on a known row") {
  Tensor<double> x(Shape{1, 3}, {1.0, 2.0, 3.0});
  auto y = softmax_last(x);
  const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double s = e1 + e2 + e3;
  CHECK(y.values()[0] == doctest::Approx(e1 / s).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(e2 / s).epsilon(1e-12));
  CHECK(y.values()[2] == doctest::Approx(e3 / s).epsilon(1e-12));
  double total = y.values()[0] + y.values()[1] + y.values()[2];
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("backward of x*x is 2x") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(3.0));
  auto y = mul(x, x);
  tape.backward(y);
  GradBook<double> book(tape);
  CHECK(book.grad(x).item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("fan-out accumulates gradients") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(2.0));
  auto y = add(mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1 = 5
  tape.backward(y);
  GradBook<double> book(tape);
  CHECK(book.grad(x).item() == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("stop_gradient blocks flow but shares values bitwise") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(4.0));
  auto frozen = stop_gradient(mul(x, x));
  CHECK(!frozen.on_tape());
  CHECK(frozen.item() == 16.0);

  // loss = x * stop(x^2): only the live factor contributes.
  auto loss = mul(x, frozen);
  tape.backward(loss);
  GradBook<double> book(tape);
  CHECK(book.grad(x).item() == doctest::Approx(16.0).epsilon(1e-15));
}

TEST_CASE("stop_gradient shares the underlying buffer") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, {1.0, 2.0, 3.0}));
  auto y = exp_t(x);
  auto z = stop_gradient(y);
  CHECK(z.buffer().get() == y.buffer().get());
}

TEST_CASE("relu subgradient at the kink is zero") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{3}, {-1.0, 0.0, 2.0}));
  auto y = sum_all(relu(x));
  tape.backward(y);
  GradBook<double> book(tape);
  auto g = book.grad(x).values();
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 1.0);
}

TEST_CASE("parameters outside the extraction filter receive no gradient") {
  ParamSet<double> theta;
  theta.partition = Partition::theta;
  theta.values.emplace("theta/w", Tensor<double>(Shape{2}, {1.0, 2.0}));
  ParamSet<double> omega;
  omega.partition = Partition::omega;
  omega.values.emplace("omega/w", Tensor<double>(Shape{2}, {3.0, 4.0}));

  Tape<double> tape;
  auto bt = bind(tape, theta);
  auto bo = bind(tape, omega);
  auto loss = sum_all(mul(at(bt, "theta/w"), at(bt, "theta/w")));
  tape.backward(loss);
  GradBook<double> book(tape);

  auto gt = extract_grads(book, theta, bt);
  auto go = extract_grads(book, omega, bo);
  CHECK(gt.values.at("theta/w").values()[0] == doctest::Approx(2.0));
  CHECK(go.values.at("omega/w").values()[0] == 0.0);
  CHECK(go.values.at("omega/w").values()[1] == 0.0);
  CHECK(!book.influenced(at(bo, "omega/w")));
}

TEST_CASE("identical builds produce bitwise identical gradients") {
  RngStream rng(77);
  auto x0 = random_tensor(Shape{4, 5}, rng);
  auto w0 = random_tensor(Shape{5, 3}, rng);
  std::vector<double> first;
  for (int rep = 0; rep < 2; ++rep) {
    Tape<double> tape;
    auto x = tape.leaf(x0.clone());
    auto w = tape.leaf(w0.clone());
    auto loss = sum_all(tanh_t(matmul(x, w)));
    tape.backward(loss);
    GradBook<double> book(tape);
    auto g = book.grad(w).values();
    if (rep == 0)
      first = g;
    else
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == first[i]);
  }
}

TEST_CASE("broadcast add of a row vector") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = tape.leaf(Tensor<double>(Shape{3}, {10, 20, 30}));
  auto y = add(x, b);
  CHECK(y.values()[0] == 11.0);
  CHECK(y.values()[5] == 36.0);
  tape.backward(sum_all(y));
  GradBook<double> book(tape);
  auto gb = book.grad(b).values();
  CHECK(gb[0] == 2.0);  // two rows fold into each bias slot
  CHECK(gb[2] == 2.0);
}

TEST_CASE("central differences agree with the tape on a dense composite") {
  RngStream rng(123);
  ParamSet<double> theta;
  theta.partition = Partition::theta;
  theta.values.emplace("theta/w1", random_tensor(Shape{6, 5}, rng, 0.7));
  theta.values.emplace("theta/b1", random_tensor(Shape{5}, rng, 0.3));
  ParamSet<double> phi;
  phi.partition = Partition::phi;
  phi.values.emplace("phi/w2", random_tensor(Shape{5, 4}, rng, 0.7));
  phi.values.emplace("phi/b2", random_tensor(Shape{4}, rng, 0.3));

  auto x = random_tensor(Shape{3, 6}, rng);
  std::vector<int> labels{0, 2, 3};

  auto f = [&](Tape<double>& tape, std::vector<BoundParams<double>>& bound) {
    auto h = tanh_t(dense(x, at(bound[0], "theta/w1"), at(bound[0], "theta/b1")));
    auto logits = dense(h, at(bound[1], "phi/w2"), at(bound[1], "phi/b2"));
    return ce_mean(logits, labels);
  };
  double err = finite_diff_check<double>(f, {&theta, &phi}, 1e-6);
  CHECK(err < 1e-7);
}

TEST_CASE("central differences across the primitive suite") {
  RngStream rng(2024);

  SUBCASE("matmul, transpose, slicing, concat") {
    ParamSet<double> p;
    p.values.emplace("a", random_tensor(Shape{3, 4}, rng));
    p.values.emplace("b", random_tensor(Shape{4, 5}, rng));
    auto f = [&](Tape<double>& tape, BoundParams<double>& b) {
      auto m = matmul(at(b, "a"), at(b, "b"));       // [3,5]
      auto t = transpose2d(m);                       // [5,3]
      auto c = concat_last(m, slice_last(m, 1, 2));  // [3,7]
      return add(sum_all(tanh_t(t)), mean_all(mul(c, c)));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-7);
  }

  SUBCASE("exp, log, sqrt, div on positive inputs") {
    ParamSet<double> p;
    auto t = random_tensor(Shape{8}, rng, 0.4);
    for (auto& v : t.values()) v = std::abs(v) + 0.5;
    p.values.emplace("x", t);
    auto f = [&](Tape<double>& tape, BoundParams<double>& b) {
      auto x = at(b, "x");
      auto y = div(log_t(x), add_scalar(sqrt_t(x), 1.0));
      return sum_all(mul(y, exp_t(scale(x, 0.1))));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-7) < 1e-6);
  }

  SUBCASE("relu away from kinks") {
    ParamSet<double> p;
    auto t = random_tensor(Shape{3, 6}, rng);
    push_from_zero(t);
    p.values.emplace("x", t);
    auto f = [&](Tape<double>& tape, BoundParams<double>& b) {
      return mean_all(relu(at(b, "x")));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-7);
  }

  SUBCASE("softmax and log_softmax") {
    ParamSet<double> p;
    p.values.emplace("x", random_tensor(Shape{4, 5}, rng));
    auto f = [&](Tape<double>& tape, BoundParams<double>& b) {
      auto s = softmax_last(at(b, "x"));
      auto l = log_softmax_last(at(b, "x"));
      return add(sum_all(mul(s, s)), mean_all(mul(l, l)));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-6);
  }

  SUBCASE("batch reductions") {
    ParamSet<double> p;
    p.values.emplace("x", random_tensor(Shape{6, 4}, rng));
    auto f = [&](Tape<double>& tape, BoundParams<double>& b) {
      auto x = at(b, "x");
      auto parts = add(sum_all(mul(mean_over_batch(x), mean_over_batch(x))),
                       sum_all(var_over_batch(x)));
      parts = add(parts, sum_all(std_over_batch(x)));
      parts = add(parts, sum_all(sum_over_batch(x)));
      return add(parts, l2_norm(x));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-6);
  }

  SUBCASE("max over batch with distinct entries") {
    ParamSet<double> p;
    Tensor<double> t(Shape{5, 3});
    for (std::size_t i = 0; i < t.size(); ++i)
      t.values()[i] = std::sin(double(i) * 1.7) + 0.001 * double(i);
    p.values.emplace("x", t);
    auto f = [&](Tape<double>& tape, BoundParams<double>& b) {
      return sum_all(mul(max_over_batch(at(b, "x")), max_over_batch(at(b, "x"))));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-7);
  }

  SUBCASE("conv and pool with gap-protected windows") {
    ParamSet<double> p;
    Tensor<double> x(Shape{2, 2, 4, 4});
    for (std::size_t i = 0; i < x.size(); ++i)
      x.values()[i] = std::cos(double(i) * 0.9) + 0.01 * double(i % 7);
    p.values.emplace("x", x);
    p.values.emplace("k", random_tensor(Shape{3, 2, 3, 3}, rng, 0.4));
    p.values.emplace("b", random_tensor(Shape{3}, rng, 0.2));
    auto f = [&](Tape<double>& tape, BoundParams<double>& bp) {
      auto y = conv2d_3x3(at(bp, "x"), at(bp, "k"), at(bp, "b"));
      return mean_all(maxpool2d_2x2(tanh_t(y)));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-6);
  }

  SUBCASE("cross entropy and kl from logits") {
    ParamSet<double> p;
    p.values.emplace("a", random_tensor(Shape{4, 6}, rng));
    p.values.emplace("b", random_tensor(Shape{4, 6}, rng));
    std::vector<int> labels{1, 0, 5, 3};
    auto f = [&](Tape<double>& tape, BoundParams<double>& bp) {
      return add(ce_mean(at(bp, "a"), labels), kl_mean(at(bp, "a"), at(bp, "b")));
    };
    CHECK(finite_diff_check<double>(f, p, 1e-6) < 1e-6);
  }
}

TEST_CASE("kl is zero at equal logits and positive otherwise") {
  RngStream rng(5);
  auto a = random_tensor(Shape{3, 4}, rng);
  CHECK(kl_mean(a, a).item() == doctest::Approx(0.0).epsilon(1e-14));
  auto b = random_tensor(Shape{3, 4}, rng);
  CHECK(kl_mean(a, b).item() > 0.0);
}

TEST_CASE("cross entropy against a hand value") {
  // logits row [0,0]: uniform over 2 classes, ce = log(2)
  Tensor<double> logits(Shape{1, 2}, {0.0, 0.0});
  CHECK(ce_mean(logits, {0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("std over batch is safe at zero variance") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{4, 2}, {3, 1, 3, 2, 3, 3, 3, 4}));
  auto s = std_over_batch(x);
  CHECK(s.values()[0] == 0.0);
  tape.backward(sum_all(s));
  GradBook<double> book(tape);
  for (std::size_t n = 0; n < 4; ++n) {
    const double g = book.grad(x).values()[n * 2 + 0];
    CHECK(std::isfinite(g));
    CHECK(g == 0.0);
  }
}

TEST_CASE("maxpool ties resolve to the first element in scan order") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>(Shape{1, 1, 2, 2}, {7.0, 7.0, 7.0, 7.0}));
  auto y = maxpool2d_2x2(x);
  tape.backward(sum_all(y));
  GradBook<double> book(tape);
  auto g = book.grad(x).values();
  CHECK(g[0] == 1.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
}

TEST_CASE("contract and domain errors") {
  CHECK_THROWS_AS(log_t(Tensor<double>(Shape{1}, {0.0})), std::domain_error);
  CHECK_THROWS_AS(sqrt_t(Tensor<double>(Shape{1}, {-1.0})), std::domain_error);

  Tensor<double> a(Shape{2, 3}, 1.0);
  Tensor<double> b(Shape{2, 2}, 1.0);
  CHECK_THROWS_AS((void)matmul(a, b), contract_violation);
  CHECK_THROWS_AS((void)add(a, b), contract_violation);

  Tape<double> t1, t2;
  auto x1 = t1.leaf(Tensor<double>::scalar(1.0));
  auto x2 = t2.leaf(Tensor<double>::scalar(2.0));
  CHECK_THROWS_AS((void)add(x1, x2), contract_violation);

  Tape<double> t3;
  auto v = t3.leaf(Tensor<double>(Shape{3}, {1, 2, 3}));
  CHECK_THROWS_AS(t3.backward(v), contract_violation);  // non-scalar loss
  CHECK_THROWS_AS(t3.backward(Tensor<double>::scalar(0.0)), contract_violation);
}

TEST_CASE("constant operands participate without receiving gradients") {
  Tape<double> tape;
  Tensor<double> w_const(Shape{2, 2}, {1, 2, 3, 4});
  auto x = tape.leaf(Tensor<double>(Shape{1, 2}, {1.0, 1.0}));
  auto y = matmul(x, w_const);
  CHECK(y.on_tape());
  tape.backward(sum_all(y));
  GradBook<double> book(tape);
  auto g = book.grad(x).values();
  CHECK(g[0] == 3.0);
  CHECK(g[1] == 7.0);
}

TEST_CASE("backward pass accounting by kind") {
  ad_stats().reset();
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(2.0));
  auto loss = mul(x, x);
  tape.backward(loss, PassKind::param);
  {
    Tape<double> tape2;
    auto r = tape2.leaf(Tensor<double>::scalar(0.5));
    tape2.backward(mul(r, r), PassKind::probe);
  }
  CHECK(ad_stats().param_backward == 1);
  CHECK(ad_stats().probe_backward == 1);
  CHECK(ad_stats().audit_backward == 0);
  CHECK(ad_stats().total() == 2);
}

TEST_CASE("unreached nodes never run their pullbacks") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::scalar(3.0));
  auto used = mul(x, x);
  auto unused = log_t(add_scalar(x, 5.0));
  (void)unused;
  tape.backward(used);
  GradBook<double> book(tape);
  CHECK(book.grad(x).item() == doctest::Approx(6.0));
  CHECK(!book.influenced(unused));
}
