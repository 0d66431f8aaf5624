#include <doctest.h>

#include "oracles.hpp"
#include "tsi/gradcheck.hpp"
#include "tsi/gradcheck_suites.hpp"
#include "tsi/ops.hpp"

using namespace tsi;
using oracle::Buf;
using Tp = Tape<double>;

TEST_SUITE("autograd") {

TEST_CASE("gradient of sum is all ones") {
  Parameter<double> x("x", oracle::random({3, 4}, 1));
  x.zero_grad();
  Tp t;
  t.backward(ops::sum(t.param(x)));
  for (auto g : x.grad.data()) CHECK(g == 1.0);
}

TEST_CASE("gradient of half squared norm is x") {
  Parameter<double> x("x", oracle::random({5}, 2));
  x.zero_grad();
  Tp t;
  auto v = t.param(x);
  t.backward(ops::scale(ops::sum(ops::mul(v, v)), 0.5));
  CHECK(x.grad == x.value);
}

TEST_CASE("non-scalar loss is a contract error") {
  Parameter<double> x("x", oracle::random({2}, 3));
  Tp t;
  CHECK_THROWS_AS(t.backward(ops::mul(t.param(x), t.param(x))), ContractError);
}

TEST_CASE("gradients accumulate over reuse and skip constants") {
  Parameter<double> x("x", Buf({2}, std::vector<double>{1.0, 2.0}));
  x.zero_grad();
  Tp t;
  auto v = t.param(x);
  auto c = t.constant(Buf({2}, 3.0));
  t.backward(ops::sum(ops::add(ops::mul(v, c), v)));
  CHECK(x.grad == Buf({2}, 4.0));
  CHECK(t.grad(c).empty());
}

TEST_CASE("unreached parameters keep a zero gradient") {
  Parameter<double> x("x", oracle::random({2}, 4)), y("y", oracle::random({3}, 5));
  x.zero_grad();
  y.zero_grad();
  Tp t;
  t.param(y);
  t.backward(ops::sum(t.param(x)));
  for (auto g : y.grad.data()) CHECK(g == 0.0);
}

TEST_CASE("tape nodes are topologically ordered") {
  Parameter<double> x("x", oracle::random({2}, 6));
  Tp t;
  auto a = t.param(x);
  auto b = ops::relu(a);
  auto c = ops::add(a, b);
  CHECK(a.id() < b.id());
  CHECK(b.id() < c.id());
}

TEST_CASE("grad_check on a linear function is exact") {
  Parameter<double> w("w", oracle::random({4}, 7));
  const auto x = oracle::random({4}, 8);
  auto f = [&](Tp& t) { return ops::sum(ops::mul(t.param(w), t.constant(x))); };
  const auto r = grad_check(f, {&w});
  CHECK(r.passed());
  CHECK(r.max_rel_error() < 1e-10);
}

TEST_CASE("grad_check on a softmax cross-entropy head") {
  Parameter<double> w("w", oracle::random({3, 5}, 9, 0.5));
  Parameter<double> b("b", oracle::random({3}, 10, 0.5));
  const auto x = oracle::random({6, 5}, 11);
  const std::vector<int> labels{0, 1, 2, 2, 1, 0};
  auto f = [&](Tp& t) {
    return ops::cross_entropy(ops::fully_connected(t.constant(x), t.param(w), t.param(b)), labels);
  };
  const auto r = grad_check(f, {&w, &b});
  CHECK(r.passed());
  CHECK(r.max_rel_error() < 1e-6);
}

TEST_CASE("relative error definition") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == 0.5);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1e-13, 0.0) == doctest::Approx(0.1));
}

TEST_CASE("sampled grad_check records its seed and sample count") {
  Parameter<double> w("w", oracle::random({50}, 12));
  auto f = [&](Tp& t) { return ops::sum(ops::sigmoid(t.param(w))); };
  GradCheckOptions o;
  o.max_samples = 7;
  o.seed = 99;
  const auto r = grad_check(f, {&w}, o);
  CHECK(r.seed == 99);
  CHECK(r.entries.at(0).checked == 7);
  CHECK(r.entries.at(0).total == 50);
}

TEST_CASE("every gradient suite passes") {
  for (const auto& suite : gradcheck_suite_names()) {
    for (const auto& r : run_gradcheck_suite(suite)) {
      INFO(r.name << "\n" << r.report.to_string());
      CHECK(r.report.passed());
      CHECK(r.report.max_rel_error() < 1e-4);
    }
  }
  CHECK_THROWS_AS(run_gradcheck_suite("nope"), ConfigError);
}

TEST_CASE("a corrupted adjoint is caught") {
  debug::set_corrupted_adjoint("sigmoid", 1.5);
  const auto results = run_gradcheck_suite("primitives");
  debug::set_corrupted_adjoint("");
  for (const auto& r : results) {
    INFO(r.name);
    CHECK(r.report.passed() == (r.name != "primitive/sigmoid"));
  }
}

}  // TEST_SUITE
