#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "tsi/kernels.hpp"
#include "tsi/ops.hpp"

using namespace tsi;
using oracle::Buf;
using Tp = Tape<double>;

namespace {

Buf vals(Shape s, std::vector<double> v) { return Buf(std::move(s), std::move(v)); }

}  // namespace

TEST_SUITE("ops") {

TEST_CASE("matmul examples") {
  auto y = oracle::eval([](Tp& t) {
    return ops::matmul(t.constant(vals({2, 2}, {1, 0, 0, 1})), t.constant(vals({2, 2}, {3, 4, 5, 6})));
  });
  CHECK(y == vals({2, 2}, {3, 4, 5, 6}));
  y = oracle::eval([](Tp& t) { return ops::matmul(t.constant(vals({1, 2}, {1, 2})), t.constant(vals({2, 1}, {3, 4}))); });
  CHECK(y.item() == 11.0);

  const auto a = oracle::random({3, 4}, 1), b = oracle::random({4, 2}, 2);
  y = oracle::eval([&](Tp& t) { return ops::matmul(t.constant(a), t.constant(b)); });
  CHECK(oracle::max_abs_diff(y, oracle::matmul(a, b)) < 1e-12);
}

TEST_CASE("matmul broadcasts leading dims") {
  const auto a = oracle::random({2, 1, 3, 4}, 3), b = oracle::random({3, 4, 5}, 4);
  const auto y = oracle::eval([&](Tp& t) { return ops::matmul(t.constant(a), t.constant(b)); });
  REQUIRE(y.shape() == Shape{2, 3, 3, 5});
  for (std::int64_t i = 0; i < 2; ++i)
    for (std::int64_t j = 0; j < 3; ++j) {
      Buf ai({3, 4}), bj({4, 5});
      std::copy_n(a.raw() + i * 12, 12, ai.raw());
      std::copy_n(b.raw() + j * 20, 20, bj.raw());
      const Buf ref = oracle::matmul(ai, bj);
      for (std::size_t k = 0; k < 15; ++k) CHECK(y[(i * 3 + j) * 15 + k] == doctest::Approx(ref[k]).epsilon(1e-12));
    }
}

TEST_CASE("matmul shape errors name the axes") {
  Tp t;
  try {
    ops::matmul(t.constant(Buf({2, 3})), t.constant(Buf({4, 2})));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("4") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::matmul(t.constant(Buf({2, 2, 3})), t.constant(Buf({3, 3, 2}))), ShapeError);
}

TEST_CASE("softmax examples and invariants") {
  auto y = oracle::eval([](Tp& t) { return ops::softmax(t.constant(Buf({3})), 0); });
  for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  y = oracle::eval([](Tp& t) { return ops::softmax(t.constant(vals({1}, {-7.0})), 0); });
  CHECK(y[0] == 1.0);

  y = oracle::eval([](Tp& t) { return ops::softmax(t.constant(vals({2}, {1000.0, 1001.0})), 0); });
  // Shifted logits [-1, 0]: e^-1 / (1 + e^-1).
  const double lo = std::exp(-1.0) / (1.0 + std::exp(-1.0));
  CHECK(y[0] == doctest::Approx(lo).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(1.0 - lo).epsilon(1e-14));

  auto x = oracle::random({4, 5, 6}, 7, 1e3);
  for (std::int64_t axis = 0; axis < 3; ++axis) {
    const auto s = oracle::eval([&](Tp& t) { return ops::softmax(t.constant(x), axis); });
    const std::int64_t n = x.dim(axis);
    std::int64_t inner = 1;
    for (std::int64_t a = axis + 1; a < 3; ++a) inner *= x.dim(a);
    const std::int64_t outer = static_cast<std::int64_t>(x.numel()) / (n * inner);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        double sum = 0.0;
        for (std::int64_t k = 0; k < n; ++k) {
          const double v = s[(o * n + k) * inner + i];
          CHECK(v >= 0.0);
          CHECK(v <= 1.0);
          sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
  }
  const auto f = oracle::eval([&](Tp& t) { return ops::softmax(t.constant(x), -1); });
  CHECK(oracle::max_abs_diff(f, oracle::softmax_rows(x.reshaped({20, 6})).reshaped(x.shape())) < 1e-15);
}

TEST_CASE("softmax in 32-bit at extreme logits") {
  Tape<float> t;
  auto y = ops::softmax(t.constant(Tensor<float>({3}, std::vector<float>{1000.f, -1000.f, 999.f})), 0).value();
  float sum = 0;
  for (auto v : y.data()) {
    CHECK(std::isfinite(v));
    sum += v;
  }
  CHECK(std::abs(sum - 1.0f) < 1e-6f);
}

TEST_CASE("sigmoid examples") {
  auto y = oracle::eval([](Tp& t) { return ops::sigmoid(t.constant(vals({3}, {0.0, -50.0, -745.0}))); });
  CHECK(y[0] == 0.5);
  CHECK(y[1] > 0.0);
  CHECK(y[1] < 1e-6);
  CHECK(y[2] >= 0.0);
  CHECK(std::isfinite(y[2]));
  Tape<float> tf;
  auto yf = ops::sigmoid(tf.constant(Tensor<float>({2}, std::vector<float>{-100.f, 100.f}))).value();
  CHECK(yf[0] > 0.0f);
  CHECK(yf[0] < 1e-6f);
  CHECK(yf[1] <= 1.0f);

  const auto x = oracle::random({7, 9}, 8, 4.0);
  y = oracle::eval([&](Tp& t) { return ops::sigmoid(t.constant(x)); });
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == doctest::Approx(oracle::sigmoid(x[i])).epsilon(1e-14));
}

TEST_CASE("conv2d examples") {
  const auto x = oracle::random({2, 3, 5, 5}, 9);
  Buf eye({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) eye[c * 3 + c] = 1.0;
  CHECK(oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(x), t.constant(eye)); }) == x);
  const auto zero = oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(x), t.constant(Buf({4, 3, 3, 3})), 1, 1); });
  for (auto v : zero.data()) CHECK(v == 0.0);

  const auto x4 = oracle::random({1, 2, 4, 4}, 10), wd = oracle::random({2, 1, 3, 3}, 11);
  auto y = oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(x4), t.constant(wd), 1, 1, 2); });
  CHECK(oracle::max_abs_diff(y, oracle::conv2d(x4, wd, 1, 1, 2)) < 1e-12);

  // Strided, grouped and unpadded variants.
  const auto xg = oracle::random({2, 4, 7, 6}, 12), wg = oracle::random({6, 2, 3, 3}, 13);
  y = oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(xg), t.constant(wg), 2, 1, 2); });
  CHECK(oracle::max_abs_diff(y, oracle::conv2d(xg, wg, 2, 1, 2)) < 1e-12);
  const auto w7 = oracle::random({5, 4, 7, 7}, 14);
  y = oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(xg), t.constant(w7), 2, 3); });
  CHECK(oracle::max_abs_diff(y, oracle::conv2d(xg, w7, 2, 3, 1)) < 1e-12);

  Tp t;
  CHECK_THROWS_AS(ops::conv2d(t.constant(Buf({1, 3, 4, 4})), t.constant(Buf({4, 1, 3, 3})), 1, 1, 2), ConfigError);
  CHECK_THROWS_AS(ops::conv2d(t.constant(Buf({1, 3, 2, 2})), t.constant(Buf({1, 3, 5, 5}))), ShapeError);
}

TEST_CASE("depthwise center-tap kernels are identities") {
  const auto x = oracle::random({2, 3, 4, 5}, 15);
  Buf w({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w[c * 9 + 4] = 1.0;
  CHECK(oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(x), t.constant(w), 1, 1, 3); }) == x);
  const auto x1 = oracle::random({3, 4, 6}, 16);
  Buf k({4, 3});
  for (int c = 0; c < 4; ++c) k[c * 3 + 1] = 1.0;
  CHECK(oracle::eval([&](Tp& t) { return ops::conv1d_temporal(t.constant(x1), t.constant(k)); }) == x1);
}

TEST_CASE("conv1d_temporal examples") {
  const auto x = vals({1, 1, 4}, {1, 2, 3, 4});
  const auto y = oracle::eval([&](Tp& t) { return ops::conv1d_temporal(t.constant(x), t.constant(vals({1, 3}, {0, 0, 1}))); });
  CHECK(y == vals({1, 1, 4}, {2, 3, 4, 0}));
  const auto xr = oracle::random({3, 5, 7}, 17), wr = oracle::random({5, 3}, 18);
  CHECK(oracle::max_abs_diff(oracle::eval([&](Tp& t) { return ops::conv1d_temporal(t.constant(xr), t.constant(wr)); }),
                             oracle::conv1d(xr, wr)) < 1e-12);
  const auto w5 = oracle::random({5, 5}, 19);
  CHECK(oracle::max_abs_diff(oracle::eval([&](Tp& t) { return ops::conv1d_temporal(t.constant(xr), t.constant(w5)); }),
                             oracle::conv1d(xr, w5)) < 1e-12);
  Tp t;
  CHECK_THROWS_AS(ops::conv1d_temporal(t.constant(Buf({1, 2, 3})), t.constant(Buf({2, 2}))), ShapeError);
}

TEST_CASE("global average pooling") {
  auto y = oracle::eval([](Tp& t) { return ops::global_avg_pool_spatial(t.constant(Buf({2, 3, 4, 4}, 2.25))); });
  CHECK(y.shape() == Shape{2, 3, 1, 1});
  for (auto v : y.data()) CHECK(v == 2.25);
  y = oracle::eval([](Tp& t) { return ops::global_avg_pool_spatial(t.constant(vals({1, 1, 2, 2}, {1, 2, 3, 4}))); });
  CHECK(y.item() == 2.5);
  const auto x = oracle::random({3, 2, 5, 3}, 20);
  y = oracle::eval([&](Tp& t) { return ops::global_avg_pool_spatial(t.constant(x)); });
  for (int nc = 0; nc < 6; ++nc) {
    double s = 0;
    for (int i = 0; i < 15; ++i) s += x[nc * 15 + i];
    CHECK(y[nc] == doctest::Approx(s / 15).epsilon(1e-14));
  }
}

TEST_CASE("fully connected") {
  const auto x = oracle::random({2, 3, 4}, 21);
  Buf eye({4, 4});
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  CHECK(oracle::eval([&](Tp& t) { return ops::fully_connected(t.constant(x), t.constant(eye), t.constant(Buf({4}))); }) ==
        x);
  const auto b = vals({2}, {0.5, -1.5});
  const auto c = oracle::eval([&](Tp& t) { return ops::fully_connected(t.constant(x), t.constant(Buf({2, 4})), t.constant(b)); });
  CHECK(c.shape() == Shape{2, 3, 2});
  for (int i = 0; i < 6; ++i) {
    CHECK(c[2 * i] == 0.5);
    CHECK(c[2 * i + 1] == -1.5);
  }
  const auto w = oracle::random({5, 4}, 22), bias = oracle::random({5}, 23);
  const auto y = oracle::eval([&](Tp& t) { return ops::fully_connected(t.constant(x), t.constant(w), t.constant(bias)); });
  Buf wt({4, 5});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 4; ++j) wt[j * 5 + i] = w[i * 4 + j];
  auto ref = oracle::matmul(x.reshaped({6, 4}), wt);
  for (int r = 0; r < 6; ++r)
    for (int o = 0; o < 5; ++o) ref[r * 5 + o] += bias[o];
  CHECK(oracle::max_abs_diff(y, ref.reshaped({2, 3, 5})) < 1e-12);
  Tp t;
  CHECK_THROWS_AS(ops::fully_connected(t.constant(x), t.constant(Buf({5, 3}))), ShapeError);
}

TEST_CASE("batch norm") {
  // Zero-mean, unit (biased) variance per channel.
  const auto x = vals({4, 1, 1, 1}, {1, -1, 1, -1});
  ops::BatchNormStats<double> stats(1);
  auto y = oracle::eval([&](Tp& t) {
    return ops::batch_norm(t.constant(x), t.constant(Buf({1}, 1.0)), t.constant(Buf({1})), stats, ops::NormMode::kTrain);
  });
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(y[i] - x[i]) < 1e-5);
  // Running statistics: momentum 0.1 towards mean 0 and unbiased variance 4/3.
  CHECK(stats.running_mean[0] == doctest::Approx(0.0));
  CHECK(stats.running_var[0] == doctest::Approx(0.9 + 0.1 * 4.0 / 3.0).epsilon(1e-14));

  const auto xr = oracle::random({3, 2, 4, 5}, 24);
  ops::BatchNormStats<double> s2(2);
  y = oracle::eval([&](Tp& t) {
    return ops::batch_norm(t.constant(xr), t.constant(Buf({2})), t.constant(vals({2}, {0.25, -3})), s2, ops::NormMode::kTrain);
  });
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ((i / 20) % 2 == 0 ? 0.25 : -3.0));

  const auto g = oracle::random({2}, 25), b = oracle::random({2}, 26);
  ops::BatchNormStats<double> s3(2);
  y = oracle::eval([&](Tp& t) {
    return ops::batch_norm(t.constant(xr), t.constant(g), t.constant(b), s3, ops::NormMode::kTrain);
  });
  CHECK(oracle::max_abs_diff(y, oracle::batch_norm_train(xr, g, b, s3.eps)) < 1e-12);

  // Eval mode uses the stored statistics.
  ops::BatchNormStats<double> s4(2);
  s4.running_mean = vals({2}, {1.0, -2.0});
  s4.running_var = vals({2}, {4.0, 0.25});
  y = oracle::eval([&](Tp& t) {
    return ops::batch_norm(t.constant(xr), t.constant(g), t.constant(b), s4, ops::NormMode::kEval);
  });
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const std::size_t c = (i / 20) % 2;
    const double ref = g[c] * (xr[i] - s4.running_mean[c]) / std::sqrt(s4.running_var[c] + s4.eps) + b[c];
    CHECK(y[i] == doctest::Approx(ref).epsilon(1e-13));
  }

  ops::BatchNormStats<double> s5(1);
  Tp t;
  CHECK_THROWS_AS(ops::batch_norm(t.constant(Buf({1, 1, 1, 1})), t.constant(Buf({1}, 1.0)), t.constant(Buf({1})), s5,
                                  ops::NormMode::kTrain),
                  ShapeError);
}

TEST_CASE("max pool, reshape, permute, slice, concat") {
  const auto x = vals({1, 1, 3, 3}, {1, 5, 2, 7, 3, 0, 4, 8, 6});
  CHECK(oracle::eval([&](Tp& t) { return ops::max_pool2d(t.constant(x), 2, 1, 0); }) == vals({1, 1, 2, 2}, {7, 5, 8, 8}));
  CHECK(oracle::eval([&](Tp& t) { return ops::max_pool2d(t.constant(x), 3, 2, 1); }) == vals({1, 1, 2, 2}, {7, 5, 8, 8}));

  const auto a = vals({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(oracle::eval([&](Tp& t) { return ops::permute(t.constant(a), {1, 0}); }) == vals({3, 2}, {1, 4, 2, 5, 3, 6}));
  CHECK(oracle::eval([&](Tp& t) { return ops::slice(t.constant(a), 1, 1, 2); }) == vals({2, 2}, {2, 3, 5, 6}));
  CHECK(oracle::eval([&](Tp& t) {
          auto v = t.constant(a);
          return ops::concat<double>({ops::slice(v, 1, 2, 1), ops::slice(v, 1, 0, 2)}, 1);
        }) == vals({2, 3}, {3, 1, 2, 6, 4, 5}));
  Tp t;
  CHECK_THROWS_AS(ops::slice(t.constant(a), 1, 2, 2), ShapeError);
  CHECK_THROWS_AS(ops::reshape(t.constant(a), {4}), ShapeError);
}

TEST_CASE("broadcasting elementwise ops") {
  const auto a = vals({2, 1}, {1, 2}), b = vals({3}, {10, 20, 30});
  CHECK(oracle::eval([&](Tp& t) { return ops::add(t.constant(a), t.constant(b)); }) ==
        vals({2, 3}, {11, 21, 31, 12, 22, 32}));
  CHECK(oracle::eval([&](Tp& t) { return ops::sub(t.constant(a), t.constant(b)); }) ==
        vals({2, 3}, {-9, -19, -29, -8, -18, -28}));
  CHECK(oracle::eval([&](Tp& t) { return ops::mul(t.constant(a), t.constant(b)); }) ==
        vals({2, 3}, {10, 20, 30, 20, 40, 60}));
  CHECK_THROWS_AS(ops::broadcast_shape({2, 3}, {4, 3}), ShapeError);
}

TEST_CASE("cross entropy") {
  const auto logits = vals({2, 3}, {0, 0, 0, 1, 2, 3});
  const std::vector<int> labels{1, 2};
  const auto y = oracle::eval([&](Tp& t) { return ops::cross_entropy(t.constant(logits), labels); });
  const double l2 = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(y.item() == doctest::Approx((std::log(3.0) + l2) / 2).epsilon(1e-14));
  Tp t;
  const std::vector<int> bad{0, 3};
  CHECK_THROWS(ops::cross_entropy(t.constant(logits), bad));
}

TEST_CASE("non-finite results fail loudly") {
  Tp t;
  const auto huge = vals({1}, {std::numeric_limits<double>::max()});
  CHECK_THROWS_AS(ops::add(t.constant(huge), t.constant(huge)), NumericalError);
}

TEST_CASE("ops are deterministic") {
  const auto x = oracle::random({2, 4, 6, 6}, 27), w = oracle::random({8, 4, 3, 3}, 28);
  auto run = [&] {
    return oracle::eval([&](Tp& t) { return ops::softmax(ops::conv2d(t.constant(x), t.constant(w), 1, 1), 1); });
  };
  CHECK(run() == run());
}

TEST_CASE("executed MAC counter tallies conv and matmul work") {
  const auto x = oracle::random({1, 4, 10, 10}, 29), w = oracle::random({8, 4, 1, 1}, 30);
  kernels::MacCounter counter;
  oracle::eval([&](Tp& t) { return ops::conv2d(t.constant(x), t.constant(w)); });
  CHECK(counter.macs() == 3200);
  kernels::MacCounter inner;
  oracle::eval([&](Tp& t) { return ops::matmul(t.constant(Buf({2, 3, 4})), t.constant(Buf({4, 5}))); });
  CHECK(inner.macs() == 2 * 3 * 4 * 5);
}

}  // TEST_SUITE
