#include <cmath>
#include <cstring>

#include "doctest.h"
#include "egc/random.hpp"
#include "egc/tensor.hpp"
#include "oracles.hpp"

using namespace egc;
using egc::testing::gradient_check;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("elementwise forward values") {
  Tensor a = Tensor::from_data({2}, {1.0, 2.0});
  Tensor b = Tensor::from_data({2}, {3.0, 4.0});
  CHECK(add(a, b).data() == std::vector<double>{4.0, 6.0});
  CHECK(sub(a, b).data() == std::vector<double>{-2.0, -2.0});
  CHECK(mul(a, b).data() == std::vector<double>{3.0, 8.0});
  CHECK(scale(a, 2.5).data() == std::vector<double>{2.5, 5.0});

  CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(silu(Tensor::scalar(1.0)).item() ==
        doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(softplus(Tensor::scalar(0.0)).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(square(Tensor::scalar(-3.0)).item() == 9.0);
}

TEST_CASE("scalar broadcasting in binary ops") {
  Tensor a = Tensor::from_data({3}, {1.0, 2.0, 3.0});
  Tensor s = Tensor::scalar(10.0);
  CHECK(add(a, s).data() == std::vector<double>{11.0, 12.0, 13.0});
  CHECK(add(s, a).data() == std::vector<double>{11.0, 12.0, 13.0});
  CHECK(mul(a, s).data() == std::vector<double>{10.0, 20.0, 30.0});
  CHECK(sub(s, a).data() == std::vector<double>{9.0, 8.0, 7.0});
  CHECK_THROWS(add(a, Tensor::from_data({2}, {1.0, 2.0})));
}

TEST_CASE("matmul identity and fixed product") {
  Tensor eye = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  Tensor m = Tensor::from_data({2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(matmul(eye, m).data() == m.data());

  Tensor r = Tensor::from_data({1, 2}, {1.0, 2.0});
  Tensor c = Tensor::from_data({2, 1}, {3.0, 4.0});
  CHECK(matmul(r, c).item() == 11.0);
  CHECK_THROWS(matmul(r, r));
}

TEST_CASE("matmul matches naive triple loop") {
  RandomEngine rng(11);
  Tensor a = rng.uniform_tensor({5, 7}, -2.0, 2.0);
  Tensor b = rng.uniform_tensor({7, 3}, -2.0, 2.0);
  auto expected = egc::testing::matmul_naive(a.data(), b.data(), 5, 7, 3);
  Tensor got = matmul(a, b);
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(got.at(i) == doctest::Approx(expected[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d trivial kernels") {
  RandomEngine rng(5);
  Tensor x = rng.uniform_tensor({1, 1, 4, 4}, -1.0, 1.0);
  Tensor one = Tensor::from_data({1, 1, 1, 1}, {1.0});
  CHECK(conv2d(x, one, 1, 0).data() == x.data());

  Tensor ones3 = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor allones = Tensor::full({1, 1, 4, 4}, 1.0);
  Tensor y = conv2d(allones, ones3, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.at(i) == 9.0);
}

TEST_CASE("conv2d matches naive loop") {
  RandomEngine rng(7);
  const std::size_t b = 2, c = 3, h = 5, w = 6, o = 4, k = 3, stride = 2, pad = 1;
  Tensor x = rng.uniform_tensor({b, c, h, w}, -1.0, 1.0);
  Tensor kernel = rng.uniform_tensor({o, c, k, k}, -1.0, 1.0);
  Tensor y = conv2d(x, kernel, stride, pad);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1;
  const std::size_t ow = (w + 2 * pad - k) / stride + 1;
  auto expected = egc::testing::conv2d_naive(x.data(), kernel.data(), b, c, h, w, o,
                                             k, stride, pad, oh, ow);
  REQUIRE(y.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(y.at(i) == doctest::Approx(expected[i]).epsilon(1e-12));
  }
}

TEST_CASE("logsumexp values, stability, shift invariance") {
  CHECK(logsumexp_last(Tensor::from_data({2}, {0.0, 0.0})).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(logsumexp_last(Tensor::from_data({2}, {1000.0, 1000.0})).item() ==
        doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-12));

  RandomEngine rng(3);
  Tensor v = rng.uniform_tensor({4, 8}, -5.0, 5.0);
  Tensor shifted = add_scalar(v, 3.25);
  Tensor l0 = logsumexp_last(v);
  Tensor l1 = logsumexp_last(shifted);
  for (std::size_t i = 0; i < l0.size(); ++i) {
    CHECK(std::abs(l1.at(i) - l0.at(i) - 3.25) < 1e-12);
  }

  // naive oracle in long double
  Tensor row = rng.uniform_tensor({8}, -3.0, 3.0);
  long double s = 0.0L;
  for (double x : row.data()) s += std::exp(static_cast<long double>(x));
  CHECK(logsumexp_last(row).item() ==
        doctest::Approx(static_cast<double>(std::log(s))).epsilon(1e-13));

  CHECK_THROWS(logsumexp_last(Tensor::from_data({2, 0}, {})));
}

TEST_CASE("logsumexp gradient is softmax") {
  RandomEngine rng(9);
  Tensor v = Tensor::from_data({3, 5}, rng.uniform_tensor({3, 5}, -4.0, 4.0).data(),
                               true);
  GradientMap gm = backward(sum_all(logsumexp_last(v)));
  Tensor g = gm.get(v);
  // rows sum to 1
  for (std::size_t i = 0; i < 3; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) row += g.at(i * 5 + j);
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("backward basics and errors") {
  Tensor x = Tensor::from_data({1}, {3.0}, true);
  Tensor y = square(x);
  GradientMap gm = backward(y);
  CHECK(gm.get(x).item() == 6.0);

  CHECK_THROWS(backward(Tensor::from_data({2}, {1.0, 2.0}, true)));  // non-scalar
  CHECK_THROWS(backward(Tensor::scalar(1.0)));                       // detached
}

TEST_CASE("second derivative via backward-of-backward") {
  // d2(x^3)/dx2 at x = 2 is 12
  Tensor x = Tensor::from_data({1}, {2.0}, true);
  Tensor y = mul(square(x), x);
  Tensor dy = backward(y, true).get(x);
  CHECK(dy.item() == 12.0);  // 3 x^2
  Tensor d2y = backward(dy, false).get(x);
  CHECK(d2y.item() == 12.0);  // 6 x
}

TEST_CASE("gradients match finite differences for every op") {
  RandomEngine rng(1234);
  const double tol = 1e-5;

  auto rand_shape = [&](std::size_t max_rank) {
    Shape s;
    const std::size_t rank = 1 + rng.uniform_int(max_rank);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + rng.uniform_int(4));
    return s;
  };

  int cases = 0;
  for (int rep = 0; rep < 12; ++rep) {
    Shape s = rand_shape(3);
    Tensor a = rng.uniform_tensor(s, -2.0, 2.0);
    Tensor b = rng.uniform_tensor(s, -2.0, 2.0);
    Tensor sc = rng.uniform_tensor({1}, -2.0, 2.0);
    Tensor pos = rng.uniform_tensor(s, 0.5, 3.0);

    auto unary = [&](auto op, const Tensor& in) {
      CHECK(gradient_check([op](const std::vector<Tensor>& t) { return op(t[0]); },
                           {in}, rng) < tol);
      ++cases;
    };
    unary([](const Tensor& t) { return silu(t); }, a);
    unary([](const Tensor& t) { return sigmoid(t); }, a);
    unary([](const Tensor& t) { return softplus(t); }, a);
    unary([](const Tensor& t) { return square(t); }, a);
    unary([](const Tensor& t) { return egc::exp(t); }, a);
    unary([](const Tensor& t) { return scale(t, -1.7); }, a);
    unary([](const Tensor& t) { return add_scalar(t, 0.4); }, a);
    unary([](const Tensor& t) { return pow_scalar(t, -0.5); }, pos);
    unary([](const Tensor& t) { return sum_all(t); }, a);
    unary([](const Tensor& t) { return expand_last(t, 3); }, a);
    unary([](const Tensor& t) { return logsumexp_last(t); }, a);
    unary([](const Tensor& t) { return sum_last(t); }, a);

    auto binary = [&](auto op, const Tensor& x, const Tensor& y) {
      CHECK(gradient_check(
                [op](const std::vector<Tensor>& t) { return op(t[0], t[1]); },
                {x, y}, rng) < tol);
      ++cases;
    };
    binary([](const Tensor& x, const Tensor& y) { return add(x, y); }, a, b);
    binary([](const Tensor& x, const Tensor& y) { return sub(x, y); }, a, b);
    binary([](const Tensor& x, const Tensor& y) { return mul(x, y); }, a, b);
    binary([](const Tensor& x, const Tensor& y) { return add(x, y); }, a, sc);
    binary([](const Tensor& x, const Tensor& y) { return mul(x, y); }, a, sc);
    binary([](const Tensor& x, const Tensor& y) { return sub(y, x); }, a, sc);
  }

  for (int rep = 0; rep < 8; ++rep) {
    const std::size_t m = 1 + rng.uniform_int(4);
    const std::size_t k = 1 + rng.uniform_int(4);
    const std::size_t n = 1 + rng.uniform_int(4);
    Tensor a = rng.uniform_tensor({m, k}, -2.0, 2.0);
    Tensor b = rng.uniform_tensor({k, n}, -2.0, 2.0);
    CHECK(gradient_check(
              [](const std::vector<Tensor>& t) { return matmul(t[0], t[1]); },
              {a, b}, rng) < tol);
    CHECK(gradient_check(
              [](const std::vector<Tensor>& t) { return transpose(t[0]); }, {a},
              rng) < tol);
    cases += 2;

    std::vector<std::size_t> idx(m);
    for (auto& ix : idx) ix = rng.uniform_int(k);
    CHECK(gradient_check(
              [idx](const std::vector<Tensor>& t) { return gather_last(t[0], idx); },
              {a}, rng) < tol);
    Tensor vec = rng.uniform_tensor({m}, -2.0, 2.0);
    CHECK(gradient_check(
              [idx, k](const std::vector<Tensor>& t) {
                return scatter_last(t[0], idx, k);
              },
              {vec}, rng) < tol);
    cases += 2;
  }

  for (int rep = 0; rep < 6; ++rep) {
    const std::size_t b = 1 + rng.uniform_int(2);
    const std::size_t c = 1 + rng.uniform_int(2);
    const std::size_t h = 3 + rng.uniform_int(3);
    const std::size_t w = 3 + rng.uniform_int(3);
    const std::size_t stride = 1 + rng.uniform_int(2);
    const std::size_t pad = rng.uniform_int(2);
    auto geom = ConvGeom::make(b, c, h, w, 3, stride, pad);
    Tensor x = rng.uniform_tensor({b, c, h, w}, -1.5, 1.5);
    CHECK(gradient_check(
              [geom](const std::vector<Tensor>& t) { return im2col(t[0], geom); },
              {x}, rng) < tol);
    Tensor cols = rng.uniform_tensor(
        {geom.batch * geom.out_h * geom.out_w, geom.chan * 9}, -1.5, 1.5);
    CHECK(gradient_check(
              [geom](const std::vector<Tensor>& t) { return col2im(t[0], geom); },
              {cols}, rng) < tol);
    Tensor kernel = rng.uniform_tensor({2, c, 3, 3}, -1.0, 1.0);
    CHECK(gradient_check(
              [stride, pad](const std::vector<Tensor>& t) {
                return conv2d(t[0], t[1], stride, pad);
              },
              {x, kernel}, rng) < tol);
    CHECK(gradient_check(
              [b, c, h, w](const std::vector<Tensor>& t) {
                return transpose_mid(t[0], b, c, h * w);
              },
              {reshape(x, {b, c, h * w})}, rng) < tol);
    cases += 4;
  }
  CHECK(cases >= 100);
}

TEST_CASE("double backward through a matmul chain") {
  // L(theta) = || d/dx f_theta(x) ||^2 for f = sum(silu(x W^T))
  RandomEngine rng(77);
  Tensor w = Tensor::from_data({3, 2}, rng.uniform_tensor({3, 2}, -1.0, 1.0).data(),
                               true);
  Tensor x = Tensor::from_data({1, 2}, {0.3, -0.6}, true);

  auto input_grad = [&](const Tensor& weights, bool create_graph) {
    Tensor f = sum_all(silu(matmul(x, transpose(weights))));
    return backward(f, create_graph, {x}).get(x);
  };

  Tensor g = input_grad(w, true);
  Tensor loss = sum_all(square(g));
  Tensor analytic = backward(loss, false, {w}).get(w);

  const double h = 1e-5;
  for (std::size_t j = 0; j < w.size(); ++j) {
    auto eval_at = [&](double delta) {
      std::vector<double> wd = w.data();
      wd[j] += delta;
      Tensor wt = Tensor::from_data(w.shape(), wd, true);
      Tensor gg = input_grad(wt, false);
      double acc = 0.0;
      for (double v : gg.data()) acc += v * v;
      return acc;
    };
    const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    CHECK(std::abs(analytic.at(j) - numeric) /
              std::max({std::abs(numeric), std::abs(analytic.at(j)), 1e-2}) <
          1e-4);
  }
}

TEST_CASE("backward is deterministic") {
  RandomEngine rng(31);
  Tensor base = rng.uniform_tensor({4, 4}, -1.0, 1.0);

  auto run = [&]() {
    Tensor x = Tensor::from_data(base.shape(), base.data(), true);
    Tensor y = sum_all(mul(silu(matmul(x, transpose(x))), square(x)));
    return backward(y).get(x);
  };
  Tensor g1 = run();
  Tensor g2 = run();
  CHECK(std::memcmp(g1.data().data(), g2.data().data(),
                    g1.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite results are rejected") {
  Tensor big = Tensor::scalar(1e308);
  CHECK_THROWS(add(big, big));
  CHECK_THROWS(egc::exp(Tensor::scalar(1000.0)));
}

TEST_SUITE_END();
