#pragma once

// Test-side oracles, independent of the library's computation paths.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "egc/random.hpp"
#include "egc/tensor.hpp"

namespace egc::testing {

// Naive triple-loop matrix product.
inline std::vector<double> matmul_naive(const std::vector<double>& a,
                                        const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

// Naive direct convolution, [b,c,h,w] * [o,c,k,k] -> [b,o,oh,ow].
inline std::vector<double> conv2d_naive(const std::vector<double>& x,
                                        const std::vector<double>& w, std::size_t b,
                                        std::size_t c, std::size_t h, std::size_t ww,
                                        std::size_t o, std::size_t k,
                                        std::size_t stride, std::size_t pad,
                                        std::size_t oh, std::size_t ow) {
  std::vector<double> out(b * o * oh * ow, 0.0);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t oi = 0; oi < o; ++oi)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                    ix >= static_cast<std::ptrdiff_t>(ww)) {
                  continue;
                }
                acc += x[((bi * c + ci) * h + iy) * ww + ix] *
                       w[((oi * c + ci) * k + ky) * k + kx];
              }
          out[((bi * o + oi) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

// Max relative error between the analytic gradient of sum(weights * f(inputs))
// and central finite differences, perturbing every element of every input.
// f must be a pure function of its inputs.
inline double gradient_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, RandomEngine& rng, double h = 1e-6) {
  for (auto& t : inputs) t = Tensor::from_data(t.shape(), t.data(), true);
  Tensor out = f(inputs);
  Tensor weights = rng.uniform_tensor(out.shape(), -1.0, 1.0);
  Tensor objective = sum_all(mul(out, weights));
  GradientMap gm = backward(objective, false, inputs);

  double worst = 0.0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    Tensor analytic = gm.get_or_zeros(inputs[which]);
    for (std::size_t j = 0; j < inputs[which].size(); ++j) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor> shifted = inputs;
        std::vector<double> data = inputs[which].data();
        data[j] += delta;
        shifted[which] = Tensor::from_data(inputs[which].shape(), data);
        return sum_all(mul(f(shifted), weights)).item();
      };
      const double step = h * std::max(1.0, std::abs(inputs[which].at(j)));
      const double numeric = (eval_at(step) - eval_at(-step)) / (2.0 * step);
      const double a = analytic.at(j);
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-2});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace egc::testing
