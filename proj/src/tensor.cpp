#include "egc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <unordered_set>

namespace egc {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace detail {

using BackwardFn = std::function<std::vector<Tensor>(
    const Tensor& grad_out, const Tensor& self, const std::vector<char>& need)>;

struct Node : std::enable_shared_from_this<Node> {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor> parents;
  BackwardFn backward_fn;
};

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local int g_no_grad_depth = 0;

}  // namespace

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(detail::g_no_grad_depth > 0) {
  ++detail::g_no_grad_depth;
}

NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }

bool grad_recording_enabled() { return detail::g_no_grad_depth == 0; }

namespace {

using detail::Node;
using detail::NodePtr;

void check_finite(const char* op, const std::vector<double>& data) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") +
                               op + "'");
    }
  }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a) + " and " + shape_str(b));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor make_op_result(const char* op, Shape shape, std::vector<double> data,
                      std::vector<Tensor> parents, detail::BackwardFn backward_fn) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument(std::string(op) + ": shape " + shape_str(shape) +
                                " does not match element count " +
                                std::to_string(data.size()));
  }
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->id = detail::g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = grad_recording_enabled();
  bool any_parent = false;
  for (const auto& p : parents) any_parent = any_parent || p.requires_grad();
  if (track && any_parent) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("from_data: shape " + shape_str(shape) +
                                " does not match element count " +
                                std::to_string(data.size()));
  }
  check_finite("leaf", data);
  auto node = std::make_shared<Node>();
  node->id = detail::g_next_id.fetch_add(1, std::memory_order_relaxed);
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), 0.0);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::runtime_error("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return shape_numel(shape()); }

const std::vector<double>& Tensor::data() const {
  if (!node_) throw std::runtime_error("use of undefined tensor");
  return node_->data;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item(): tensor has " + std::to_string(size()) +
                                " elements, expected 1");
  }
  return data()[0];
}

double Tensor::at(std::size_t flat_index) const {
  const auto& d = data();
  if (flat_index >= d.size()) throw std::out_of_range("Tensor::at: index out of range");
  return d[flat_index];
}

Tensor Tensor::detach() const {
  return from_data(shape(), data(), false);
}

// ---- elementwise ------------------------------------------------------------

namespace {

enum class BroadcastCase { equal, a_scalar, b_scalar };

BroadcastCase classify_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return BroadcastCase::equal;
  if (a.size() == 1) return BroadcastCase::a_scalar;
  if (b.size() == 1) return BroadcastCase::b_scalar;
  shape_error(op, a.shape(), b.shape());
}

// Reduce a gradient to a single-element tensor matching `like`'s shape.
Tensor reduce_to_scalar_like(const Tensor& g, const Tensor& like) {
  return reshape(sum_all(g), like.shape());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = classify_binary("add", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out;
  Shape shape;
  switch (kind) {
    case BroadcastCase::equal: {
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
      break;
    }
    case BroadcastCase::a_scalar: {
      shape = b.shape();
      out.resize(bv.size());
      for (std::size_t i = 0; i < bv.size(); ++i) out[i] = av[0] + bv[i];
      break;
    }
    case BroadcastCase::b_scalar: {
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[0];
      break;
    }
  }
  return make_op_result(
      "add", std::move(shape), std::move(out), {a, b},
      [a, b, kind](const Tensor& g, const Tensor&, const std::vector<char>&) {
        Tensor ga = (kind == BroadcastCase::a_scalar) ? reduce_to_scalar_like(g, a) : g;
        Tensor gb = (kind == BroadcastCase::b_scalar) ? reduce_to_scalar_like(g, b) : g;
        return std::vector<Tensor>{ga, gb};
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto kind = classify_binary("sub", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out;
  Shape shape;
  switch (kind) {
    case BroadcastCase::equal: {
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
      break;
    }
    case BroadcastCase::a_scalar: {
      shape = b.shape();
      out.resize(bv.size());
      for (std::size_t i = 0; i < bv.size(); ++i) out[i] = av[0] - bv[i];
      break;
    }
    case BroadcastCase::b_scalar: {
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[0];
      break;
    }
  }
  return make_op_result(
      "sub", std::move(shape), std::move(out), {a, b},
      [a, b, kind](const Tensor& g, const Tensor&, const std::vector<char>&) {
        Tensor ga = (kind == BroadcastCase::a_scalar) ? reduce_to_scalar_like(g, a) : g;
        Tensor ng = neg(g);
        Tensor gb = (kind == BroadcastCase::b_scalar) ? reduce_to_scalar_like(ng, b) : ng;
        return std::vector<Tensor>{ga, gb};
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = classify_binary("mul", a, b);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out;
  Shape shape;
  switch (kind) {
    case BroadcastCase::equal: {
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
      break;
    }
    case BroadcastCase::a_scalar: {
      shape = b.shape();
      out.resize(bv.size());
      for (std::size_t i = 0; i < bv.size(); ++i) out[i] = av[0] * bv[i];
      break;
    }
    case BroadcastCase::b_scalar: {
      shape = a.shape();
      out.resize(av.size());
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[0];
      break;
    }
  }
  return make_op_result(
      "mul", std::move(shape), std::move(out), {a, b},
      [a, b, kind](const Tensor& g, const Tensor&, const std::vector<char>& need) {
        std::vector<Tensor> grads(2);
        if (need[0]) {
          Tensor ga = mul(g, b);
          grads[0] = (kind == BroadcastCase::a_scalar) ? reduce_to_scalar_like(ga, a) : ga;
        }
        if (need[1]) {
          Tensor gb = mul(g, a);
          grads[1] = (kind == BroadcastCase::b_scalar) ? reduce_to_scalar_like(gb, b) : gb;
        }
        return grads;
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v += c;
  return make_op_result(
      "add_scalar", a.shape(), std::move(out), {a},
      [](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{g};
      });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= c;
  return make_op_result(
      "scale", a.shape(), std::move(out), {a},
      [c](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{scale(g, c)};
      });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = stable_sigmoid(av[i]);
  return make_op_result(
      "sigmoid", a.shape(), std::move(out), {a},
      [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
        Tensor one_minus = add_scalar(neg(self), 1.0);
        return std::vector<Tensor>{mul(g, mul(self, one_minus))};
      });
}

Tensor silu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * stable_sigmoid(av[i]);
  return make_op_result(
      "silu", a.shape(), std::move(out), {a},
      [a](const Tensor& g, const Tensor&, const std::vector<char>&) {
        Tensor s = sigmoid(a);
        Tensor one_minus = add_scalar(neg(s), 1.0);
        // d/dx x*sigma(x) = sigma(x) * (1 + x*(1-sigma(x)))
        Tensor d = mul(s, add_scalar(mul(a, one_minus), 1.0));
        return std::vector<Tensor>{mul(g, d)};
      });
}

Tensor softplus(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    // log(1 + e^x) without overflow
    out[i] = std::max(av[i], 0.0) + std::log1p(std::exp(-std::abs(av[i])));
  }
  return make_op_result(
      "softplus", a.shape(), std::move(out), {a},
      [a](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{mul(g, sigmoid(a))};
      });
}

Tensor square(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * av[i];
  return make_op_result(
      "square", a.shape(), std::move(out), {a},
      [a](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{mul(g, scale(a, 2.0))};
      });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  return make_op_result(
      "exp", a.shape(), std::move(out), {a},
      [](const Tensor& g, const Tensor& self, const std::vector<char>&) {
        return std::vector<Tensor>{mul(g, self)};
      });
}

Tensor pow_scalar(const Tensor& a, double p) {
  std::vector<double> out(a.size());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], p);
  return make_op_result(
      "pow_scalar", a.shape(), std::move(out), {a},
      [a, p](const Tensor& g, const Tensor&, const std::vector<char>&) {
        if (p == 0.0) return std::vector<Tensor>{Tensor::zeros(a.shape())};
        return std::vector<Tensor>{mul(g, scale(pow_scalar(a, p - 1.0), p))};
      });
}

// ---- linear algebra ----------------------------------------------------------

namespace {

void require_rank2(const char* op, const Tensor& t) {
  if (t.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " +
                                shape_str(t.shape()));
  }
}

std::vector<double> matmul_values(const std::vector<double>& a,
                                  const std::vector<double>& b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  // ikj order: contiguous access on b and out rows.
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    const double* arow = a.data() + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = b.data() + kk * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) shape_error("matmul", a.shape(), b.shape());
  auto out = matmul_values(a.data(), b.data(), m, k, n);
  return make_op_result(
      "matmul", {m, n}, std::move(out), {a, b},
      [a, b](const Tensor& g, const Tensor&, const std::vector<char>& need) {
        std::vector<Tensor> grads(2);
        if (need[0]) grads[0] = matmul(g, transpose(b));
        if (need[1]) grads[1] = matmul(transpose(a), g);
        return grads;
      });
}

Tensor transpose(const Tensor& a) {
  require_rank2("transpose", a);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  const auto& av = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op_result(
      "transpose", {n, m}, std::move(out), {a},
      [](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{transpose(g)};
      });
}

Tensor transpose_mid(const Tensor& x, std::size_t d0, std::size_t d1,
                     std::size_t d2) {
  if (x.size() != d0 * d1 * d2) {
    throw std::invalid_argument("transpose_mid: element count mismatch");
  }
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < d0; ++i)
    for (std::size_t j = 0; j < d1; ++j)
      for (std::size_t l = 0; l < d2; ++l)
        out[(i * d2 + l) * d1 + j] = xv[(i * d1 + j) * d2 + l];
  Shape in_shape = x.shape();
  return make_op_result(
      "transpose_mid", {d0, d2, d1}, std::move(out), {x},
      [d0, d1, d2, in_shape](const Tensor& g, const Tensor&,
                             const std::vector<char>&) {
        return std::vector<Tensor>{reshape(transpose_mid(g, d0, d2, d1), in_shape)};
      });
}

// ---- shape / data movement ----------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) +
                                " as " + shape_str(shape));
  }
  Shape in_shape = x.shape();
  return make_op_result(
      "reshape", std::move(shape), x.data(), {x},
      [in_shape](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{reshape(g, in_shape)};
      });
}

namespace {

// Primitive 2-D forms; the public wrappers below handle general rank.
Tensor expand2(const Tensor& x, std::size_t n);
Tensor sumlast2(const Tensor& x);

Tensor expand2(const Tensor& x, std::size_t n) {
  if (x.shape().size() != 1) throw std::invalid_argument("expand2: rank-1 expected");
  const std::size_t r = x.shape()[0];
  std::vector<double> out(r * n);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i];
  return make_op_result(
      "expand", {r, n}, std::move(out), {x},
      [](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{sumlast2(g)};
      });
}

Tensor sumlast2(const Tensor& x) {
  require_rank2("sum_last", x);
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r, 0.0);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < c; ++j) acc += xv[i * c + j];
    out[i] = acc;
  }
  return make_op_result(
      "sum_last", {r}, std::move(out), {x},
      [c](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{expand2(g, c)};
      });
}

// Flatten all leading axes: [..., c] viewed as [rows, c].
Tensor as_rows(const Tensor& x, std::size_t& rows, std::size_t& cols) {
  if (x.shape().empty()) throw std::invalid_argument("empty shape");
  cols = x.shape().back();
  rows = x.size() / std::max<std::size_t>(cols, 1);
  return reshape(x, {rows, cols});
}

Shape leading_shape(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace

Tensor expand_last(const Tensor& x, std::size_t n) {
  if (n == 0) throw std::invalid_argument("expand_last: n must be positive");
  Shape out_shape = x.shape();
  out_shape.push_back(n);
  Tensor flat = reshape(x, {x.size()});
  return reshape(expand2(flat, n), std::move(out_shape));
}

Tensor sum_last(const Tensor& x) {
  std::size_t rows, cols;
  Tensor r2 = as_rows(x, rows, cols);
  return reshape(sumlast2(r2), leading_shape(x.shape()));
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Shape in_shape = x.shape();
  return make_op_result(
      "sum_all", {1}, {acc}, {x},
      [in_shape](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{mul(Tensor::full(in_shape, 1.0), g)};
      });
}

namespace {

Tensor gather2(const Tensor& x, const std::vector<std::size_t>& idx);
Tensor scatter2(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t n);

Tensor gather2(const Tensor& x, const std::vector<std::size_t>& idx) {
  require_rank2("gather_last", x);
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (idx.size() != r) {
    throw std::invalid_argument("gather_last: index count " + std::to_string(idx.size()) +
                                " does not match row count " + std::to_string(r));
  }
  std::vector<double> out(r);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] >= c) throw std::out_of_range("gather_last: index out of range");
    out[i] = xv[i * c + idx[i]];
  }
  return make_op_result(
      "gather_last", {r}, std::move(out), {x},
      [idx, c](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{scatter2(g, idx, c)};
      });
}

Tensor scatter2(const Tensor& x, const std::vector<std::size_t>& idx, std::size_t n) {
  if (x.shape().size() != 1) throw std::invalid_argument("scatter_last: rank-1 expected");
  const std::size_t r = x.shape()[0];
  if (idx.size() != r) throw std::invalid_argument("scatter_last: index count mismatch");
  std::vector<double> out(r * n, 0.0);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (idx[i] >= n) throw std::out_of_range("scatter_last: index out of range");
    out[i * n + idx[i]] = xv[i];
  }
  return make_op_result(
      "scatter_last", {r, n}, std::move(out), {x},
      [idx](const Tensor& g, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{gather2(g, idx)};
      });
}

}  // namespace

Tensor gather_last(const Tensor& x, const std::vector<std::size_t>& idx) {
  std::size_t rows, cols;
  Tensor r2 = as_rows(x, rows, cols);
  return reshape(gather2(r2, idx), leading_shape(x.shape()));
}

Tensor scatter_last(const Tensor& x, const std::vector<std::size_t>& idx,
                    std::size_t n) {
  Tensor flat = reshape(x, {x.size()});
  Shape out_shape = x.shape();
  out_shape.push_back(n);
  return reshape(scatter2(flat, idx, n), std::move(out_shape));
}

// ---- reductions -----------------------------------------------------------------

Tensor logsumexp_last(const Tensor& x) {
  std::size_t rows, cols;
  Tensor r2 = as_rows(x, rows, cols);
  if (cols == 0) throw std::invalid_argument("logsumexp: empty reduction axis");
  // Stable forward pass.
  std::vector<double> out(rows);
  const auto& xv = r2.data();
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = xv.data() + i * cols;
    double m = row[0];
    for (std::size_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += std::exp(row[j] - m);
    out[i] = m + std::log(s);
  }
  const std::size_t c = cols;
  Tensor lse = make_op_result(
      "logsumexp", {rows}, std::move(out), {r2},
      [r2, c](const Tensor& g, const Tensor& self, const std::vector<char>&) {
        // grad = softmax(x) * g, with softmax via the already-computed lse.
        Tensor soft = exp(sub(r2, expand2(self, c)));
        return std::vector<Tensor>{mul(expand2(g, c), soft)};
      });
  return reshape(lse, leading_shape(x.shape()));
}

Tensor softmax_last(const Tensor& x) {
  Tensor lse = logsumexp_last(x);
  return exp(sub(x, expand_last(lse, x.shape().back())));
}

// ---- convolution support ----------------------------------------------------------

ConvGeom ConvGeom::make(std::size_t batch, std::size_t chan, std::size_t height,
                        std::size_t width, std::size_t kernel, std::size_t stride,
                        std::size_t pad) {
  if (kernel == 0 || stride == 0) {
    throw std::invalid_argument("conv: kernel and stride must be positive");
  }
  if (height + 2 * pad < kernel || width + 2 * pad < kernel) {
    throw std::invalid_argument("conv: kernel larger than padded input");
  }
  ConvGeom g{batch, chan, height, width, kernel, stride, pad, 0, 0};
  g.out_h = (height + 2 * pad - kernel) / stride + 1;
  g.out_w = (width + 2 * pad - kernel) / stride + 1;
  return g;
}

Tensor im2col(const Tensor& x, const ConvGeom& g) {
  const Shape expect{g.batch, g.chan, g.height, g.width};
  if (x.shape() != expect) shape_error("im2col", x.shape(), expect);
  const std::size_t L = g.out_h * g.out_w;
  const std::size_t patch = g.chan * g.kernel * g.kernel;
  std::vector<double> out(g.batch * L * patch, 0.0);
  const auto& xv = x.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        double* dst = out.data() + ((b * L) + oy * g.out_w + ox) * patch;
        for (std::size_t c = 0; c < g.chan; ++c) {
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                static_cast<std::ptrdiff_t>(g.pad);
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                  static_cast<std::ptrdiff_t>(g.pad);
              double v = 0.0;
              if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) && ix >= 0 &&
                  ix < static_cast<std::ptrdiff_t>(g.width)) {
                v = xv[((b * g.chan + c) * g.height + iy) * g.width + ix];
              }
              dst[(c * g.kernel + ky) * g.kernel + kx] = v;
            }
          }
        }
      }
    }
  }
  return make_op_result(
      "im2col", {g.batch * L, patch}, std::move(out), {x},
      [g](const Tensor& grad, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{col2im(grad, g)};
      });
}

Tensor col2im(const Tensor& cols, const ConvGeom& g) {
  const std::size_t L = g.out_h * g.out_w;
  const std::size_t patch = g.chan * g.kernel * g.kernel;
  const Shape expect{g.batch * L, patch};
  if (cols.shape() != expect) shape_error("col2im", cols.shape(), expect);
  std::vector<double> out(g.batch * g.chan * g.height * g.width, 0.0);
  const auto& cv = cols.data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const double* src = cv.data() + ((b * L) + oy * g.out_w + ox) * patch;
        for (std::size_t c = 0; c < g.chan; ++c) {
          for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t kx = 0; kx < g.kernel; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                  static_cast<std::ptrdiff_t>(g.pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              out[((b * g.chan + c) * g.height + iy) * g.width + ix] +=
                  src[(c * g.kernel + ky) * g.kernel + kx];
            }
          }
        }
      }
    }
  }
  return make_op_result(
      "col2im", {g.batch, g.chan, g.height, g.width}, std::move(out), {cols},
      [g](const Tensor& grad, const Tensor&, const std::vector<char>&) {
        return std::vector<Tensor>{im2col(grad, g)};
      });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t pad) {
  if (x.shape().size() != 4 || kernel.shape().size() != 4) {
    throw std::invalid_argument("conv2d: expected 4-D input and kernel");
  }
  if (kernel.shape()[1] != x.shape()[1]) {
    shape_error("conv2d", x.shape(), kernel.shape());
  }
  if (kernel.shape()[2] != kernel.shape()[3]) {
    throw std::invalid_argument("conv2d: only square kernels supported");
  }
  const auto g = ConvGeom::make(x.shape()[0], x.shape()[1], x.shape()[2],
                                x.shape()[3], kernel.shape()[2], stride, pad);
  const std::size_t o = kernel.shape()[0];
  const std::size_t L = g.out_h * g.out_w;
  Tensor cols = im2col(x, g);                                    // [b*L, c*k*k]
  Tensor wmat = reshape(kernel, {o, g.chan * g.kernel * g.kernel});
  Tensor y = matmul(cols, transpose(wmat));                      // [b*L, o]
  y = transpose_mid(y, g.batch, L, o);                           // [b, o, L]
  return reshape(y, {g.batch, o, g.out_h, g.out_w});
}

// ---- autodiff ------------------------------------------------------------------

bool GradientMap::contains(const Tensor& t) const {
  return grads_.count(t.node()) != 0;
}

Tensor GradientMap::get(const Tensor& t) const {
  auto it = grads_.find(t.node());
  if (it == grads_.end()) {
    throw std::runtime_error("GradientMap: no gradient recorded for tensor");
  }
  return it->second;
}

Tensor GradientMap::get_or_zeros(const Tensor& t) const {
  auto it = grads_.find(t.node());
  if (it == grads_.end()) return Tensor::zeros(t.shape());
  return it->second;
}

GradientMap backward(const Tensor& out, bool create_graph,
                     const std::vector<Tensor>& targets) {
  if (!out.defined()) throw std::invalid_argument("backward: undefined tensor");
  if (out.size() != 1) {
    throw std::invalid_argument("backward: output must have a single element, got " +
                                shape_str(out.shape()));
  }
  if (!out.requires_grad()) {
    throw std::invalid_argument("backward: tensor is detached from the graph");
  }

  // Ancestors of the root, through grad-requiring edges only.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  {
    std::vector<const Node*> stack{out.node()};
    seen.insert(out.node());
    while (!stack.empty()) {
      const Node* n = stack.back();
      stack.pop_back();
      order.push_back(n);
      for (const auto& p : n->parents) {
        if (p.requires_grad() && !seen.count(p.node())) {
          seen.insert(p.node());
          stack.push_back(p.node());
        }
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  // With explicit targets, prune to nodes from which a target is reachable.
  std::unordered_map<const Node*, bool> needed;
  std::function<bool(const Node*)> need_fn = [&](const Node* n) -> bool {
    if (targets.empty()) return true;
    auto it = needed.find(n);
    if (it != needed.end()) return it->second;
    needed[n] = false;  // break cycles defensively; graph is acyclic
    bool v = false;
    for (const auto& t : targets) {
      if (t.node() == n) {
        v = true;
        break;
      }
    }
    if (!v) {
      for (const auto& p : n->parents) {
        if (p.requires_grad() && need_fn(p.node())) {
          v = true;
          break;
        }
      }
    }
    needed[n] = v;
    return v;
  };

  GradientMap gm;
  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  if (need_fn(out.node())) {
    gm.grads_.emplace(out.node(), Tensor::full(out.shape(), 1.0));
  }

  for (const Node* n : order) {
    auto git = gm.grads_.find(n);
    if (git == gm.grads_.end()) continue;
    if (!n->backward_fn) continue;  // leaf
    const Tensor& g = git->second;
    Tensor self = Tensor(const_cast<Node*>(n)->shared_from_this());
    std::vector<char> need(n->parents.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      need[i] = p.requires_grad() && need_fn(p.node()) ? 1 : 0;
      any = any || need[i];
    }
    if (!any) continue;
    std::vector<Tensor> pgrads = n->backward_fn(g, self, need);
    if (pgrads.size() != n->parents.size()) {
      throw std::runtime_error(std::string("backward rule of '") + n->op +
                               "' returned wrong arity");
    }
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      if (!need[i] || !pgrads[i].defined()) continue;
      const Node* pn = n->parents[i].node();
      if (pgrads[i].shape() != pn->shape) {
        throw std::runtime_error(std::string("backward rule of '") + n->op +
                                 "' produced gradient of wrong shape");
      }
      auto it = gm.grads_.find(pn);
      if (it == gm.grads_.end()) {
        gm.grads_.emplace(pn, pgrads[i]);
      } else {
        it->second = add(it->second, pgrads[i]);
      }
    }
  }
  return gm;
}

}  // namespace egc
