#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace egc {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node;
using NodePtr = std::shared_ptr<Node>;
}  // namespace detail

class GradientMap;

/// Thread-local switch that disables graph recording while alive.
/// Values are still computed; results come out detached.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_recording_enabled();

/// Dense row-major f64 tensor participating in a reverse-mode autodiff
/// graph. Handles are cheap to copy; the underlying value is immutable
/// once created. Every public operation verifies its output is finite.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t size() const;
  const std::vector<double>& data() const;
  bool requires_grad() const;

  /// Value of a single-element tensor.
  double item() const;
  double at(std::size_t flat_index) const;

  /// Same value, detached from the graph.
  Tensor detach() const;

  /// Graph-node identity; used as a key by GradientMap.
  const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;

  friend Tensor make_op_result(const char* op, Shape shape,
                               std::vector<double> data,
                               std::vector<Tensor> parents,
                               std::function<std::vector<Tensor>(
                                   const Tensor&, const Tensor&,
                                   const std::vector<char>&)>
                                   backward_fn);
  friend class GradientMap;
  friend GradientMap backward(const Tensor&, bool, const std::vector<Tensor>&);
};

// ---- elementwise ----------------------------------------------------------
// Binary ops accept equal shapes or a single-element tensor on either side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor pow_scalar(const Tensor& a, double p);

// ---- linear algebra -------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// View x as [d0, d1, d2] and swap the last two axes -> [d0, d2, d1].
Tensor transpose_mid(const Tensor& x, std::size_t d0, std::size_t d1,
                     std::size_t d2);

// ---- shape / data movement ------------------------------------------------
Tensor reshape(const Tensor& x, Shape shape);
/// Append an axis of length n, replicating each element: [...]->[..., n].
Tensor expand_last(const Tensor& x, std::size_t n);
/// Sum over the trailing axis: [..., n] -> [...] (rank-1 input -> [1]).
Tensor sum_last(const Tensor& x);
Tensor sum_all(const Tensor& x);
/// Per-row column pick over the trailing axis: out[r] = x[r, idx[r]].
Tensor gather_last(const Tensor& x, const std::vector<std::size_t>& idx);
/// Adjoint of gather_last: out[r, idx[r]] = x[r], zero elsewhere.
Tensor scatter_last(const Tensor& x, const std::vector<std::size_t>& idx,
                    std::size_t n);

// ---- reductions -----------------------------------------------------------
/// Numerically stable log-sum-exp over the trailing axis.
Tensor logsumexp_last(const Tensor& x);
Tensor softmax_last(const Tensor& x);

// ---- convolution support --------------------------------------------------
struct ConvGeom {
  std::size_t batch, chan, height, width;
  std::size_t kernel, stride, pad;
  std::size_t out_h, out_w;

  static ConvGeom make(std::size_t batch, std::size_t chan, std::size_t height,
                       std::size_t width, std::size_t kernel,
                       std::size_t stride, std::size_t pad);
};

/// Patch-extraction matrix: [b,c,h,w] -> [b*out_h*out_w, c*k*k].
Tensor im2col(const Tensor& x, const ConvGeom& g);
/// Adjoint of im2col (scatter-add of patches back into the image).
Tensor col2im(const Tensor& cols, const ConvGeom& g);
/// Direct convolution, differentiable in both input and kernel.
/// x: [b,c,h,w], kernel: [o,c,k,k] -> [b,o,out_h,out_w].
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t pad);

// ---- operators -------------------------------------------------------------
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- autodiff ---------------------------------------------------------------
/// Result of a backward pass: gradient tensor per graph node.
class GradientMap {
 public:
  bool contains(const Tensor& t) const;
  /// Gradient of the backward root w.r.t. t; throws if t received none.
  Tensor get(const Tensor& t) const;
  Tensor get_or_zeros(const Tensor& t) const;

 private:
  std::unordered_map<const detail::Node*, Tensor> grads_;
  friend GradientMap backward(const Tensor&, bool, const std::vector<Tensor>&);
};

/// Reverse-mode differentiation of a single-element tensor.
///
/// Traversal is reverse construction order, which is a topological order by
/// construction, so gradients are accumulated deterministically. When
/// `create_graph` is set the returned gradients are themselves
/// graph-connected and can be differentiated again. When `targets` is
/// non-empty, gradient propagation is pruned to paths that can reach a
/// target node.
GradientMap backward(const Tensor& out, bool create_graph = false,
                     const std::vector<Tensor>& targets = {});

}  // namespace egc
