#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "kgc/rng.hpp"

namespace kgc {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Dense float64 tensor with row-major flat storage and an optional gradient
// buffer of the same length. Tensor is a cheap handle: copies alias the same
// storage, so the tape can capture inputs/outputs safely; use clone() for a
// deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  double* data();
  const double* data() const;
  std::vector<double>& values();
  const std::vector<double>& values() const;

  bool requires_grad() const;
  void set_requires_grad(bool b);

  // Gradient buffer, allocated (zero-filled) on first touch.
  std::vector<double>& grad_buffer();
  // True once a gradient buffer exists.
  bool has_grad() const;
  // Read-only view; throws contract_error when no gradient has been stored.
  const std::vector<double>& grad() const;
  void clear_grad();

  Tensor clone() const;
  bool all_finite() const;
  std::string shape_str() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  Impl& impl();
  const Impl& impl() const;
  std::shared_ptr<Impl> impl_;
};

// Linear record of executed operations. Each op that participates in
// differentiation appends one backward step; backward(loss) seeds the loss
// gradient and replays the steps exactly once, in reverse execution order,
// then discards them.
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }
  void backward(const Tensor& loss);
  void clear() { steps_.clear(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// ---- differentiable operations ------------------------------------------
// All ops compute eagerly; when `tape` is non-null and any input requires a
// gradient, a backward step is recorded and the output requires a gradient.
// Binary elementwise ops accept equal shapes, a scalar right operand, or a
// right operand whose shape is a suffix of the left's (broadcast across the
// leading dimensions).

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor transpose(const Tensor& a, Tape* tape = nullptr);

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor subtract(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor hadamard(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor divide(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

Tensor relu(const Tensor& x, Tape* tape = nullptr);
Tensor tanh(const Tensor& x, Tape* tape = nullptr);
Tensor exp(const Tensor& x, Tape* tape = nullptr);
Tensor neg(const Tensor& x, Tape* tape = nullptr);
Tensor scale(const Tensor& x, double factor, Tape* tape = nullptr);
Tensor shift(const Tensor& x, double offset, Tape* tape = nullptr);

// Numerically stable softmax (max subtraction) along `axis`.
Tensor softmax(const Tensor& x, int axis, Tape* tape = nullptr);

// Valid cross-correlation, stride 1, no padding.
// input: [c, h, w]; kernels: [o, c, kh, kw]; output: [o, h-kh+1, w-kw+1].
Tensor conv2d(const Tensor& input, const Tensor& kernels, Tape* tape = nullptr);

// Mean over the batch of the label-smoothed negative log-likelihood:
//   -[(1-eps) * log p_target + eps/(C-1) * sum_{c != target} log p_c]
// with p = softmax(logits). Reduces to plain cross-entropy at eps = 0.
Tensor cross_entropy_smoothed(const Tensor& logits, const std::vector<std::int64_t>& targets,
                              double epsilon, Tape* tape = nullptr);

Tensor sum(const Tensor& x, Tape* tape = nullptr);
Tensor mean(const Tensor& x, Tape* tape = nullptr);
Tensor sum_axis(const Tensor& x, int axis, Tape* tape = nullptr);

// Gather along axis 0; backward scatter-adds into the table rows.
Tensor rows(const Tensor& table, const std::vector<std::int64_t>& indices, Tape* tape = nullptr);
Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape = nullptr);
Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t len, Tape* tape = nullptr);
// 2-D only.
Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape = nullptr);
Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t len, Tape* tape = nullptr);

// Copying reshape; numel must match.
Tensor reshape(const Tensor& x, Shape new_shape, Tape* tape = nullptr);

// Normalization over the last axis with learned gain/bias of length H.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5,
                  Tape* tape = nullptr);

}  // namespace kgc
