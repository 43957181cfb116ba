#pragma once

// Minimal reverse-mode automatic differentiation over dense, row-major,
// double-precision tensors.
//
// Operations run eagerly. While a Tape is active on the current thread
// (see TapeScope), every operation whose inputs require gradients appends
// its backward rule to that tape; Tape::backward replays the rules in
// reverse order. Without an active tape nothing is recorded, which is the
// inference path.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace caplab {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {
struct Access;
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized like data iff requires_grad
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> data, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> mutable_data() { return impl().data; }
  double operator[](std::size_t i) const { return impl().data[i]; }
  double item() const;

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on);
  std::span<const double> grad() const { return impl().grad; }
  std::span<double> mutable_grad() { return impl().grad; }
  void zero_grad();

  // Deep copy of the values without gradient tracking.
  Tensor detach() const;

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;

  friend struct detail::Access;
};

// Ordered record of executed differentiable operations.
class Tape {
 public:
  void record(std::function<void()> backward_rule) { rules_.push_back(std::move(backward_rule)); }
  std::size_t size() const { return rules_.size(); }
  void clear() { rules_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays every rule in reverse. Gradients
  // accumulate into existing grad buffers. The record is consumed.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> rules_;
};

// Installs a tape as the active record for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Backward over the thread's active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations

// Rank-2 product; a rank-1 left operand is a row vector and a rank-1 right
// operand a column vector (the unit axis is dropped from the result).
Tensor matmul(const Tensor& a, const Tensor& b);

enum class Elementwise { Add, Sub, Mul, Tanh, Sigmoid };

// Binary ops need equal shapes, or one rank-1 operand whose length equals
// the other's last extent (broadcast across the last axis).
Tensor elementwise(Elementwise op, std::span<const Tensor> inputs);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor scale(const Tensor& x, double factor);

// Along the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);

// Row i of a rank-2 tensor as a rank-1 tensor.
Tensor select_row(const Tensor& x, std::size_t row);
// Rank-1 tensors of equal length stacked into rows.
Tensor stack_rows(std::span<const Tensor> rows);

// [H x W x C] -> [C], per-channel mean over all cells.
Tensor mean_over_spatial(const Tensor& grid);

// Rows of a [V x d] table selected by id -> [len x d].
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& x);

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool passed = true;
  double max_rel_error() const;
  std::string summary() const;
};

using NamedTensor = std::pair<std::string, Tensor>;

// Compares analytic gradients of the scalar program `f` against central
// differences. Relative error is |a - n| / max(|a|, |n|, 1e-3).
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                           double step = 1e-5, double tolerance = 1e-4);

}  // namespace caplab
