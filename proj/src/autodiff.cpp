#include "caplab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace caplab {

namespace detail {
struct Access {
  static TensorImpl& impl(const Tensor& t) { return *t.impl_; }
  static std::shared_ptr<TensorImpl> ptr(const Tensor& t) { return t.impl_; }
  static Tensor wrap(std::shared_ptr<TensorImpl> p) { return Tensor(std::move(p)); }
};
}  // namespace detail

namespace {

using detail::Access;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

thread_local Tape* g_active_tape = nullptr;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t extent : shape) {
    if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

Tensor make(Shape shape, std::vector<double> data, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->data.size(), 0.0);
  return Access::wrap(std::move(impl));
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

bool should_record(std::span<const Tensor> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void record(std::function<void()> rule) { g_active_tape->record(std::move(rule)); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

class RecordingPause {
 public:
  RecordingPause() : previous_(g_active_tape) { g_active_tape = nullptr; }
  ~RecordingPause() { g_active_tape = previous_; }
  RecordingPause(const RecordingPause&) = delete;
  RecordingPause& operator=(const RecordingPause&) = delete;

 private:
  Tape* previous_;
};

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Broadcast layout of a binary op.
enum class Broadcast { None, RightVector, LeftVector };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (b.rank() == 1 && a.rank() > 1 && a.shape().back() == b.size()) return Broadcast::RightVector;
  if (a.rank() == 1 && b.rank() > 1 && b.shape().back() == a.size()) return Broadcast::LeftVector;
  throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
}

Tensor binary(Elementwise op, const Tensor& a, const Tensor& b) {
  const char* name = op == Elementwise::Add ? "add" : op == Elementwise::Sub ? "sub" : "mul";
  require_defined(a, name);
  require_defined(b, name);
  const Broadcast mode = broadcast_mode(a, b, name);
  const Shape out_shape = mode == Broadcast::LeftVector ? b.shape() : a.shape();
  const std::size_t n = product(out_shape);
  const std::size_t a_mod = mode == Broadcast::LeftVector ? a.size() : n;
  const std::size_t b_mod = mode == Broadcast::RightVector ? b.size() : n;
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ad[i % a_mod];
    const double y = bd[i % b_mod];
    out[i] = op == Elementwise::Add ? x + y : op == Elementwise::Sub ? x - y : x * y;
  }
  const bool track = should_record({&a, &b});
  Tensor result = make(out_shape, std::move(out), track);
  if (track) {
    record([op, n, a_mod, b_mod, pa = Access::ptr(a), pb = Access::ptr(b), po = Access::ptr(result)] {
      const auto& g = po->grad;
      if (pa->requires_grad) {
        auto& ga = pa->grad;
        for (std::size_t i = 0; i < n; ++i) {
          ga[i % a_mod] += op == Elementwise::Mul ? g[i] * pb->data[i % b_mod] : g[i];
        }
      }
      if (pb->requires_grad) {
        auto& gb = pb->grad;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = op == Elementwise::Mul ? g[i] * pa->data[i % a_mod]
                           : op == Elementwise::Sub ? -g[i]
                                                    : g[i];
          gb[i % b_mod] += d;
        }
      }
    });
  }
  return result;
}

// Splits `shape` around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  const std::size_t n = product(shape);
  return make(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  const std::size_t n = product(shape);
  return make(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  validate_shape(shape);
  if (product(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " holds " + std::to_string(product(shape)) +
                         " values, got " + std::to_string(data.size()));
  }
  return make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return make({1}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
  Shape shape{data.size()};
  return from(std::move(shape), std::move(data), requires_grad);
}

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl().data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  auto& t = impl();
  t.requires_grad = on;
  if (on) {
    t.grad.assign(t.data.size(), 0.0);
  } else {
    t.grad.clear();
  }
  return *this;
}

void Tensor::zero_grad() {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const { return make(shape(), impl().data, false); }

// ---------------------------------------------------------------------------
// Tape

void Tape::backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any tracked tensor");
  Access::impl(loss).grad[0] = 1.0;
  std::vector<std::function<void()>> rules;
  rules.swap(rules_);
  for (auto it = rules.rbegin(); it != rules.rend(); ++it) (*it)();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (g_active_tape == nullptr) throw ContractError("backward called without an active tape");
  g_active_tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() > 2 || b.rank() > 2) {
    throw DimensionError("matmul: operands must be rank 1 or 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.rank() == 1 ? 1 : a.dim(0);
  const std::size_t k = a.rank() == 1 ? a.dim(0) : a.dim(1);
  const std::size_t kb = b.dim(0);
  const std::size_t n = b.rank() == 1 ? 1 : b.dim(1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  Shape out_shape;
  if (a.rank() == 2) out_shape.push_back(m);
  if (b.rank() == 2) out_shape.push_back(n);
  if (out_shape.empty()) out_shape.push_back(1);

  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  const bool track = should_record({&a, &b});
  Tensor result = make(std::move(out_shape), std::move(out), track);
  if (track) {
    record([m, k, n, pa = Access::ptr(a), pb = Access::ptr(b), po = Access::ptr(result)] {
      const double* g = po->grad.data();
      if (pa->requires_grad) {
        double* ga = pa->grad.data();
        const double* bd = pb->data.data();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = bd + p * n;
            const double* grow = g + i * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (pb->requires_grad) {
        double* gb = pb->grad.data();
        const double* ad = pa->data.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad[i * k + p];
            if (av == 0.0) continue;
            double* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(Elementwise::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Elementwise::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Elementwise::Mul, a, b); }

Tensor tanh(const Tensor& x) {
  require_defined(x, "tanh");
  std::vector<double> out(x.size());
  std::transform(x.data().begin(), x.data().end(), out.begin(), [](double v) { return std::tanh(v); });
  const bool track = should_record({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    record([px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t i = 0; i < po->data.size(); ++i) {
        const double y = po->data[i];
        px->grad[i] += po->grad[i] * (1.0 - y * y);
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  require_defined(x, "sigmoid");
  std::vector<double> out(x.size());
  std::transform(x.data().begin(), x.data().end(), out.begin(), stable_sigmoid);
  const bool track = should_record({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    record([px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t i = 0; i < po->data.size(); ++i) {
        const double y = po->data[i];
        px->grad[i] += po->grad[i] * y * (1.0 - y);
      }
    });
  }
  return result;
}

Tensor elementwise(Elementwise op, std::span<const Tensor> inputs) {
  const bool unary = op == Elementwise::Tanh || op == Elementwise::Sigmoid;
  const std::size_t expected = unary ? 1 : 2;
  if (inputs.size() != expected) {
    throw ContractError("elementwise: expected " + std::to_string(expected) + " inputs, got " +
                        std::to_string(inputs.size()));
  }
  switch (op) {
    case Elementwise::Add: return add(inputs[0], inputs[1]);
    case Elementwise::Sub: return sub(inputs[0], inputs[1]);
    case Elementwise::Mul: return mul(inputs[0], inputs[1]);
    case Elementwise::Tanh: return tanh(inputs[0]);
    case Elementwise::Sigmoid: return sigmoid(inputs[0]);
  }
  throw ContractError("elementwise: unknown op");
}

Tensor scale(const Tensor& x, double factor) {
  require_defined(x, "scale");
  std::vector<double> out(x.size());
  std::transform(x.data().begin(), x.data().end(), out.begin(), [factor](double v) { return v * factor; });
  const bool track = should_record({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    record([factor, px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t i = 0; i < po->grad.size(); ++i) px->grad[i] += po->grad[i] * factor;
    });
  }
  return result;
}

Tensor softmax(const Tensor& x) {
  require_defined(x, "softmax");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  const bool track = should_record({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    record([n, rows, px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = po->data.data() + r * n;
        const double* g = po->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        double* gx = px->grad.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return result;
}

Tensor log_softmax(const Tensor& x) {
  require_defined(x, "log_softmax");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  const auto xd = x.data();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(in[j] - mx);
    const double log_total = std::log(total);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - mx - log_total;
  }
  const bool track = should_record({&x});
  Tensor result = make(x.shape(), std::move(out), track);
  if (track) {
    record([n, rows, px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = po->data.data() + r * n;
        const double* g = po->grad.data() + r * n;
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += g[j];
        double* gx = px->grad.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) gx[j] += g[j] - std::exp(y[j]) * gsum;
      }
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for shape " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool compatible = s.size() == first.size();
    for (std::size_t i = 0; compatible && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) compatible = false;
    }
    if (!compatible) {
      throw DimensionError("concat: extent mismatch between " + shape_str(first) + " and " + shape_str(s) +
                           " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit out_split = split_axis(out_shape, axis);
  std::vector<double> out(product(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const AxisSplit s = split_axis(p.shape(), axis);
    const std::size_t chunk = s.extent * s.inner;
    const auto pd = p.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pd.data() + o * chunk, chunk, out.data() + o * out_split.extent * out_split.inner + offset);
    }
    offset += chunk;
  }
  const bool track = should_record(parts);
  Tensor result = make(std::move(out_shape), std::move(out), track);
  if (track) {
    std::vector<ImplPtr> ptrs;
    for (const auto& p : parts) ptrs.push_back(Access::ptr(p));
    record([axis, out_split, offsets, ptrs = std::move(ptrs), po = Access::ptr(result)] {
      const std::size_t row = out_split.extent * out_split.inner;
      for (std::size_t k = 0; k < ptrs.size(); ++k) {
        auto& p = *ptrs[k];
        if (!p.requires_grad) continue;
        const AxisSplit s = split_axis(p.shape, axis);
        const std::size_t chunk = s.extent * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = po->grad.data() + o * row + offsets[k];
          double* dst = p.grad.data() + o * chunk;
          for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return result;
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  require_defined(x, "slice");
  if (axis >= x.rank()) {
    throw DimensionError("slice: axis " + std::to_string(axis) + " out of range for shape " + shape_str(x.shape()));
  }
  if (begin >= end || end > x.dim(axis)) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(x.dim(axis)));
  }
  const AxisSplit in = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * in.inner;
  const std::size_t row = in.extent * in.inner;
  const std::size_t start = begin * in.inner;
  std::vector<double> out(in.outer * chunk);
  const auto xd = x.data();
  for (std::size_t o = 0; o < in.outer; ++o) {
    std::copy_n(xd.data() + o * row + start, chunk, out.data() + o * chunk);
  }
  const bool track = should_record({&x});
  Tensor result = make(std::move(out_shape), std::move(out), track);
  if (track) {
    record([outer = in.outer, chunk, row, start, px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = po->grad.data() + o * chunk;
        double* dst = px->grad.data() + o * row + start;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  validate_shape(shape);
  if (product(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  const bool track = should_record({&x});
  Tensor result = make(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), track);
  if (track) {
    record([px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t i = 0; i < po->grad.size(); ++i) px->grad[i] += po->grad[i];
    });
  }
  return result;
}

Tensor select_row(const Tensor& x, std::size_t row) {
  require_defined(x, "select_row");
  if (x.rank() != 2) throw DimensionError("select_row: expected rank 2, got " + shape_str(x.shape()));
  if (row >= x.dim(0)) {
    throw IndexError("select_row: row " + std::to_string(row) + " out of range for " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(1);
  const auto xd = x.data();
  const bool track = should_record({&x});
  Tensor result = make({n}, std::vector<double>(xd.begin() + row * n, xd.begin() + (row + 1) * n), track);
  if (track) {
    record([n, row, px = Access::ptr(x), po = Access::ptr(result)] {
      for (std::size_t j = 0; j < n; ++j) px->grad[row * n + j] += po->grad[j];
    });
  }
  return result;
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw ContractError("stack_rows: no rows");
  const std::size_t n = rows[0].size();
  std::vector<double> out;
  out.reserve(rows.size() * n);
  for (const auto& r : rows) {
    require_defined(r, "stack_rows");
    if (r.rank() != 1 || r.size() != n) {
      throw DimensionError("stack_rows: row shape " + shape_str(r.shape()) + " differs from [" +
                           std::to_string(n) + "]");
    }
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  const bool track = should_record(rows);
  Tensor result = make({rows.size(), n}, std::move(out), track);
  if (track) {
    std::vector<ImplPtr> ptrs;
    for (const auto& r : rows) ptrs.push_back(Access::ptr(r));
    record([n, ptrs = std::move(ptrs), po = Access::ptr(result)] {
      for (std::size_t k = 0; k < ptrs.size(); ++k) {
        if (!ptrs[k]->requires_grad) continue;
        for (std::size_t j = 0; j < n; ++j) ptrs[k]->grad[j] += po->grad[k * n + j];
      }
    });
  }
  return result;
}

Tensor mean_over_spatial(const Tensor& grid) {
  require_defined(grid, "mean_over_spatial");
  if (grid.rank() != 3) {
    throw DimensionError("mean_over_spatial: expected [H x W x C], got " + shape_str(grid.shape()));
  }
  const std::size_t cells = grid.dim(0) * grid.dim(1);
  const std::size_t channels = grid.dim(2);
  const auto gd = grid.data();
  std::vector<double> out(channels, 0.0);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    for (std::size_t c = 0; c < channels; ++c) out[c] += gd[cell * channels + c];
  }
  const double inv = 1.0 / static_cast<double>(cells);
  for (double& v : out) v *= inv;
  const bool track = should_record({&grid});
  Tensor result = make({channels}, std::move(out), track);
  if (track) {
    record([cells, channels, inv, px = Access::ptr(grid), po = Access::ptr(result)] {
      for (std::size_t cell = 0; cell < cells; ++cell) {
        for (std::size_t c = 0; c < channels; ++c) px->grad[cell * channels + c] += po->grad[c] * inv;
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw DimensionError("gather_rows: expected a [V x d] table, got " + shape_str(table.shape()));
  if (ids.empty()) throw ContractError("gather_rows: empty id sequence");
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(id) + " out of range for table with V=" +
                       std::to_string(vocab));
    }
  }
  const auto td = table.data();
  std::vector<double> out;
  out.reserve(ids.size() * d);
  for (int id : ids) out.insert(out.end(), td.begin() + id * d, td.begin() + (id + 1) * d);
  const bool track = should_record({&table});
  Tensor result = make({ids.size(), d}, std::move(out), track);
  if (track) {
    record([d, ids = std::vector<int>(ids.begin(), ids.end()), pt = Access::ptr(table), po = Access::ptr(result)] {
      for (std::size_t r = 0; r < ids.size(); ++r) {
        const std::size_t base = static_cast<std::size_t>(ids[r]) * d;
        for (std::size_t j = 0; j < d; ++j) pt->grad[base + j] += po->grad[r * d + j];
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  const double total = std::accumulate(x.data().begin(), x.data().end(), 0.0);
  const bool track = should_record({&x});
  Tensor result = make({1}, {total}, track);
  if (track) {
    record([px = Access::ptr(x), po = Access::ptr(result)] {
      const double g = po->grad[0];
      for (double& v : px->grad) v += g;
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// grad_check

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max_rel_error=" << max_rel_error();
  for (const auto& e : entries) {
    if (!e.passed) os << "\n  " << e.name << ": " << e.max_rel_error << " at index " << e.worst_index;
  }
  return os.str();
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params, double step,
                           double tolerance) {
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) throw ContractError("grad_check: parameter '" + name + "' does not require grad");
  }
  std::vector<NamedTensor> work = params;
  for (auto& [name, p] : work) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, p] : work) analytic.emplace_back(p.grad().begin(), p.grad().end());

  GradCheckReport report;
  RecordingPause pause;
  for (std::size_t k = 0; k < work.size(); ++k) {
    auto& [name, p] = work[k];
    GradCheckEntry entry;
    entry.name = name;
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = f().item();
      values[i] = saved - step;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double err = std::abs(a - numeric) / denom;
      if (err > entry.max_rel_error) {
        entry.max_rel_error = err;
        entry.worst_index = i;
      }
    }
    entry.passed = entry.max_rel_error <= tolerance;
    report.passed = report.passed && entry.passed;
    report.entries.push_back(entry);
  }
  for (auto& [name, p] : work) p.zero_grad();
  return report;
}

}  // namespace caplab
