// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors with a recorded operation graph for reverse-mode
// differentiation. Every op in this file records itself on the thread's
// active Graph when at least one input requires a gradient.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace transcrowd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Graph;

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  // Set when this tensor is the output of an op recorded on a graph.
  const Graph* graph = nullptr;
  std::uint64_t generation = 0;
  std::size_t node_id = 0;

  float* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad.data();
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : impl_(std::make_shared<detail::TensorImpl>()) {
    validate(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    validate(shape);
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(float value) { return Tensor(Shape{}, std::vector<float>{value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  // Negative axes count from the back.
  std::size_t dim(int axis) const { return impl_->shape.at(normalize_axis(axis)); }

  std::span<const float> data() const { return impl_->data; }
  // Writable access is meant for parameters (initialisation, optimiser steps).
  std::span<float> mutable_data() { return impl_->data; }

  float item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
  }

  float at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("at: index rank mismatch for " + shape_str(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
      if (i >= impl_->shape[axis]) throw std::out_of_range("at: index out of range");
      flat = flat * impl_->shape[axis] + i;
      ++axis;
    }
    return impl_->data[flat];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value = true) {
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  std::span<float> mutable_grad() { return {impl_->grad_buffer(), impl_->data.size()}; }
  void zero_grad() { impl_->grad.clear(); }

  bool on_graph() const { return impl_ && impl_->graph != nullptr; }

  // Value copy, cut from any graph.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  static void validate(const Shape& shape) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
  }

  std::size_t normalize_axis(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
    return static_cast<std::size_t>(a);
  }

  detail::ImplPtr impl_;
};

// Owns the recorded ops of one forward pass. Bound to a single training
// context; activate it on the current thread with Graph::Scope.
class Graph {
 public:
  using BackwardFn = std::function<void(detail::TensorImpl& out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph() {
    if (active_slot() == this) active_slot() = nullptr;
  }

  class Scope {
   public:
    explicit Scope(Graph& graph) : previous_(active_slot()) { active_slot() = &graph; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
    ~Scope() { active_slot() = previous_; }

   private:
    Graph* previous_;
  };

  static Graph* active() { return active_slot(); }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void record(const detail::ImplPtr& output, std::vector<detail::ImplPtr> inputs, BackwardFn backward) {
    if (consumed_) reset();
    output->graph = this;
    output->generation = generation_;
    output->node_id = nodes_.size();
    output->requires_grad = true;
    nodes_.push_back(Node{std::move(inputs), output, std::move(backward)});
  }

  // Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
  // loss, then releases the recorded nodes.
  void backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward: undefined tensor");
    if (loss.numel() != 1) throw GraphError("backward: loss of shape " + shape_str(loss.shape()) + " is not scalar");
    const auto& impl = *loss.impl();
    if (impl.graph != this) throw GraphError("backward: loss was not recorded on this graph");
    if (impl.generation != generation_) throw GraphError("backward: loss belongs to a previous forward pass");
    if (consumed_) throw GraphError("backward: graph already consumed; run a new forward pass first");

    loss.impl()->grad.assign(1, 1.0f);
    for (std::size_t i = impl.node_id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.output->grad.empty()) continue;
      node.backward(*node.output);
    }
    consumed_ = true;
    nodes_.clear();
  }

  void reset() {
    nodes_.clear();
    ++generation_;
    consumed_ = false;
  }

 private:
  struct Node {
    std::vector<detail::ImplPtr> inputs;
    detail::ImplPtr output;
    BackwardFn backward;
  };

  static Graph*& active_slot() {
    thread_local Graph* graph = nullptr;
    return graph;
  }

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
  bool consumed_ = false;
};

namespace detail {

inline Graph* recording_graph(std::initializer_list<const Tensor*> inputs) {
  Graph* g = Graph::active();
  if (!g) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return g;
  }
  return nullptr;
}

inline Graph* recording_graph(const std::vector<Tensor>& inputs) {
  Graph* g = Graph::active();
  if (!g) return nullptr;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return g;
  }
  return nullptr;
}

// Gradient buffer of an input, or nullptr when it does not take gradients.
inline float* grad_sink(const ImplPtr& impl) { return impl->requires_grad ? impl->grad_buffer() : nullptr; }

// C[M,Q] += A[M,P] * B[P,Q]
inline void gemm_nn(const float* a, const float* b, float* c, std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * q;
    const float* arow = a + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const float av = arow[k];
      const float* brow = b + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[P,Q] += A[M,P]^T * B[M,Q]
inline void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * p;
    const float* brow = b + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      const float av = arow[k];
      float* crow = c + k * q;
      for (std::size_t j = 0; j < q; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<float> transpose_copy(const float* src, std::size_t rows, std::size_t cols) {
  std::vector<float> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// C[M,P] += A[M,Q] * B[P,Q]^T
inline void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t q, std::size_t p) {
  const std::vector<float> bt = transpose_copy(b, p, q);
  gemm_nn(a, bt.data(), c, m, q, p);
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline std::size_t resolve_axis(const Tensor& t, int axis, const char* op) {
  const int r = static_cast<int>(t.rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
  }
  return static_cast<std::size_t>(a);
}

// True when `small` equals a trailing suffix of `big`.
inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* op) {
  const bool a_big = is_suffix(b.shape(), a.shape());
  if (!a_big && !is_suffix(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " + shape_str(b.shape()));
  }
  const Shape& out_shape = a_big ? a.shape() : b.shape();
  const std::size_t n = shape_numel(out_shape);
  const std::size_t na = a.numel(), nb = b.numel();
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float x = pa[i % na], y = pb[i % nb];
    switch (kind) {
      case BinaryKind::Add: out[i] = x + y; break;
      case BinaryKind::Sub: out[i] = x - y; break;
      case BinaryKind::Mul: out[i] = x * y; break;
    }
  }
  Tensor result(out_shape, std::move(out));
  if (Graph* g = recording_graph({&a, &b})) {
    ImplPtr ia = a.impl(), ib = b.impl();
    g->record(result.impl(), {ia, ib}, [ia, ib, kind, n](TensorImpl& o) {
      const float* go = o.grad.data();
      const std::size_t na = ia->data.size(), nb = ib->data.size();
      if (float* ga = grad_sink(ia)) {
        for (std::size_t i = 0; i < n; ++i)
          ga[i % na] += kind == BinaryKind::Mul ? go[i] * ib->data[i % nb] : go[i];
      }
      if (float* gb = grad_sink(ib)) {
        for (std::size_t i = 0; i < n; ++i) {
          switch (kind) {
            case BinaryKind::Add: gb[i % nb] += go[i]; break;
            case BinaryKind::Sub: gb[i % nb] -= go[i]; break;
            case BinaryKind::Mul: gb[i % nb] += go[i] * ia->data[i % na]; break;
          }
        }
      }
    });
  }
  return result;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<float> out(x.numel());
  std::transform(x.data().begin(), x.data().end(), out.begin(), fwd);
  Tensor result(x.shape(), std::move(out));
  if (Graph* g = recording_graph({&x})) {
    ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix, deriv](TensorImpl& o) {
      if (float* gx = grad_sink(ix)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * deriv(ix->data[i], o.data[i]);
      }
    });
  }
  return result;
}

}  // namespace detail

// Elementwise ops broadcast the smaller operand when its shape is a trailing
// suffix of the larger one (a bias [D] against [B, S, D], say).
inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Add, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Sub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(a, b, detail::BinaryKind::Mul, "mul"); }

inline Tensor scale(const Tensor& x, float s) {
  return detail::unary(x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

// Subgradient 0 at the kink.
inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return std::fabs(v); },
      [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

inline float gelu_value(float x) {
  constexpr float kC = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(kC * (x + 0.044715f * x * x * x)));
}

inline float gelu_derivative(float x) {
  constexpr float kC = 0.7978845608028654f;
  const float t = std::tanh(kC * (x + 0.044715f * x * x * x));
  return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * kC * (1.0f + 3.0f * 0.044715f * x * x);
}

// Tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
  return detail::unary(x, gelu_value, [](float v, float) { return gelu_derivative(v); });
}

// [..., M, P] x [..., P, Q] -> [..., M, Q]. Leading dims must agree unless one
// side is a plain matrix, which is then broadcast over the other's batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), p = a.dim(-1), q = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  if (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b) {
    throw ShapeError("matmul: batch dimensions differ in " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape out_shape = batch_a.empty() ? batch_b : batch_a;
  out_shape.push_back(m);
  out_shape.push_back(q);
  const std::size_t batches = shape_numel(batch_a.empty() ? batch_b : batch_a);
  const bool a_batched = !batch_a.empty(), b_batched = !batch_b.empty();

  std::vector<float> out(shape_numel(out_shape), 0.0f);
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  if (!b_batched) {
    // One tall product: every row of every batch against the same matrix.
    detail::gemm_nn(pa, pb, out.data(), batches * m, p, q);
  } else {
    for (std::size_t k = 0; k < batches; ++k)
      detail::gemm_nn(pa + (a_batched ? k * m * p : 0), pb + k * p * q, out.data() + k * m * q, m, p, q);
  }
  Tensor result(std::move(out_shape), std::move(out));

  if (Graph* g = detail::recording_graph({&a, &b})) {
    detail::ImplPtr ia = a.impl(), ib = b.impl();
    g->record(result.impl(), {ia, ib}, [ia, ib, m, p, q, batches, a_batched, b_batched](detail::TensorImpl& o) {
      const float* go = o.grad.data();
      float* ga = detail::grad_sink(ia);
      float* gb = detail::grad_sink(ib);
      const float* da = ia->data.data();
      const float* db = ib->data.data();
      if (!b_batched) {
        if (ga) detail::gemm_nt(go, db, ga, batches * m, q, p);
        if (gb) detail::gemm_tn(da, go, gb, batches * m, p, q);
        return;
      }
      for (std::size_t k = 0; k < batches; ++k) {
        const std::size_t oa = a_batched ? k * m * p : 0;
        const float* gok = go + k * m * q;
        if (ga) detail::gemm_nt(gok, db + k * p * q, ga + oa, m, q, p);
        if (gb) detail::gemm_tn(da + oa, gok, gb + k * p * q, m, p, q);
      }
    });
  }
  return result;
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2 in " + shape_str(x.shape()));
  const std::size_t r = x.dim(-2), c = x.dim(-1), batches = x.numel() / (r * c);
  std::vector<float> out(x.numel());
  for (std::size_t k = 0; k < batches; ++k) {
    const auto t = detail::transpose_copy(x.data().data() + k * r * c, r, c);
    std::copy(t.begin(), t.end(), out.begin() + static_cast<std::ptrdiff_t>(k * r * c));
  }
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Tensor result(std::move(shape), std::move(out));
  if (Graph* g = detail::recording_graph({&x})) {
    detail::ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix, r, c, batches](detail::TensorImpl& o) {
      float* gx = detail::grad_sink(ix);
      if (!gx) return;
      for (std::size_t k = 0; k < batches; ++k) {
        const float* go = o.grad.data() + k * r * c;
        float* gk = gx + k * r * c;
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < r; ++j) gk[j * c + i] += go[i * r + j];
      }
    });
  }
  return result;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor result(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  if (Graph* g = detail::recording_graph({&x})) {
    detail::ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix](detail::TensorImpl& o) {
      if (float* gx = detail::grad_sink(ix))
        for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    });
  }
  return result;
}

// Sum of every element, as a scalar.
inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  Tensor result = Tensor::scalar(static_cast<float>(acc));
  if (Graph* g = detail::recording_graph({&x})) {
    detail::ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix](detail::TensorImpl& o) {
      if (float* gx = detail::grad_sink(ix))
        for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += o.grad[0];
    });
  }
  return result;
}

// Mean over one axis; the axis is removed from the shape.
inline Tensor mean(const Tensor& x, int axis) {
  const std::size_t ax = detail::resolve_axis(x, axis, "mean");
  const auto s = detail::split_at(x.shape(), ax);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<float> out(s.outer * s.inner);
  std::vector<double> acc(s.inner);
  const float* px = x.data().data();
  const float inv = 1.0f / static_cast<float>(s.length);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t l = 0; l < s.length; ++l) {
      const float* src = px + (o * s.length + l) * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) acc[i] += src[i];
    }
    for (std::size_t i = 0; i < s.inner; ++i)
      out[o * s.inner + i] = static_cast<float>(acc[i] / static_cast<double>(s.length));
  }
  Tensor result(std::move(shape), std::move(out));
  if (Graph* g = detail::recording_graph({&x})) {
    detail::ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix, s, inv](detail::TensorImpl& o) {
      float* gx = detail::grad_sink(ix);
      if (!gx) return;
      for (std::size_t a = 0; a < s.outer; ++a)
        for (std::size_t l = 0; l < s.length; ++l)
          for (std::size_t i = 0; i < s.inner; ++i)
            gx[(a * s.length + l) * s.inner + i] += o.grad[a * s.inner + i] * inv;
    });
  }
  return result;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = detail::resolve_axis(parts.front(), axis, "concat");
  Shape shape = parts.front().shape();
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    Shape probe = t.shape();
    if (probe.size() != shape.size()) throw ShapeError("concat: rank mismatch " + shape_str(probe));
    probe[ax] = shape[ax];
    if (probe != shape) throw ShapeError("concat: shape " + shape_str(t.shape()) + " vs " + shape_str(shape));
    total += t.shape()[ax];
  }
  shape[ax] = total;
  const auto s = detail::split_at(shape, ax);
  std::vector<float> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& t : parts) {
    const std::size_t len = t.shape()[ax];
    offsets.push_back(offset);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const float* src = t.data().data() + o * len * s.inner;
      std::copy(src, src + len * s.inner, out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * s.inner));
    }
    offset += len;
  }
  Tensor result(std::move(shape), std::move(out));
  if (Graph* g = detail::recording_graph(parts)) {
    std::vector<detail::ImplPtr> inputs;
    for (const Tensor& t : parts) inputs.push_back(t.impl());
    g->record(result.impl(), inputs, [inputs, offsets, s, total, ax](detail::TensorImpl& o) {
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        float* gx = detail::grad_sink(inputs[k]);
        if (!gx) continue;
        const std::size_t len = inputs[k]->shape[ax];
        for (std::size_t a = 0; a < s.outer; ++a) {
          const float* src = o.grad.data() + (a * total + offsets[k]) * s.inner;
          float* dst = gx + a * len * s.inner;
          for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::resolve_axis(x, axis, "slice");
  if (begin >= end || end > x.shape()[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                     shape_str(x.shape()));
  }
  const auto s = detail::split_at(x.shape(), ax);
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[ax] = len;
  std::vector<float> out(s.outer * len * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const float* src = x.data().data() + (o * s.length + begin) * s.inner;
    std::copy(src, src + len * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  }
  Tensor result(std::move(shape), std::move(out));
  if (Graph* g = detail::recording_graph({&x})) {
    detail::ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix, s, begin, len](detail::TensorImpl& o) {
      float* gx = detail::grad_sink(ix);
      if (!gx) return;
      for (std::size_t a = 0; a < s.outer; ++a) {
        const float* src = o.grad.data() + a * len * s.inner;
        float* dst = gx + (a * s.length + begin) * s.inner;
        for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

// Softmax over the last axis with the row max subtracted first.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax_rows: scalar input");
  const std::size_t cols = x.dim(-1), rows = x.numel() / cols;
  std::vector<float> out(x.numel());
  const float* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = px + r * cols;
    float* y = out.data() + r * cols;
    const float mx = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(in[c] - mx);
      total += y[c];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  Tensor result(x.shape(), std::move(out));
  if (Graph* g = detail::recording_graph({&x})) {
    detail::ImplPtr ix = x.impl();
    g->record(result.impl(), {ix}, [ix, rows, cols](detail::TensorImpl& o) {
      float* gx = detail::grad_sink(ix);
      if (!gx) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const float* y = o.data.data() + r * cols;
        const float* gy = o.grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(gy[c]) * y[c];
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (gy[c] - static_cast<float>(dot));
      }
    });
  }
  return result;
}

// Normalises each position over the last axis (population variance), then
// applies the gamma/beta affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.dim(-1), rows = x.numel() / d;
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match last dim of " + shape_str(x.shape()));
  }
  if (!(eps > 0.0f)) throw std::invalid_argument("layer_norm: eps must be positive");
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  std::vector<float> out(x.numel());
  const float* px = x.data().data();
  const float* pg = gamma.data().data();
  const float* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* in = px + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = static_cast<float>(is);
    for (std::size_t i = 0; i < d; ++i) {
      const float h = static_cast<float>((in[i] - mu) * is);
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * pg[i] + pb[i];
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (Graph* g = detail::recording_graph({&x, &gamma, &beta})) {
    detail::ImplPtr ix = x.impl(), ig = gamma.impl(), ib = beta.impl();
    g->record(result.impl(), {ix, ig, ib}, [ix, ig, ib, xhat, inv_std, rows, d](detail::TensorImpl& o) {
      float* gx = detail::grad_sink(ix);
      float* gg = detail::grad_sink(ig);
      float* gb = detail::grad_sink(ib);
      const float* gamma_v = ig->data.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* gy = o.grad.data() + r * d;
        const float* h = xhat->data() + r * d;
        if (gg)
          for (std::size_t i = 0; i < d; ++i) gg[i] += gy[i] * h[i];
        if (gb)
          for (std::size_t i = 0; i < d; ++i) gb[i] += gy[i];
        if (!gx) continue;
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          const double dh = static_cast<double>(gy[i]) * gamma_v[i];
          mean_dh += dh;
          mean_dh_h += dh * h[i];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        const double is = (*inv_std)[r];
        for (std::size_t i = 0; i < d; ++i) {
          const double dh = static_cast<double>(gy[i]) * gamma_v[i];
          gx[r * d + i] += static_cast<float>(is * (dh - mean_dh - h[i] * mean_dh_h));
        }
      }
    });
  }
  return result;
}

}  // namespace transcrowd
