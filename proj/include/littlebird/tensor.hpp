#pragma once

#include <Eigen/Core>

#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "littlebird/errors.hpp"
#include "littlebird/rng.hpp"

namespace littlebird {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <class S>
using MatrixR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <class S>
using MatMap = Eigen::Map<MatrixR<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatrixR<S>>;
template <class S>
using VecMap = Eigen::Map<ArrayX<S>>;
template <class S>
using ConstVecMap = Eigen::Map<const ArrayX<S>>;

inline Index numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Live-tensor byte accounting. This is the allocation proxy the benchmarks
// report as "peak memory": bytes of tensor value/grad storage currently alive.
// ---------------------------------------------------------------------------
struct MemoryStats {
  std::atomic<long long> live_bytes{0};
  std::atomic<long long> peak_bytes{0};

  void on_alloc(long long n) {
    const long long now = live_bytes.fetch_add(n) + n;
    long long prev = peak_bytes.load();
    while (prev < now && !peak_bytes.compare_exchange_weak(prev, now)) {
    }
  }
  void on_free(long long n) { live_bytes.fetch_sub(n); }
  void reset_peak() { peak_bytes.store(live_bytes.load()); }
};

inline MemoryStats& memory_stats() {
  static MemoryStats stats;
  return stats;
}

// ---------------------------------------------------------------------------
// Grad mode. Thread-local so concurrent inference never races training state.
// ---------------------------------------------------------------------------
inline bool& grad_mode_ref() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_ref(); }

/// RAII guard disabling graph construction; forward passes under the guard
/// produce plain values.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
  ~NoGradGuard() { grad_mode_ref() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class S>
class TensorT;

/// One reverse-mode graph node: the tensors the op consumed and a closure
/// that routes the output's gradient into them.
template <class S>
struct GradNodeT {
  std::vector<TensorT<S>> parents;
  std::function<void(const TensorT<S>& out)> apply;
};

// ---------------------------------------------------------------------------
// Dense row-major tensor with an optional grad buffer of identical shape.
// Value-semantic handle over shared storage; ops never mutate inputs.
// ---------------------------------------------------------------------------
template <class S>
class TensorT {
  struct Payload {
    Shape shape;
    ArrayX<S> value;
    ArrayX<S> grad;  // size 0 until a gradient is first accumulated
    bool requires_grad = false;
    std::shared_ptr<GradNodeT<S>> node;
    long long tracked_bytes = 0;

    explicit Payload(Shape sh) : shape(std::move(sh)) {
      const Index n = numel(shape);
      value.setZero(n);
      tracked_bytes = static_cast<long long>(n) * static_cast<long long>(sizeof(S));
      memory_stats().on_alloc(tracked_bytes);
    }
    ~Payload() { memory_stats().on_free(tracked_bytes); }
  };

 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(Shape shape) { return TensorT(std::make_shared<Payload>(std::move(shape))); }

  static TensorT constant(Shape shape, S v) {
    TensorT t = zeros(std::move(shape));
    t.array().setConstant(v);
    return t;
  }

  static TensorT scalar(S v) { return constant({1}, v); }

  static TensorT randn(Shape shape, SplitMix64& rng, S stddev) {
    TensorT t = zeros(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t.array()[i] = static_cast<S>(rng.normal()) * stddev;
    return t;
  }

  static TensorT from_values(Shape shape, std::initializer_list<S> vals) {
    TensorT t = zeros(std::move(shape));
    if (static_cast<Index>(vals.size()) != t.size())
      throw ShapeError("from_values: got " + std::to_string(vals.size()) + " values for shape " +
                       shape_str(t.shape()));
    Index i = 0;
    for (S v : vals) t.array()[i++] = v;
    return t;
  }

  bool defined() const { return static_cast<bool>(p_); }
  const Shape& shape() const { return p_->shape; }
  Index rank() const { return static_cast<Index>(p_->shape.size()); }
  Index size() const { return p_->value.size(); }
  Index dim(Index i) const { return p_->shape[static_cast<size_t>(i)]; }

  Index rows() const {
    check_rank(2, "rows");
    return p_->shape[0];
  }
  Index cols() const {
    check_rank(2, "cols");
    return p_->shape[1];
  }

  ArrayX<S>& array() { return p_->value; }
  const ArrayX<S>& array() const { return p_->value; }
  S* data() { return p_->value.data(); }
  const S* data() const { return p_->value.data(); }

  S item() const {
    if (size() != 1) throw ShapeError("item: tensor has " + std::to_string(size()) + " elements");
    return p_->value[0];
  }

  MatMap<S> mat() {
    check_rank(2, "mat");
    return MatMap<S>(data(), p_->shape[0], p_->shape[1]);
  }
  ConstMatMap<S> mat() const {
    check_rank(2, "mat");
    return ConstMatMap<S>(data(), p_->shape[0], p_->shape[1]);
  }

  VecMap<S> vec() {
    check_rank(1, "vec");
    return VecMap<S>(data(), p_->shape[0]);
  }
  ConstVecMap<S> vec() const {
    check_rank(1, "vec");
    return ConstVecMap<S>(data(), p_->shape[0]);
  }

  /// Rank-3 tensors are contiguous stacks of planes; plane(i) views one.
  ConstMatMap<S> plane(Index i) const {
    check_rank(3, "plane");
    const Index r = p_->shape[1], c = p_->shape[2];
    return ConstMatMap<S>(data() + i * r * c, r, c);
  }
  MatMap<S> plane(Index i) {
    check_rank(3, "plane");
    const Index r = p_->shape[1], c = p_->shape[2];
    return MatMap<S>(data() + i * r * c, r, c);
  }

  S& at(Index i) { return p_->value[i]; }
  S at(Index i) const { return p_->value[i]; }
  S& at(Index i, Index j) { return p_->value[i * p_->shape[1] + j]; }
  S at(Index i, Index j) const { return p_->value[i * p_->shape[1] + j]; }
  S& at(Index i, Index j, Index k) { return p_->value[(i * p_->shape[1] + j) * p_->shape[2] + k]; }
  S at(Index i, Index j, Index k) const {
    return p_->value[(i * p_->shape[1] + j) * p_->shape[2] + k];
  }

  // --- gradient buffer ------------------------------------------------------
  bool requires_grad() const { return p_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    p_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return p_->grad.size() > 0; }

  void ensure_grad() {
    if (!has_grad()) {
      p_->grad.setZero(size());
      const long long n = static_cast<long long>(size()) * static_cast<long long>(sizeof(S));
      p_->tracked_bytes += n;
      memory_stats().on_alloc(n);
    }
  }

  void zero_grad() {
    if (has_grad()) p_->grad.setZero();
  }

  ArrayX<S>& grad() {
    ensure_grad();
    return p_->grad;
  }
  const ArrayX<S>& grad() const { return p_->grad; }

  MatMap<S> grad_mat() {
    ensure_grad();
    check_rank(2, "grad_mat");
    return MatMap<S>(p_->grad.data(), p_->shape[0], p_->shape[1]);
  }
  VecMap<S> grad_vec() {
    ensure_grad();
    check_rank(1, "grad_vec");
    return VecMap<S>(p_->grad.data(), p_->shape[0]);
  }
  MatMap<S> grad_plane(Index i) {
    ensure_grad();
    check_rank(3, "grad_plane");
    const Index r = p_->shape[1], c = p_->shape[2];
    return MatMap<S>(p_->grad.data() + i * r * c, r, c);
  }

  // --- autograd wiring ------------------------------------------------------
  const std::shared_ptr<GradNodeT<S>>& node() const { return p_->node; }

  /// True if this tensor participates in gradient flow.
  bool tracked() const { return p_ && (p_->requires_grad || p_->node != nullptr); }

  /// Identity of the underlying storage (used for graph traversal).
  const void* id() const { return p_.get(); }

  /// Deep copy of values only.
  TensorT clone_values() const {
    TensorT t = zeros(shape());
    t.array() = array();
    return t;
  }

  friend void attach_node_impl(TensorT& out, std::vector<TensorT> parents,
                               std::function<void(const TensorT&)> apply) {
    auto n = std::make_shared<GradNodeT<S>>();
    n->parents = std::move(parents);
    n->apply = std::move(apply);
    out.p_->node = std::move(n);
  }

 private:
  explicit TensorT(std::shared_ptr<Payload> p) : p_(std::move(p)) {}

  void check_rank(Index r, const char* what) const {
    if (rank() != r)
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", have " +
                       shape_str(p_->shape));
  }

  std::shared_ptr<Payload> p_;
};

using Tensor = TensorT<double>;

template <class S>
bool any_tracked(std::initializer_list<const TensorT<S>*> ts) {
  if (!grad_enabled()) return false;
  for (const TensorT<S>* t : ts)
    if (t->tracked()) return true;
  return false;
}

/// Registers a backward closure on `out`. `apply` receives the finished
/// output tensor and must accumulate into each tracked parent's grad buffer.
/// Public so composite modules and tests can define custom ops.
template <class S>
void make_tracked(TensorT<S>& out, std::vector<TensorT<S>> parents,
                  std::function<void(const TensorT<S>&)> apply) {
  attach_node_impl(out, std::move(parents), std::move(apply));
}

/// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and runs
/// every reachable node once, consumers before producers.
template <class S>
void backward(TensorT<S>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, have " + shape_str(loss.shape()));
  if (!loss.node() && !loss.requires_grad()) return;

  struct Frame {
    TensorT<S> t;
    size_t next_parent;
  };
  std::vector<TensorT<S>> order;  // post-order: producers first
  std::unordered_set<const void*> visited;
  std::vector<Frame> stack;
  if (loss.node()) {
    stack.push_back({loss, 0});
    visited.insert(loss.id());
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& parents = f.t.node()->parents;
    bool descended = false;
    while (f.next_parent < parents.size()) {
      TensorT<S> p = parents[f.next_parent++];  // copy: pushing may move frames
      if (p.node() && !visited.count(p.id())) {
        visited.insert(p.id());
        stack.push_back({std::move(p), 0});
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  loss.ensure_grad();
  loss.grad()[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    it->ensure_grad();
    it->node()->apply(*it);
  }
}

}  // namespace littlebird
