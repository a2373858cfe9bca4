#pragma once

// Reverse-mode automatic differentiation over dense float64 arrays.
//
// Tensors have rank 1..3 and are immutable values; their storage is shared so
// copies are cheap. When a Tape is active on the current thread, every
// primitive records a node so that `backward` can later propagate gradients to
// the leaves registered with `Tape::leaf`. Without an active tape the same
// primitives run as plain forward computations.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace tubedpc {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::domain_error {
  using std::domain_error::domain_error;
};

namespace ad {

using Shape = std::vector<std::size_t>;
using Values = std::shared_ptr<const std::vector<double>>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

enum class Op : std::uint8_t {
  leaf,
  constant,
  add,
  sub,
  mul,
  matmul,
  relu,
  exp,
  log,
  sum,
  mean,
  square,
  concat,
  slice,
  transpose,
  softmax_rows,
  layernorm_rows,
  scale,
  reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::relu: return "relu";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::square: return "square";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::transpose: return "transpose";
    case Op::softmax_rows: return "softmax_rows";
    case Op::layernorm_rows: return "layernorm_rows";
    case Op::scale: return "scale";
    case Op::reshape: return "reshape";
  }
  return "?";
}

/// Extra parameters of an op: scale factor, slice range (last axis), target shape.
struct OpAttrs {
  double factor = 1.0;
  std::size_t begin = 0;
  std::size_t end = 0;
  Shape shape;
};

/// Handle of a tensor inside a specific tape. tape == 0 means detached.
struct NodeRef {
  std::uint64_t tape = 0;
  int index = -1;
};

class Tensor {
 public:
  Tensor() : shape_{0}, data_(std::make_shared<const std::vector<double>>()) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (shape_.empty() || shape_.size() > 3)
      throw ShapeError("tensor rank must be 1..3, got " + std::to_string(shape_.size()));
    if (numel(shape_) != data.size())
      throw ShapeError("shape " + to_string(shape_) + " does not match " +
                       std::to_string(data.size()) + " values");
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
  }

  Tensor(Shape shape, Values data, NodeRef node = {})
      : shape_(std::move(shape)), data_(std::move(data)), node_(node) {}

  static Tensor zeros(Shape shape) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor full(Shape shape, double v) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.size() == 1 ? 1 : numel(shape_) / shape_.back(); }
  std::size_t cols() const { return shape_.back(); }

  std::span<const double> data() const { return *data_; }
  const Values& storage() const { return data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }

  /// Writable private copy of the values; detaches the tensor from any tape.
  std::vector<double>& mutable_data() {
    auto fresh = std::make_shared<std::vector<double>>(*data_);
    data_ = fresh;
    node_ = {};
    return *fresh;
  }

  const NodeRef& node() const { return node_; }
  Tensor detached() const { return Tensor(shape_, data_); }

  std::vector<double> to_vector() const { return *data_; }

 private:
  Shape shape_;
  Values data_;
  NodeRef node_;
};

namespace detail {

inline void check_finite(std::span<const double> v, Op op) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NonFiniteError(std::string("non-finite value produced by ") + op_name(op));
}

struct Forward {
  Shape shape;
  std::vector<double> value;
  std::vector<double> saved;
};

// Pads a shape of rank <= 3 with leading ones to rank 3.
inline std::array<std::size_t, 3> pad3(const Shape& s) {
  std::array<std::size_t, 3> out{1, 1, 1};
  std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(3 - s.size()));
  return out;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a == b) return a;
  auto pa = pad3(a), pb = pad3(b);
  Shape out(std::max(a.size(), b.size()));
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t d;
    if (pa[i] == pb[i] || pb[i] == 1) d = pa[i];
    else if (pa[i] == 1) d = pb[i];
    else throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    if (i >= 3 - out.size()) out[i - (3 - out.size())] = d;
    else if (d != 1) throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
  }
  return out;
}

// Visits every element of the broadcast result with (out, ia, ib) flat offsets.
template <class F>
void for_each_broadcast(const Shape& a, const Shape& b, const Shape& out, F&& f) {
  if (a == b) {
    for (std::size_t i = 0, n = numel(a); i < n; ++i) f(i, i, i);
    return;
  }
  auto pa = pad3(a), pb = pad3(b), po = pad3(out);
  std::array<std::size_t, 3> sa{pa[1] * pa[2], pa[2], 1}, sb{pb[1] * pb[2], pb[2], 1};
  for (std::size_t d = 0; d < 3; ++d) {
    if (pa[d] == 1) sa[d] = 0;
    if (pb[d] == 1) sb[d] = 0;
  }
  std::size_t o = 0;
  for (std::size_t i = 0; i < po[0]; ++i)
    for (std::size_t j = 0; j < po[1]; ++j)
      for (std::size_t k = 0; k < po[2]; ++k, ++o)
        f(o, i * sa[0] + j * sa[1] + k * sa[2], i * sb[0] + j * sb[1] + k * sb[2]);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct MatmulLayout {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool rhs_batched = false;
  Shape out;
};

inline MatmulLayout matmul_layout(const Shape& a, const Shape& b) {
  MatmulLayout l;
  if (a.size() == 2 && b.size() == 2) {
    l.m = a[0], l.k = a[1], l.n = b[1];
    if (b[0] != l.k) throw ShapeError("matmul inner mismatch " + to_string(a) + " x " + to_string(b));
    l.out = {l.m, l.n};
  } else if (a.size() == 3 && b.size() == 2) {
    // [B,M,K] x [K,N] is a single [(B*M),K] x [K,N] product.
    l.m = a[0] * a[1], l.k = a[2], l.n = b[1];
    if (b[0] != l.k) throw ShapeError("matmul inner mismatch " + to_string(a) + " x " + to_string(b));
    l.out = {a[0], a[1], l.n};
  } else if (a.size() == 3 && b.size() == 3) {
    if (a[0] != b[0] || a[2] != b[1])
      throw ShapeError("batched matmul mismatch " + to_string(a) + " x " + to_string(b));
    l.batch = a[0], l.m = a[1], l.k = a[2], l.n = b[2], l.rhs_batched = true;
    l.out = {a[0], a[1], l.n};
  } else {
    throw ShapeError("unsupported matmul ranks " + to_string(a) + " x " + to_string(b));
  }
  return l;
}

inline Forward compute(Op op, std::span<const Tensor> in, const OpAttrs& at) {
  Forward f;
  auto unary = [&](auto fn) {
    f.shape = in[0].shape();
    auto x = in[0].data();
    f.value.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) f.value[i] = fn(x[i]);
  };
  auto binary = [&](auto fn) {
    f.shape = broadcast_shape(in[0].shape(), in[1].shape());
    f.value.resize(numel(f.shape));
    auto a = in[0].data(), b = in[1].data();
    for_each_broadcast(in[0].shape(), in[1].shape(), f.shape,
                       [&](std::size_t o, std::size_t ia, std::size_t ib) { f.value[o] = fn(a[ia], b[ib]); });
  };

  switch (op) {
    case Op::leaf:
    case Op::constant:
      throw std::logic_error("compute() called for a source node");
    case Op::add: binary([](double a, double b) { return a + b; }); break;
    case Op::sub: binary([](double a, double b) { return a - b; }); break;
    case Op::mul: binary([](double a, double b) { return a * b; }); break;
    case Op::matmul: {
      auto l = matmul_layout(in[0].shape(), in[1].shape());
      f.shape = l.out;
      f.value.assign(numel(l.out), 0.0);
      const double* a = in[0].data().data();
      const double* b = in[1].data().data();
      for (std::size_t s = 0; s < l.batch; ++s) {
        ConstMap A(a + s * l.m * l.k, l.m, l.k);
        ConstMap B(b + (l.rhs_batched ? s * l.k * l.n : 0), l.k, l.n);
        MutMap C(f.value.data() + s * l.m * l.n, l.m, l.n);
        C.noalias() = A * B;
      }
      break;
    }
    case Op::relu: unary([](double x) { return x > 0.0 ? x : 0.0; }); break;
    case Op::exp: unary([](double x) { return std::exp(x); }); break;
    case Op::log:
      unary([](double x) { return std::log(x); });
      break;
    case Op::square: unary([](double x) { return x * x; }); break;
    case Op::scale: unary([&](double x) { return at.factor * x; }); break;
    case Op::sum:
    case Op::mean: {
      auto x = in[0].data();
      double s = 0.0;
      for (double v : x) s += v;
      f.shape = {1};
      f.value = {op == Op::sum ? s : s / static_cast<double>(x.size())};
      break;
    }
    case Op::concat: {
      const auto& s0 = in[0].shape();
      std::size_t rows = in[0].rows(), total = 0;
      for (const auto& t : in) {
        if (t.rank() != s0.size() || t.rows() != rows ||
            !std::equal(s0.begin(), s0.end() - 1, t.shape().begin()))
          throw ShapeError("concat shape mismatch " + to_string(s0) + " vs " + to_string(t.shape()));
        total += t.cols();
      }
      f.shape = s0;
      f.shape.back() = total;
      f.value.resize(rows * total);
      std::size_t off = 0;
      for (const auto& t : in) {
        auto c = t.cols();
        auto x = t.data();
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                      f.value.begin() + static_cast<std::ptrdiff_t>(r * total + off));
        off += c;
      }
      break;
    }
    case Op::slice: {
      auto c = in[0].cols();
      if (at.begin >= at.end || at.end > c)
        throw ShapeError("slice [" + std::to_string(at.begin) + "," + std::to_string(at.end) +
                         ") out of range for " + to_string(in[0].shape()));
      auto w = at.end - at.begin, rows = in[0].rows();
      f.shape = in[0].shape();
      f.shape.back() = w;
      f.value.resize(rows * w);
      auto x = in[0].data();
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(r * c + at.begin), w,
                    f.value.begin() + static_cast<std::ptrdiff_t>(r * w));
      break;
    }
    case Op::transpose: {
      const auto& s = in[0].shape();
      if (s.size() < 2) throw ShapeError("transpose needs rank >= 2");
      std::size_t batch = s.size() == 3 ? s[0] : 1, m = s[s.size() - 2], n = s.back();
      f.shape = s;
      std::swap(f.shape[s.size() - 2], f.shape[s.size() - 1]);
      f.value.resize(batch * m * n);
      auto x = in[0].data();
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) f.value[b * m * n + j * m + i] = x[b * m * n + i * n + j];
      break;
    }
    case Op::softmax_rows: {
      f.shape = in[0].shape();
      auto x = in[0].data();
      auto c = in[0].cols(), rows = in[0].rows();
      f.value.resize(x.size());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * c;
        double* yr = f.value.data() + r * c;
        double mx = *std::max_element(xr, xr + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
      }
      break;
    }
    case Op::layernorm_rows: {
      constexpr double eps = 1e-10;
      f.shape = in[0].shape();
      auto x = in[0].data();
      auto c = in[0].cols(), rows = in[0].rows();
      f.value.resize(x.size());
      f.saved.resize(rows);  // inverse standard deviation per row
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * c;
        double* yr = f.value.data() + r * c;
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += xr[j];
        m /= static_cast<double>(c);
        double v = 0.0;
        for (std::size_t j = 0; j < c; ++j) v += (xr[j] - m) * (xr[j] - m);
        v /= static_cast<double>(c);
        double inv = 1.0 / std::sqrt(v + eps);
        f.saved[r] = inv;
        for (std::size_t j = 0; j < c; ++j) yr[j] = (xr[j] - m) * inv;
      }
      break;
    }
    case Op::reshape: {
      if (numel(at.shape) != in[0].size())
        throw ShapeError("reshape " + to_string(in[0].shape()) + " -> " + to_string(at.shape));
      f.shape = at.shape;
      f.value = in[0].to_vector();
      break;
    }
  }
  return f;
}

inline std::size_t arity(Op op) {
  switch (op) {
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::matmul: return 2;
    case Op::concat: return 0;  // variadic
    case Op::leaf:
    case Op::constant: return 0;
    default: return 1;
  }
}

}  // namespace detail

class Tape;

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
inline std::uint64_t next_tape_id() {
  thread_local std::uint64_t id = 0;
  // Thread-local counter combined with the thread's address keeps ids unique.
  return (++id << 16) ^ (reinterpret_cast<std::uintptr_t>(&id) & 0xffff);
}
}  // namespace detail

/// Gradients of one backward pass, keyed by leaf node.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::uint64_t tape, std::unordered_map<int, Tensor> by_leaf)
      : tape_(tape), grads_(std::move(by_leaf)) {}

  /// Gradient w.r.t. a leaf; zeros when the output does not depend on it.
  Tensor operator[](const Tensor& leaf) const {
    if (leaf.node().tape != tape_) throw std::invalid_argument("tensor is not a leaf of this tape");
    auto it = grads_.find(leaf.node().index);
    if (it == grads_.end()) return Tensor::zeros(leaf.shape());
    return it->second;
  }
  const std::unordered_map<int, Tensor>& by_leaf() const { return grads_; }

 private:
  std::uint64_t tape_ = 0;
  std::unordered_map<int, Tensor> grads_;
};

/// Define-by-run computation record. Activating a tape makes every primitive on
/// this thread record onto it until the tape is deactivated or destroyed.
class Tape {
 public:
  struct Node {
    Op op;
    std::vector<int> inputs;
    OpAttrs attrs;
    Shape shape;
    Values value;
    std::vector<double> saved;
    bool requires_grad = false;
  };

  Tape() : id_(detail::next_tape_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { deactivate(); }

  void activate() {
    previous_ = detail::active_tape();
    detail::active_tape() = this;
    active_ = true;
  }
  void deactivate() {
    if (active_ && detail::active_tape() == this) detail::active_tape() = previous_;
    active_ = false;
  }

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  /// Registers a differentiable leaf holding the tensor's current value.
  Tensor leaf(const Tensor& t) {
    nodes_.push_back({Op::leaf, {}, {}, t.shape(), t.storage(), {}, true});
    return Tensor(t.shape(), t.storage(), {id_, static_cast<int>(nodes_.size() - 1)});
  }

  bool owns(const Tensor& t) const { return t.node().tape == id_ && t.node().index >= 0; }

  Tensor record(Op op, std::span<const Tensor> inputs, const OpAttrs& attrs, detail::Forward f) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(owns(t) ? t.node().index : constant(t));
    auto value = std::make_shared<const std::vector<double>>(std::move(f.value));
    nodes_.push_back({op, std::move(ids), attrs, f.shape, value, std::move(f.saved), true});
    return Tensor(std::move(f.shape), std::move(value), {id_, static_cast<int>(nodes_.size() - 1)});
  }

  /// Propagates `seed` (same shape as `output`) back to every leaf.
  Gradients backward(const Tensor& output, const Tensor& seed) const;

  /// Re-executes every recorded op from the stored leaf/constant values and
  /// returns true when all node values match bit-for-bit.
  bool replay_matches() const {
    std::vector<Tensor> values(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.op == Op::leaf || n.op == Op::constant) {
        values[i] = Tensor(n.shape, n.value);
        continue;
      }
      std::vector<Tensor> in;
      for (int j : n.inputs) in.push_back(values[static_cast<std::size_t>(j)]);
      auto f = detail::compute(n.op, in, n.attrs);
      if (f.shape != n.shape || f.value != *n.value) return false;
      values[i] = Tensor(f.shape, std::move(f.value));
    }
    return true;
  }

 private:
  int constant(const Tensor& t) {
    nodes_.push_back({Op::constant, {}, {}, t.shape(), t.storage(), {}, false});
    return static_cast<int>(nodes_.size() - 1);
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
  Tape* previous_ = nullptr;
  bool active_ = false;
};

/// RAII activation of a tape on the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : tape_(t) { tape_.activate(); }
  ~TapeScope() { tape_.deactivate(); }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape& tape_;
};

/// Suspends recording for a forward-only computation.
class NoTapeScope {
 public:
  NoTapeScope() : saved_(detail::active_tape()) { detail::active_tape() = nullptr; }
  ~NoTapeScope() { detail::active_tape() = saved_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* saved_;
};

inline Tape* active_tape() { return detail::active_tape(); }

/// Generic entry point for every primitive.
inline Tensor apply(Op op, std::span<const Tensor> inputs, const OpAttrs& attrs = {}) {
  if (op == Op::leaf || op == Op::constant) throw std::invalid_argument("apply() on a source op");
  auto need = detail::arity(op);
  if (op == Op::concat ? inputs.empty() : inputs.size() != need)
    throw ShapeError(std::string("wrong input count for ") + op_name(op));
  auto f = detail::compute(op, inputs, attrs);
  detail::check_finite(f.value, op);
  if (Tape* t = detail::active_tape()) {
    // Ops that touch no recorded tensor stay off the tape: they are constants.
    bool tracked = std::any_of(inputs.begin(), inputs.end(), [&](const Tensor& x) { return t->owns(x); });
    if (tracked) return t->record(op, inputs, attrs, std::move(f));
  }
  auto n = f.shape;
  return Tensor(std::move(n), std::make_shared<const std::vector<double>>(std::move(f.value)));
}

inline Tensor add(const Tensor& a, const Tensor& b) { return ad::apply(Op::add, std::array{a, b}); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return ad::apply(Op::sub, std::array{a, b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return ad::apply(Op::mul, std::array{a, b}); }
inline Tensor matmul(const Tensor& a, const Tensor& b) { return ad::apply(Op::matmul, std::array{a, b}); }
inline Tensor relu(const Tensor& a) { return ad::apply(Op::relu, std::array{a}); }
inline Tensor exp(const Tensor& a) { return ad::apply(Op::exp, std::array{a}); }
inline Tensor log(const Tensor& a) { return ad::apply(Op::log, std::array{a}); }
inline Tensor sum(const Tensor& a) { return ad::apply(Op::sum, std::array{a}); }
inline Tensor mean(const Tensor& a) { return ad::apply(Op::mean, std::array{a}); }
inline Tensor square(const Tensor& a) { return ad::apply(Op::square, std::array{a}); }
inline Tensor transpose(const Tensor& a) { return ad::apply(Op::transpose, std::array{a}); }
inline Tensor softmax_rows(const Tensor& a) { return ad::apply(Op::softmax_rows, std::array{a}); }
inline Tensor layernorm_rows(const Tensor& a) { return ad::apply(Op::layernorm_rows, std::array{a}); }
inline Tensor concat(std::span<const Tensor> parts) { return ad::apply(Op::concat, parts); }
inline Tensor concat(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return ad::apply(Op::concat, v);
}
inline Tensor scale(const Tensor& a, double factor) {
  OpAttrs at;
  at.factor = factor;
  return ad::apply(Op::scale, std::array{a}, at);
}
/// Columns [begin, end) of the last axis.
inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  OpAttrs at;
  at.begin = begin;
  at.end = end;
  return ad::apply(Op::slice, std::array{a}, at);
}
inline Tensor reshape(const Tensor& a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return ad::apply(Op::reshape, std::array{a}, at);
}

namespace detail {

// gin[i] is null when input i does not need a gradient.
inline void backward_node(const Tape::Node& n, const std::vector<const Tape::Node*>& in,
                          const std::vector<double>& g, const std::vector<std::vector<double>*>& gin) {
  const auto& y = *n.value;
  auto in_val = [&](std::size_t i) -> const std::vector<double>& { return *in[i]->value; };
  auto buf = [&](std::size_t i) -> double* {
    if (!gin[i]) return nullptr;
    if (gin[i]->empty()) gin[i]->assign(in[i]->value->size(), 0.0);
    return gin[i]->data();
  };

  switch (n.op) {
    case Op::leaf:
    case Op::constant: break;
    case Op::add:
    case Op::sub: {
      double sign_b = n.op == Op::add ? 1.0 : -1.0;
      double* ga = buf(0);
      double* gb = buf(1);
      for_each_broadcast(in[0]->shape, in[1]->shape, n.shape,
                         [&](std::size_t o, std::size_t ia, std::size_t ib) {
                           if (ga) ga[ia] += g[o];
                           if (gb) gb[ib] += sign_b * g[o];
                         });
      break;
    }
    case Op::mul: {
      const auto& a = in_val(0);
      const auto& b = in_val(1);
      double* ga = buf(0);
      double* gb = buf(1);
      for_each_broadcast(in[0]->shape, in[1]->shape, n.shape,
                         [&](std::size_t o, std::size_t ia, std::size_t ib) {
                           if (ga) ga[ia] += g[o] * b[ib];
                           if (gb) gb[ib] += g[o] * a[ia];
                         });
      break;
    }
    case Op::matmul: {
      auto l = matmul_layout(in[0]->shape, in[1]->shape);
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      double* ga = buf(0);
      double* gb = buf(1);
      if (!l.rhs_batched) {
        // One stacked product covers rank-2 and [B,M,K] x [K,N].
        std::size_t m = l.batch * l.m;
        ConstMap A(a, m, l.k);
        ConstMap B(b, l.k, l.n);
        ConstMap G(g.data(), m, l.n);
        if (ga) MutMap(ga, m, l.k).noalias() += G * B.transpose();
        if (gb) MutMap(gb, l.k, l.n).noalias() += A.transpose() * G;
        break;
      }
      for (std::size_t s = 0; s < l.batch; ++s) {
        ConstMap A(a + s * l.m * l.k, l.m, l.k);
        ConstMap B(b + s * l.k * l.n, l.k, l.n);
        ConstMap G(g.data() + s * l.m * l.n, l.m, l.n);
        if (ga) MutMap(ga + s * l.m * l.k, l.m, l.k).noalias() += G * B.transpose();
        if (gb) MutMap(gb + s * l.k * l.n, l.k, l.n).noalias() += A.transpose() * G;
      }
      break;
    }
    case Op::relu: {
      const auto& x = in_val(0);
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < x.size(); ++i)
          if (x[i] > 0.0) ga[i] += g[i];
      break;
    }
    case Op::exp:
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < y.size(); ++i) ga[i] += g[i] * y[i];
      break;
    case Op::log: {
      const auto& x = in_val(0);
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] / x[i];
      break;
    }
    case Op::square: {
      const auto& x = in_val(0);
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
      break;
    }
    case Op::scale:
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < y.size(); ++i) ga[i] += n.attrs.factor * g[i];
      break;
    case Op::sum:
    case Op::mean: {
      auto sz = in[0]->value->size();
      double v = n.op == Op::sum ? g[0] : g[0] / static_cast<double>(sz);
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < sz; ++i) ga[i] += v;
      break;
    }
    case Op::concat: {
      std::size_t total = n.shape.back(), rows = y.size() / total, off = 0;
      for (std::size_t p = 0; p < in.size(); ++p) {
        std::size_t c = in[p]->shape.back();
        if (double* ga = buf(p))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += g[r * total + off + j];
        off += c;
      }
      break;
    }
    case Op::slice: {
      std::size_t c = in[0]->shape.back(), w = n.attrs.end - n.attrs.begin, rows = y.size() / w;
      if (double* ga = buf(0))
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) ga[r * c + n.attrs.begin + j] += g[r * w + j];
      break;
    }
    case Op::transpose: {
      const auto& s = in[0]->shape;
      std::size_t batch = s.size() == 3 ? s[0] : 1, m = s[s.size() - 2], k = s.back();
      if (double* ga = buf(0))
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) ga[b * m * k + i * k + j] += g[b * m * k + j * m + i];
      break;
    }
    case Op::softmax_rows: {
      std::size_t c = n.shape.back(), rows = y.size() / c;
      if (double* ga = buf(0))
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
          for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
      break;
    }
    case Op::layernorm_rows: {
      std::size_t c = n.shape.back(), rows = y.size() / c;
      double dn = static_cast<double>(c);
      if (double* ga = buf(0))
        for (std::size_t r = 0; r < rows; ++r) {
          double sg = 0.0, sgy = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            sg += g[r * c + j];
            sgy += g[r * c + j] * y[r * c + j];
          }
          double inv = n.saved[r];
          for (std::size_t j = 0; j < c; ++j)
            ga[r * c + j] += inv / dn * (dn * g[r * c + j] - sg - y[r * c + j] * sgy);
        }
      break;
    }
    case Op::reshape:
      if (double* ga = buf(0))
        for (std::size_t i = 0; i < y.size(); ++i) ga[i] += g[i];
      break;
  }
}

}  // namespace detail

inline Gradients Tape::backward(const Tensor& output, const Tensor& seed) const {
  if (!owns(output)) throw std::invalid_argument("backward: output is not recorded on this tape");
  if (seed.shape() != output.shape())
    throw ShapeError("backward seed shape " + to_string(seed.shape()) + " != output " +
                     to_string(output.shape()));
  auto root = static_cast<std::size_t>(output.node().index);
  std::vector<std::vector<double>> grads(root + 1);
  grads[root] = seed.to_vector();
  std::vector<const Node*> in;
  std::vector<std::vector<double>*> gin;
  for (std::size_t i = root + 1; i-- > 0;) {
    const auto& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (grads[i].empty() || n.inputs.empty()) continue;
    in.clear();
    gin.clear();
    for (int j : n.inputs) {
      in.push_back(&nodes_[static_cast<std::size_t>(j)]);
      auto& src = nodes_[static_cast<std::size_t>(j)];
      gin.push_back(src.requires_grad ? &grads[static_cast<std::size_t>(j)] : nullptr);
    }
    // A node feeding an op twice (x + x) gets both contributions in one buffer.
    detail::backward_node(n, in, grads[i], gin);
    if (n.op != Op::leaf) std::vector<double>().swap(grads[i]);
  }
  std::unordered_map<int, Tensor> out;
  for (std::size_t i = 0; i <= root; ++i)
    if (nodes_[i].op == Op::leaf && !grads[i].empty())
      out.emplace(static_cast<int>(i), Tensor(nodes_[i].shape, std::move(grads[i])));
  return Gradients(id_, std::move(out));
}

/// d(output)/d(leaf) for a scalar output recorded on the active tape.
inline Gradients backward(const Tensor& output) {
  Tape* t = active_tape();
  if (!t || !t->owns(output)) throw std::invalid_argument("backward: tensor is detached from the active tape");
  if (output.size() != 1) throw ShapeError("backward needs a scalar output, got " + to_string(output.shape()));
  return t->backward(output, Tensor::full(output.shape(), 1.0));
}

/// Dense Jacobian (n_out x n_in) of a vector map at `point`; row i is the
/// backward pass seeded with e_i.
inline Eigen::MatrixXd jacobian(const std::function<Tensor(const Tensor&)>& f, const Tensor& point) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(point);
  Tensor y = f(x);
  if (!tape.owns(y)) throw std::invalid_argument("jacobian: output does not depend on the input");
  Eigen::MatrixXd J(static_cast<Eigen::Index>(y.size()), static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < y.size(); ++i) {
    std::vector<double> e(y.size(), 0.0);
    e[i] = 1.0;
    auto g = tape.backward(y, Tensor(y.shape(), std::move(e)))[x];
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (!std::isfinite(g[j])) throw NonFiniteError("jacobian: non-finite entry");
      J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[j];
    }
  }
  return J;
}

/// Per-row Jacobians of a row-independent map: `points` is [P, n_in], f returns
/// [P, n_out] where row p depends only on input row p. Returns P matrices.
inline std::vector<Eigen::MatrixXd> row_jacobians(const std::function<Tensor(const Tensor&)>& f,
                                                  const Tensor& points) {
  if (points.rank() != 2) throw ShapeError("row_jacobians expects [P, n_in]");
  Tape tape;
  TapeScope scope(tape);
  Tensor x = tape.leaf(points);
  Tensor y = f(x);
  if (y.rank() != 2 || y.dim(0) != x.dim(0)) throw ShapeError("row_jacobians: output must be [P, n_out]");
  std::size_t P = x.dim(0), nin = x.dim(1), nout = y.dim(1);
  std::vector<Eigen::MatrixXd> out(P, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nout),
                                                            static_cast<Eigen::Index>(nin)));
  for (std::size_t i = 0; i < nout; ++i) {
    std::vector<double> seed(P * nout, 0.0);
    for (std::size_t p = 0; p < P; ++p) seed[p * nout + i] = 1.0;
    auto g = tape.backward(y, Tensor(y.shape(), std::move(seed)))[x];
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t j = 0; j < nin; ++j) {
        double v = g[p * nin + j];
        if (!std::isfinite(v)) throw NonFiniteError("jacobian: non-finite entry");
        out[p](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      }
  }
  return out;
}

}  // namespace ad
}  // namespace tubedpc
