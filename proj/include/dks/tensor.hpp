#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dks/common.hpp"

namespace dks {

template <typename T>
class Tape;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // lazily allocated, always data.size() once present
  bool requires_grad = false;
  int64_t node = -1;        // index into the recording tape, -1 for leaves
  uint64_t tape_id = 0;     // which tape `node` refers to

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor with reverse-mode autodiff. Copies are shallow:
/// two Tensor handles may share one buffer. Gradients accumulate additively
/// across backward calls until zero_grad().
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    for (int64_t d : shape)
      if (d <= 0) throw ConfigError("tensor: non-positive dim in shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), fill);
    impl_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ConfigError("tensor: data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
  int64_t dim(size_t i) const { return impl_->shape.at(i); }
  size_t ndim() const { return impl_->shape.size(); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct mutable access; used by optimizers and loaders, never recorded.
  std::span<T> data_mut() { return impl_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  std::span<const T> grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  std::span<T> grad_mut() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
struct TapeNode {
  std::shared_ptr<TensorImpl<T>> output;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads output->grad, accumulates into each input's grad.
  std::function<void()> backward;
};

/// Scoped recording context. Constructing a Tape makes it the active one for
/// this thread; ops append nodes in execution order, so node index order is
/// already a topological order and backward() can walk it in reverse.
template <typename T>
class Tape {
 public:
  Tape() : prev_(active_), id_(next_id_++) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  uint64_t id() const { return id_; }
  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  const TapeNode<T>& node(int64_t i) const { return nodes_[i]; }

  int64_t append(TapeNode<T> n) {
    nodes_.push_back(std::move(n));
    return static_cast<int64_t>(nodes_.size()) - 1;
  }

 private:
  std::vector<TapeNode<T>> nodes_;
  Tape* prev_;
  uint64_t id_;
  static inline thread_local Tape* active_ = nullptr;
  static inline std::atomic<uint64_t> next_id_{1};
};

namespace detail {

template <typename T>
bool tracked(const Tensor<T>& t) {
  return t.requires_grad();
}

/// Appends a node if recording is active and any input participates in the
/// graph. The closure must read out->grad and accumulate into input grads.
template <typename T>
void record(Tensor<T>& out, std::vector<Tensor<T>> inputs, std::function<void()> bw) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return;
  bool any = false;
  for (const auto& in : inputs) any = any || tracked(in);
  if (!any) return;
  TapeNode<T> node;
  node.output = out.impl();
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.impl());
  node.backward = std::move(bw);
  out.impl()->node = tape->append(std::move(node));
  out.impl()->tape_id = tape->id();
  out.impl()->requires_grad = true;
}

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

/// C[m,n] = A[m,k] * B[k,n] (row-major, optionally accumulating into C).
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  ECMap<T> A(a, m, k), B(b, k, n);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

/// C[m,n] = A^T[m,k] * B[k,n] where A is stored [k,m].
template <typename T>
void gemm_ta(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  ECMap<T> A(a, k, m), B(b, k, n);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

/// C[m,n] = A[m,k] * B^T[k,n] where B is stored [n,k].
template <typename T>
void gemm_tb(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  ECMap<T> A(a, m, k), B(b, n, k);
  EMap<T> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

}  // namespace detail

/// Drives reverse-mode differentiation from a scalar loss. Seeds d(loss)/d(loss)=1
/// and walks the active tape backwards, visiting only nodes that can reach the
/// loss. Grads accumulate; call zero_grad between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw UsageError("backward: expected scalar loss, got shape " + shape_str(loss.shape()));
  auto impl = loss.impl();
  if (impl->node < 0) {
    if (impl->requires_grad) {
      impl->ensure_grad();
      impl->grad[0] += T(1);
      return;
    }
    throw UsageError("backward: loss does not participate in any recorded graph");
  }
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw UsageError("backward: no active recording scope");
  if (impl->tape_id != tape->id())
    throw UsageError("backward: loss was recorded on a different tape");

  impl->ensure_grad();
  impl->grad[0] += T(1);

  std::unordered_set<const TensorImpl<T>*> reached;
  reached.insert(impl.get());
  for (int64_t i = impl->node; i >= 0; --i) {
    const TapeNode<T>& nd = tape->node(i);
    if (!reached.count(nd.output.get())) continue;
    nd.output->ensure_grad();
    nd.backward();
    for (const auto& in : nd.inputs)
      if (in->requires_grad) reached.insert(in.get());
  }
}

// ---- elementwise ops -------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record(out, {a, b}, [ai, bi, oi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record(out, {a, b}, [ai, bi, oi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record(out, {a, b}, [ai, bi, oi] {
    const auto& g = oi->grad;
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * c;
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi, c] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * c;
  });
  return out;
}

/// max(x, 0); the subgradient at exactly 0 is taken to be 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i)
      if (ai->data[i] > T(0)) ai->grad[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::tanh(pa[i]);
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i) {
      T y = oi->data[i];
      ai->grad[i] += g[i] * (T(1) - y * y);
    }
  });
  return out;
}

/// log(max(x, floor)). Where the clamp is active the derivative is 0, which
/// keeps losses finite when a probability underflows.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& a, T floor = T(1e-12)) {
  if (!(floor > T(0))) throw ConfigError("log_clamped: floor must be positive");
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = std::log(pa[i] > floor ? pa[i] : floor);
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi, floor] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i)
      if (ai->data[i] > floor) ai->grad[i] += g[i] / ai->data[i];
  });
  return out;
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    T g = oi->grad[0];
    for (auto& v : ai->grad) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.data()) s += v;
  T inv = T(1) / static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(s * inv);
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi, inv] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    T g = oi->grad[0] * inv;
    for (auto& v : ai->grad) v += g;
  });
  return out;
}

// ---- softmax ---------------------------------------------------------------

/// Row softmax over the last axis of a [N,K] tensor, with per-row max
/// subtraction so magnitudes up to ~1e4 stay finite.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  if (a.ndim() != 2)
    throw ConfigError("softmax: expected [N,K] input, got " + shape_str(a.shape()));
  int64_t n = a.dim(0), k = a.dim(1);
  Tensor<T> out(a.shape());
  const T* pa = a.data().data();
  T* po = out.data_mut().data();
  for (int64_t r = 0; r < n; ++r) {
    const T* row = pa + r * k;
    T* orow = po + r * k;
    T mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int64_t j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    T inv = T(1) / s;
    for (int64_t j = 0; j < k; ++j) orow[j] *= inv;
  }
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi, n, k] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    for (int64_t r = 0; r < n; ++r) {
      const T* p = oi->data.data() + r * k;
      const T* g = oi->grad.data() + r * k;
      T* dx = ai->grad.data() + r * k;
      T dot = T(0);
      for (int64_t j = 0; j < k; ++j) dot += g[j] * p[j];
      for (int64_t j = 0; j < k; ++j) dx[j] += p[j] * (g[j] - dot);
    }
  });
  return out;
}

// ---- shape ops -------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ConfigError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(shape), {a.data().begin(), a.data().end()});
  auto ai = a.impl(), oi = out.impl();
  detail::record(out, {a}, [ai, oi] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
  });
  return out;
}

/// [N,C,H,W] -> [N, C*H*W]
template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  if (a.ndim() < 2) throw ConfigError("flatten: need at least 2 dims, got " + shape_str(a.shape()));
  return reshape(a, {a.dim(0), a.numel() / a.dim(0)});
}

/// Severs the graph: same values, no recorded lineage, requires_grad=false.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
  return Tensor<T>::from_data(a.shape(), {a.data().begin(), a.data().end()});
}

// ---- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ConfigError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  detail::gemm(a.data().data(), b.data().data(), out.data_mut().data(), m, k, n, false);
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record(out, {a, b}, [ai, bi, oi, m, k, n] {
    const T* g = oi->grad.data();
    if (ai->requires_grad) {
      ai->ensure_grad();
      // dA += G * B^T
      detail::gemm_tb(g, bi->data.data(), ai->grad.data(), m, n, k, true);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      // dB += A^T * G
      detail::gemm_ta(ai->data.data(), g, bi->grad.data(), k, m, n, true);
    }
  });
  return out;
}

/// x:[N,F] w:[O,F] b:[O] -> [N,O]; y = x w^T + b.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
    throw ConfigError("linear: incompatible shapes x=" + shape_str(x.shape()) +
                      " w=" + shape_str(w.shape()));
  if (b.ndim() != 1 || b.dim(0) != w.dim(0))
    throw ConfigError("linear: bias shape " + shape_str(b.shape()) + " does not match out features " +
                      std::to_string(w.dim(0)));
  int64_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  Tensor<T> out({n, o});
  detail::gemm_tb(x.data().data(), w.data().data(), out.data_mut().data(), n, f, o, false);
  T* po = out.data_mut().data();
  const T* pb = b.data().data();
  for (int64_t r = 0; r < n; ++r)
    for (int64_t j = 0; j < o; ++j) po[r * o + j] += pb[j];
  auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
  detail::record(out, {x, w, b}, [xi, wi, bi, oi, n, f, o] {
    const T* g = oi->grad.data();
    if (xi->requires_grad) {
      xi->ensure_grad();
      // dX += G * W
      detail::gemm(g, wi->data.data(), xi->grad.data(), n, o, f, true);
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      // dW += G^T * X
      detail::gemm_ta(g, xi->data.data(), wi->grad.data(), o, n, f, true);
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int64_t r = 0; r < n; ++r)
        for (int64_t j = 0; j < o; ++j) bi->grad[j] += g[r * o + j];
    }
  });
  return out;
}

// ---- convolution -----------------------------------------------------------

namespace detail {

struct ConvDims {
  int64_t n, cin, h, w, cout, kh, kw, stride, pad, oh, ow;
};

template <typename T>
inline ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad) {
  if (x.ndim() != 4) throw ConfigError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.ndim() != 4)
    throw ConfigError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1))
    throw ConfigError("conv2d: input channels " + std::to_string(x.dim(1)) +
                      " != weight channels " + std::to_string(w.dim(1)));
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: padding must be >= 0");
  ConvDims d;
  d.n = x.dim(0); d.cin = x.dim(1); d.h = x.dim(2); d.w = x.dim(3);
  d.cout = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
  d.stride = stride; d.pad = pad;
  if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw ConfigError("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                      " does not fit padded input " + shape_str(x.shape()) + " with padding " +
                      std::to_string(pad));
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  return d;
}

/// Unfolds x[N,C,H,W] into cols[(N*oh*ow) x (C*kh*kw)] so the convolution is a
/// single GEMM against the [Cout x C*kh*kw] weight matrix.
template <typename T>
void im2col(const T* x, const ConvDims& d, T* cols) {
  const int64_t krow = d.cin * d.kh * d.kw;
  for (int64_t nidx = 0; nidx < d.n; ++nidx) {
    const T* xn = x + nidx * d.cin * d.h * d.w;
    for (int64_t oy = 0; oy < d.oh; ++oy) {
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        T* row = cols + ((nidx * d.oh + oy) * d.ow + ox) * krow;
        int64_t idx = 0;
        for (int64_t c = 0; c < d.cin; ++c) {
          const T* xc = xn + c * d.h * d.w;
          for (int64_t ky = 0; ky < d.kh; ++ky) {
            int64_t iy = oy * d.stride - d.pad + ky;
            for (int64_t kx = 0; kx < d.kw; ++kx, ++idx) {
              int64_t ix = ox * d.stride - d.pad + kx;
              row[idx] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) ? xc[iy * d.w + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

/// Scatters column gradients back onto the (padded) input layout.
template <typename T>
void col2im_accum(const T* cols, const ConvDims& d, T* dx) {
  const int64_t krow = d.cin * d.kh * d.kw;
  for (int64_t nidx = 0; nidx < d.n; ++nidx) {
    T* xn = dx + nidx * d.cin * d.h * d.w;
    for (int64_t oy = 0; oy < d.oh; ++oy) {
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        const T* row = cols + ((nidx * d.oh + oy) * d.ow + ox) * krow;
        int64_t idx = 0;
        for (int64_t c = 0; c < d.cin; ++c) {
          T* xc = xn + c * d.h * d.w;
          for (int64_t ky = 0; ky < d.kh; ++ky) {
            int64_t iy = oy * d.stride - d.pad + ky;
            for (int64_t kx = 0; kx < d.kw; ++kx, ++idx) {
              int64_t ix = ox * d.stride - d.pad + kx;
              if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) xc[iy * d.w + ix] += row[idx];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution, NCHW. Forward and both backward passes all reduce to the
/// same im2col buffer plus one GEMM each.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 const std::optional<Tensor<T>>& bias, int64_t stride, int64_t padding) {
  detail::ConvDims d = detail::conv_dims(x, w, stride, padding);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != d.cout))
    throw ConfigError("conv2d: bias shape " + shape_str(bias->shape()) +
                      " does not match out channels " + std::to_string(d.cout));

  const int64_t krow = d.cin * d.kh * d.kw;
  const int64_t rows = d.n * d.oh * d.ow;
  auto cols = std::make_shared<std::vector<T>>(rows * krow);
  detail::im2col(x.data().data(), d, cols->data());

  // out[n,co,oy,ox]: compute as [rows x cout] then transpose into NCHW.
  std::vector<T> tmp(rows * d.cout);
  detail::gemm_tb(cols->data(), w.data().data(), tmp.data(), rows, krow, d.cout, false);

  Tensor<T> out({d.n, d.cout, d.oh, d.ow});
  T* po = out.data_mut().data();
  const int64_t plane = d.oh * d.ow;
  for (int64_t nidx = 0; nidx < d.n; ++nidx)
    for (int64_t p = 0; p < plane; ++p) {
      const T* src = tmp.data() + (nidx * plane + p) * d.cout;
      for (int64_t co = 0; co < d.cout; ++co) po[(nidx * d.cout + co) * plane + p] = src[co];
    }
  if (bias) {
    const T* pb = bias->data().data();
    for (int64_t nidx = 0; nidx < d.n; ++nidx)
      for (int64_t co = 0; co < d.cout; ++co) {
        T bv = pb[co];
        T* dst = po + (nidx * d.cout + co) * plane;
        for (int64_t p = 0; p < plane; ++p) dst[p] += bv;
      }
  }

  std::vector<Tensor<T>> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  auto xi = x.impl(), wi = w.impl(), oi = out.impl();
  auto bimpl = bias ? bias->impl() : nullptr;
  detail::record(out, inputs, [xi, wi, bimpl, oi, d, cols, rows, krow, plane] {
    // regroup grad from NCHW into [rows x cout]
    std::vector<T> gt(rows * d.cout);
    const T* g = oi->grad.data();
    for (int64_t nidx = 0; nidx < d.n; ++nidx)
      for (int64_t co = 0; co < d.cout; ++co) {
        const T* src = g + (nidx * d.cout + co) * plane;
        for (int64_t p = 0; p < plane; ++p) gt[(nidx * plane + p) * d.cout + co] = src[p];
      }
    if (wi->requires_grad) {
      wi->ensure_grad();
      // dW[cout x krow] += G^T[cout x rows] * cols[rows x krow]
      detail::gemm_ta(gt.data(), cols->data(), wi->grad.data(), d.cout, rows, krow, true);
    }
    if (xi->requires_grad) {
      xi->ensure_grad();
      // dcols[rows x krow] = G[rows x cout] * W[cout x krow]
      std::vector<T> dcols(rows * krow);
      detail::gemm(gt.data(), wi->data.data(), dcols.data(), rows, d.cout, krow, false);
      detail::col2im_accum(dcols.data(), d, xi->grad.data());
    }
    if (bimpl && bimpl->requires_grad) {
      bimpl->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t co = 0; co < d.cout; ++co) bimpl->grad[co] += gt[r * d.cout + co];
    }
  });
  return out;
}

// ---- pooling ---------------------------------------------------------------

/// [N,C,H,W] -> [N,C]; mean over the spatial plane.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.ndim() != 4) throw ConfigError("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
  int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  T inv = T(1) / static_cast<T>(plane);
  for (int64_t i = 0; i < n * c; ++i) {
    T s = T(0);
    const T* src = px + i * plane;
    for (int64_t p = 0; p < plane; ++p) s += src[p];
    po[i] = s * inv;
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record(out, {x}, [xi, oi, n, c, plane, inv] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t i = 0; i < n * c; ++i) {
      T g = oi->grad[i] * inv;
      T* dst = xi->grad.data() + i * plane;
      for (int64_t p = 0; p < plane; ++p) dst[p] += g;
    }
  });
  return out;
}

/// Non-overlapping-friendly max pool; ties select the first (row-major) index.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int64_t k, int64_t stride) {
  if (x.ndim() != 4) throw ConfigError("max_pool2d: expected [N,C,H,W], got " + shape_str(x.shape()));
  if (k < 1 || stride < 1) throw ConfigError("max_pool2d: kernel and stride must be >= 1");
  int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < k || w < k) throw ConfigError("max_pool2d: window does not fit input " + shape_str(x.shape()));
  int64_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
  Tensor<T> out({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int64_t>>(n * c * oh * ow);
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < n * c; ++i) {
    const T* plane = px + i * h * w;
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        int64_t best = (oy * stride) * w + ox * stride;
        T bv = plane[best];
        for (int64_t ky = 0; ky < k; ++ky)
          for (int64_t kx = 0; kx < k; ++kx) {
            int64_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (plane[idx] > bv) { bv = plane[idx]; best = idx; }
          }
        int64_t o = (i * oh + oy) * ow + ox;
        po[o] = bv;
        (*argmax)[o] = i * h * w + best;
      }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record(out, {x}, [xi, oi, argmax] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i) xi->grad[(*argmax)[i]] += g[i];
  });
  return out;
}

// ---- batch norm ------------------------------------------------------------

/// Per-channel batch normalization over [N,C,H,W].
/// Training mode normalizes with biased batch statistics and updates the
/// running buffers in place: running <- (1-momentum)*running + momentum*batch.
/// Eval mode normalizes with the running buffers and records no stat update.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       std::span<T> running_mean, std::span<T> running_var, bool training,
                       T momentum = T(0.1), T eps = T(1e-5)) {
  if (x.ndim() != 4) throw ConfigError("batch_norm2d: expected [N,C,H,W], got " + shape_str(x.shape()));
  int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != c || beta.numel() != c ||
      static_cast<int64_t>(running_mean.size()) != c || static_cast<int64_t>(running_var.size()) != c)
    throw ConfigError("batch_norm2d: parameter size mismatch for C=" + std::to_string(c));
  int64_t m = n * plane;  // samples per channel
  if (training && m < 2)
    throw ConfigError("batch_norm2d: training mode needs at least 2 values per channel");

  Tensor<T> out(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();

  std::vector<T> mean_v(c), inv_std_v(c);
  if (training) {
    for (int64_t ch = 0; ch < c; ++ch) {
      T s = T(0);
      for (int64_t i = 0; i < n; ++i) {
        const T* src = px + (i * c + ch) * plane;
        for (int64_t p = 0; p < plane; ++p) s += src[p];
      }
      T mu = s / static_cast<T>(m);
      T var = T(0);
      for (int64_t i = 0; i < n; ++i) {
        const T* src = px + (i * c + ch) * plane;
        for (int64_t p = 0; p < plane; ++p) {
          T dlt = src[p] - mu;
          var += dlt * dlt;
        }
      }
      var /= static_cast<T>(m);  // biased
      mean_v[ch] = mu;
      inv_std_v[ch] = T(1) / std::sqrt(var + eps);
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * var;
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mean_v[ch] = running_mean[ch];
      inv_std_v[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }

  // xhat saved for backward
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = px + (i * c + ch) * plane;
      T* xh = xhat->data() + (i * c + ch) * plane;
      T* dst = po + (i * c + ch) * plane;
      T mu = mean_v[ch], is = inv_std_v[ch], gm = pg[ch], bt = pb[ch];
      for (int64_t p = 0; p < plane; ++p) {
        xh[p] = (src[p] - mu) * is;
        dst[p] = gm * xh[p] + bt;
      }
    }

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  auto inv_std = std::make_shared<std::vector<T>>(std::move(inv_std_v));
  detail::record(out, {x, gamma, beta}, [xi, gi, bi, oi, xhat, inv_std, n, c, plane, m, training] {
    const T* g = oi->grad.data();
    if (gi->requires_grad) {
      gi->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* gr = g + (i * c + ch) * plane;
          const T* xh = xhat->data() + (i * c + ch) * plane;
          T s = T(0);
          for (int64_t p = 0; p < plane; ++p) s += gr[p] * xh[p];
          gi->grad[ch] += s;
        }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* gr = g + (i * c + ch) * plane;
          T s = T(0);
          for (int64_t p = 0; p < plane; ++p) s += gr[p];
          bi->grad[ch] += s;
        }
    }
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    if (training) {
      // full backward through the batch statistics
      for (int64_t ch = 0; ch < c; ++ch) {
        T gm = gi->data[ch], is = (*inv_std)[ch];
        T sum_g = T(0), sum_gx = T(0);
        for (int64_t i = 0; i < n; ++i) {
          const T* gr = g + (i * c + ch) * plane;
          const T* xh = xhat->data() + (i * c + ch) * plane;
          for (int64_t p = 0; p < plane; ++p) {
            sum_g += gr[p];
            sum_gx += gr[p] * xh[p];
          }
        }
        T inv_m = T(1) / static_cast<T>(m);
        for (int64_t i = 0; i < n; ++i) {
          const T* gr = g + (i * c + ch) * plane;
          const T* xh = xhat->data() + (i * c + ch) * plane;
          T* dx = xi->grad.data() + (i * c + ch) * plane;
          for (int64_t p = 0; p < plane; ++p)
            dx[p] += gm * is * (gr[p] - inv_m * sum_g - xh[p] * inv_m * sum_gx);
        }
      }
    } else {
      for (int64_t ch = 0; ch < c; ++ch) {
        T coef = gi->data[ch] * (*inv_std)[ch];
        for (int64_t i = 0; i < n; ++i) {
          const T* gr = g + (i * c + ch) * plane;
          T* dx = xi->grad.data() + (i * c + ch) * plane;
          for (int64_t p = 0; p < plane; ++p) dx[p] += coef * gr[p];
        }
      }
    }
  });
  return out;
}

// ---- dropout ---------------------------------------------------------------

/// Inverted dropout: each kept element is scaled by 1/(1-p) so the expected
/// value is unchanged. Identity in eval mode or at p=0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
  if (!training || p == 0.0) {
    Tensor<T> out = Tensor<T>::from_data(x.shape(), {x.data().begin(), x.data().end()});
    auto xi = x.impl(), oi = out.impl();
    detail::record(out, {x}, [xi, oi] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const auto& g = oi->grad;
      for (size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i];
    });
    return out;
  }
  Tensor<T> out(x.shape());
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  T keep_scale = T(1.0 / (1.0 - p));
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  for (int64_t i = 0; i < x.numel(); ++i) {
    T mv = u(rng) < p ? T(0) : keep_scale;
    (*mask)[i] = mv;
    po[i] = px[i] * mv;
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record(out, {x}, [xi, oi, mask] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const auto& g = oi->grad;
    for (size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i] * (*mask)[i];
  });
  return out;
}

}  // namespace dks
