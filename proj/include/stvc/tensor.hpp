#pragma once

// Reverse-mode autodiff over dense tensors. Plain tape semantics: every op
// appends a node holding its output values and a closure that scatters the
// output gradient back to its parents. No fusion, no graph rewriting, and a
// fixed accumulation order, so runs are reproducible bit for bit.
//
// Scalar type is a template parameter: float is the working precision,
// double exists for verification (finite-difference checks run there).

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "stvc/common.hpp"

namespace stvc {

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> val;
  std::vector<T> grad;
  bool rg = false;                         // participates in backprop
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;     // empty for leaves

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), T(0));
  }
};

template <class T>
void check_finite(const std::vector<T>& v, const char* what) {
  if (!finite_checks()) return;
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C = A*B (optionally accumulating), row-major raw pointers.
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool acc) {
  Eigen::Map<const MatR<T>> a(A, m, k), b(B, k, n);
  Eigen::Map<MatR<T>> c(C, m, n);
  if (acc) c.noalias() += a * b; else c.noalias() = a * b;
}

// C = A*B^T with B given as [n x k].
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool acc) {
  Eigen::Map<const MatR<T>> a(A, m, k), b(B, n, k);
  Eigen::Map<MatR<T>> c(C, m, n);
  if (acc) c.noalias() += a * b.transpose(); else c.noalias() = a * b.transpose();
}

// C = A^T*B with A given as [k x m].
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int64_t m, int64_t k, int64_t n, bool acc) {
  Eigen::Map<const MatR<T>> a(A, k, m), b(B, k, n);
  Eigen::Map<MatR<T>> c(C, m, n);
  if (acc) c.noalias() += a.transpose() * b; else c.noalias() = a.transpose() * b;
}

}  // namespace detail

template <class T>
class Tensor {
 public:
  using NodeT = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<NodeT> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape s, bool requires_grad = false) {
    return filled(std::move(s), T(0), requires_grad);
  }
  static Tensor full(Shape s, T v, bool requires_grad = false) {
    return filled(std::move(s), v, requires_grad);
  }
  static Tensor from_vector(Shape s, std::vector<T> v, bool requires_grad = false) {
    contract((int64_t)v.size() == numel_of(s),
             "from_vector: " + std::to_string(v.size()) + " values for shape " + shape_str(s));
    auto n = std::make_shared<NodeT>();
    n->shape = std::move(s);
    n->val = std::move(v);
    n->rg = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor randn(Shape s, Rng& rng, double stdev = 1.0, bool requires_grad = false) {
    auto t = zeros(std::move(s), requires_grad);
    for (T& x : t.values()) x = (T)rng.normal(0.0, stdev);
    return t;
  }
  static Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi, bool requires_grad = false) {
    auto t = zeros(std::move(s), requires_grad);
    for (T& x : t.values()) x = (T)rng.uniform(lo, hi);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return (int)node_->shape.size(); }
  int64_t dim(int i) const { return node_->shape[i]; }
  int64_t numel() const { return (int64_t)node_->val.size(); }

  std::vector<T>& values() { return node_->val; }
  const std::vector<T>& values() const { return node_->val; }

  const std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }
  bool requires_grad() const { return node_->rg; }
  void set_requires_grad(bool rg) {
    contract(node_->leaf, "set_requires_grad: only leaf tensors");
    node_->rg = rg;
  }

  T item() const {
    contract(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return node_->val[0];
  }
  T at(std::initializer_list<int64_t> idx) const {
    contract((int)idx.size() == rank(), "at: rank mismatch");
    int64_t off = 0, i = 0;
    for (int64_t v : idx) {
      contract(v >= 0 && v < node_->shape[i], "at: index out of range");
      off = off * node_->shape[i] + v;
      ++i;
    }
    return node_->val[off];
  }

  // Copy of the values as a fresh leaf, cut off from the graph.
  Tensor detach(bool requires_grad = false) const {
    return from_vector(node_->shape, node_->val, requires_grad);
  }

  std::shared_ptr<NodeT> node() const { return node_; }

 private:
  static Tensor filled(Shape s, T v, bool rg) {
    auto n = std::make_shared<NodeT>();
    n->val.assign(numel_of(s), v);
    n->shape = std::move(s);
    n->rg = rg;
    return Tensor(std::move(n));
  }

  std::shared_ptr<NodeT> node_;
};

namespace detail {

template <class T>
std::shared_ptr<Node<T>> op_node(Shape shape, std::vector<Tensor<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->val.assign(numel_of(shape), T(0));
  n->shape = std::move(shape);
  n->leaf = false;
  for (auto& p : parents) {
    n->rg = n->rg || p.requires_grad();
    n->parents.push_back(p.node());
  }
  return n;
}

template <class T>
Tensor<T> finish(std::shared_ptr<Node<T>> n, const char* what) {
  check_finite(n->val, what);
  if (!n->rg) n->backprop = nullptr;  // constants never replay their tape entry
  return Tensor<T>(std::move(n));
}

// Right-aligned broadcast of b onto a: every trailing dim of b must equal a's
// or be 1. Returns per-dim strides of b laid out against a's dims.
template <class T>
std::vector<int64_t> broadcast_strides(const Shape& a, const Shape& b, const char* what) {
  contract(b.size() <= a.size(), std::string(what) + ": operand rank exceeds target " +
                                     shape_str(a) + " vs " + shape_str(b));
  std::vector<int64_t> strides(a.size(), 0);
  int64_t run = 1;
  for (int i = (int)b.size() - 1, ai = (int)a.size() - 1; i >= 0; --i, --ai) {
    contract(b[i] == a[ai] || b[i] == 1, std::string(what) + ": cannot broadcast " +
                                             shape_str(b) + " onto " + shape_str(a));
    strides[ai] = (b[i] == 1) ? 0 : run;
    run *= b[i];
  }
  return strides;
}

// Walks a's index space while tracking the matching flat index into b.
template <class T, class F>
void broadcast_loop(const Shape& a, const std::vector<int64_t>& bstrides, F&& body) {
  int64_t n = numel_of(a);
  int rank = (int)a.size();
  std::vector<int64_t> idx(rank, 0);
  int64_t bi = 0;
  for (int64_t i = 0; i < n; ++i) {
    body(i, bi);
    for (int d = rank - 1; d >= 0; --d) {
      bi += bstrides[d];
      if (++idx[d] < a[d]) break;
      bi -= bstrides[d] * a[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

// dfx(x, y) must return dy/dx given input and output values.
template <class T, class FF, class FB>
Tensor<T> unary_op(const Tensor<T>& a, const char* what, FF f, FB dfx) {
  auto n = detail::op_node<T>(a.shape(), {a});
  const auto& av = a.values();
  for (size_t i = 0; i < av.size(); ++i) n->val[i] = f(av[i]);
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap, dfx](detail::Node<T>& self) {
      if (!ap->rg) return;
      ap->ensure_grad();
      for (size_t i = 0; i < self.val.size(); ++i)
        ap->grad[i] += self.grad[i] * dfx(ap->val[i], self.val[i]);
    };
  }
  return detail::finish(std::move(n), what);
}

template <class T, class FF, class FA, class FB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* what, FF f, FA dfa, FB dfb) {
  auto bstr = detail::broadcast_strides<T>(a.shape(), b.shape(), what);
  auto n = detail::op_node<T>(a.shape(), {a, b});
  const auto& av = a.values();
  const auto& bv = b.values();
  detail::broadcast_loop<T>(a.shape(), bstr, [&](int64_t i, int64_t bi) {
    n->val[i] = f(av[i], bv[bi]);
  });
  if (n->rg) {
    auto ap = a.node(); auto bp = b.node();
    Shape ash = a.shape();
    n->backprop = [ap, bp, bstr, ash, dfa, dfb](detail::Node<T>& self) {
      if (ap->rg) ap->ensure_grad();
      if (bp->rg) bp->ensure_grad();
      detail::broadcast_loop<T>(ash, bstr, [&](int64_t i, int64_t bi) {
        if (ap->rg) ap->grad[i] += self.grad[i] * dfa(ap->val[i], bp->val[bi]);
        if (bp->rg) bp->grad[bi] += self.grad[i] * dfb(ap->val[i], bp->val[bi]);
      });
    };
  }
  return detail::finish(std::move(n), what);
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "add", [](T x, T y) { return x + y; },
                   [](T, T) { return T(1); }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "sub", [](T x, T y) { return x - y; },
                   [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "mul", [](T x, T y) { return x * y; },
                   [](T, T y) { return y; }, [](T x, T) { return x; });
}
template <class T>
Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, "div", [](T x, T y) { return x / y; },
                   [](T, T y) { return T(1) / y; },
                   [](T x, T y) { return -x / (y * y); });
}

template <class T> Tensor<T> add(const Tensor<T>& a, double s) {
  return unary_op(a, "add_scalar", [s](T x) { return x + (T)s; }, [](T, T) { return T(1); });
}
template <class T> Tensor<T> sub(const Tensor<T>& a, double s) { return add(a, -s); }
template <class T> Tensor<T> mul(const Tensor<T>& a, double s) {
  return unary_op(a, "mul_scalar", [s](T x) { return x * (T)s; }, [s](T, T) { return (T)s; });
}
template <class T> Tensor<T> neg(const Tensor<T>& a) { return mul(a, -1.0); }

template <class T> Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T> Tensor<T> log(const Tensor<T>& a) {
  return unary_op(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <class T> Tensor<T> softplus(const Tensor<T>& a) {
  // log(1+e^x), linearized for large x so it never overflows
  return unary_op(a, "softplus",
                  [](T x) { return x > T(30) ? x : (T)std::log1p(std::exp((double)x)); },
                  [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}
template <class T> Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(a, "sigmoid",
                  [](T x) {
                    return x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                                     : T(std::exp((double)x) / (1.0 + std::exp((double)x)));
                  },
                  [](T, T y) { return y * (T(1) - y); });
}
template <class T> Tensor<T> tanh(const Tensor<T>& a) {
  return unary_op(a, "tanh", [](T x) { return std::tanh(x); },
                  [](T, T y) { return T(1) - y * y; });
}
template <class T> Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
                  [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
template <class T> Tensor<T> clamp(const Tensor<T>& a, double lo, double hi) {
  contract(lo <= hi, "clamp: lo > hi");
  return unary_op(a, "clamp",
                  [lo, hi](T x) { return x < (T)lo ? (T)lo : (x > (T)hi ? (T)hi : x); },
                  [lo, hi](T x, T) { return (x >= (T)lo && x <= (T)hi) ? T(1) : T(0); });
}
// Round half away from zero. Gradient is zero almost everywhere, so this op
// deliberately blocks backprop; training paths use additive noise instead.
template <class T> Tensor<T> round_haz(const Tensor<T>& a) {
  return unary_op(a, "round", [](T x) { return (T)std::round((double)x); },
                  [](T, T) { return T(0); });
}

// ---- reductions ------------------------------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  auto n = detail::op_node<T>(Shape{}, {a});
  double acc = 0;  // accumulate wide, helps float stability at no design cost
  for (T x : a.values()) acc += (double)x;
  n->val[0] = (T)acc;
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap](detail::Node<T>& self) {
      ap->ensure_grad();
      for (T& g : ap->grad) g += self.grad[0];
    };
  }
  return detail::finish(std::move(n), "sum");
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  contract(a.numel() > 0, "mean of empty tensor");
  return mul(sum(a), 1.0 / (double)a.numel());
}

// sum over one axis, keeping it as size 1
template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int64_t axis) {
  contract(axis >= 0 && axis < a.rank(), "sum_axis: axis out of range");
  Shape s = a.shape();
  int64_t n = s[axis];
  s[axis] = 1;
  int64_t inner = 1, outer = 1;
  for (int64_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  for (int64_t i = 0; i < axis; ++i) outer *= a.dim(i);
  auto nd = detail::op_node<T>(s, {a});
  const T* src = a.values().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double acc = 0;
      for (int64_t k = 0; k < n; ++k) acc += (double)src[(o * n + k) * inner + i];
      nd->val[o * inner + i] = (T)acc;
    }
  if (nd->rg) {
    auto ap = a.node();
    nd->backprop = [ap, outer, inner, n](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          T g = self.grad[o * inner + i];
          for (int64_t k = 0; k < n; ++k) ap->grad[(o * n + k) * inner + i] += g;
        }
    };
  }
  return detail::finish(std::move(nd), "sum_axis");
}

// ---- shape ops -------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  contract(numel_of(s) == a.numel(),
           "reshape: " + shape_str(a.shape()) + " -> " + shape_str(s) + " changes element count");
  auto n = detail::op_node<T>(std::move(s), {a});
  n->val = a.values();
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap](detail::Node<T>& self) {
      ap->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) ap->grad[i] += self.grad[i];
    };
  }
  return detail::finish(std::move(n), "reshape");
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  contract(!parts.empty(), "concat: no inputs");
  Shape out = parts[0].shape();
  contract(axis >= 0 && axis < (int)out.size(), "concat: bad axis");
  int64_t axis_total = 0;
  for (auto& p : parts) {
    contract(p.rank() == (int)out.size(), "concat: rank mismatch");
    for (int d = 0; d < (int)out.size(); ++d)
      contract(d == axis || p.shape()[d] == out[d],
               "concat: shapes differ outside axis: " + shape_str(p.shape()));
    axis_total += p.shape()[axis];
  }
  out[axis] = axis_total;
  auto n = detail::op_node<T>(out, parts);

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out[d];
  for (int d = axis + 1; d < (int)out.size(); ++d) inner *= out[d];
  int64_t out_row = axis_total * inner;
  int64_t off = 0;
  for (auto& p : parts) {
    int64_t rows = p.shape()[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.values().data() + o * rows, rows, n->val.data() + o * out_row + off);
    off += rows;
  }
  if (n->rg) {
    std::vector<std::shared_ptr<detail::Node<T>>> ps;
    std::vector<int64_t> sizes;
    for (auto& p : parts) { ps.push_back(p.node()); sizes.push_back(p.shape()[axis] * inner); }
    n->backprop = [ps, sizes, outer, out_row](detail::Node<T>& self) {
      int64_t off = 0;
      for (size_t pi = 0; pi < ps.size(); ++pi) {
        if (ps[pi]->rg) {
          ps[pi]->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = self.grad.data() + o * out_row + off;
            T* dst = ps[pi]->grad.data() + o * sizes[pi];
            for (int64_t i = 0; i < sizes[pi]; ++i) dst[i] += src[i];
          }
        }
        off += sizes[pi];
      }
    };
  }
  return detail::finish(std::move(n), "concat");
}

template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, int axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t from, int64_t to) {
  contract(axis >= 0 && axis < a.rank(), "slice: bad axis");
  contract(from >= 0 && from < to && to <= a.shape()[axis], "slice: bad range");
  Shape out = a.shape();
  out[axis] = to - from;
  auto n = detail::op_node<T>(out, {a});

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out[d];
  for (int d = axis + 1; d < (int)out.size(); ++d) inner *= out[d];
  int64_t in_row = a.shape()[axis] * inner, out_rows = (to - from) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.values().data() + o * in_row + from * inner, out_rows,
                n->val.data() + o * out_rows);
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap, outer, inner, in_row, out_rows, from](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = self.grad.data() + o * out_rows;
        T* dst = ap->grad.data() + o * in_row + from * inner;
        for (int64_t i = 0; i < out_rows; ++i) dst[i] += src[i];
      }
    };
  }
  return detail::finish(std::move(n), "slice");
}

// ---- resampling ------------------------------------------------------------

template <class T>
Tensor<T> downsample2(const Tensor<T>& a) {
  contract(a.rank() == 4, "downsample2: expects [N,C,H,W]");
  int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  contract(H % 2 == 0 && W % 2 == 0, "downsample2: odd dims " + shape_str(a.shape()));
  auto n = detail::op_node<T>({N, C, H / 2, W / 2}, {a});
  const T* src = a.values().data();
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t y = 0; y < H / 2; ++y)
      for (int64_t x = 0; x < W / 2; ++x)
        n->val[(nc * (H / 2) + y) * (W / 2) + x] = src[(nc * H + 2 * y) * W + 2 * x];
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap, N, C, H, W](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < H / 2; ++y)
          for (int64_t x = 0; x < W / 2; ++x)
            ap->grad[(nc * H + 2 * y) * W + 2 * x] += self.grad[(nc * (H / 2) + y) * (W / 2) + x];
    };
  }
  return detail::finish(std::move(n), "downsample2");
}

template <class T>
Tensor<T> pad_replicate(const Tensor<T>& a, int64_t py, int64_t px) {
  contract(a.rank() == 4, "pad_replicate: expects [N,C,H,W]");
  contract(py >= 0 && px >= 0, "pad_replicate: negative pad");
  int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t Ho = H + 2 * py, Wo = W + 2 * px;
  auto n = detail::op_node<T>({N, C, Ho, Wo}, {a});
  const T* src = a.values().data();
  auto cl = [](int64_t v, int64_t hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t y = 0; y < Ho; ++y) {
      int64_t sy = cl(y - py, H);
      for (int64_t x = 0; x < Wo; ++x)
        n->val[(nc * Ho + y) * Wo + x] = src[(nc * H + sy) * W + cl(x - px, W)];
    }
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap, N, C, H, W, Ho, Wo, py, px, cl](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t y = 0; y < Ho; ++y) {
          int64_t sy = cl(y - py, H);
          for (int64_t x = 0; x < Wo; ++x)
            ap->grad[(nc * H + sy) * W + cl(x - px, W)] += self.grad[(nc * Ho + y) * Wo + x];
        }
    };
  }
  return detail::finish(std::move(n), "pad_replicate");
}

template <class T>
Tensor<T> upsample2_bilinear(const Tensor<T>& a) {
  contract(a.rank() == 4, "upsample2: expects [N,C,H,W]");
  int64_t N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  int64_t Ho = 2 * H, Wo = 2 * W;
  auto n = detail::op_node<T>({N, C, Ho, Wo}, {a});

  // taps depend only on the output coordinate; precompute one axis table
  struct Tap { int64_t i0, i1; T f; };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(out);
    for (int64_t o = 0; o < out; ++o) {
      double s = (o + 0.5) / 2.0 - 0.5;
      s = std::min(std::max(s, 0.0), (double)(in - 1));
      int64_t i0 = (int64_t)std::floor(s);
      int64_t i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, (T)(s - i0)};
    }
    return taps;
  };
  auto ty = make_taps(H, Ho), tx = make_taps(W, Wo);

  const T* src = a.values().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* plane = src + nc * H * W;
    T* out = n->val.data() + nc * Ho * Wo;
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t x = 0; x < Wo; ++x) {
        auto& a0 = ty[y]; auto& a1 = tx[x];
        T top = (T(1) - a1.f) * plane[a0.i0 * W + a1.i0] + a1.f * plane[a0.i0 * W + a1.i1];
        T bot = (T(1) - a1.f) * plane[a0.i1 * W + a1.i0] + a1.f * plane[a0.i1 * W + a1.i1];
        out[y * Wo + x] = (T(1) - a0.f) * top + a0.f * bot;
      }
  }
  if (n->rg) {
    auto ap = a.node();
    n->backprop = [ap, N, C, H, W, Ho, Wo, ty, tx](detail::Node<T>& self) {
      ap->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        T* g = ap->grad.data() + nc * H * W;
        const T* go = self.grad.data() + nc * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y)
          for (int64_t x = 0; x < Wo; ++x) {
            auto& a0 = ty[y]; auto& a1 = tx[x];
            T gv = go[y * Wo + x];
            g[a0.i0 * W + a1.i0] += (T(1) - a0.f) * (T(1) - a1.f) * gv;
            g[a0.i0 * W + a1.i1] += (T(1) - a0.f) * a1.f * gv;
            g[a0.i1 * W + a1.i0] += a0.f * (T(1) - a1.f) * gv;
            g[a0.i1 * W + a1.i1] += a0.f * a1.f * gv;
          }
      }
    };
  }
  return detail::finish(std::move(n), "upsample2");
}

// ---- gather ----------------------------------------------------------------

template <class T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<int64_t>& idx) {
  contract(table.rank() == 2, "embedding_rows: table must be [L,C]");
  int64_t L = table.dim(0), C = table.dim(1);
  for (int64_t i : idx) contract(i >= 0 && i < L, "embedding_rows: index out of range");
  auto n = detail::op_node<T>({(int64_t)idx.size(), C}, {table});
  for (size_t r = 0; r < idx.size(); ++r)
    std::copy_n(table.values().data() + idx[r] * C, C, n->val.data() + r * C);
  if (n->rg) {
    auto tp = table.node();
    n->backprop = [tp, idx, C](detail::Node<T>& self) {
      tp->ensure_grad();
      for (size_t r = 0; r < idx.size(); ++r)
        for (int64_t c = 0; c < C; ++c) tp->grad[idx[r] * C + c] += self.grad[r * C + c];
    };
  }
  return detail::finish(std::move(n), "embedding_rows");
}

// ---- convolution -----------------------------------------------------------

namespace detail {

// col is [C*kh*kw, gh*gw]; grid (gh,gw) is the conv output lattice.
template <class T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t gh, int64_t gw, T* col) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((c * kh + ky) * kw + kx) * gh * gw;
        for (int64_t oy = 0; oy < gh; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          T* dst = row + oy * gw;
          if (iy < 0 || iy >= H) {
            std::fill_n(dst, gw, T(0));
            continue;
          }
          const T* srow = x + (c * H + iy) * W;
          for (int64_t ox = 0; ox < gw; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            dst[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
          }
        }
      }
}

// scatter-add of a col matrix back onto an [C,H,W] image (adjoint of im2col)
template <class T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t gh, int64_t gw, T* x) {
  for (int64_t c = 0; c < C; ++c)
    for (int64_t ky = 0; ky < kh; ++ky)
      for (int64_t kx = 0; kx < kw; ++kx) {
        const T* row = col + ((c * kh + ky) * kw + kx) * gh * gw;
        for (int64_t oy = 0; oy < gh; ++oy) {
          int64_t iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          T* srow = x + (c * H + iy) * W;
          for (int64_t ox = 0; ox < gw; ++ox) {
            int64_t ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < W) srow[ix] += row[oy * gw + ox];
          }
        }
      }
}

template <class T>
std::vector<T>& scratch(size_t which, size_t n) {
  static thread_local std::vector<T> bufs[2];
  auto& b = bufs[which];
  if (b.size() < n) b.resize(n);
  return b;
}

}  // namespace detail

// x: [N,C,H,W] (*) w: [K,C,kh,kw], cross-correlation with symmetric zero pad.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad) {
  contract(x.rank() == 4 && w.rank() == 4, "conv2d: expects [N,C,H,W] and [K,C,kh,kw]");
  contract(x.dim(1) == w.dim(1), "conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                                     shape_str(w.shape()));
  contract(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int64_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  int64_t gh = (H + 2 * pad - kh) / stride + 1, gw = (W + 2 * pad - kw) / stride + 1;
  contract(H + 2 * pad >= kh && W + 2 * pad >= kw, "conv2d: kernel larger than padded input");

  auto n = detail::op_node<T>({N, K, gh, gw}, {x, w});
  int64_t ckk = C * kh * kw, g = gh * gw;
  auto& col = detail::scratch<T>(0, (size_t)(ckk * g));
  for (int64_t b = 0; b < N; ++b) {
    detail::im2col(x.values().data() + b * C * H * W, C, H, W, kh, kw, stride, pad, gh, gw,
                   col.data());
    detail::gemm_nn(w.values().data(), col.data(), n->val.data() + b * K * g, K, ckk, g, false);
  }
  if (n->rg) {
    auto xp = x.node(); auto wp = w.node();
    n->backprop = [xp, wp, N, C, H, W, K, kh, kw, stride, pad, gh, gw](detail::Node<T>& self) {
      int64_t ckk = C * kh * kw, g = gh * gw;
      auto& col = detail::scratch<T>(0, (size_t)(ckk * g));
      auto& dcol = detail::scratch<T>(1, (size_t)(ckk * g));
      if (xp->rg) xp->ensure_grad();
      if (wp->rg) wp->ensure_grad();
      for (int64_t b = 0; b < N; ++b) {
        const T* gy = self.grad.data() + b * K * g;
        if (wp->rg) {
          detail::im2col(xp->val.data() + b * C * H * W, C, H, W, kh, kw, stride, pad, gh, gw,
                         col.data());
          detail::gemm_nt(gy, col.data(), wp->grad.data(), K, g, ckk, true);
        }
        if (xp->rg) {
          detail::gemm_tn(wp->val.data(), gy, dcol.data(), ckk, K, g, false);
          detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, gh, gw,
                             xp->grad.data() + b * C * H * W);
        }
      }
    };
  }
  return detail::finish(std::move(n), "conv2d");
}

// x: [N,K,h,w] (*) w: [K,C,kh,kw] -> [N,C,(h-1)s-2p+kh+opad, ...], the
// gradient-adjoint of conv2d with the same weights.
template <class T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad,
                           int64_t out_pad = 0) {
  contract(x.rank() == 4 && w.rank() == 4, "conv2d_transpose: expects [N,K,h,w] and [K,C,kh,kw]");
  contract(x.dim(1) == w.dim(0), "conv2d_transpose: channel mismatch " + shape_str(x.shape()) +
                                     " vs " + shape_str(w.shape()));
  contract(stride >= 1 && pad >= 0, "conv2d_transpose: bad stride/pad");
  contract(out_pad >= 0 && out_pad < stride, "conv2d_transpose: need 0 <= out_pad < stride");
  int64_t N = x.dim(0), K = x.dim(1), h = x.dim(2), ww = x.dim(3);
  int64_t C = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  int64_t Ho = (h - 1) * stride - 2 * pad + kh + out_pad;
  int64_t Wo = (ww - 1) * stride - 2 * pad + kw + out_pad;
  contract(Ho >= 1 && Wo >= 1, "conv2d_transpose: empty output");

  auto n = detail::op_node<T>({N, C, Ho, Wo}, {x, w});
  int64_t ckk = C * kh * kw, g = h * ww;
  auto& col = detail::scratch<T>(0, (size_t)(ckk * g));
  for (int64_t b = 0; b < N; ++b) {
    detail::gemm_tn(w.values().data(), x.values().data() + b * K * g, col.data(), ckk, K, g,
                    false);
    T* out = n->val.data() + b * C * Ho * Wo;
    std::fill_n(out, C * Ho * Wo, T(0));
    detail::col2im_add(col.data(), C, Ho, Wo, kh, kw, stride, pad, h, ww, out);
  }
  if (n->rg) {
    auto xp = x.node(); auto wp = w.node();
    n->backprop = [xp, wp, N, K, h, ww, C, kh, kw, stride, pad, Ho, Wo](detail::Node<T>& self) {
      int64_t ckk = C * kh * kw, g = h * ww;
      auto& col = detail::scratch<T>(0, (size_t)(ckk * g));
      if (xp->rg) xp->ensure_grad();
      if (wp->rg) wp->ensure_grad();
      for (int64_t b = 0; b < N; ++b) {
        detail::im2col(self.grad.data() + b * C * Ho * Wo, C, Ho, Wo, kh, kw, stride, pad, h, ww,
                       col.data());
        if (xp->rg)
          detail::gemm_nn(wp->val.data(), col.data(), xp->grad.data() + b * K * g, K, ckk, g,
                          true);
        if (wp->rg)
          detail::gemm_nt(xp->val.data() + b * K * g, col.data(), wp->grad.data(), K, g, ckk,
                          true);
      }
    };
  }
  return detail::finish(std::move(n), "conv2d_transpose");
}

// ---- backward --------------------------------------------------------------

template <class T>
void backward(const Tensor<T>& loss) {
  contract(loss.numel() == 1, "backward: root must be scalar, got " + shape_str(loss.shape()));
  contract(loss.requires_grad(), "backward: root does not require grad");

  using NodeT = detail::Node<T>;
  // iterative post-order DFS; parents visited in construction order so the
  // replay order is a function of graph structure alone
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* p = node->parents[next++].get();
      if (p->rg && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* nd = *it;
    if (!nd->backprop) continue;
    nd->ensure_grad();
    detail::check_finite(nd->grad, "gradient");
    nd->backprop(*nd);
  }
}

}  // namespace stvc
