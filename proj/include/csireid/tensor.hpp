#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "csireid/errors.hpp"
#include "csireid/rng.hpp"

namespace csireid {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;
};

/// Shared handle to a node of the dynamically built computation graph.
/// Reverse-mode gradients flow from a scalar root back to every node with
/// requires_grad set.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value.assign(static_cast<std::size_t>(shape_numel(node->shape)), v);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), 0.0);
    return Tensor(std::move(node));
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("tensor data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), 0.0);
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& values_mut() { return node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  std::vector<double>& grad_mut() { return node_->grad; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return node_->value[0];
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Runs the reverse sweep from this scalar; gradients accumulate into
  /// every reachable requires_grad node.
  void backward() {
    if (numel() != 1)
      throw ShapeError("backward() requires a scalar root, got " + shape_str(shape()));
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child < node->parents.size()) {
        TensorNode* parent = node->parents[next_child].get();
        ++next_child;
        if (parent->requires_grad && !visited.count(parent)) {
          visited.insert(parent);
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    if (!node_->requires_grad) return;
    node_->grad.assign(1, 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);
  }

  std::shared_ptr<TensorNode> node() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

namespace ops {

inline Tensor make_result(Shape shape, std::vector<std::shared_ptr<TensorNode>> parents) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value.assign(static_cast<std::size_t>(shape_numel(node->shape)), 0.0);
  for (const auto& p : parents)
    if (p->requires_grad) node->requires_grad = true;
  if (node->requires_grad) node->grad.assign(node->value.size(), 0.0);
  node->parents = std::move(parents);
  return Tensor(std::move(node));
}

// --- dense kernels ------------------------------------------------------

// C(M,N) += A(M,K) * B(K,N)
inline void mm_nn(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
                  std::int64_t n) {
#pragma omp parallel for schedule(static) if (m > 4 && m * k * n > 16384)
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M,N) += A(M,K) * B(N,K)^T
inline void mm_nt(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
                  std::int64_t n) {
#pragma omp parallel for schedule(static) if (m > 4 && m * k * n > 16384)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C(K,N) += A(M,K)^T * B(M,N)
inline void mm_tn(double* c, const double* a, const double* b, std::int64_t m, std::int64_t k,
                  std::int64_t n) {
#pragma omp parallel for schedule(static) if (k > 4 && m * k * n > 16384)
  for (std::int64_t p = 0; p < k; ++p) {
    double* crow = c + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// --- elementwise with suffix broadcasting --------------------------------

inline void check_suffix_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size())
    throw ShapeError(std::string(op) + ": shape " + shape_str(b) + " does not broadcast into " +
                     shape_str(a));
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[b.size() - 1 - i] != a[a.size() - 1 - i])
      throw ShapeError(std::string(op) + ": shape " + shape_str(b) +
                       " is not a trailing suffix of " + shape_str(a));
  }
}

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_suffix_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, BwdA bwd_a,
                        BwdB bwd_b) {
  check_suffix_broadcast(a.shape(), b.shape(), name);
  Tensor out = make_result(a.shape(), {a.node(), b.node()});
  const auto bn = static_cast<std::size_t>(shape_numel(b.shape()));
  const auto an = static_cast<std::size_t>(shape_numel(a.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values_mut();
  for (std::size_t i = 0; i < an; ++i) ov[i] = fwd(av[i], bv[i % bn]);

  if (out.requires_grad()) {
    auto a_node = a.node();
    auto b_node = b.node();
    out.node()->backprop = [a_node, b_node, bn, fwd, bwd_a, bwd_b](TensorNode& self) {
      const auto n = self.value.size();
      if (a_node->requires_grad) {
        for (std::size_t i = 0; i < n; ++i)
          a_node->grad[i] += self.grad[i] * bwd_a(a_node->value[i], b_node->value[i % bn]);
      }
      if (b_node->requires_grad) {
        for (std::size_t i = 0; i < n; ++i)
          b_node->grad[i % bn] += self.grad[i] * bwd_b(a_node->value[i], b_node->value[i % bn]);
      }
    };
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_suffix_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_suffix_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_suffix_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

/// y = scale * x + shift
inline Tensor affine(const Tensor& x, double scale, double shift = 0.0) {
  Tensor out = make_result(x.shape(), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = scale * xv[i] + shift;
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, scale](TensorNode& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x_node->grad[i] += scale * self.grad[i];
    };
  }
  return out;
}

inline Tensor neg(const Tensor& x) { return affine(x, -1.0); }

template <typename Fwd, typename Deriv>
Tensor unary_op(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = make_result(x.shape(), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, deriv](TensorNode& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        x_node->grad[i] += self.grad[i] * deriv(x_node->value[i], self.value[i]);
    };
  }
  return out;
}

inline Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

inline Tensor exp_t(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log_t(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

// --- matmul --------------------------------------------------------------

/// (M,K)x(K,N), (B,M,K)x(K,N) or (B,M,K)x(B,K,N); the 2D right operand is
/// shared across the batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || (sb.size() != 2 && sb.size() != sa.size()))
    throw ShapeError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));

  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  const std::int64_t m = sa[sa.size() - 2];
  const std::int64_t k = sa[sa.size() - 1];

  bool shared_rhs = (sb.size() == 2);
  if (!shared_rhs) {
    for (std::size_t i = 0; i + 2 < sa.size(); ++i)
      if (sb[i] != sa[i]) throw ShapeError("matmul: batch dims differ, " + shape_str(sa) + " x " +
                                           shape_str(sb));
  }
  const std::int64_t kb = sb[sb.size() - 2];
  const std::int64_t n = sb[sb.size() - 1];
  if (kb != k)
    throw ShapeError("matmul: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  Tensor out = make_result(std::move(out_shape), {a.node(), b.node()});

  const double* av = a.values().data();
  const double* bv = b.values().data();
  double* ov = out.values_mut().data();
  for (std::int64_t s = 0; s < batch; ++s)
    mm_nn(ov + s * m * n, av + s * m * k, shared_rhs ? bv : bv + s * k * n, m, k, n);

  if (out.requires_grad()) {
    auto a_node = a.node();
    auto b_node = b.node();
    out.node()->backprop = [a_node, b_node, batch, m, k, n, shared_rhs](TensorNode& self) {
      const double* g = self.grad.data();
      const double* avv = a_node->value.data();
      const double* bvv = b_node->value.data();
      for (std::int64_t s = 0; s < batch; ++s) {
        const double* gs = g + s * m * n;
        const double* bs = shared_rhs ? bvv : bvv + s * k * n;
        if (a_node->requires_grad) mm_nt(a_node->grad.data() + s * m * k, gs, bs, m, n, k);
        if (b_node->requires_grad)
          mm_tn(shared_rhs ? b_node->grad.data() : b_node->grad.data() + s * k * n,
                avv + s * m * k, gs, m, k, n);
      }
    };
  }
  return out;
}

// --- layout ops ----------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  Tensor out = make_result(std::move(new_shape), {x.node()});
  out.values_mut() = x.values();
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node](TensorNode& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x_node->grad[i] += self.grad[i];
    };
  }
  return out;
}

inline Tensor transpose_last2(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("transpose_last2: rank < 2, " + shape_str(s));
  Shape out_shape = s;
  std::swap(out_shape[s.size() - 1], out_shape[s.size() - 2]);
  const std::int64_t r = s[s.size() - 2];
  const std::int64_t c = s[s.size() - 1];
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];

  Tensor out = make_result(std::move(out_shape), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* src = xv.data() + b * r * c;
    double* dst = ov.data() + b * r * c;
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, batch, r, c](TensorNode& self) {
      for (std::int64_t b = 0; b < batch; ++b) {
        const double* g = self.grad.data() + b * r * c;
        double* dst = x_node->grad.data() + b * r * c;
        for (std::int64_t i = 0; i < r; ++i)
          for (std::int64_t j = 0; j < c; ++j) dst[i * c + j] += g[j * r + i];
      }
    };
  }
  return out;
}

/// (B, T, d_model) -> (B*heads, T, d_model/heads)
inline Tensor split_heads(const Tensor& x, std::int64_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("split_heads: need rank 3, got " + shape_str(s));
  const std::int64_t b = s[0], t = s[1], d = s[2];
  if (d % heads != 0)
    throw ShapeError("split_heads: d_model " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads));
  const std::int64_t hd = d / heads;
  Tensor out = make_result({b * heads, t, hd}, {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t ti = 0; ti < t; ++ti) {
        const double* src = xv.data() + (bi * t + ti) * d + h * hd;
        double* dst = ov.data() + ((bi * heads + h) * t + ti) * hd;
        std::copy(src, src + hd, dst);
      }
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, b, t, d, heads, hd](TensorNode& self) {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t ti = 0; ti < t; ++ti) {
            const double* g = self.grad.data() + ((bi * heads + h) * t + ti) * hd;
            double* dst = x_node->grad.data() + (bi * t + ti) * d + h * hd;
            for (std::int64_t j = 0; j < hd; ++j) dst[j] += g[j];
          }
    };
  }
  return out;
}

/// (B*heads, T, head_dim) -> (B, T, heads*head_dim)
inline Tensor merge_heads(const Tensor& x, std::int64_t heads) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] % heads != 0)
    throw ShapeError("merge_heads: bad shape " + shape_str(s));
  const std::int64_t b = s[0] / heads, t = s[1], hd = s[2];
  const std::int64_t d = heads * hd;
  Tensor out = make_result({b, t, d}, {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t ti = 0; ti < t; ++ti) {
        const double* src = xv.data() + ((bi * heads + h) * t + ti) * hd;
        double* dst = ov.data() + (bi * t + ti) * d + h * hd;
        std::copy(src, src + hd, dst);
      }
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, b, t, d, heads, hd](TensorNode& self) {
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t ti = 0; ti < t; ++ti) {
            const double* g = self.grad.data() + (bi * t + ti) * d + h * hd;
            double* dst = x_node->grad.data() + ((bi * heads + h) * t + ti) * hd;
            for (std::int64_t j = 0; j < hd; ++j) dst[j] += g[j];
          }
    };
  }
  return out;
}

/// First `count` rows of a 2D tensor.
inline Tensor take_rows(const Tensor& x, std::int64_t count) {
  const Shape& s = x.shape();
  if (s.size() != 2 || count < 1 || count > s[0])
    throw ShapeError("take_rows: cannot take " + std::to_string(count) + " rows from " +
                     shape_str(s));
  const std::int64_t c = s[1];
  Tensor out = make_result({count, c}, {x.node()});
  std::copy(x.values().begin(), x.values().begin() + count * c, out.values_mut().begin());
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node](TensorNode& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) x_node->grad[i] += self.grad[i];
    };
  }
  return out;
}

/// Zero-extends the last dimension to new_size.
inline Tensor pad_lastdim(const Tensor& x, std::int64_t new_size) {
  const Shape& s = x.shape();
  const std::int64_t old_size = s.back();
  if (new_size < old_size)
    throw ShapeError("pad_lastdim: new size " + std::to_string(new_size) + " < " +
                     std::to_string(old_size));
  if (new_size == old_size) return x;
  Shape out_shape = s;
  out_shape.back() = new_size;
  const std::int64_t rows = x.numel() / old_size;
  Tensor out = make_result(std::move(out_shape), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t r = 0; r < rows; ++r)
    std::copy(xv.begin() + r * old_size, xv.begin() + (r + 1) * old_size,
              ov.begin() + r * new_size);
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, rows, old_size, new_size](TensorNode& self) {
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < old_size; ++j)
          x_node->grad[static_cast<std::size_t>(r * old_size + j)] +=
              self.grad[static_cast<std::size_t>(r * new_size + j)];
    };
  }
  return out;
}

/// Concatenates two rank-3 tensors along axis 1 (the token axis).
inline Tensor concat_tokens(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
    throw ShapeError("concat_tokens: incompatible shapes " + shape_str(sa) + " and " +
                     shape_str(sb));
  const std::int64_t batch = sa[0], ta = sa[1], tb = sb[1], d = sa[2];
  Tensor out = make_result({batch, ta + tb, d}, {a.node(), b.node()});
  const auto& avv = a.values();
  const auto& bvv = b.values();
  auto& ov = out.values_mut();
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    std::copy(avv.begin() + bi * ta * d, avv.begin() + (bi + 1) * ta * d,
              ov.begin() + bi * (ta + tb) * d);
    std::copy(bvv.begin() + bi * tb * d, bvv.begin() + (bi + 1) * tb * d,
              ov.begin() + bi * (ta + tb) * d + ta * d);
  }
  if (out.requires_grad()) {
    auto a_node = a.node();
    auto b_node = b.node();
    out.node()->backprop = [a_node, b_node, batch, ta, tb, d](TensorNode& self) {
      for (std::int64_t bi = 0; bi < batch; ++bi) {
        const double* g = self.grad.data() + bi * (ta + tb) * d;
        if (a_node->requires_grad) {
          double* ga = a_node->grad.data() + bi * ta * d;
          for (std::int64_t i = 0; i < ta * d; ++i) ga[i] += g[i];
        }
        if (b_node->requires_grad) {
          double* gb = b_node->grad.data() + bi * tb * d;
          for (std::int64_t i = 0; i < tb * d; ++i) gb[i] += g[ta * d + i];
        }
      }
    };
  }
  return out;
}

// --- reductions ----------------------------------------------------------

inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("sum_axis: axis out of range for " + shape_str(s));
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::int64_t span = s[axis];

  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);

  Tensor out = make_result(std::move(out_shape), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t a = 0; a < span; ++a) {
      const double* src = xv.data() + (o * span + a) * inner;
      double* dst = ov.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, outer, span, inner](TensorNode& self) {
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t a = 0; a < span; ++a) {
          double* dst = x_node->grad.data() + (o * span + a) * inner;
          const double* g = self.grad.data() + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
        }
    };
  }
  return out;
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return affine(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape()[axis]));
}

inline Tensor sum_all(const Tensor& x) {
  Tensor out = make_result({1}, {x.node()});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  out.values_mut()[0] = acc;
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node](TensorNode& self) {
      const double g = self.grad[0];
      for (auto& gv : x_node->grad) gv += g;
    };
  }
  return out;
}

inline Tensor reduce_mean(const Tensor& x) {
  return affine(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// --- normalization and masking --------------------------------------------

inline Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  const std::int64_t span = s.back();
  const std::int64_t rows = x.numel() / span;
  Tensor out = make_result(s, {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * span;
    double* dst = ov.data() + r * span;
    double mx = src[0];
    for (std::int64_t i = 1; i < span; ++i) mx = std::max(mx, src[i]);
    double denom = 0.0;
    for (std::int64_t i = 0; i < span; ++i) {
      dst[i] = std::exp(src[i] - mx);
      denom += dst[i];
    }
    for (std::int64_t i = 0; i < span; ++i) dst[i] /= denom;
  }
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, rows, span](TensorNode& self) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * span;
        const double* g = self.grad.data() + r * span;
        double dot = 0.0;
        for (std::int64_t i = 0; i < span; ++i) dot += y[i] * g[i];
        double* dst = x_node->grad.data() + r * span;
        for (std::int64_t i = 0; i < span; ++i) dst[i] += y[i] * (g[i] - dot);
      }
    };
  }
  return out;
}

/// Layer normalization over the last dimension with learnable gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const Shape& s = x.shape();
  const std::int64_t span = s.back();
  if (gain.numel() != span || bias.numel() != span)
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(span) + " elements");
  const std::int64_t rows = x.numel() / span;

  Tensor out = make_result(s, {x.node(), gain.node(), bias.node()});
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  auto means = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));

  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  auto& ov = out.values_mut();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * span;
    double mean = 0.0;
    for (std::int64_t i = 0; i < span; ++i) mean += src[i];
    mean /= static_cast<double>(span);
    double var = 0.0;
    for (std::int64_t i = 0; i < span; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(span);
    const double is = 1.0 / std::sqrt(var + eps);
    (*means)[static_cast<std::size_t>(r)] = mean;
    (*inv_std)[static_cast<std::size_t>(r)] = is;
    double* dst = ov.data() + r * span;
    for (std::int64_t i = 0; i < span; ++i) dst[i] = gv[i] * (src[i] - mean) * is + bv[i];
  }

  if (out.requires_grad()) {
    auto x_node = x.node();
    auto g_node = gain.node();
    auto b_node = bias.node();
    out.node()->backprop = [x_node, g_node, b_node, rows, span, inv_std, means](TensorNode& self) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* xrow = x_node->value.data() + r * span;
        const double* grow = self.grad.data() + r * span;
        const double mean = (*means)[static_cast<std::size_t>(r)];
        const double is = (*inv_std)[static_cast<std::size_t>(r)];
        double sum_gxhat = 0.0, sum_g = 0.0;
        for (std::int64_t i = 0; i < span; ++i) {
          const double xhat = (xrow[i] - mean) * is;
          const double gy = grow[i] * g_node->value[i];
          sum_gxhat += gy * xhat;
          sum_g += gy;
          if (g_node->requires_grad) g_node->grad[i] += grow[i] * xhat;
          if (b_node->requires_grad) b_node->grad[i] += grow[i];
        }
        if (x_node->requires_grad) {
          double* dst = x_node->grad.data() + r * span;
          const double inv_n = 1.0 / static_cast<double>(span);
          for (std::int64_t i = 0; i < span; ++i) {
            const double xhat = (xrow[i] - mean) * is;
            const double gy = grow[i] * g_node->value[i];
            dst[i] += is * (gy - inv_n * sum_g - xhat * inv_n * sum_gxhat);
          }
        }
      }
    };
  }
  return out;
}

/// Replaces entries where mask != 0 with fill_value; gradient is blocked
/// at filled entries. The mask is plain data, broadcast as a suffix.
inline Tensor masked_fill(const Tensor& x, const std::vector<double>& mask, double fill_value) {
  const auto n = x.values().size();
  if (mask.empty() || n % mask.size() != 0)
    throw ShapeError("masked_fill: mask size " + std::to_string(mask.size()) +
                     " does not divide tensor size " + std::to_string(n));
  Tensor out = make_result(x.shape(), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  const auto mn = mask.size();
  for (std::size_t i = 0; i < n; ++i) ov[i] = mask[i % mn] != 0.0 ? fill_value : xv[i];
  if (out.requires_grad()) {
    auto x_node = x.node();
    auto mask_copy = std::make_shared<std::vector<double>>(mask);
    out.node()->backprop = [x_node, mask_copy](TensorNode& self) {
      const auto mn2 = mask_copy->size();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if ((*mask_copy)[i % mn2] == 0.0) x_node->grad[i] += self.grad[i];
    };
  }
  return out;
}

/// Sets attention scores at padded key positions to -inf so softmax gives
/// them exactly zero weight. scores: (B*heads, Tq, Tk), mask: (B, Tk).
inline Tensor apply_key_padding_mask(const Tensor& scores, const std::vector<double>& mask,
                                     std::int64_t batch, std::int64_t heads) {
  const Shape& s = scores.shape();
  if (s.size() != 3 || s[0] != batch * heads)
    throw ShapeError("apply_key_padding_mask: scores " + shape_str(s) + " vs batch*heads " +
                     std::to_string(batch * heads));
  const std::int64_t tq = s[1], tk = s[2];
  if (static_cast<std::int64_t>(mask.size()) != batch * tk)
    throw ShapeError("apply_key_padding_mask: mask has " + std::to_string(mask.size()) +
                     " entries, want " + std::to_string(batch * tk));
  for (std::int64_t b = 0; b < batch; ++b) {
    bool any_valid = false;
    for (std::int64_t t = 0; t < tk; ++t)
      if (mask[static_cast<std::size_t>(b * tk + t)] != 0.0) any_valid = true;
    if (!any_valid)
      throw DegenerateMaskError("attention row " + std::to_string(b) + " is fully masked");
  }

  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  Tensor out = make_result(s, {scores.node()});
  const auto& xv = scores.values();
  auto& ov = out.values_mut();
  for (std::int64_t bh = 0; bh < batch * heads; ++bh) {
    const std::int64_t b = bh / heads;
    for (std::int64_t q = 0; q < tq; ++q) {
      const double* src = xv.data() + (bh * tq + q) * tk;
      double* dst = ov.data() + (bh * tq + q) * tk;
      for (std::int64_t t = 0; t < tk; ++t)
        dst[t] = mask[static_cast<std::size_t>(b * tk + t)] != 0.0 ? src[t] : neg_inf;
    }
  }
  if (out.requires_grad()) {
    auto x_node = scores.node();
    auto mask_copy = std::make_shared<std::vector<double>>(mask);
    out.node()->backprop = [x_node, mask_copy, batch, heads, tq, tk](TensorNode& self) {
      for (std::int64_t bh = 0; bh < batch * heads; ++bh) {
        const std::int64_t b = bh / heads;
        for (std::int64_t q = 0; q < tq; ++q) {
          const double* g = self.grad.data() + (bh * tq + q) * tk;
          double* dst = x_node->grad.data() + (bh * tq + q) * tk;
          for (std::int64_t t = 0; t < tk; ++t)
            if ((*mask_copy)[static_cast<std::size_t>(b * tk + t)] != 0.0) dst[t] += g[t];
        }
      }
    };
  }
  return out;
}

/// Mean over valid time positions: x (B, T, d), mask (B, T) -> (B, d).
inline Tensor masked_mean_time(const Tensor& x, const std::vector<double>& mask) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("masked_mean_time: need rank 3, got " + shape_str(s));
  const std::int64_t b = s[0], t = s[1], d = s[2];
  if (static_cast<std::int64_t>(mask.size()) != b * t)
    throw ShapeError("masked_mean_time: mask size mismatch");

  auto counts = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b), 0.0);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ti = 0; ti < t; ++ti)
      (*counts)[static_cast<std::size_t>(bi)] += mask[static_cast<std::size_t>(bi * t + ti)];
    if ((*counts)[static_cast<std::size_t>(bi)] == 0.0)
      throw DegenerateMaskError("masked_mean_time: batch row " + std::to_string(bi) +
                                " has no valid positions");
  }

  Tensor out = make_result({b, d}, {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t bi = 0; bi < b; ++bi) {
    double* dst = ov.data() + bi * d;
    for (std::int64_t ti = 0; ti < t; ++ti) {
      if (mask[static_cast<std::size_t>(bi * t + ti)] == 0.0) continue;
      const double* src = xv.data() + (bi * t + ti) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    for (std::int64_t j = 0; j < d; ++j) dst[j] /= (*counts)[static_cast<std::size_t>(bi)];
  }
  if (out.requires_grad()) {
    auto x_node = x.node();
    auto mask_copy = std::make_shared<std::vector<double>>(mask);
    out.node()->backprop = [x_node, mask_copy, counts, b, t, d](TensorNode& self) {
      for (std::int64_t bi = 0; bi < b; ++bi) {
        const double inv = 1.0 / (*counts)[static_cast<std::size_t>(bi)];
        const double* g = self.grad.data() + bi * d;
        for (std::int64_t ti = 0; ti < t; ++ti) {
          if ((*mask_copy)[static_cast<std::size_t>(bi * t + ti)] == 0.0) continue;
          double* dst = x_node->grad.data() + (bi * t + ti) * d;
          for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j] * inv;
        }
      }
    };
  }
  return out;
}

/// x (B, S, d) + v (B, d) broadcast over the middle axis.
inline Tensor add_broadcast_rows(const Tensor& x, const Tensor& v) {
  const Shape& s = x.shape();
  const Shape& sv = v.shape();
  if (s.size() != 3 || sv.size() != 2 || sv[0] != s[0] || sv[1] != s[2])
    throw ShapeError("add_broadcast_rows: " + shape_str(s) + " + " + shape_str(sv));
  const std::int64_t b = s[0], t = s[1], d = s[2];
  Tensor out = make_result(s, {x.node(), v.node()});
  const auto& xv = x.values();
  const auto& vv = v.values();
  auto& ov = out.values_mut();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t ti = 0; ti < t; ++ti) {
      const double* src = xv.data() + (bi * t + ti) * d;
      const double* add_row = vv.data() + bi * d;
      double* dst = ov.data() + (bi * t + ti) * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] = src[j] + add_row[j];
    }
  if (out.requires_grad()) {
    auto x_node = x.node();
    auto v_node = v.node();
    out.node()->backprop = [x_node, v_node, b, t, d](TensorNode& self) {
      if (x_node->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) x_node->grad[i] += self.grad[i];
      if (v_node->requires_grad)
        for (std::int64_t bi = 0; bi < b; ++bi)
          for (std::int64_t ti = 0; ti < t; ++ti) {
            const double* g = self.grad.data() + (bi * t + ti) * d;
            double* dst = v_node->grad.data() + bi * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += g[j];
          }
    };
  }
  return out;
}

/// Rows scaled to unit L2 norm over the last dimension.
inline Tensor l2_normalize(const Tensor& x) {
  const Shape& s = x.shape();
  const std::int64_t span = s.back();
  const std::int64_t rows = x.numel() / span;
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));

  Tensor out = make_result(s, {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* src = xv.data() + r * span;
    double nsq = 0.0;
    for (std::int64_t i = 0; i < span; ++i) nsq += src[i] * src[i];
    const double norm = std::sqrt(nsq);
    if (norm < 1e-30)
      throw NormalizationError("l2_normalize: row " + std::to_string(r) + " has zero norm");
    (*norms)[static_cast<std::size_t>(r)] = norm;
    double* dst = ov.data() + r * span;
    for (std::int64_t i = 0; i < span; ++i) dst[i] = src[i] / norm;
  }
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, norms, rows, span](TensorNode& self) {
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = self.value.data() + r * span;
        const double* g = self.grad.data() + r * span;
        const double inv = 1.0 / (*norms)[static_cast<std::size_t>(r)];
        double dot = 0.0;
        for (std::int64_t i = 0; i < span; ++i) dot += y[i] * g[i];
        double* dst = x_node->grad.data() + r * span;
        for (std::int64_t i = 0; i < span; ++i) dst[i] += inv * (g[i] - y[i] * dot);
      }
    };
  }
  return out;
}

/// Inverted dropout; identity in eval mode or at rate zero.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(x.values().size());
  for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Tensor out = make_result(x.shape(), {x.node()});
  const auto& xv = x.values();
  auto& ov = out.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] * (*mask)[i];
  if (out.requires_grad()) {
    auto x_node = x.node();
    out.node()->backprop = [x_node, mask](TensorNode& self) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        x_node->grad[i] += self.grad[i] * (*mask)[i];
    };
  }
  return out;
}

/// Numerically stabilized mean softmax cross-entropy over rows.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw ShapeError("cross_entropy: logits must be 2D, got " + shape_str(s));
  const std::int64_t b = s[0], c = s[1];
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw ShapeError("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= c) throw ConfigError("cross_entropy: label out of range");

  Tensor out = make_result({1}, {logits.node()});
  const auto& xv = logits.values();
  double loss = 0.0;
  for (std::int64_t r = 0; r < b; ++r) {
    const double* row = xv.data() + r * c;
    double mx = row[0];
    for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
    double lse = 0.0;
    for (std::int64_t i = 0; i < c; ++i) lse += std::exp(row[i] - mx);
    lse = mx + std::log(lse);
    loss += lse - row[labels[static_cast<std::size_t>(r)]];
  }
  out.values_mut()[0] = loss / static_cast<double>(b);

  if (out.requires_grad()) {
    auto x_node = logits.node();
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    out.node()->backprop = [x_node, labels_copy, b, c](TensorNode& self) {
      const double g = self.grad[0] / static_cast<double>(b);
      for (std::int64_t r = 0; r < b; ++r) {
        const double* row = x_node->value.data() + r * c;
        double* dst = x_node->grad.data() + r * c;
        double mx = row[0];
        for (std::int64_t i = 1; i < c; ++i) mx = std::max(mx, row[i]);
        double denom = 0.0;
        for (std::int64_t i = 0; i < c; ++i) denom += std::exp(row[i] - mx);
        for (std::int64_t i = 0; i < c; ++i) {
          const double p = std::exp(row[i] - mx) / denom;
          dst[i] += g * (p - (i == (*labels_copy)[static_cast<std::size_t>(r)] ? 1.0 : 0.0));
        }
      }
    };
  }
  return out;
}

}  // namespace ops

}  // namespace csireid
