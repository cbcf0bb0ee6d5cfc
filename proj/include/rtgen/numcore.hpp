#pragma once

// Dense differentiable arrays on top of Eigen.
//
// A DiffArray is a handle to a node of a dynamically recorded computation
// graph. Values are stored as row-major Eigen matrices whose column count is
// the last dimension of the logical shape; every leading dimension is folded
// into the rows. Ops are free functions; calling backward() on a scalar walks
// the recorded graph in reverse topological order.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace rtgen {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Allowed-entry mask for softmax; true means the entry takes part.
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Matrix<T>& grad_buffer() {
    if (grad.size() == 0) grad = Matrix<T>::Zero(value.rows(), value.cols());
    return grad;
  }
};

inline Index trailing_cols(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// All entries of `m` viewed as one row.
template <typename T>
Eigen::Map<const RowVector<T>> as_row(const Matrix<T>& m) {
  return Eigen::Map<const RowVector<T>>(m.data(), m.size());
}

template <typename T>
Eigen::Map<RowVector<T>> as_row(Matrix<T>& m) {
  return Eigen::Map<RowVector<T>>(m.data(), m.size());
}

}  // namespace detail

template <typename T>
class DiffArray {
 public:
  using Scalar = T;
  using NodeType = detail::Node<T>;

  DiffArray() = default;

  /// Wraps `value` as a graph leaf. An empty `shape` means {rows, cols}.
  static DiffArray constant(Matrix<T> value, Shape shape = {}) {
    return leaf(std::move(value), std::move(shape), false);
  }
  static DiffArray parameter(Matrix<T> value, Shape shape = {}) {
    return leaf(std::move(value), std::move(shape), true);
  }
  static DiffArray scalar(T v, bool requires_grad = false) {
    Matrix<T> m(1, 1);
    m(0, 0) = v;
    DiffArray out = leaf(std::move(m), Shape{1}, requires_grad);
    out.node_->shape = {};
    return out;
  }

  /// Records the result of an op. Parents and the backward closure are kept
  /// only when some parent needs a gradient.
  static DiffArray from_op(Matrix<T> value, Shape shape, std::vector<DiffArray> parents,
                           std::function<void(NodeType&)> backward) {
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
    if (node->requires_grad) {
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_);
      node->backward = std::move(backward);
    }
    return DiffArray(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index dim(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }

  const Matrix<T>& value() const { return node_->value; }
  /// Direct write access; intended for optimizers and checkpoint loading.
  Matrix<T>& mutable_value() { return node_->value; }
  T item() const {
    if (size() != 1) throw UsageError("item() on non-scalar array " + shape_string(shape()));
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Matrix<T>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool same_node(const DiffArray& other) const { return node_ == other.node_; }
  NodeType& node() const { return *node_; }

 private:
  explicit DiffArray(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static DiffArray leaf(Matrix<T> value, Shape shape, bool requires_grad) {
    if (shape.empty()) shape = {value.rows(), value.cols()};
    if (shape_size(shape) != value.size() || detail::trailing_cols(shape) != value.cols()) {
      throw DimensionError("value of " + std::to_string(value.rows()) + "x" +
                           std::to_string(value.cols()) + " does not fit shape " + shape_string(shape));
    }
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return DiffArray(std::move(node));
  }

  std::shared_ptr<NodeType> node_;
};

namespace detail {

template <typename T>
void require_same_shape(const DiffArray<T>& a, const DiffArray<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename T, typename Fn>
void accumulate(Node<T>& parent, Fn&& grad) {
  if (parent.requires_grad) parent.grad_buffer().noalias() += grad();
}

template <typename T>
Node<T>& parent(Node<T>& self, std::size_t i) {
  return *self.parents[i];
}

inline bool mask_allows(const Mask* mask, Index row, Index col) {
  return mask == nullptr || (*mask)(row % mask->rows(), col);
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are recomputed.
template <typename T>
void backward(const DiffArray<T>& loss) {
  if (loss.size() != 1) throw UsageError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  using NodeT = detail::Node<T>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack{{&loss.node(), 0}};
  visited.insert(&loss.node());
  while (!stack.empty()) {
    NodeT* node = stack.back().first;
    std::size_t next = stack.back().second;
    if (next < node->parents.size()) {
      ++stack.back().second;
      NodeT* p = node->parents[next].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (NodeT* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
  loss.node().grad_buffer()(0, 0) += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
DiffArray<T> matmul(const DiffArray<T>& a, const DiffArray<T>& b) {
  if (b.rank() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Shape shape = a.shape();
  shape.back() = b.cols();
  Matrix<T> out = a.value() * b.value();
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {a, b}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    detail::accumulate(pa, [&] { return self.grad * pb.value.transpose(); });
    detail::accumulate(pb, [&] { return pa.value.transpose() * self.grad; });
  });
}

/// y = xW + b with b broadcast over rows.
template <typename T>
DiffArray<T> linear(const DiffArray<T>& x, const DiffArray<T>& w, const DiffArray<T>& b) {
  if (w.rank() != 2 || x.cols() != w.rows() || b.size() != w.cols()) {
    throw DimensionError("linear: x " + shape_string(x.shape()) + ", W " + shape_string(w.shape()) +
                         ", b " + shape_string(b.shape()));
  }
  Shape shape = x.shape();
  shape.back() = w.cols();
  Matrix<T> out = x.value() * w.value();
  out.rowwise() += detail::as_row(b.value());
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {x, w, b}, [](detail::Node<T>& self) {
    auto& px = detail::parent(self, 0);
    auto& pw = detail::parent(self, 1);
    auto& pb = detail::parent(self, 2);
    detail::accumulate(px, [&] { return self.grad * pw.value.transpose(); });
    detail::accumulate(pw, [&] { return px.value.transpose() * self.grad; });
    if (pb.requires_grad) {
      detail::as_row(pb.grad_buffer()) += self.grad.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
DiffArray<T> add(const DiffArray<T>& a, const DiffArray<T>& b) {
  detail::require_same_shape(a, b, "add");
  return DiffArray<T>::from_op(a.value() + b.value(), a.shape(), {a, b}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] { return self.grad; });
    detail::accumulate(detail::parent(self, 1), [&] { return self.grad; });
  });
}

template <typename T>
DiffArray<T> sub(const DiffArray<T>& a, const DiffArray<T>& b) {
  detail::require_same_shape(a, b, "sub");
  return DiffArray<T>::from_op(a.value() - b.value(), a.shape(), {a, b}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] { return self.grad; });
    detail::accumulate(detail::parent(self, 1), [&] { return -self.grad; });
  });
}

template <typename T>
DiffArray<T> mul(const DiffArray<T>& a, const DiffArray<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a, b}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    detail::accumulate(pa, [&] { return self.grad.cwiseProduct(pb.value); });
    detail::accumulate(pb, [&] { return self.grad.cwiseProduct(pa.value); });
  });
}

template <typename T>
DiffArray<T> div(const DiffArray<T>& a, const DiffArray<T>& b) {
  detail::require_same_shape(a, b, "div");
  Matrix<T> out = a.value().cwiseQuotient(b.value());
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a, b}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    detail::accumulate(pa, [&] { return self.grad.cwiseQuotient(pb.value); });
    detail::accumulate(pb, [&] {
      return Matrix<T>(-self.grad.cwiseProduct(self.value).cwiseQuotient(pb.value));
    });
  });
}

template <typename T>
DiffArray<T> scale(const DiffArray<T>& a, T factor) {
  return DiffArray<T>::from_op(a.value() * factor, a.shape(), {a}, [factor](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] { return self.grad * factor; });
  });
}

template <typename T>
DiffArray<T> add_scalar(const DiffArray<T>& a, T offset) {
  Matrix<T> out = a.value().array() + offset;
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] { return self.grad; });
  });
}

template <typename T>
DiffArray<T> relu(const DiffArray<T>& a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    detail::accumulate(pa, [&] {
      return Matrix<T>((pa.value.array() > T(0)).select(self.grad.array(), T(0)));
    });
  });
}

template <typename T>
DiffArray<T> sigmoid(const DiffArray<T>& a) {
  Matrix<T> out = a.value().unaryExpr([](T v) { return T(1) / (T(1) + std::exp(-v)); });
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] {
      return Matrix<T>(self.grad.array() * self.value.array() * (T(1) - self.value.array()));
    });
  });
}

template <typename T>
DiffArray<T> exp(const DiffArray<T>& a) {
  Matrix<T> out = a.value().array().exp();
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] { return self.grad.cwiseProduct(self.value); });
  });
}

template <typename T>
DiffArray<T> log(const DiffArray<T>& a) {
  Matrix<T> out = a.value().array().log();
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    detail::accumulate(pa, [&] { return self.grad.cwiseQuotient(pa.value); });
  });
}

template <typename T>
DiffArray<T> abs(const DiffArray<T>& a) {
  Matrix<T> out = a.value().cwiseAbs();
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    detail::accumulate(pa, [&] {
      return Matrix<T>(self.grad.array() * pa.value.array().sign());
    });
  });
}

namespace detail {

template <typename T, bool TakeMax>
DiffArray<T> select_extreme(const DiffArray<T>& a, const DiffArray<T>& b) {
  require_same_shape(a, b, TakeMax ? "maximum" : "minimum");
  // Ties route the gradient to `a`.
  Mask from_a = TakeMax ? Mask(a.value().array() >= b.value().array())
                        : Mask(a.value().array() <= b.value().array());
  Matrix<T> out = from_a.select(a.value(), b.value());
  return DiffArray<T>::from_op(std::move(out), a.shape(), {a, b}, [from_a](Node<T>& self) {
    accumulate(parent(self, 0), [&] { return Matrix<T>(from_a.select(self.grad, T(0))); });
    accumulate(parent(self, 1), [&] { return Matrix<T>(from_a.select(T(0), self.grad)); });
  });
}

}  // namespace detail

template <typename T>
DiffArray<T> minimum(const DiffArray<T>& a, const DiffArray<T>& b) {
  return detail::select_extreme<T, false>(a, b);
}

template <typename T>
DiffArray<T> maximum(const DiffArray<T>& a, const DiffArray<T>& b) {
  return detail::select_extreme<T, true>(a, b);
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
DiffArray<T> sum(const DiffArray<T>& a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return DiffArray<T>::from_op(std::move(out), Shape{}, {a}, [](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    if (pa.requires_grad) pa.grad_buffer().array() += self.grad(0, 0);
  });
}

template <typename T>
DiffArray<T> mean(const DiffArray<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

/// Sum of elementwise products with a constant weight array. Entries with
/// weight zero are skipped, so they may hold infinities.
template <typename T>
DiffArray<T> weighted_sum(const DiffArray<T>& a, const Matrix<T>& weights) {
  if (weights.rows() != a.rows() || weights.cols() != a.cols()) {
    throw DimensionError("weighted_sum: weights do not match " + shape_string(a.shape()));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = (weights.array() == T(0)).select(T(0), a.value().array() * weights.array()).sum();
  return DiffArray<T>::from_op(std::move(out), Shape{}, {a}, [weights](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] { return Matrix<T>(weights * self.grad(0, 0)); });
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis. Entries the mask disallows are exactly 0; a
/// row with no allowed entry is all zeros. Mask rows repeat when the mask has
/// fewer rows than the input.
template <typename T>
DiffArray<T> softmax(const DiffArray<T>& x, const Mask* mask = nullptr) {
  if (mask && mask->cols() != x.cols()) throw DimensionError("softmax: mask width mismatch");
  Matrix<T> out = Matrix<T>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    T hi = -std::numeric_limits<T>::infinity();
    for (Index c = 0; c < x.cols(); ++c) {
      if (detail::mask_allows(mask, r, c)) hi = std::max(hi, x.value()(r, c));
    }
    if (hi == -std::numeric_limits<T>::infinity()) continue;
    T total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      if (detail::mask_allows(mask, r, c)) total += out(r, c) = std::exp(x.value()(r, c) - hi);
    }
    out.row(r) /= total;
  }
  return DiffArray<T>::from_op(std::move(out), x.shape(), {x}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] {
      Matrix<T> g = self.grad.cwiseProduct(self.value);
      Eigen::Matrix<T, Eigen::Dynamic, 1> dots = g.rowwise().sum();
      return Matrix<T>(g - self.value.cwiseProduct(dots.replicate(1, self.value.cols())));
    });
  });
}

/// Log-softmax over the last axis; disallowed entries are -inf and receive
/// no gradient.
template <typename T>
DiffArray<T> log_softmax(const DiffArray<T>& x, const Mask* mask = nullptr) {
  if (mask && mask->cols() != x.cols()) throw DimensionError("log_softmax: mask width mismatch");
  constexpr T kNegInf = -std::numeric_limits<T>::infinity();
  Matrix<T> out = Matrix<T>::Constant(x.rows(), x.cols(), kNegInf);
  for (Index r = 0; r < x.rows(); ++r) {
    T hi = kNegInf;
    for (Index c = 0; c < x.cols(); ++c) {
      if (detail::mask_allows(mask, r, c)) hi = std::max(hi, x.value()(r, c));
    }
    if (hi == kNegInf) continue;
    T total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      if (detail::mask_allows(mask, r, c)) total += std::exp(x.value()(r, c) - hi);
    }
    const T log_norm = hi + std::log(total);
    for (Index c = 0; c < x.cols(); ++c) {
      if (detail::mask_allows(mask, r, c)) out(r, c) = x.value()(r, c) - log_norm;
    }
  }
  return DiffArray<T>::from_op(std::move(out), x.shape(), {x}, [](detail::Node<T>& self) {
    detail::accumulate(detail::parent(self, 0), [&] {
      const Index rows = self.value.rows();
      const Index cols = self.value.cols();
      Matrix<T> g = Matrix<T>::Zero(rows, cols);
      for (Index r = 0; r < rows; ++r) {
        T upstream = 0;
        for (Index c = 0; c < cols; ++c) {
          if (std::isfinite(self.value(r, c))) upstream += self.grad(r, c);
        }
        for (Index c = 0; c < cols; ++c) {
          if (std::isfinite(self.value(r, c))) {
            g(r, c) = self.grad(r, c) - std::exp(self.value(r, c)) * upstream;
          }
        }
      }
      return g;
    });
  });
}

/// Per-row normalization over the last axis followed by an affine map.
template <typename T>
DiffArray<T> layer_norm(const DiffArray<T>& x, const DiffArray<T>& gamma, const DiffArray<T>& beta,
                        T eps = T(1e-5)) {
  const Index d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: affine size mismatch");
  Matrix<T> centered = x.value().colwise() - x.value().rowwise().mean();
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<T>(d)) + eps).rsqrt();
  Matrix<T> normed = centered.array().colwise() * inv_std.array();
  Matrix<T> out = (normed.array().rowwise() * detail::as_row(gamma.value()).array()).rowwise() +
                  detail::as_row(beta.value()).array();
  return DiffArray<T>::from_op(
      std::move(out), x.shape(), {x, gamma, beta},
      [normed = std::move(normed), inv_std = std::move(inv_std), d](detail::Node<T>& self) {
        auto& px = detail::parent(self, 0);
        auto& pg = detail::parent(self, 1);
        auto& pb = detail::parent(self, 2);
        if (pg.requires_grad) {
          detail::as_row(pg.grad_buffer()) += self.grad.cwiseProduct(normed).colwise().sum();
        }
        if (pb.requires_grad) detail::as_row(pb.grad_buffer()) += self.grad.colwise().sum();
        detail::accumulate(px, [&] {
          Matrix<T> dn = self.grad.array().rowwise() * detail::as_row(pg.value).array();
          Eigen::Matrix<T, Eigen::Dynamic, 1> mean_dn = dn.rowwise().mean();
          Eigen::Matrix<T, Eigen::Dynamic, 1> mean_dn_n = dn.cwiseProduct(normed).rowwise().mean();
          Matrix<T> g = dn.colwise() - mean_dn;
          g -= normed.cwiseProduct(mean_dn_n.replicate(1, d));
          return Matrix<T>(g.array().colwise() * inv_std.array());
        });
      });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
DiffArray<T> reshape(const DiffArray<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  const Index cols = detail::trailing_cols(shape);
  Matrix<T> out = x.value().template reshaped<Eigen::RowMajor>(x.size() / cols, cols);
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {x}, [](detail::Node<T>& self) {
    auto& px = detail::parent(self, 0);
    detail::accumulate(px, [&] {
      return Matrix<T>(self.grad.template reshaped<Eigen::RowMajor>(px.value.rows(), px.value.cols()));
    });
  });
}

/// Rows of the 2-D view picked by `indices` (repeats allowed). Output rank 2.
template <typename T>
DiffArray<T> gather_rows(const DiffArray<T>& x, std::vector<Index> indices) {
  Matrix<T> out(static_cast<Index>(indices.size()), x.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.value().row(indices[i]);
  }
  Shape shape{out.rows(), out.cols()};
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {x},
                               [indices = std::move(indices)](detail::Node<T>& self) {
                                 auto& px = detail::parent(self, 0);
                                 if (!px.requires_grad) return;
                                 auto& g = px.grad_buffer();
                                 for (std::size_t i = 0; i < indices.size(); ++i) {
                                   g.row(indices[i]) += self.grad.row(static_cast<Index>(i));
                                 }
                               });
}

template <typename T>
DiffArray<T> slice_rows(const DiffArray<T>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw DimensionError("slice_rows: out of range");
  Matrix<T> out = x.value().middleRows(begin, count);
  Shape shape{count, x.cols()};
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {x}, [begin, count](detail::Node<T>& self) {
    auto& px = detail::parent(self, 0);
    if (px.requires_grad) px.grad_buffer().middleRows(begin, count) += self.grad;
  });
}

template <typename T>
DiffArray<T> slice_cols(const DiffArray<T>& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) throw DimensionError("slice_cols: out of range");
  Matrix<T> out = x.value().middleCols(begin, count);
  Shape shape = x.shape();
  shape.back() = count;
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {x}, [begin, count](detail::Node<T>& self) {
    auto& px = detail::parent(self, 0);
    if (px.requires_grad) px.grad_buffer().middleCols(begin, count) += self.grad;
  });
}

template <typename T>
DiffArray<T> concat_rows(const DiffArray<T>& a, const DiffArray<T>& b) {
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: width mismatch");
  Matrix<T> out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  Shape shape{out.rows(), out.cols()};
  const Index split = a.rows();
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {a, b}, [split](detail::Node<T>& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (pa.requires_grad) pa.grad_buffer() += self.grad.topRows(split);
    if (pb.requires_grad) pb.grad_buffer() += self.grad.bottomRows(self.grad.rows() - split);
  });
}

template <typename T>
DiffArray<T> concat_cols(const std::vector<DiffArray<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
  const Index rows = parts.front().rows();
  Index cols = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch");
    offsets.push_back(cols);
    cols += p.cols();
  }
  Matrix<T> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  Shape shape = parts.front().shape();
  shape.back() = cols;
  return DiffArray<T>::from_op(std::move(out), std::move(shape), parts,
                               [offsets = std::move(offsets)](detail::Node<T>& self) {
                                 for (std::size_t i = 0; i < offsets.size(); ++i) {
                                   auto& p = detail::parent(self, i);
                                   if (p.requires_grad) p.grad_buffer() += self.grad.middleCols(offsets[i], p.value.cols());
                                 }
                               });
}

// ---------------------------------------------------------------------------
// Attention kernels

/// Multi-head scaled dot-product attention over `batches` independent
/// sequences. q is [batches*Lq, d]; k and v are [batches*Lk, d]. Heads split
/// the feature axis into contiguous d/heads blocks. An optional Lq x Lk mask
/// is shared by every batch and head.
template <typename T>
DiffArray<T> scaled_dot_attention(const DiffArray<T>& q, const DiffArray<T>& k, const DiffArray<T>& v,
                                  Index batches, Index heads, const Mask* mask = nullptr) {
  const Index d = q.cols();
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || batches <= 0 || q.rows() % batches != 0 ||
      k.rows() % batches != 0) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()) + ", v " +
                         shape_string(v.shape()));
  }
  const Index lq = q.rows() / batches;
  const Index lk = k.rows() / batches;
  if (mask && (mask->rows() != lq || mask->cols() != lk)) throw DimensionError("attention: mask must be Lq x Lk");
  const Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  std::vector<Matrix<T>> probs(static_cast<std::size_t>(batches * heads));
  Matrix<T> out(q.rows(), d);
  for (Index b = 0; b < batches; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = q.value().block(b * lq, h * dh, lq, dh);
      auto kb = k.value().block(b * lk, h * dh, lk, dh);
      auto vb = v.value().block(b * lk, h * dh, lk, dh);
      Matrix<T> s = (qb * kb.transpose()) * scale;
      Matrix<T>& p = probs[static_cast<std::size_t>(b * heads + h)];
      p = Matrix<T>::Zero(lq, lk);
      for (Index r = 0; r < lq; ++r) {
        T hi = -std::numeric_limits<T>::infinity();
        for (Index c = 0; c < lk; ++c) {
          if (detail::mask_allows(mask, r, c)) hi = std::max(hi, s(r, c));
        }
        if (hi == -std::numeric_limits<T>::infinity()) continue;
        T total = 0;
        for (Index c = 0; c < lk; ++c) {
          if (detail::mask_allows(mask, r, c)) total += p(r, c) = std::exp(s(r, c) - hi);
        }
        p.row(r) /= total;
      }
      out.block(b * lq, h * dh, lq, dh).noalias() = p * vb;
    }
  }
  Shape shape = q.shape();
  return DiffArray<T>::from_op(
      std::move(out), std::move(shape), {q, k, v},
      [probs = std::move(probs), batches, heads, lq, lk, dh, scale](detail::Node<T>& self) {
        auto& pq = detail::parent(self, 0);
        auto& pk = detail::parent(self, 1);
        auto& pv = detail::parent(self, 2);
        for (Index b = 0; b < batches; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix<T>& p = probs[static_cast<std::size_t>(b * heads + h)];
            auto go = self.grad.block(b * lq, h * dh, lq, dh);
            auto vb = pv.value.block(b * lk, h * dh, lk, dh);
            if (pv.requires_grad) pv.grad_buffer().block(b * lk, h * dh, lk, dh).noalias() += p.transpose() * go;
            if (!pq.requires_grad && !pk.requires_grad) continue;
            Matrix<T> dp = go * vb.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> dots = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = p.cwiseProduct(dp - dots.replicate(1, lk)) * scale;
            if (pq.requires_grad) {
              pq.grad_buffer().block(b * lq, h * dh, lq, dh).noalias() += ds * pk.value.block(b * lk, h * dh, lk, dh);
            }
            if (pk.requires_grad) {
              pk.grad_buffer().block(b * lk, h * dh, lk, dh).noalias() +=
                  ds.transpose() * pq.value.block(b * lq, h * dh, lq, dh);
            }
          }
        }
      });
}

/// Per-batch score matrices: row (b, i) of the [batches*L, L] result holds
/// scale * q[b,i] . k[b,j] for every j.
template <typename T>
DiffArray<T> batched_scores(const DiffArray<T>& q, const DiffArray<T>& k, Index batches, T scale) {
  if (q.cols() != k.cols() || q.rows() != k.rows() || batches <= 0 || q.rows() % batches != 0) {
    throw DimensionError("batched_scores: q " + shape_string(q.shape()) + ", k " + shape_string(k.shape()));
  }
  const Index len = q.rows() / batches;
  Matrix<T> out(q.rows(), len);
  for (Index b = 0; b < batches; ++b) {
    out.middleRows(b * len, len).noalias() =
        (q.value().middleRows(b * len, len) * k.value().middleRows(b * len, len).transpose()) * scale;
  }
  Shape shape{q.rows(), len};
  return DiffArray<T>::from_op(std::move(out), std::move(shape), {q, k}, [len, batches, scale](detail::Node<T>& self) {
    auto& pq = detail::parent(self, 0);
    auto& pk = detail::parent(self, 1);
    for (Index b = 0; b < batches; ++b) {
      auto g = self.grad.middleRows(b * len, len);
      if (pq.requires_grad) {
        pq.grad_buffer().middleRows(b * len, len).noalias() += (g * pk.value.middleRows(b * len, len)) * scale;
      }
      if (pk.requires_grad) {
        pk.grad_buffer().middleRows(b * len, len).noalias() +=
            (g.transpose() * pq.value.middleRows(b * len, len)) * scale;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Elementwise binary cross-entropy between sigmoid(logits) and constant
/// targets, computed stably from the logits.
template <typename T>
DiffArray<T> bce_with_logits(const DiffArray<T>& logits, const Matrix<T>& targets) {
  if (targets.rows() != logits.rows() || targets.cols() != logits.cols()) {
    throw DimensionError("bce_with_logits: target shape mismatch");
  }
  Matrix<T> out = logits.value().binaryExpr(targets, [](T z, T y) {
    return std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  });
  return DiffArray<T>::from_op(std::move(out), logits.shape(), {logits}, [targets](detail::Node<T>& self) {
    auto& pz = detail::parent(self, 0);
    detail::accumulate(pz, [&] {
      Matrix<T> p = pz.value.unaryExpr([](T z) { return T(1) / (T(1) + std::exp(-z)); });
      return Matrix<T>(self.grad.cwiseProduct(p - targets));
    });
  });
}

}  // namespace rtgen
