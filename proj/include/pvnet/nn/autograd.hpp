#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors, generic
// in the scalar type. Every op records a backward closure only when one of
// its inputs requires a gradient, so inference graphs keep no intermediate
// buffers.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_set>
#include <vector>

#include "pvnet/nn/tensor.hpp"

namespace pvnet::nn {

template <typename T>
struct Node {
  BasicTensor<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Var {
 public:
  using scalar = T;

  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  const BasicTensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::size_t size() const { return node_->value.size(); }
  const T* data() const { return node_->value.data.data(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  /// Gradient after backward(); zeros when nothing flowed here.
  std::vector<T> grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return std::vector<T>(node_->value.size(), T(0));
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> constant(BasicTensor<T> t) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(t);
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> parameter(BasicTensor<T> t) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(t);
  n->requires_grad = true;
  return Var<T>(std::move(n));
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> cmat(const T* p, std::size_t r, std::size_t c) {
  return CMapMat<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
CMapMat<T> cmat(const std::vector<T>& v, std::size_t r, std::size_t c) {
  return cmat(v.data(), r, c);
}
template <typename T>
MapMat<T> mat(std::vector<T>& v, std::size_t r, std::size_t c) {
  return MapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

/// Builds an op output node. `backward` is kept only if a parent needs grad.
template <typename T>
Var<T> make_op(BasicTensor<T> value, const std::vector<Var<T>>& parents, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p.requires_grad();
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.ptr());
    n->backward_fn = std::move(backward);
  }
  return Var<T>(std::move(n));
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw Error(msg);
}

}  // namespace detail

/// Reverse pass from a scalar output.
template <typename T>
void backward(const Var<T>& root) {
  detail::require(root.size() == 1, "backward: root must be a scalar");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node().grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_op<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  BasicTensor<T> out = a.value();
  for (T& v : out.data) v *= c;
  return detail::make_op<T>(std::move(out), {a}, [c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.1)) {
  BasicTensor<T> out = a.value();
  for (T& v : out.data) v = v > T(0) ? v : slope * v;
  return detail::make_op<T>(std::move(out), {a}, [slope](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (p.value[i] > T(0) ? T(1) : slope);
  });
}

/// Scaled hyperbolic tangent 1.7159 * tanh(2x/3). Odd, so it maps 0 to 0.
template <typename T>
Var<T> stanh(const Var<T>& a) {
  constexpr T kA = T(1.7159);
  constexpr T kB = T(2.0 / 3.0);
  BasicTensor<T> out = a.value();
  for (T& v : out.data) v = kA * std::tanh(kB * v);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T th = self.value[i] / kA;
      g[i] += self.grad[i] * kA * kB * (T(1) - th * th);
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  detail::require(numel(shape) == a.size(), "reshape: element count mismatch");
  BasicTensor<T> out(std::move(shape), a.value().data);
  return detail::make_op<T>(std::move(out), {a}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

/// X [N, in] -> X W^T (+ b) [N, out]. Pass an empty Var for no bias.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b = Var<T>()) {
  detail::require(x.shape().size() == 2 && w.shape().size() == 2, "linear: expects 2-D input and weight");
  const std::size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  detail::require(w.shape()[1] == in, "linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  BasicTensor<T> out({n, out_dim});
  auto Y = detail::mat(out.data, n, out_dim);
  Y.noalias() = detail::cmat(x.value().data, n, in) * detail::cmat(w.value().data, out_dim, in).transpose();
  std::vector<Var<T>> parents{x, w};
  if (b) {
    detail::require(b.size() == out_dim, "linear: bias size mismatch");
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += b.data()[c];
    }
    parents.push_back(b);
  }
  return detail::make_op<T>(std::move(out), parents, [n, in, out_dim](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    Node<T>& pw = *self.parents[1];
    auto dY = detail::cmat(self.grad, n, out_dim);
    if (px.requires_grad) {
      detail::mat(px.grad_buffer(), n, in).noalias() += dY * detail::cmat(pw.value.data, out_dim, in);
    }
    if (pw.requires_grad) {
      detail::mat(pw.grad_buffer(), out_dim, in).noalias() += dY.transpose() * detail::cmat(px.value.data, n, in);
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < out_dim; ++c) gb[c] += self.grad[r * out_dim + c];
      }
    }
  });
}

/// Columns [begin, end) of a 2-D tensor.
template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
  detail::require(x.shape().size() == 2 && begin < end && end <= x.shape()[1], "slice_cols: bad range");
  const std::size_t n = x.shape()[0], c = x.shape()[1], w = end - begin;
  BasicTensor<T> out({n, w});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(x.data() + r * c + begin, w, out.data.data() + r * w);
  return detail::make_op<T>(std::move(out), {x}, [n, c, w, begin](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < w; ++j) g[r * c + begin + j] += self.grad[r * w + j];
    }
  });
}

/// Concatenates along the last axis of 2-D tensors with equal row counts.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t n = parts[0].shape()[0];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.shape().size() == 2 && p.shape()[0] == n, "concat_cols: row count mismatch");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  BasicTensor<T> out({n, total});
  std::size_t off = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const T* src = parts[j].data();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(src + r * widths[j], widths[j], out.data.data() + r * total + off);
    off += widths[j];
  }
  return detail::make_op<T>(std::move(out), parts, [n, widths, total](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t j = 0; j < self.parents.size(); ++j) {
      Node<T>& p = *self.parents[j];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < widths[j]; ++c) g[r * widths[j] + c] += self.grad[r * total + off + c];
        }
      }
      off += widths[j];
    }
  });
}

/// Concatenates along axis 0 (channels for [C, ...] grids).
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    detail::require(Shape(p.shape().begin() + 1, p.shape().end()) == tail, "concat_rows: trailing shape mismatch");
    rows += p.shape()[0];
    sizes.push_back(p.size());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  BasicTensor<T> out(shape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  return detail::make_op<T>(std::move(out), parts, [sizes](Node<T>& self) {
    std::size_t off = 0;
    for (std::size_t j = 0; j < self.parents.size(); ++j) {
      Node<T>& p = *self.parents[j];
      if (p.requires_grad) {
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < sizes[j]; ++i) g[i] += self.grad[off + i];
      }
      off += sizes[j];
    }
  });
}

template <typename T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols(std::vector<Var<T>>(parts));
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::vector<Var<T>>(parts));
}

// ---------------------------------------------------------------------------
// Gather / scatter
// ---------------------------------------------------------------------------

/// out[i] = x[idx[i]] for a 2-D x.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<std::size_t> idx) {
  detail::require(x.shape().size() == 2, "gather_rows: expects a 2-D tensor");
  const std::size_t c = x.shape()[1];
  const std::size_t m = x.shape()[0];
  BasicTensor<T> out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::require(idx[i] < m, "gather_rows: index out of range");
    std::copy_n(x.data() + idx[i] * c, c, out.data.data() + i * c);
  }
  return detail::make_op<T>(std::move(out), {x}, [idx = std::move(idx), c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
    }
  });
}

/// Mean of point rows per cell into a channel-major grid [C, grid_shape...].
/// Rows with `cell[i] >= cells` are ignored; empty cells are zero. Rows of a
/// cell are summed in lexicographic order of their values, so the result is
/// bit-identical under any permutation of the input rows.
template <typename T>
Var<T> scatter_mean(const Var<T>& x, const std::vector<std::size_t>& cell, const Shape& grid_shape) {
  detail::require(x.shape().size() == 2 && x.shape()[0] == cell.size(), "scatter_mean: row/cell count mismatch");
  const std::size_t c = x.shape()[1];
  const std::size_t cells = numel(grid_shape);
  std::vector<T> count(cells, T(0));
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < cell.size(); ++i) {
    if (cell[i] >= cells) continue;
    count[cell[i]] += T(1);
    rows.push_back(i);
  }
  const T* xd = x.data();
  std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
    if (cell[a] != cell[b]) return cell[a] < cell[b];
    return std::lexicographical_compare(xd + a * c, xd + (a + 1) * c, xd + b * c, xd + (b + 1) * c);
  });
  Shape shape{c};
  shape.insert(shape.end(), grid_shape.begin(), grid_shape.end());
  BasicTensor<T> out(shape);
  for (std::size_t i : rows) {
    for (std::size_t j = 0; j < c; ++j) out[j * cells + cell[i]] += xd[i * c + j];
  }
  for (std::size_t j = 0; j < c; ++j) {
    for (std::size_t v = 0; v < cells; ++v) {
      if (count[v] > T(0)) out[j * cells + v] /= count[v];
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [cell, count = std::move(count), c, cells](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < cell.size(); ++i) {
      if (cell[i] >= cells) continue;
      const T w = T(1) / count[cell[i]];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += w * self.grad[j * cells + cell[i]];
    }
  });
}

/// Rows of a channel-major grid [C, ...cells]: out[i, c] = grid[c, cell[i]].
template <typename T>
Var<T> gather_cells(const Var<T>& grid, std::vector<std::size_t> cell) {
  const std::size_t c = grid.shape()[0];
  const std::size_t cells = grid.size() / c;
  BasicTensor<T> out({cell.size(), c});
  for (std::size_t i = 0; i < cell.size(); ++i) {
    detail::require(cell[i] < cells, "gather_cells: cell index out of range");
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = grid.data()[j * cells + cell[i]];
  }
  return detail::make_op<T>(std::move(out), {grid}, [cell = std::move(cell), c, cells](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < cell.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) g[j * cells + cell[i]] += self.grad[i * c + j];
    }
  });
}

/// a [N*K, H] + b [N, H] broadcast over the K consecutive rows of each group.
template <typename T>
Var<T> add_broadcast_groups(const Var<T>& a, const Var<T>& b, std::size_t k) {
  const std::size_t n = b.shape()[0];
  const std::size_t h = b.shape()[1];
  detail::require(a.shape() == Shape({n * k, h}), "add_broadcast_groups: shape mismatch");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t c = 0; c < h; ++c) out[(i * k + j) * h + c] += b.data()[i * h + c];
    }
  }
  return detail::make_op<T>(std::move(out), {a, b}, [n, k, h](Node<T>& self) {
    Node<T>& pa = *self.parents[0];
    Node<T>& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t c = 0; c < h; ++c) g[i * h + c] += self.grad[(i * k + j) * h + c];
        }
      }
    }
  });
}

/// Mean over each group of K consecutive rows: [N*K, C] -> [N, C].
template <typename T>
Var<T> mean_groups(const Var<T>& x, std::size_t k) {
  const std::size_t c = x.shape()[1];
  const std::size_t n = x.shape()[0] / k;
  detail::require(n * k == x.shape()[0], "mean_groups: row count not divisible by K");
  BasicTensor<T> out({n, c});
  const T inv = T(1) / static_cast<T>(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t q = 0; q < c; ++q) out[i * c + q] += inv * x.data()[(i * k + j) * c + q];
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [n, k, c, inv](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t q = 0; q < c; ++q) g[(i * k + j) * c + q] += inv * self.grad[i * c + q];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions over [C, D0, D1, D2] grids
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  std::array<std::size_t, 3> dims;
  std::array<std::size_t, 3> kernel;
  std::array<std::size_t, 3> dilation;
  std::size_t cin;

  std::size_t cells() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
  long offset(int axis, std::size_t k) const {
    return static_cast<long>(k * dilation[axis]) - static_cast<long>(dilation[axis] * (kernel[axis] - 1) / 2);
  }
};

/// cols[(ci * taps + tap), cell] with zero padding ("same" output shape).
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const std::size_t V = g.cells();
  const long D0 = static_cast<long>(g.dims[0]), D1 = static_cast<long>(g.dims[1]), D2 = static_cast<long>(g.dims[2]);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* xc = x + ci * V;
    std::size_t tap = 0;
    for (std::size_t a = 0; a < g.kernel[0]; ++a) {
      const long o0 = g.offset(0, a);
      for (std::size_t b = 0; b < g.kernel[1]; ++b) {
        const long o1 = g.offset(1, b);
        for (std::size_t c = 0; c < g.kernel[2]; ++c, ++tap) {
          const long o2 = g.offset(2, c);
          T* row = cols + (ci * g.taps() + tap) * V;
          const long lo2 = std::max(0L, -o2), hi2 = std::min(D2, D2 - o2);
          for (long i0 = 0; i0 < D0; ++i0) {
            const long s0 = i0 + o0;
            for (long i1 = 0; i1 < D1; ++i1) {
              T* dst = row + (i0 * D1 + i1) * D2;
              const long s1 = i1 + o1;
              if (s0 < 0 || s0 >= D0 || s1 < 0 || s1 >= D1 || lo2 >= hi2) {
                std::fill_n(dst, D2, T(0));
                continue;
              }
              const T* src = xc + (s0 * D1 + s1) * D2;
              std::fill_n(dst, lo2, T(0));
              std::copy(src + lo2 + o2, src + hi2 + o2, dst + lo2);
              std::fill(dst + hi2, dst + D2, T(0));
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeom& g, const T* cols, T* dx) {
  const std::size_t V = g.cells();
  const long D0 = static_cast<long>(g.dims[0]), D1 = static_cast<long>(g.dims[1]), D2 = static_cast<long>(g.dims[2]);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    T* xc = dx + ci * V;
    std::size_t tap = 0;
    for (std::size_t a = 0; a < g.kernel[0]; ++a) {
      const long o0 = g.offset(0, a);
      for (std::size_t b = 0; b < g.kernel[1]; ++b) {
        const long o1 = g.offset(1, b);
        for (std::size_t c = 0; c < g.kernel[2]; ++c, ++tap) {
          const long o2 = g.offset(2, c);
          const T* row = cols + (ci * g.taps() + tap) * V;
          const long lo2 = std::max(0L, -o2), hi2 = std::min(D2, D2 - o2);
          if (lo2 >= hi2) continue;
          for (long i0 = 0; i0 < D0; ++i0) {
            const long s0 = i0 + o0;
            if (s0 < 0 || s0 >= D0) continue;
            for (long i1 = 0; i1 < D1; ++i1) {
              const long s1 = i1 + o1;
              if (s1 < 0 || s1 >= D1) continue;
              const T* src = row + (i0 * D1 + i1) * D2;
              T* dst = xc + (s0 * D1 + s1) * D2 + o2;
              for (long i2 = lo2; i2 < hi2; ++i2) dst[i2] += src[i2];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Bias-free 3-D convolution, stride 1, odd kernels, zero padding that keeps
/// the spatial shape. x: [Cin, D0, D1, D2]; w: [Cout, Cin, k0, k1, k2].
template <typename T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, std::array<std::size_t, 3> dilation = {1, 1, 1}) {
  detail::require(x.shape().size() == 4, "conv3d: input must be [C, D0, D1, D2], got " + shape_str(x.shape()));
  detail::require(w.shape().size() == 5, "conv3d: weight must be [Cout, Cin, k0, k1, k2]");
  const detail::ConvGeom g{{x.shape()[1], x.shape()[2], x.shape()[3]},
                           {w.shape()[2], w.shape()[3], w.shape()[4]},
                           dilation,
                           x.shape()[0]};
  detail::require(w.shape()[1] == g.cin, "conv3d: channel mismatch (input " + std::to_string(g.cin) + ", weight " +
                                             std::to_string(w.shape()[1]) + ")");
  for (std::size_t k : g.kernel) detail::require(k % 2 == 1, "conv3d: kernels must be odd");
  const std::size_t cout = w.shape()[0];
  const std::size_t V = g.cells();
  const std::size_t rows = g.cin * g.taps();
  BasicTensor<T> out({cout, g.dims[0], g.dims[1], g.dims[2]});
  const bool pointwise = g.taps() == 1;
  auto cols = std::make_shared<std::vector<T>>();
  const T* colp = x.data();
  if (!pointwise) {
    cols->resize(rows * V);
    detail::im2col(g, x.data(), cols->data());
    colp = cols->data();
  }
  detail::mat(out.data, cout, V).noalias() = detail::cmat(w.value().data, cout, rows) * detail::cmat(colp, rows, V);
  if (!w.requires_grad()) cols.reset();  // im2col is only needed for the weight gradient
  return detail::make_op<T>(std::move(out), {x, w}, [g, cout, V, rows, pointwise, cols](Node<T>& self) {
    Node<T>& px = *self.parents[0];
    Node<T>& pw = *self.parents[1];
    auto dY = detail::cmat(self.grad, cout, V);
    if (pw.requires_grad) {
      const T* colp = pointwise ? px.value.data.data() : cols->data();
      detail::mat(pw.grad_buffer(), cout, rows).noalias() += dY * detail::cmat(colp, rows, V).transpose();
    }
    if (px.requires_grad) {
      if (pointwise) {
        detail::mat(px.grad_buffer(), rows, V).noalias() += detail::cmat(pw.value.data, cout, rows).transpose() * dY;
      } else {
        std::vector<T> dcols(rows * V);
        detail::mat(dcols, rows, V).noalias() = detail::cmat(pw.value.data, cout, rows).transpose() * dY;
        detail::col2im(g, dcols.data(), px.grad_buffer().data());
      }
    }
  });
}

/// 2x2 average pooling over the last two axes of [C, 1, H, W].
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2: spatial dims must be even");
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  BasicTensor<T> out({s[0], s[1], H / 2, W / 2});
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        out[(p * (H / 2) + i / 2) * (W / 2) + j / 2] += T(0.25) * x.data()[(p * H + i) * W + j];
      }
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [planes, H, W](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
          g[(p * H + i) * W + j] += T(0.25) * self.grad[(p * (H / 2) + i / 2) * (W / 2) + j / 2];
        }
      }
    }
  });
}

/// Nearest-neighbor 2x upsampling over the last two axes of [C, 1, H, W].
template <typename T>
Var<T> upsample2(const Var<T>& x) {
  const Shape& s = x.shape();
  detail::require(s.size() == 4, "upsample2: expects [C, 1, H, W]");
  const std::size_t planes = s[0] * s[1], H = s[2], W = s[3];
  BasicTensor<T> out({s[0], s[1], 2 * H, 2 * W});
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < 2 * H; ++i) {
      for (std::size_t j = 0; j < 2 * W; ++j) out[(p * 2 * H + i) * 2 * W + j] = x.data()[(p * H + i / 2) * W + j / 2];
    }
  }
  return detail::make_op<T>(std::move(out), {x}, [planes, H, W](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t i = 0; i < 2 * H; ++i) {
        for (std::size_t j = 0; j < 2 * W; ++j) g[(p * H + i / 2) * W + j / 2] += self.grad[(p * 2 * H + i) * 2 * W + j];
      }
    }
  });
}

/// Mean of scalar Vars.
template <typename T>
Var<T> mean_scalars(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "mean_scalars: empty input");
  T s = T(0);
  for (const auto& x : xs) {
    detail::require(x.size() == 1, "mean_scalars: inputs must be scalars");
    s += x.data()[0];
  }
  const T inv = T(1) / static_cast<T>(xs.size());
  return detail::make_op<T>(BasicTensor<T>({1}, {s * inv}), xs, [inv](Node<T>& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->grad_buffer()[0] += inv * self.grad[0];
    }
  });
}

}  // namespace pvnet::nn
