/**
 * @file tensor.cpp
 * @brief Forward kernels and their reverse-mode rules.
 */

#include "poly/tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "poly/error.hpp"

namespace poly::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using Mat = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b = {}) {
  throw Error("ShapeMismatch", op + ": incompatible shapes " + shape_str(a) + (b.empty() ? "" : " and " + shape_str(b)));
}

ConstMat cmat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Mat mmat(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return Mat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

/// Wraps a forward result; history is kept only when some input needs it.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& in : inputs) {
      if (in.requires_grad()) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) {
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

/// Parent i's gradient buffer when it wants one, otherwise nullptr.
std::vector<double>* grad_of(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  p.ensure_grad();
  return &p.grad;
}

void require_same(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx_from_xy) {
  std::vector<double> y(x.size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = f(x[k]);
  return make_result(x.shape(), std::move(y), {x}, [dfdx_from_xy](Node& self) {
    auto* gx = grad_of(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t k = 0; k < self.grad.size(); ++k) (*gx)[k] += self.grad[k] * dfdx_from_xy(xv[k], self.value[k]);
  });
}

// outer x axis x inner view of a shape.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t d = 0; d < axis; ++d) v.outer *= shape[d];
  v.n = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) v.inner *= shape[d];
  return v;
}

void check_indices(const std::string& op, std::span<const int> idx, std::size_t bound) {
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= bound) {
      throw Error("IndexOutOfRange", op + ": index " + std::to_string(i) + " outside [0, " + std::to_string(bound) + ")");
    }
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t k = 0; k < shape.size(); ++k) s += (k ? "," : "") + std::to_string(shape[k]);
  return s + "]";
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) : node_(std::make_shared<Node>()) {
  if (numel(shape) != values.size()) {
    throw Error("ShapeMismatch", "value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw Error("NotScalar", "item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->value, false); }

void Tensor::backward() const {
  if (size() != 1) throw Error("NotScalar", "backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order of the recorded graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack = {{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// --- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  std::vector<double> y(a.size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = a[k] + b[k];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* g = grad_of(self, i)) {
        for (std::size_t k = 0; k < self.grad.size(); ++k) (*g)[k] += self.grad[k];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  std::vector<double> y(a.size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = a[k] - b[k];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < self.grad.size(); ++k) (*g)[k] += self.grad[k];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t k = 0; k < self.grad.size(); ++k) (*g)[k] -= self.grad[k];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  std::vector<double> y(a.size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = a[k] * b[k];
  return make_result(a.shape(), std::move(y), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < self.grad.size(); ++k) (*g)[k] += self.grad[k] * bv[k];
    }
    if (auto* g = grad_of(self, 1)) {
      for (std::size_t k = 0; k < self.grad.size(); ++k) (*g)[k] += self.grad[k] * av[k];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor square(const Tensor& x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// --- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return make_result({}, {s}, {x}, [](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (double& v : *g) v += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw Error("ShapeMismatch", "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// --- shape -----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  return make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()), {x},
                     [](Node& self) {
                       if (auto* g = grad_of(self, 0)) {
                         for (std::size_t k = 0; k < self.grad.size(); ++k) (*g)[k] += self.grad[k];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw Error("ShapeMismatch", "concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_error("concat", first);
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_error("concat", first, p.shape());
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) shape_error("concat", first, p.shape());
    }
    out_shape[axis] += p.dim(axis);
    widths.push_back(p.dim(axis));
  }
  const AxisView ov = axis_view(out_shape, axis);
  std::vector<double> y(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t chunk = widths[i] * ov.inner;
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(parts[i].values().begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  y.begin() + static_cast<std::ptrdiff_t>(o * ov.n * ov.inner + offset * ov.inner));
    }
    offset += widths[i];
  }
  return make_result(out_shape, std::move(y), parts, [widths, ov](Node& self) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::size_t chunk = widths[i] * ov.inner;
      if (auto* g = grad_of(self, i)) {
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const double* src = self.grad.data() + o * ov.n * ov.inner + off * ov.inner;
          double* dst = g->data() + o * chunk;
          for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
        }
      }
      off += widths[i];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || start + length > x.dim(axis)) shape_error("slice", x.shape());
  const AxisView iv = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> y(numel(out_shape));
  const std::size_t chunk = length * iv.inner;
  for (std::size_t o = 0; o < iv.outer; ++o) {
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(o * iv.n * iv.inner + start * iv.inner), chunk,
                y.begin() + static_cast<std::ptrdiff_t>(o * chunk));
  }
  return make_result(std::move(out_shape), std::move(y), {x}, [iv, start, chunk](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t o = 0; o < iv.outer; ++o) {
        double* dst = g->data() + o * iv.n * iv.inner + start * iv.inner;
        const double* src = self.grad.data() + o * chunk;
        for (std::size_t k = 0; k < chunk; ++k) dst[k] += src[k];
      }
    }
  });
}

// --- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(m * n);
  mmat(y, m, n).noalias() = cmat(a.node()->value, m, k) * cmat(b.node()->value, k, n);
  return make_result({m, n}, std::move(y), {a, b}, [m, k, n](Node& self) {
    const auto dy = cmat(self.grad, m, n);
    if (auto* ga = grad_of(self, 0)) mmat(*ga, m, k).noalias() += dy * cmat(self.parents[1]->value, k, n).transpose();
    if (auto* gb = grad_of(self, 1)) mmat(*gb, k, n).noalias() += cmat(self.parents[0]->value, m, k).transpose() * dy;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.size() != w.dim(1)) {
    shape_error("linear", x.shape(), w.shape());
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<double> y(m * n);
  auto ym = mmat(y, m, n);
  ym.noalias() = cmat(x.node()->value, m, k) * cmat(w.node()->value, k, n);
  ym.rowwise() += cmat(b.node()->value, 1, n).row(0);
  return make_result({m, n}, std::move(y), {x, w, b}, [m, k, n](Node& self) {
    const auto dy = cmat(self.grad, m, n);
    if (auto* gx = grad_of(self, 0)) mmat(*gx, m, k).noalias() += dy * cmat(self.parents[1]->value, k, n).transpose();
    if (auto* gw = grad_of(self, 1)) mmat(*gw, k, n).noalias() += cmat(self.parents[0]->value, m, k).transpose() * dy;
    if (auto* gb = grad_of(self, 2)) mmat(*gb, 1, n) += dy.colwise().sum();
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (x.rank() != 2 || row.size() != x.dim(1)) shape_error("add_row", x.shape(), row.shape());
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> y(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] += row[c];
  }
  return make_result(x.shape(), std::move(y), {x, row}, [m, n](Node& self) {
    if (auto* gx = grad_of(self, 0)) {
      for (std::size_t k = 0; k < self.grad.size(); ++k) (*gx)[k] += self.grad[k];
    }
    if (auto* gr = grad_of(self, 1)) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) (*gr)[c] += self.grad[r * n + c];
      }
    }
  });
}

// --- indexing ---------------------------------------------------------------

Tensor gather_rows(const Tensor& x, std::span<const int> indices) {
  if (x.rank() != 2) shape_error("gather_rows", x.shape());
  check_indices("gather_rows", indices, x.dim(0));
  const std::size_t d = x.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> y(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(x.values().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[r]) * d), d,
                y.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  const std::size_t rows = idx.size();
  return make_result({rows, d}, std::move(y), {x}, [idx = std::move(idx), d](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = g->data() + static_cast<std::size_t>(idx[r]) * d;
        const double* src = self.grad.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    }
  });
}

Tensor embed(const Tensor& table, std::span<const int> indices) { return gather_rows(table, indices); }

Tensor scatter_add_rows(const Tensor& x, std::span<const int> index, std::size_t n_out) {
  if (x.rank() != 2 || index.size() != x.dim(0)) shape_error("scatter_add_rows", x.shape());
  check_indices("scatter_add_rows", index, n_out);
  const std::size_t d = x.dim(1);
  std::vector<int> idx(index.begin(), index.end());
  std::vector<double> y(n_out * d, 0.0);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    double* dst = y.data() + static_cast<std::size_t>(idx[r]) * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += x[r * d + c];
  }
  return make_result({n_out, d}, std::move(y), {x}, [idx = std::move(idx), d](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const double* src = self.grad.data() + static_cast<std::size_t>(idx[r]) * d;
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += src[c];
      }
    }
  });
}

Tensor scale_rows(const Tensor& x, std::span<const double> weights) {
  if (x.rank() != 2 || weights.size() != x.dim(0)) shape_error("scale_rows", x.shape());
  const std::size_t d = x.dim(1);
  std::vector<double> w(weights.begin(), weights.end());
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < w.size(); ++r) {
    for (std::size_t c = 0; c < d; ++c) y[r * d + c] = w[r] * x[r * d + c];
  }
  return make_result(x.shape(), std::move(y), {x}, [w = std::move(w), d](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t r = 0; r < w.size(); ++r) {
        for (std::size_t c = 0; c < d; ++c) (*g)[r * d + c] += w[r] * self.grad[r * d + c];
      }
    }
  });
}

// --- nonlinear layers -------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error("softmax", x.shape());
  const AxisView v = axis_view(x.shape(), axis);
  std::vector<double> y(x.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.n * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) mx = std::max(mx, x[base + k * v.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) total += (y[base + k * v.inner] = std::exp(x[base + k * v.inner] - mx));
      for (std::size_t k = 0; k < v.n; ++k) y[base + k * v.inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(y), {x}, [v](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.n * v.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < v.n; ++k) dot += self.grad[base + k * v.inner] * self.value[base + k * v.inner];
        for (std::size_t k = 0; k < v.n; ++k) {
          const std::size_t i = base + k * v.inner;
          (*g)[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) shape_error("log_softmax", x.shape());
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  std::vector<double> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) total += std::exp(xr[k] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t k = 0; k < n; ++k) y[r * n + k] = xr[k] - lse;
  }
  return make_result(x.shape(), std::move(y), {x}, [rows, n](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t k = 0; k < n; ++k) gs += self.grad[r * n + k];
      for (std::size_t k = 0; k < n; ++k) {
        (*g)[r * n + k] += self.grad[r * n + k] - std::exp(self.value[r * n + k]) * gs;
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
  if (x.rank() != 4 || kernel.rank() != 4 || kernel.dim(1) != x.dim(1) || bias.size() != kernel.dim(0) ||
      stride < 1 || pad < 0) {
    shape_error("conv2d", x.shape(), kernel.shape());
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernel.dim(0), KH = kernel.dim(2), KW = kernel.dim(3);
  const auto s = static_cast<std::size_t>(stride);
  const auto p = static_cast<std::size_t>(pad);
  if (H + 2 * p < KH || W + 2 * p < KW) shape_error("conv2d", x.shape(), kernel.shape());
  const std::size_t HO = (H + 2 * p - KH) / s + 1, WO = (W + 2 * p - KW) / s + 1;
  const std::size_t rows = B * HO * WO, cols = C * KH * KW;

  // im2col: one row per output position; -1 marks padding.
  auto src_index = std::make_shared<std::vector<std::ptrdiff_t>>(rows * cols, -1);
  std::vector<double> col(rows * cols, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t ho = 0; ho < HO; ++ho) {
      for (std::size_t wo = 0; wo < WO; ++wo) {
        const std::size_t r = (b * HO + ho) * WO + wo;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t kh = 0; kh < KH; ++kh) {
            const auto hi = static_cast<std::ptrdiff_t>(ho * s + kh) - static_cast<std::ptrdiff_t>(p);
            if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kw = 0; kw < KW; ++kw) {
              const auto wi = static_cast<std::ptrdiff_t>(wo * s + kw) - static_cast<std::ptrdiff_t>(p);
              if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(W)) continue;
              const auto src = static_cast<std::ptrdiff_t>(((b * C + c) * H) * W) + hi * static_cast<std::ptrdiff_t>(W) + wi;
              const std::size_t dst = r * cols + (c * KH + kh) * KW + kw;
              (*src_index)[dst] = src;
              col[dst] = x[static_cast<std::size_t>(src)];
            }
          }
        }
      }
    }
  }
  std::vector<double> out_mat(rows * O);
  mmat(out_mat, rows, O).noalias() = cmat(col, rows, cols) * cmat(kernel.node()->value, O, cols).transpose();

  std::vector<double> y(B * O * HO * WO);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t o = 0; o < O; ++o) {
      for (std::size_t q = 0; q < HO * WO; ++q) y[(b * O + o) * HO * WO + q] = out_mat[(b * HO * WO + q) * O + o] + bias[o];
    }
  }
  auto col_ptr = std::make_shared<std::vector<double>>(std::move(col));
  return make_result({B, O, HO, WO}, std::move(y), {x, kernel, bias},
                     [=](Node& self) {
                       std::vector<double> dout(rows * O);
                       for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t o = 0; o < O; ++o) {
                           for (std::size_t q = 0; q < HO * WO; ++q) {
                             dout[(b * HO * WO + q) * O + o] = self.grad[(b * O + o) * HO * WO + q];
                           }
                         }
                       }
                       const auto dm = cmat(dout, rows, O);
                       if (auto* gk = grad_of(self, 1)) mmat(*gk, O, cols).noalias() += dm.transpose() * cmat(*col_ptr, rows, cols);
                       if (auto* gb = grad_of(self, 2)) mmat(*gb, 1, O) += dm.colwise().sum();
                       if (auto* gx = grad_of(self, 0)) {
                         std::vector<double> dcol(rows * cols);
                         mmat(dcol, rows, cols).noalias() = dm * cmat(self.parents[1]->value, O, cols);
                         for (std::size_t k = 0; k < dcol.size(); ++k) {
                           const auto src = (*src_index)[k];
                           if (src >= 0) (*gx)[static_cast<std::size_t>(src)] += dcol[k];
                         }
                       }
                     });
}

Tensor maxpool2d(const Tensor& x, int window) {
  if (x.rank() != 4 || window < 1) shape_error("maxpool2d", x.shape());
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto w = static_cast<std::size_t>(window);
  const std::size_t HO = H / w, WO = W / w;
  if (HO == 0 || WO == 0) shape_error("maxpool2d", x.shape());
  std::vector<double> y(B * C * HO * WO);
  std::vector<std::size_t> arg(y.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    for (std::size_t ho = 0; ho < HO; ++ho) {
      for (std::size_t wo = 0; wo < WO; ++wo) {
        std::size_t best = bc * H * W + ho * w * W + wo * w;
        for (std::size_t i = 0; i < w; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t k = bc * H * W + (ho * w + i) * W + wo * w + j;
            if (x[k] > x[best]) best = k;
          }
        }
        const std::size_t out = (bc * HO + ho) * WO + wo;
        y[out] = x[best];
        arg[out] = best;
      }
    }
  }
  return make_result({B, C, HO, WO}, std::move(y), {x}, [arg = std::move(arg)](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t k = 0; k < arg.size(); ++k) (*g)[arg[k]] += self.grad[k];
    }
  });
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.rank() != 4 || factor < 1) shape_error("upsample_nearest", x.shape());
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t HO = H * f, WO = W * f;
  std::vector<double> y(B * C * HO * WO);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    for (std::size_t h = 0; h < HO; ++h) {
      for (std::size_t w = 0; w < WO; ++w) y[(bc * HO + h) * WO + w] = x[(bc * H + h / f) * W + w / f];
    }
  }
  return make_result({B, C, HO, WO}, std::move(y), {x}, [=](Node& self) {
    if (auto* g = grad_of(self, 0)) {
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        for (std::size_t h = 0; h < HO; ++h) {
          for (std::size_t w = 0; w < WO; ++w) (*g)[(bc * H + h / f) * W + w / f] += self.grad[(bc * HO + h) * WO + w];
        }
      }
    }
  });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, bool training) {
  if (x.rank() < 2) shape_error("batchnorm", x.shape());
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t inner = x.size() / (N * C == 0 ? 1 : N * C);
  if (gamma.size() != C || beta.size() != C || state.running_mean.size() != C) {
    shape_error("batchnorm", x.shape(), gamma.shape());
  }
  const std::size_t M = N * inner;
  if (M == 0) return make_result(x.shape(), {}, {x, gamma, beta}, [](Node&) {});

  std::vector<double> mean(C, 0.0), inv_std(C, 0.0);
  auto at = [&](std::size_t n, std::size_t c, std::size_t k) { return (n * C + c) * inner + k; };
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < inner; ++k) s += x[at(n, c, k)];
      }
      mean[c] = s / static_cast<double>(M);
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < inner; ++k) {
          const double dlt = x[at(n, c, k)] - mean[c];
          ss += dlt * dlt;
        }
      }
      const double var = ss / static_cast<double>(M);
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
      state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  std::vector<double> xhat(x.size()), y(x.size());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t k = 0; k < inner; ++k) {
        const std::size_t i = at(n, c, k);
        xhat[i] = (x[i] - mean[c]) * inv_std[c];
        y[i] = gamma[c] * xhat[i] + beta[c];
      }
    }
  }
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       const auto& gv = self.parents[1]->value;
                       auto* gx = grad_of(self, 0);
                       auto* gg = grad_of(self, 1);
                       auto* gbeta = grad_of(self, 2);
                       for (std::size_t c = 0; c < C; ++c) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::size_t n = 0; n < N; ++n) {
                           for (std::size_t k = 0; k < inner; ++k) {
                             const std::size_t i = (n * C + c) * inner + k;
                             sum_dy += self.grad[i];
                             sum_dy_xhat += self.grad[i] * xhat[i];
                           }
                         }
                         if (gg) (*gg)[c] += sum_dy_xhat;
                         if (gbeta) (*gbeta)[c] += sum_dy;
                         if (!gx) continue;
                         const double md = static_cast<double>(M);
                         for (std::size_t n = 0; n < N; ++n) {
                           for (std::size_t k = 0; k < inner; ++k) {
                             const std::size_t i = (n * C + c) * inner + k;
                             if (training) {
                               (*gx)[i] += gv[c] * inv_std[c] / md *
                                           (md * self.grad[i] - sum_dy - xhat[i] * sum_dy_xhat);
                             } else {
                               (*gx)[i] += gv[c] * inv_std[c] * self.grad[i];
                             }
                           }
                         }
                       }
                     });
}

// --- fused losses -------------------------------------------------------------

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets, std::span<const double> weights) {
  if (logits.rank() != 2 || targets.size() != logits.dim(0) || (!weights.empty() && weights.size() != targets.size())) {
    shape_error("cross_entropy_sum", logits.shape());
  }
  const std::size_t R = logits.dim(0), C = logits.dim(1);
  check_indices("cross_entropy_sum", targets, C);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<double> w = weights.empty() ? std::vector<double>(R, 1.0) : std::vector<double>(weights.begin(), weights.end());
  auto probs = std::make_shared<std::vector<double>>(R * C);
  double loss = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const double* xr = logits.values().data() + r * C;
    const double mx = *std::max_element(xr, xr + C);
    double total = 0.0;
    for (std::size_t c = 0; c < C; ++c) total += ((*probs)[r * C + c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < C; ++c) (*probs)[r * C + c] /= total;
    const double lse = mx + std::log(total);
    loss -= w[r] * (xr[static_cast<std::size_t>(tgt[r])] - lse);
  }
  return make_result({}, {loss}, {logits}, [R, C, tgt = std::move(tgt), w = std::move(w), probs](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const double up = self.grad[0];
    for (std::size_t r = 0; r < R; ++r) {
      if (w[r] == 0.0) continue;
      for (std::size_t c = 0; c < C; ++c) (*g)[r * C + c] += up * w[r] * (*probs)[r * C + c];
      (*g)[r * C + static_cast<std::size_t>(tgt[r])] -= up * w[r];
    }
  });
}

Tensor bce_with_logits_sum(const Tensor& logits, std::span<const double> targets) {
  if (targets.size() != logits.size()) shape_error("bce_with_logits_sum", logits.shape());
  std::vector<double> y(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double l = logits[k];
    loss += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l))) - y[k] * l;
  }
  return make_result({}, {loss}, {logits}, [y = std::move(y)](Node& self) {
    auto* g = grad_of(self, 0);
    if (!g) return;
    const auto& lv = self.parents[0]->value;
    for (std::size_t k = 0; k < y.size(); ++k) {
      const double s = lv[k] >= 0 ? 1.0 / (1.0 + std::exp(-lv[k])) : std::exp(lv[k]) / (1.0 + std::exp(lv[k]));
      (*g)[k] += self.grad[0] * (s - y[k]);
    }
  });
}

// --- gradient checking ---------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor probe(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  f(probe).backward();
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());
  analytic.resize(probe.size(), 0.0);

  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    std::vector<double> v(x.values().begin(), x.values().end());
    v[k] += eps;
    const double fp = f(Tensor(x.shape(), v)).item();
    v[k] -= 2 * eps;
    const double fm = f(Tensor(x.shape(), v)).item();
    const double fd = (fp - fm) / (2 * eps);
    worst = std::max(worst, std::abs(analytic[k] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

double grad_check_many(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double eps,
                       std::size_t max_per_tensor) {
  for (auto& t : inputs) {
    if (!t.requires_grad()) throw Error("InvalidArgument", "grad_check_many inputs must require gradients");
    t.mutable_grad();
    t.zero_grad();
  }
  loss().backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    analytic.resize(t.size(), 0.0);
    const std::size_t n = t.size();
    const std::size_t count = (max_per_tensor == 0 || max_per_tensor >= n) ? n : max_per_tensor;
    for (std::size_t j = 0; j < count; ++j) {
      const std::size_t k = count == n ? j : (j * n) / count;
      auto vals = t.mutable_values();
      const double saved = vals[k];
      double fp = 0.0, fm = 0.0;
      {
        NoGradGuard no_grad;
        vals[k] = saved + eps;
        fp = loss().item();
        vals[k] = saved - eps;
        fm = loss().item();
      }
      vals[k] = saved;
      const double fd = (fp - fm) / (2 * eps);
      worst = std::max(worst, std::abs(analytic[k] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace poly::ad
