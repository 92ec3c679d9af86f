#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "latent_loop/errors.hpp"
#include "latent_loop/tensor.hpp"

namespace latent_loop {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  inline bool needs_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of the requires_grad leaves, in leaf registration order.
class GradientMap {
 public:
  void add(std::string name, Tensor grad) {
    names_.push_back(std::move(name));
    grads_.push_back(std::move(grad));
  }
  const Tensor* find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return &grads_[i];
    return nullptr;
  }
  const Tensor& at(const std::string& name) const {
    if (const Tensor* g = find(name)) return *g;
    throw IndexError("no gradient recorded for '" + name + "'");
  }
  bool contains(const std::string& name) const { return find(name) != nullptr; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& gradients() const { return grads_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> grads_;
};

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid reverse topological order and every op is visited exactly once by
/// `backward`. Gradient storage exists only on nodes downstream of a
/// requires_grad leaf; frozen constants never receive any.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(Node{std::move(value), nullptr, false, false, {}, {}, {}}); }

  // Frozen tensor held by reference; it must outlive the graph.
  Var constant_ref(const Tensor& value) { return push(Node{Tensor{}, &value, false, false, {}, {}, {}}); }

  // Trainable leaf held by reference; it must outlive the graph.
  Var parameter(const Tensor& value, std::string name) {
    Node n{Tensor{}, &value, true, true, {}, {}, {}};
    n.name = std::move(name);
    Var v = push(std::move(n));
    leaves_.push_back(v.id());
    return v;
  }

  // Trainable leaf owned by the graph (e.g. an input for a Jacobian).
  Var input(Tensor value, std::string name) {
    Node n{std::move(value), nullptr, true, true, {}, {}, {}};
    n.name = std::move(name);
    Var v = push(std::move(n));
    leaves_.push_back(v.id());
    return v;
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.owned;
  }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node that needs one; allocated as zeros on demand.
  std::vector<double>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
    return n.grad;
  }

  const std::vector<double>* grad_if_any(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.grad.empty() ? nullptr : &n.grad;
  }

  /// Appends an op result. The backward closure is dropped when no parent
  /// carries gradient.
  Var emit(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].needs_grad;
    return emit_impl(std::move(value), needs, std::move(fn));
  }

  Var emit(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
    bool needs = false;
    for (const Var& p : parents) needs = needs || nodes_[p.id()].needs_grad;
    return emit_impl(std::move(value), needs, std::move(fn));
  }

  /// Reverse pass from a scalar root. Previous gradients are discarded, so
  /// repeated calls on one record give identical results.
  GradientMap backward(Var root) {
    if (&root.graph() != this) throw ContractError("backward root belongs to another graph");
    if (value(root.id()).size() != 1) {
      throw ContractError("backward root must be scalar, got shape " + shape_string(value(root.id()).shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    if (nodes_[root.id()].needs_grad) {
      grad(root.id())[0] = 1.0;
      for (std::size_t i = root.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this, i);
      }
    }
    GradientMap out;
    for (std::size_t leaf : leaves_) {
      const Node& n = nodes_[leaf];
      Tensor g(value(leaf).shape());
      if (!n.grad.empty()) g.values() = n.grad;
      out.add(n.name, std::move(g));
    }
    return out;
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref;
    bool requires_grad;
    bool needs_grad;
    std::vector<double> grad;
    BackwardFn backward;
    std::string name;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  Var emit_impl(Tensor value, bool needs, BackwardFn fn) {
    Node n{std::move(value), nullptr, false, needs, {}, {}, {}};
    if (needs) n.backward = std::move(fn);
    return push(std::move(n));
  }

  std::deque<Node> nodes_;  // stable references across push_back
  std::vector<std::size_t> leaves_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::needs_grad() const { return graph_->needs_grad(id_); }

namespace detail {

inline void require_same_graph(const Var& a, const Var& b, const char* op) {
  if (&a.graph() != &b.graph()) throw ContractError(std::string(op) + ": operands from different graphs");
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops. Each computes its value eagerly and records a closure
// that scatters the upstream gradient into parents that need it.
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  detail::require_same_graph(a, b, "matmul");
  Graph& g = a.graph();
  Tensor c = kernels::matmul(a.value(), b.value());
  return g.emit(std::move(c), {a, b}, [a, b](Graph& g, std::size_t self) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    const auto& up = g.grad(self);
    if (a.needs_grad()) {
      auto& ga = g.grad(a.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += up[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (b.needs_grad()) {
      auto& gb = g.grad(b.id());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * up[i * n + j];
        }
    }
  });
}

inline Var transpose(Var a) {
  Graph& g = a.graph();
  return g.emit(kernels::transpose(a.value()), {a}, [a](Graph& g, std::size_t self) {
    const std::size_t m = a.value().dim(0), n = a.value().dim(1);
    const auto& up = g.grad(self);
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += up[j * m + i];
  });
}

inline Var reshape(Var a, Shape shape) {
  Graph& g = a.graph();
  if (shape_size(shape) != a.value().size()) {
    throw DimensionError("reshape " + shape_string(a.shape()) + " to " + shape_string(shape));
  }
  return g.emit(a.value().reshaped(std::move(shape)), {a}, [a](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b.value()[i];
  return a.graph().emit(std::move(c), {a, b}, [a, b](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    for (Var p : {a, b}) {
      if (!p.needs_grad()) continue;
      auto& gp = g.grad(p.id());
      for (std::size_t i = 0; i < up.size(); ++i) gp[i] += up[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_graph(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b.value()[i];
  return a.graph().emit(std::move(c), {a, b}, [a, b](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    if (a.needs_grad()) {
      auto& ga = g.grad(a.id());
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
    }
    if (b.needs_grad()) {
      auto& gb = g.grad(b.id());
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] -= up[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b.value()[i];
  return a.graph().emit(std::move(c), {a, b}, [a, b](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    if (a.needs_grad()) {
      auto& ga = g.grad(a.id());
      for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * b.value()[i];
    }
    if (b.needs_grad()) {
      auto& gb = g.grad(b.id());
      for (std::size_t i = 0; i < up.size(); ++i) gb[i] += up[i] * a.value()[i];
    }
  });
}

inline Var scale(Var a, double factor) {
  Tensor c = a.value();
  for (auto& v : c.values()) v *= factor;
  return a.graph().emit(std::move(c), {a}, [a, factor](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i] * factor;
  });
}

inline Var add_constant(Var a, double offset) {
  Tensor c = a.value();
  for (auto& v : c.values()) v += offset;
  return a.graph().emit(std::move(c), {a}, [a](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& ga = g.grad(a.id());
    for (std::size_t i = 0; i < up.size(); ++i) ga[i] += up[i];
  });
}

// x[..., n] + bias[n], broadcast over rows.
inline Var add_bias(Var x, Var bias) {
  detail::require_same_graph(x, bias, "add_bias");
  const std::size_t n = x.value().cols();
  if (bias.value().size() != n) {
    throw DimensionError("add_bias: " + shape_string(x.shape()) + " with bias " + shape_string(bias.shape()));
  }
  Tensor c = x.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += bias.value()[i % n];
  return x.graph().emit(std::move(c), {x, bias}, [x, bias, n](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    if (x.needs_grad()) {
      auto& gx = g.grad(x.id());
      for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i];
    }
    if (bias.needs_grad()) {
      auto& gb = g.grad(bias.id());
      for (std::size_t i = 0; i < up.size(); ++i) gb[i % n] += up[i];
    }
  });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  detail::require_same_graph(x, gamma, "layer_norm");
  auto r = kernels::layer_norm(x.value(), gamma.value(), beta.value(), eps);
  Tensor out = std::move(r.out);
  return x.graph().emit(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(r.normalized), inv = std::move(r.inv_std)](Graph& g, std::size_t self) {
        const std::size_t d = xhat.cols();
        const std::size_t rows = xhat.size() / d;
        const auto& up = g.grad(self);
        const Tensor& gv = gamma.value();
        if (gamma.needs_grad()) {
          auto& gg = g.grad(gamma.id());
          for (std::size_t i = 0; i < up.size(); ++i) gg[i % d] += up[i] * xhat[i];
        }
        if (beta.needs_grad()) {
          auto& gb = g.grad(beta.id());
          for (std::size_t i = 0; i < up.size(); ++i) gb[i % d] += up[i];
        }
        if (x.needs_grad()) {
          auto& gx = g.grad(x.id());
          const double dd = static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = up[r * d + j] * gv[j];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = up[r * d + j] * gv[j];
              gx[r * d + j] += inv[r] / dd * (dd * dxh - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
            }
          }
        }
      });
}

inline Var gelu(Var x) {
  Tensor y = x.value();
  for (auto& v : y.values()) v = kernels::gelu(v);
  return x.graph().emit(std::move(y), {x}, [x](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& gx = g.grad(x.id());
    for (std::size_t i = 0; i < up.size(); ++i) gx[i] += up[i] * kernels::gelu_derivative(x.value()[i]);
  });
}

// Row softmax; mask entries equal to false are excluded (treated as -inf).
inline Var softmax(Var x, const std::vector<bool>* mask = nullptr) {
  Tensor y = kernels::softmax_rows(x.value(), mask);
  return x.graph().emit(std::move(y), {x}, [x](Graph& g, std::size_t self) {
    const Tensor& yv = g.value(self);
    const std::size_t n = yv.cols();
    const std::size_t rows = yv.size() / n;
    const auto& up = g.grad(self);
    auto& gx = g.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += up[r * n + j] * yv[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += yv[r * n + j] * (up[r * n + j] - dot);
    }
  });
}

inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || begin >= end || end > xv.dim(1)) {
    throw DimensionError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_string(xv.shape()));
  }
  const std::size_t rows = xv.dim(0), n = xv.dim(1), w = end - begin;
  Tensor y(Shape{rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) y.at(r, j) = xv.at(r, begin + j);
  return x.graph().emit(std::move(y), {x}, [x, begin, rows, n, w](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& gx = g.grad(x.id());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * n + begin + j] += up[r * w + j];
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols of nothing");
  const std::size_t rows = parts.front().value().dim(0);
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != 2 || p.value().dim(0) != rows) {
      throw DimensionError("concat_cols row mismatch: " + shape_string(p.shape()));
    }
    total += p.value().dim(1);
  }
  Tensor y(Shape{rows, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < pv.dim(1); ++j) y.at(r, offset + j) = pv.at(r, j);
    offset += pv.dim(1);
  }
  return parts.front().graph().emit(std::move(y), parts, [parts, rows, total](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t w = p.value().dim(1);
      if (p.needs_grad()) {
        auto& gp = g.grad(p.id());
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += up[r * total + offset + j];
      }
      offset += w;
    }
  });
}

// Stacks rows. Rank-1 parts of width d contribute one row; matrices contribute all of theirs.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const std::size_t d = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.value().rank() > 2 || p.value().cols() != d) {
      throw DimensionError("concat_rows width mismatch: " + shape_string(p.shape()) + " vs width " +
                           std::to_string(d));
    }
    rows += p.value().size() / d;
  }
  Tensor y(Shape{rows, d});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const auto src = p.value().data();
    std::copy(src.begin(), src.end(), y.values().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
  }
  return parts.front().graph().emit(std::move(y), parts, [parts](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.value().size();
      if (p.needs_grad()) {
        auto& gp = g.grad(p.id());
        for (std::size_t i = 0; i < n; ++i) gp[i] += up[offset + i];
      }
      offset += n;
    }
  });
}

inline Var row(Var x, std::size_t index) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || index >= xv.dim(0)) {
    throw IndexError("row " + std::to_string(index) + " of " + shape_string(xv.shape()));
  }
  const std::size_t d = xv.dim(1);
  auto src = xv.row(index);
  Tensor y(Shape{d}, std::vector<double>(src.begin(), src.end()));
  return x.graph().emit(std::move(y), {x}, [x, index, d](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& gx = g.grad(x.id());
    for (std::size_t j = 0; j < d; ++j) gx[index * d + j] += up[j];
  });
}

inline Var gather_rows(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("gather_rows table must be a matrix");
  if (ids.empty()) throw ContractError("gather_rows with no ids");
  const std::size_t d = tv.dim(1);
  Tensor y(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.dim(0)) {
      throw InputError("token id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(tv.dim(0)));
    }
    auto src = tv.row(ids[i]);
    std::copy(src.begin(), src.end(), y.row(i).begin());
  }
  return table.graph().emit(std::move(y), {table}, [table, ids, d](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    auto& gt = g.grad(table.id());
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += up[i * d + j];
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.graph().emit(Tensor::scalar(s), {x}, [x](Graph& g, std::size_t self) {
    const double up = g.grad(self)[0];
    for (auto& v : g.grad(x.id())) v += up;
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var dot(Var u, Var v) {
  detail::require_same_graph(u, v, "dot");
  detail::require_same_shape(u, v, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < u.value().size(); ++i) s += u.value()[i] * v.value()[i];
  return u.graph().emit(Tensor::scalar(s), {u, v}, [u, v](Graph& g, std::size_t self) {
    const double up = g.grad(self)[0];
    if (u.needs_grad()) {
      auto& gu = g.grad(u.id());
      for (std::size_t i = 0; i < gu.size(); ++i) gu[i] += up * v.value()[i];
    }
    if (v.needs_grad()) {
      auto& gv = g.grad(v.id());
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += up * u.value()[i];
    }
  });
}

// M[r x c] . v[c] -> [r]
inline Var matvec(Var m, Var v) {
  detail::require_same_graph(m, v, "matvec");
  const Tensor& mv = m.value();
  if (mv.rank() != 2 || v.value().size() != mv.dim(1)) {
    throw DimensionError("matvec shape mismatch: " + shape_string(mv.shape()) + " . " + shape_string(v.shape()));
  }
  const std::size_t r = mv.dim(0), c = mv.dim(1);
  Tensor y(Shape{r});
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += mv.at(i, j) * v.value()[j];
    y[i] = s;
  }
  return m.graph().emit(std::move(y), {m, v}, [m, v, r, c](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    if (m.needs_grad()) {
      auto& gm = g.grad(m.id());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += up[i] * v.value()[j];
    }
    if (v.needs_grad()) {
      auto& gv = g.grad(v.id());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j] += up[i] * m.value().at(i, j);
    }
  });
}

// v[r] . M[r x c] -> [c]
inline Var vecmat(Var v, Var m) {
  detail::require_same_graph(v, m, "vecmat");
  const Tensor& mv = m.value();
  if (mv.rank() != 2 || v.value().size() != mv.dim(0)) {
    throw DimensionError("vecmat shape mismatch: " + shape_string(v.shape()) + " . " + shape_string(mv.shape()));
  }
  const std::size_t r = mv.dim(0), c = mv.dim(1);
  Tensor y(Shape{c});
  for (std::size_t i = 0; i < r; ++i) {
    const double vi = v.value()[i];
    for (std::size_t j = 0; j < c; ++j) y[j] += vi * mv.at(i, j);
  }
  return v.graph().emit(std::move(y), {v, m}, [v, m, r, c](Graph& g, std::size_t self) {
    const auto& up = g.grad(self);
    if (v.needs_grad()) {
      auto& gv = g.grad(v.id());
      for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) s += up[j] * m.value().at(i, j);
        gv[i] += s;
      }
    }
    if (m.needs_grad()) {
      auto& gm = g.grad(m.id());
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gm[i * c + j] += v.value()[i] * up[j];
    }
  });
}

inline constexpr double kNormFloor = 1e-12;

// u / max(|u|, eps). Sets *clamped when the floor was active.
inline Var l2_normalize(Var u, double eps = kNormFloor, bool* clamped = nullptr) {
  const Tensor& uv = u.value();
  double sq = 0.0;
  for (double x : uv.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  const bool floor_active = !(norm > eps);
  if (clamped) *clamped = floor_active;
  const double denom = floor_active ? eps : norm;
  Tensor y = uv;
  for (auto& x : y.values()) x /= denom;
  return u.graph().emit(std::move(y), {u}, [u, denom, floor_active](Graph& g, std::size_t self) {
    const Tensor& yv = g.value(self);
    const auto& up = g.grad(self);
    auto& gu = g.grad(u.id());
    double proj = 0.0;
    if (!floor_active)
      for (std::size_t i = 0; i < up.size(); ++i) proj += up[i] * yv[i];
    for (std::size_t i = 0; i < up.size(); ++i) gu[i] += (up[i] - proj * yv[i]) / denom;
  });
}

// u.v / (max(|u|,eps) max(|v|,eps))
inline Var cosine_similarity(Var u, Var v, double eps = kNormFloor, bool* clamped = nullptr) {
  detail::require_same_graph(u, v, "cosine_similarity");
  detail::require_same_shape(u, v, "cosine_similarity");
  const Tensor& uv = u.value();
  const Tensor& vv = v.value();
  double uu = 0.0, vvv = 0.0, uvd = 0.0;
  for (std::size_t i = 0; i < uv.size(); ++i) {
    uu += uv[i] * uv[i];
    vvv += vv[i] * vv[i];
    uvd += uv[i] * vv[i];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vvv);
  const bool u_floor = !(nu > eps), v_floor = !(nv > eps);
  if (clamped) *clamped = u_floor || v_floor;
  const double a = u_floor ? eps : nu;
  const double b = v_floor ? eps : nv;
  const double c = uvd / (a * b);
  return u.graph().emit(Tensor::scalar(c), {u, v}, [u, v, a, b, c, u_floor, v_floor](Graph& g, std::size_t self) {
    const double up = g.grad(self)[0];
    const Tensor& uv = u.value();
    const Tensor& vv = v.value();
    if (u.needs_grad()) {
      auto& gu = g.grad(u.id());
      for (std::size_t i = 0; i < gu.size(); ++i)
        gu[i] += up * (vv[i] / (a * b) - (u_floor ? 0.0 : c * uv[i] / (a * a)));
    }
    if (v.needs_grad()) {
      auto& gv = g.grad(v.id());
      for (std::size_t i = 0; i < gv.size(); ++i)
        gv[i] += up * (uv[i] / (a * b) - (v_floor ? 0.0 : c * vv[i] / (b * b)));
    }
  });
}

// -log softmax(logits)[label]
inline Var cross_entropy(Var logits, std::size_t label) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 1) throw DimensionError("cross_entropy expects a logit vector, got " + shape_string(lv.shape()));
  if (label >= lv.size()) {
    throw IndexError("cross_entropy label " + std::to_string(label) + " outside " + std::to_string(lv.size()) +
                     " classes");
  }
  Tensor p = kernels::softmax_rows(lv);
  std::size_t top = 0;
  for (std::size_t i = 1; i < lv.size(); ++i)
    if (lv[i] > lv[top]) top = i;
  const double mx = lv[top];
  // log-sum-exp as log1p of the non-max terms keeps precision for confident logits
  double rest = 0.0;
  for (std::size_t i = 0; i < lv.size(); ++i)
    if (i != top) rest += std::exp(lv[i] - mx);
  const double loss = std::log1p(rest) - (lv[label] - mx);
  return logits.graph().emit(Tensor::scalar(loss), {logits},
                             [logits, label, p = std::move(p)](Graph& g, std::size_t self) {
                               const double up = g.grad(self)[0];
                               auto& gl = g.grad(logits.id());
                               for (std::size_t i = 0; i < gl.size(); ++i)
                                 gl[i] += up * (p[i] - (i == label ? 1.0 : 0.0));
                             });
}

// Copy of the value with no gradient path.
inline Var detach(Var x) { return x.graph().constant(x.value()); }

}  // namespace latent_loop
