#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fpt/error.hpp"
#include "fpt/parallel.hpp"
#include "fpt/rng.hpp"

namespace fpt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct GradStore;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // leaf accumulation only; empty unless backward ran
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node<T>>> parents;
  // Distributes self_grad to the parents through the local Jacobian.
  std::function<void(const std::vector<T>&, GradStore<T>&)> backprop;
};

// Per-backward gradient buffers, external to the nodes so that concurrent
// backward passes over graphs sharing parameter leaves never race.
template <typename T>
struct GradStore {
  std::unordered_map<const Node<T>*, std::vector<T>> buffers;

  std::vector<T>& acc(const std::shared_ptr<Node<T>>& n) {
    auto& buf = buffers[n.get()];
    if (buf.size() != n->value.size()) buf.assign(n->value.size(), T(0));
    return buf;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_mode() { return detail::grad_mode_flag(); }

// Disables graph recording in scope (inference / evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
using LeafGradMap = std::unordered_map<const detail::Node<T>*, std::vector<T>>;

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return filled(s, T(0), requires_grad);
  }

  static Tensor filled(const Shape& s, T v, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = s;
    t.node_->value.assign(shape_numel(s), v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_values(const Shape& s, std::vector<T> v, bool requires_grad = false) {
    if (v.size() != shape_numel(s))
      throw ShapeError("tensor data length " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(s));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = s;
    t.node_->value = std::move(v);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_values({1}, {v}, requires_grad);
  }

  static Tensor randn(const Shape& s, Rng& rng, T stddev, bool requires_grad = false) {
    Tensor t = zeros(s, requires_grad);
    for (auto& x : t.node_->value) x = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  std::vector<T>& values() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  T item() const {
    if (size() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (!node_->leaf) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = rg;
    if (!rg) node_->grad.clear();
  }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<T>& grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Fresh leaf with copied data, detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return from_values(shape(), node_->value, requires_grad);
  }

  std::shared_ptr<Node> node() const { return node_; }

  // Internal: wrap an op result.
  static Tensor make_result(Shape s, std::vector<T> v,
                            std::vector<std::shared_ptr<Node>> parents,
                            std::function<void(const std::vector<T>&, detail::GradStore<T>&)> backprop) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(s);
    t.node_->value = std::move(v);
    bool track = grad_mode();
    bool any = false;
    if (track)
      for (const auto& p : parents)
        if (p->requires_grad) any = true;
    if (track && any) {
      t.node_->requires_grad = true;
      t.node_->leaf = false;
      t.node_->parents = std::move(parents);
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(T)) == 0;
}

// ---------------------------------------------------------------------------
// Computation graph and reverse-mode differentiation

template <typename T>
class ComputationGraph {
 public:
  explicit ComputationGraph(const Tensor<T>& root) : root_(root) {
    if (!root.defined()) throw ContractError("backward root is undefined");
    // Iterative post-order DFS over grad-requiring parents; the resulting
    // order is topological (inputs precede consumers) and deterministic.
    std::unordered_set<const detail::Node<T>*> visited;
    std::vector<std::pair<std::shared_ptr<detail::Node<T>>, std::size_t>> stack;
    if (root.node()->requires_grad) stack.push_back({root.node(), 0});
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next == 0 && visited.count(node.get())) {
        stack.pop_back();
        continue;
      }
      if (next < node->parents.size()) {
        auto child = node->parents[next++];
        if (child->requires_grad && !visited.count(child.get())) stack.push_back({child, 0});
      } else {
        if (!visited.count(node.get())) {
          visited.insert(node.get());
          order_.push_back(node);
        }
        stack.pop_back();
      }
    }
  }

  std::size_t node_count() const { return order_.size(); }

  // Accumulates leaf gradients into the leaves' own grad buffers.
  void backward() { run(nullptr); }

  // Accumulates leaf gradients into an external map instead; safe to call
  // concurrently on graphs that share parameter leaves.
  void backward_into(LeafGradMap<T>& sink) { run(&sink); }

 private:
  void run(LeafGradMap<T>* sink) {
    if (root_.size() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(root_.shape()));
    detail::GradStore<T> store;
    if (!root_.node()->requires_grad) return;  // nothing trainable upstream
    store.acc(root_.node())[0] = T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto& node = *it;
      auto found = store.buffers.find(node.get());
      if (found == store.buffers.end()) continue;
      if (node->backprop) node->backprop(found->second, store);
      if (node->leaf) {
        if (sink) {
          auto& buf = (*sink)[node.get()];
          if (buf.size() != node->value.size()) buf.assign(node->value.size(), T(0));
          const auto& g = found->second;
          for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
        } else {
          if (node->grad.size() != node->value.size()) node->grad.assign(node->value.size(), T(0));
          const auto& g = found->second;
          for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
        }
      }
      if (!node->leaf) store.buffers.erase(found);  // free intermediate buffers early
    }
  }

  Tensor<T> root_;
  std::vector<std::shared_ptr<detail::Node<T>>> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  ComputationGraph<T>(loss).backward();
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [pa = a.node(), pb = b.node()](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (pa->requires_grad) {
          auto& ga = st.acc(pa);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb->requires_grad) {
          auto& gb = st.acc(pb);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [pa = a.node(), pb = b.node()](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (pa->requires_grad) {
          auto& ga = st.acc(pa);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pb->requires_grad) {
          auto& gb = st.acc(pb);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a.node(), b.node()},
      [pa = a.node(), pb = b.node()](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (pa->requires_grad) {
          auto& ga = st.acc(pa);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->value[i];
        }
        if (pb->requires_grad) {
          auto& gb = st.acc(pb);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->value[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node()},
                                [pa = a.node(), c](const std::vector<T>& g, detail::GradStore<T>& st) {
                                  if (!pa->requires_grad) return;
                                  auto& ga = st.acc(pa);
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                                });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a.node()},
                                [pa = a.node()](const std::vector<T>& g, detail::GradStore<T>& st) {
                                  if (!pa->requires_grad) return;
                                  auto& ga = st.acc(pa);
                                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                });
}

// Adds a length-c row vector to every row of a [r x c] matrix.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
  if (a.rank() != 2 || v.rank() != 1 || a.dim(1) != v.dim(0))
    throw ShapeError("add_rowvec: need [r x c] + [c], got " + shape_str(a.shape()) + " + " +
                     shape_str(v.shape()));
  std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& vv = v.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + vv[j];
  return Tensor<T>::make_result(
      a.shape(), std::move(out), {a.node(), v.node()},
      [pa = a.node(), pv = v.node(), r, c](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (pa->requires_grad) {
          auto& ga = st.acc(pa);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (pv->requires_grad) {
          auto& gv = st.acc(pv);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gv[j] += g[i * c + j];
        }
      });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  T* ov = out.data();
  auto forward_rows = [&](std::size_t rb, std::size_t re) {
    for (std::size_t i = rb; i < re; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        T aip = av[i * k + p];
        const T* brow = bv + p * n;
        T* orow = ov + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
  };
  if (m >= 8 && m * n * k >= 1u << 16)
    parallel_chunks(m, forward_rows);
  else
    forward_rows(0, m);

  return Tensor<T>::make_result(
      {m, n}, std::move(out), {a.node(), b.node()},
      [pa = a.node(), pb = b.node(), m, k, n](const std::vector<T>& g, detail::GradStore<T>& st) {
        const T* gv = g.data();
        if (pa->requires_grad) {
          auto& ga = st.acc(pa);
          T* gad = ga.data();
          const T* bv = pb->value.data();
          auto rows = [&](std::size_t rb, std::size_t re) {
            for (std::size_t i = rb; i < re; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                T acc = T(0);
                const T* grow = gv + i * n;
                const T* brow = bv + p * n;
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                gad[i * k + p] += acc;
              }
          };
          if (m >= 8 && m * n * k >= 1u << 16)
            parallel_chunks(m, rows);
          else
            rows(0, m);
        }
        if (pb->requires_grad) {
          auto& gb = st.acc(pb);
          T* gbd = gb.data();
          const T* av = pa->value.data();
          auto cols = [&](std::size_t kb, std::size_t ke) {
            for (std::size_t i = 0; i < m; ++i) {
              const T* grow = gv + i * n;
              for (std::size_t p = kb; p < ke; ++p) {
                T aip = av[i * k + p];
                T* brow = gbd + p * n;
                for (std::size_t j = 0; j < n; ++j) brow[j] += aip * grow[j];
              }
            }
          };
          if (k >= 8 && m * n * k >= 1u << 16)
            parallel_chunks(k, cols);
          else
            cols(0, k);
        }
      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: need rank 2, got " + shape_str(a.shape()));
  std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return Tensor<T>::make_result({c, r}, std::move(out), {a.node()},
                                [pa = a.node(), r, c](const std::vector<T>& g, detail::GradStore<T>& st) {
                                  if (!pa->requires_grad) return;
                                  auto& ga = st.acc(pa);
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                                });
}

// ---------------------------------------------------------------------------
// Nonlinearities and reductions

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1, n = s[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const auto& xv = x.values();
  for (T v : xv)
    if (std::isnan(static_cast<double>(v))) throw NumericError("softmax: NaN input");
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      auto at = [&](std::size_t i) { return (o * n + i) * inner + in; };
      T mx = xv[at(0)];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[at(i)]);
      T sum = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        T e = std::exp(xv[at(i)] - mx);
        out[at(i)] = e;
        sum += e;
      }
      T inv = T(1) / sum;
      for (std::size_t i = 0; i < n; ++i) out[at(i)] *= inv;
    }
  return Tensor<T>::make_result(
      s, out, {x.node()},
      [px = x.node(), outer, inner, n, y = out](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (!px->requires_grad) return;
        auto& gx = st.acc(px);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t in = 0; in < inner; ++in) {
            auto at = [&](std::size_t i) { return (o * n + i) * inner + in; };
            T dot = T(0);
            for (std::size_t i = 0; i < n; ++i) dot += g[at(i)] * y[at(i)];
            for (std::size_t i = 0; i < n; ++i) gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
          }
      });
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// affine transform gain * xhat + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
  std::size_t d = x.shape().back();
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
    throw ShapeError("layer_norm: gain/bias must be [d] with d = " + std::to_string(d));
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  std::size_t rows = x.size() / d;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      T c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (row[j] - mean) * istd;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [px = x.node(), pg = gain.node(), pb = bias.node(), rows, d, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (pg->requires_grad) {
          auto& gg = st.acc(pg);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (pb->requires_grad) {
          auto& gb = st.acc(pb);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (px->requires_grad) {
          auto& gx = st.acc(px);
          const auto& gv = pg->value;
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_gy = T(0), mean_gyx = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              T gy = g[r * d + j] * gv[j];
              mean_gy += gy;
              mean_gyx += gy * xhat[r * d + j];
            }
            mean_gy /= static_cast<T>(d);
            mean_gyx /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              T gy = g[r * d + j] * gv[j];
              gx[r * d + j] += (gy - mean_gy - xhat[r * d + j] * mean_gyx) * inv_std[r];
            }
          }
        }
      });
}

// tanh-approximation GELU (GPT-2 convention)
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kSqrt2OverPi = 0.79788456080286535587989211986876;
  constexpr double kCubic = 0.044715;
  const auto& xv = x.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = static_cast<double>(xv[i]);
    double u = kSqrt2OverPi * (v + kCubic * v * v * v);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x.node()},
      [px = x.node()](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (!px->requires_grad) return;
        auto& gx = st.acc(px);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double v = static_cast<double>(px->value[i]);
          double u = kSqrt2OverPi * (v + kCubic * v * v * v);
          double th = std::tanh(u);
          double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
          double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
          gx[i] += g[i] * static_cast<T>(d);
        }
      });
}

// Mean negative log-softmax of the target entries; logits [b x c].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [b x c]");
  std::size_t b = logits.dim(0), c = logits.dim(1);
  if (targets.size() != b)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch " +
                     std::to_string(b));
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= c)
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(c) + ")");
  const auto& lv = logits.values();
  std::vector<T> probs(logits.size());
  T loss = T(0);
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = lv.data() + i * c;
    T mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      T e = std::exp(row[j] - mx);
      probs[i * c + j] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] *= inv;
    loss += std::log(sum) + mx - row[targets[i]];
  }
  loss /= static_cast<T>(b);
  std::vector<int> tgt(targets.begin(), targets.end());
  return Tensor<T>::make_result(
      {1}, {loss}, {logits.node()},
      [pl = logits.node(), probs = std::move(probs), tgt = std::move(tgt), b,
       c](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (!pl->requires_grad) return;
        auto& gl = st.acc(pl);
        T scale = g[0] / static_cast<T>(b);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += scale * probs[i * c + j];
          gl[i * c + static_cast<std::size_t>(tgt[i])] -= scale;
        }
      });
}

// Rows of an embedding table selected by id; gradient scatters back.
template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding_rows: table must be [v x d]");
  std::size_t v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw IndexError("embedding_rows: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(v) + ")");
  std::size_t t = ids.size();
  std::vector<T> out(t * d);
  const auto& tv = table.values();
  for (std::size_t i = 0; i < t; ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  std::vector<int> idv(ids.begin(), ids.end());
  return Tensor<T>::make_result(
      {t, d}, std::move(out), {table.node()},
      [pt = table.node(), idv = std::move(idv), d](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (!pt->requires_grad) return;
        auto& gt = st.acc(pt);
        for (std::size_t i = 0; i < idv.size(); ++i) {
          T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
          const T* src = g.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      });
}

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("mean_rows: need [r x c]");
  std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(c, T(0));
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av[i * c + j];
  for (auto& v : out) v /= static_cast<T>(r);
  return Tensor<T>::make_result({c}, std::move(out), {a.node()},
                                [pa = a.node(), r, c](const std::vector<T>& g, detail::GradStore<T>& st) {
                                  if (!pa->requires_grad) return;
                                  auto& ga = st.acc(pa);
                                  for (std::size_t i = 0; i < r; ++i)
                                    for (std::size_t j = 0; j < c; ++j)
                                      ga[i * c + j] += g[j] / static_cast<T>(r);
                                });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return Tensor<T>::make_result({1}, {s}, {a.node()},
                                [pa = a.node()](const std::vector<T>& g, detail::GradStore<T>& st) {
                                  if (!pa->requires_grad) return;
                                  auto& ga = st.acc(pa);
                                  for (auto& v : ga) v += g[0];
                                });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (a.rank() != 2) throw ShapeError("slice_rows: need [r x c]");
  std::size_t r = a.dim(0), c = a.dim(1);
  if (start + count > r) throw ShapeError("slice_rows: range out of bounds");
  std::vector<T> out(count * c);
  std::copy_n(a.values().data() + start * c, count * c, out.data());
  return Tensor<T>::make_result(
      {count, c}, std::move(out), {a.node()},
      [pa = a.node(), start, c](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (!pa->requires_grad) return;
        auto& ga = st.acc(pa);
        for (std::size_t i = 0; i < g.size(); ++i) ga[start * c + i] += g[i];
      });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (a.rank() != 2) throw ShapeError("slice_cols: need [r x c]");
  std::size_t r = a.dim(0), c = a.dim(1);
  if (start + count > c) throw ShapeError("slice_cols: range out of bounds");
  std::vector<T> out(r * count);
  const auto& av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(av.data() + i * c + start, count, out.data() + i * count);
  return Tensor<T>::make_result(
      {r, count}, std::move(out), {a.node()},
      [pa = a.node(), start, r, c, count](const std::vector<T>& g, detail::GradStore<T>& st) {
        if (!pa->requires_grad) return;
        auto& ga = st.acc(pa);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < count; ++j) ga[i * c + start + j] += g[i * count + j];
      });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  std::size_t r = parts[0].dim(0), total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != r) throw ShapeError("concat_cols: row mismatch");
    total += p.dim(1);
  }
  std::vector<T> out(r * total);
  std::size_t off = 0;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    std::size_t c = p.dim(1);
    const auto& pv = p.values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pv.data() + i * c, c, out.data() + i * total + off);
    off += c;
    nodes.push_back(p.node());
    widths.push_back(c);
  }
  return Tensor<T>::make_result(
      {r, total}, std::move(out), nodes,
      [nodes, widths, r, total](const std::vector<T>& g, detail::GradStore<T>& st) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          std::size_t c = widths[k];
          if (nodes[k]->requires_grad) {
            auto& gp = st.acc(nodes[k]);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
          }
          off += c;
        }
      });
}

// Replaces entries above the diagonal of a [t x t] score matrix with a large
// negative constant so softmax sends them to zero; gradient flows only
// through the kept entries.
template <typename T>
Tensor<T> causal_mask(const Tensor<T>& scores) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
    throw ShapeError("causal_mask: need square [t x t], got " + shape_str(scores.shape()));
  std::size_t t = scores.dim(0);
  const T neg = static_cast<T>(-1e30);
  std::vector<T> out = scores.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) out[i * t + j] = neg;
  return Tensor<T>::make_result(scores.shape(), std::move(out), {scores.node()},
                                [ps = scores.node(), t](const std::vector<T>& g, detail::GradStore<T>& st) {
                                  if (!ps->requires_grad) return;
                                  auto& gs = st.acc(ps);
                                  for (std::size_t i = 0; i < t; ++i)
                                    for (std::size_t j = 0; j <= i; ++j) gs[i * t + j] += g[i * t + j];
                                });
}

}  // namespace fpt
