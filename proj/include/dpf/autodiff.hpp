#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dpf/errors.hpp"
#include "dpf/tensor.hpp"

namespace dpf::ad {

struct Node;

/// Handle to a node of the dynamically built computation graph (the tape).
/// Copying a Var shares the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  bool defined() const { return n_ != nullptr; }
  Node* node() const { return n_.get(); }
  const Tensor& value() const;
  Tensor& grad() const;
  bool requires_grad() const;

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().data[0]; }

 private:
  std::shared_ptr<Node> n_;
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  bool trainable = false;
  std::string name;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor::zeros(value.shape);
  }
  void zero_grad() { grad = Tensor::zeros(value.shape); }
};

inline const Tensor& Var::value() const { return n_->value; }
inline Tensor& Var::grad() const {
  n_->ensure_grad();
  return n_->grad;
}
inline bool Var::requires_grad() const { return n_->requires_grad; }

/// When gradient recording is off, ops produce value-only nodes. Used for
/// evaluation, where the tape would only waste memory.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }

 private:
  bool prev_;
};

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}
inline Var constant(double v) { return constant(Tensor::scalar(v)); }

/// Trainable leaf. Gradients accumulate into it across backward calls until
/// zeroed by the optimizer.
inline Var leaf(Tensor t, std::string name = "") {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->trainable = true;
  n->name = std::move(name);
  return Var(std::move(n));
}

inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (grad_mode() && any) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(n));
}

/// Value copy with no history; contributes zero gradient upstream.
inline Var detach(const Var& x) { return constant(x.value()); }

[[noreturn]] inline void shape_error(const std::string& op, const Var& a, const Var& b) {
  throw UsageError("shape mismatch in " + op + ": " + a.value().shape_str() + " vs " +
                   b.value().shape_str());
}

namespace detail {

enum class Bcast { Same, Scalar, Row };

inline Bcast classify(const Var& a, const Var& b, const std::string& op) {
  if (a.value().same_shape(b.value())) return Bcast::Same;
  if (b.value().numel() == 1) return Bcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
  shape_error(op, a, b);
}

}  // namespace detail

/// Elementwise binary op; the second operand may be a scalar or a row vector
/// broadcast over the first operand's rows.
template <class F, class DFa, class DFb>
Var binary_op(const std::string& opname, const Var& a, const Var& b, F f, DFa dfa, DFb dfb) {
  detail::Bcast bc = detail::classify(a, b, opname);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = Tensor::zeros(av.shape);
  std::size_t m = av.cols();
  for (std::size_t i = 0; i < av.numel(); ++i) {
    double bi = bc == detail::Bcast::Same    ? bv.data[i]
                : bc == detail::Bcast::Scalar ? bv.data[0]
                                              : bv.data[i % m];
    out.data[i] = f(av.data[i], bi);
  }
  return make_node(std::move(out), {a, b}, [a, b, bc, m, f, dfa, dfb](Node& n) {
    Node* pa = a.node();
    Node* pb = b.node();
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    const Tensor& av2 = pa->value;
    const Tensor& bv2 = pb->value;
    for (std::size_t i = 0; i < n.value.numel(); ++i) {
      std::size_t bi = bc == detail::Bcast::Same    ? i
                       : bc == detail::Bcast::Scalar ? 0
                                                     : i % m;
      double g = n.grad.data[i];
      if (pa->requires_grad) pa->grad.data[i] += g * dfa(av2.data[i], bv2.data[bi]);
      if (pb->requires_grad) pb->grad.data[bi] += g * dfb(av2.data[i], bv2.data[bi]);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}
inline Var sub(const Var& a, const Var& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}
inline Var mul(const Var& a, const Var& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}
inline Var div(const Var& a, const Var& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}
inline Var atan2v(const Var& y, const Var& x) {
  return binary_op(
      "atan2", y, x, [](double yy, double xx) { return std::atan2(yy, xx); },
      // Zero subgradient at the origin, where atan2 itself is the convention 0.
      [](double yy, double xx) {
        double r2 = xx * xx + yy * yy;
        return r2 == 0.0 ? 0.0 : xx / r2;
      },
      [](double yy, double xx) {
        double r2 = xx * xx + yy * yy;
        return r2 == 0.0 ? 0.0 : -yy / r2;
      });
}

template <class F, class DF>
Var unary_op(const Var& a, F f, DF df) {
  const Tensor& av = a.value();
  Tensor out = Tensor::zeros(av.shape);
  for (std::size_t i = 0; i < av.numel(); ++i) out.data[i] = f(av.data[i]);
  return make_node(std::move(out), {a}, [a, df](Node& n) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.value.numel(); ++i) {
      pa->grad.data[i] += n.grad.data[i] * df(pa->value.data[i], n.value.data[i]);
    }
  });
}

inline Var scale(const Var& a, double c) {
  return unary_op(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}
inline Var offset(const Var& a, double c) {
  return unary_op(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Var neg(const Var& a) { return scale(a, -1.0); }
inline Var relu(const Var& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Var tanhv(const Var& a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(const Var& a) {
  return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}
inline Var expv(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}
inline Var logv(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}
inline Var square(const Var& a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}
inline Var sinv(const Var& a) {
  return unary_op(a, [](double x) { return std::sin(x); },
                  [](double x, double) { return std::cos(x); });
}
inline Var cosv(const Var& a) {
  return unary_op(a, [](double x) { return std::cos(x); },
                  [](double x, double) { return -std::sin(x); });
}
/// Wraps angles to (-pi, pi]; piecewise identity, so unit gradient.
inline Var wrapv(const Var& a) {
  return unary_op(a, [](double x) { return wrap_angle(x); },
                  [](double, double) { return 1.0; });
}

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  std::size_t n = av.rows(), k = av.cols(), k2 = bv.rows(), m = bv.cols();
  if (k != k2) shape_error("matmul", a, b);
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double aip = av.data[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv.data[p * m];
      double* orow = &out.data[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_node(std::move(out), {a, b}, [a, b, n, k, m](Node& nd) {
    Node* pa = a.node();
    Node* pb = b.node();
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          double g = nd.grad.data[i * m + j];
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) {
            pa->grad.data[i * k + p] += g * pb->value.data[p * m + j];
          }
        }
      }
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double aip = pa->value.data[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) {
            pb->grad.data[p * m + j] += aip * nd.grad.data[i * m + j];
          }
        }
      }
    }
  });
}

inline Var sum_all(const Var& a) {
  double s = 0;
  for (double v : a.value().data) s += v;
  return make_node(Tensor::scalar(s), {a}, [a](Node& n) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (double& g : pa->grad.data) g += n.grad.data[0];
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a.value().numel()); }

/// Mean over rows: (n x m) -> (1 x m).
inline Var mean_rows(const Var& a) {
  std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::zeros({1, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[j] += a.value().data[i * m + j];
  for (std::size_t j = 0; j < m; ++j) out.data[j] /= static_cast<double>(n);
  return make_node(std::move(out), {a}, [a, n, m](Node& nd) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        pa->grad.data[i * m + j] += nd.grad.data[j] / static_cast<double>(n);
  });
}

/// Sum over columns: (n x m) -> (n x 1).
inline Var sum_cols(const Var& a) {
  std::size_t n = a.rows(), m = a.cols();
  Tensor out = Tensor::zeros({n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i] += a.value().data[i * m + j];
  return make_node(std::move(out), {a}, [a, n, m](Node& nd) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) pa->grad.data[i * m + j] += nd.grad.data[i];
  });
}

/// log(sum(exp(x))) over all elements, computed stably. Gradient is softmax(x).
inline Var logsumexp_all(const Var& a) {
  const Tensor& av = a.value();
  double mx = av.data[0];
  for (double v : av.data) mx = std::max(mx, v);
  double s = 0;
  for (double v : av.data) s += std::exp(v - mx);
  double out = mx + std::log(s);
  return make_node(Tensor::scalar(out), {a}, [a, mx, s](Node& n) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < pa->value.numel(); ++i) {
      pa->grad.data[i] += n.grad.data[0] * std::exp(pa->value.data[i] - mx) / s;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_rows: empty input");
  std::size_t m = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != m) shape_error("concat_rows", parts[0], p);
    total += p.rows();
  }
  Tensor out = Tensor::zeros({total, m});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off);
    off += p.value().numel();
  }
  return make_node(std::move(out), parts, [parts](Node& nd) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      Node* pp = p.node();
      std::size_t cnt = pp->value.numel();
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (std::size_t i = 0; i < cnt; ++i) pp->grad.data[i] += nd.grad.data[off + i];
      }
      off += cnt;
    }
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: empty input");
  std::size_t n = parts[0].rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != n) shape_error("concat_cols", parts[0], p);
    total += p.cols();
  }
  Tensor out = Tensor::zeros({n, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::size_t m = p.cols();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        out.data[i * total + off + j] = p.value().data[i * m + j];
    off += m;
  }
  return make_node(std::move(out), parts, [parts, n, total](Node& nd) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      Node* pp = p.node();
      std::size_t m = pp->value.cols();
      if (pp->requires_grad) {
        pp->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            pp->grad.data[i * m + j] += nd.grad.data[i * total + off + j];
      }
      off += m;
    }
  });
}

inline Var slice_cols(const Var& a, std::size_t j0, std::size_t j1) {
  std::size_t n = a.rows(), m = a.cols();
  if (j1 > m || j0 >= j1) throw UsageError("slice_cols: bad range");
  std::size_t w = j1 - j0;
  Tensor out = Tensor::zeros({n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.data[i * w + j] = a.value().data[i * m + j0 + j];
  return make_node(std::move(out), {a}, [a, n, m, j0, w](Node& nd) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j)
        pa->grad.data[i * m + j0 + j] += nd.grad.data[i * w + j];
  });
}

inline Var slice_rows(const Var& a, std::size_t i0, std::size_t i1) {
  std::size_t n = a.rows(), m = a.cols();
  if (i1 > n || i0 >= i1) throw UsageError("slice_rows: bad range");
  std::size_t h = i1 - i0;
  Tensor out = Tensor::zeros({h, m});
  std::copy(a.value().data.begin() + i0 * m, a.value().data.begin() + i1 * m, out.data.begin());
  return make_node(std::move(out), {a}, [a, m, i0, h](Node& nd) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < m; ++j)
        pa->grad.data[(i0 + i) * m + j] += nd.grad.data[i * m + j];
  });
}

/// Repeats a (1 x m) row n times -> (n x m). Gradient sums over the copies.
inline Var repeat_rows(const Var& a, std::size_t n) {
  if (a.rows() != 1) throw UsageError("repeat_rows: input must have one row");
  std::size_t m = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.data[i * m + j] = a.value().data[j];
  return make_node(std::move(out), {a}, [a, n, m](Node& nd) {
    Node* pa = a.node();
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) pa->grad.data[j] += nd.grad.data[i * m + j];
  });
}

/// Reverse-mode sweep from `root`. Seeds the root gradient (default: ones,
/// which for a scalar loss is the usual d(loss)/d(loss) = 1) and accumulates
/// gradients into every reachable node that requires them.
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root.defined()) throw UsageError("backward: undefined root");
  if (!root.node()->requires_grad) {
    throw UsageError("backward: root does not depend on any trainable parameter");
  }
  // Iterative post-order topological sort.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    std::size_t next_child;
  };
  std::vector<Frame> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_child < f.node->parents.size()) {
      Node* child = f.node->parents[f.next_child++].node();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  if (seed) {
    if (!seed->same_shape(root.value())) {
      throw UsageError("backward: seed gradient shape does not match output");
    }
    for (std::size_t i = 0; i < seed->numel(); ++i) root.node()->grad.data[i] += seed->data[i];
  } else {
    for (double& g : root.node()->grad.data) g += 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* nd = *it;
    if (nd->backward_fn) nd->backward_fn(*nd);
  }
}

}  // namespace dpf::ad
