#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "scaledet/tensor.hpp"

namespace scaledet {

// Reverse-mode autodiff over Tensor. Ops build a DAG of Nodes; backward()
// walks it once in reverse topological order. Gradients accumulate, so
// callers zero parameter grads between optimization steps.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // same shape as value once touched
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;  // scatter this->grad into parents

  void ensure_grad() {
    if (grad.size() != value.size()) {
      grad = Tensor::zeros(value.shape());
    }
  }
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

inline Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

/// A leaf that participates in differentiation (parameter or probed input).
inline Var leaf(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

namespace detail {

inline bool any_grad(const std::vector<Var>& parents) {
  for (const auto& p : parents) {
    if (p->requires_grad) return true;
  }
  return false;
}

inline Var make_node(Tensor value, std::vector<Var> parents,
                     std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (any_grad(parents)) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_str(a->value.shape()) + " vs " +
                                Tensor::shape_str(b->value.shape()));
  }
}

using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenConstMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar root. Fresh interior nodes
/// start with zero grad; reused leaves keep whatever was already there.
inline void backward(const Var& root) {
  if (root->value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar");
  }
  if (!root->requires_grad) return;

  // Iterative DFS post-order over parents.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      for (auto& p : n->parents) p->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    if (b->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i];
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    if (b->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) b->grad[i] -= n.grad[i];
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * b->value[i];
    if (b->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i] * a->value[i];
  });
}

inline Var div(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "div");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] /= b->value[i];
  return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) {
      const double inv = 1.0 / b->value[i];
      if (a->requires_grad) a->grad[i] += n.grad[i] * inv;
      if (b->requires_grad) b->grad[i] -= n.grad[i] * a->value[i] * inv * inv;
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] *= c;
  return detail::make_node(std::move(out), {a}, [a, c](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * c;
  });
}

inline Var add_scalar(const Var& a, double c) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] += c;
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
  });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Var relu(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i)
      if (a->value[i] > 0.0) a->grad[i] += n.grad[i];
  });
}

inline Var abs_op(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) {
      if (a->value[i] > 0.0) a->grad[i] += n.grad[i];
      else if (a->value[i] < 0.0) a->grad[i] -= n.grad[i];
    }
  });
}

inline Var exp_op(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  auto n = detail::make_node(std::move(out), {a}, nullptr);
  if (n->requires_grad) {
    n->backward_fn = [a](Node& nn) {
      for (int i = 0; i < nn.grad.size(); ++i) a->grad[i] += nn.grad[i] * nn.value[i];
    };
  }
  return n;
}

inline Var log_op(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::log(out[i]);
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] / a->value[i];
  });
}

inline Var sqrt_op(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  auto n = detail::make_node(std::move(out), {a}, nullptr);
  if (n->requires_grad) {
    n->backward_fn = [a](Node& nn) {
      for (int i = 0; i < nn.grad.size(); ++i) a->grad[i] += nn.grad[i] * 0.5 / nn.value[i];
    };
  }
  return n;
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  auto n = detail::make_node(std::move(out), {a}, nullptr);
  if (n->requires_grad) {
    n->backward_fn = [a](Node& nn) {
      for (int i = 0; i < nn.grad.size(); ++i) {
        const double s = nn.value[i];
        a->grad[i] += nn.grad[i] * s * (1.0 - s);
      }
    };
  }
  return n;
}

/// log(1 + e^x), computed stably; derivative is sigmoid(x).
inline Var softplus(const Var& a) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) {
    const double x = out[i];
    out[i] = x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
  }
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) {
      const double x = a->value[i];
      const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      a->grad[i] += n.grad[i] * s;
    }
  });
}

/// max(x, c) elementwise against a constant; subgradient 0 on the clamped side.
inline Var clamp_min(const Var& a, double c) {
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::max(out[i], c);
  return detail::make_node(std::move(out), {a}, [a, c](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i)
      if (a->value[i] > c) a->grad[i] += n.grad[i];
  });
}

inline Var min_ew(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "min_ew");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::min(out[i], b->value[i]);
  return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) {
      if (a->value[i] <= b->value[i]) {
        if (a->requires_grad) a->grad[i] += n.grad[i];
      } else if (b->requires_grad) {
        b->grad[i] += n.grad[i];
      }
    }
  });
}

inline Var max_ew(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "max_ew");
  Tensor out = a->value;
  for (int i = 0; i < out.size(); ++i) out[i] = std::max(out[i], b->value[i]);
  return detail::make_node(std::move(out), {a, b}, [a, b](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) {
      if (a->value[i] >= b->value[i]) {
        if (a->requires_grad) a->grad[i] += n.grad[i];
      } else if (b->requires_grad) {
        b->grad[i] += n.grad[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    for (int i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
  });
}

inline Var transpose(const Var& a) {
  const int r = a->value.dim(0), c = a->value.dim(1);
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(j, i) = a->value.at(i, j);
  return detail::make_node(std::move(out), {a}, [a, r, c](Node& n) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a->grad[i * c + j] += n.grad.at(j, i);
  });
}

inline Var slice_cols(const Var& a, int c0, int c1) {
  const int r = a->value.dim(0), c = a->value.dim(1);
  if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  Tensor out({r, c1 - c0});
  for (int i = 0; i < r; ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = a->value.at(i, j);
  return detail::make_node(std::move(out), {a}, [a, c0, c1, c](Node& n) {
    const int w = c1 - c0;
    for (int i = 0; i < n.grad.dim(0); ++i)
      for (int j = 0; j < w; ++j) a->grad[i * c + c0 + j] += n.grad.at(i, j);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const int r = parts[0]->value.dim(0);
  int total = 0;
  for (const auto& p : parts) {
    if (p->value.dim(0) != r) throw std::invalid_argument("concat_cols: row mismatch");
    total += p->value.dim(1);
  }
  Tensor out({r, total});
  int off = 0;
  for (const auto& p : parts) {
    const int w = p->value.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) out.at(i, off + j) = p->value.at(i, j);
    off += w;
  }
  return detail::make_node(std::move(out), parts, [parts, total](Node& n) {
    int off2 = 0;
    for (const auto& p : parts) {
      const int w = p->value.dim(1);
      if (p->requires_grad) {
        for (int i = 0; i < n.grad.dim(0); ++i)
          for (int j = 0; j < w; ++j) p->grad[i * w + j] += n.grad[i * total + off2 + j];
      }
      off2 += w;
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int c = parts[0]->value.dim(1);
  int total = 0;
  for (const auto& p : parts) {
    if (p->value.dim(1) != c) throw std::invalid_argument("concat_rows: col mismatch");
    total += p->value.dim(0);
  }
  Tensor out({total, c});
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p->value.size(); ++i) out[off + i] = p->value[i];
    off += p->value.size();
  }
  return detail::make_node(std::move(out), parts, [parts](Node& n) {
    int off2 = 0;
    for (const auto& p : parts) {
      if (p->requires_grad)
        for (int i = 0; i < p->grad.size(); ++i) p->grad[i] += n.grad[off2 + i];
      off2 += p->value.size();
    }
  });
}

/// Row gather by constant indices (rows may repeat).
inline Var gather_rows(const Var& a, const std::vector<int>& idx) {
  const int c = a->value.dim(1);
  Tensor out({static_cast<int>(idx.size()), c});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (int j = 0; j < c; ++j) out.at(static_cast<int>(i), j) = a->value.at(idx[i], j);
  return detail::make_node(std::move(out), {a}, [a, idx, c](Node& n) {
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < c; ++j) a->grad[idx[i] * c + j] += n.grad.at(static_cast<int>(i), j);
  });
}

/// Stacks scalar nodes into a length-n vector.
inline Var stack_scalars(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_scalars: empty");
  Tensor out({static_cast<int>(xs.size())});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->value.size() != 1) throw std::invalid_argument("stack_scalars: non-scalar");
    out[static_cast<int>(i)] = xs[i]->value[0];
  }
  return detail::make_node(std::move(out), xs, [xs](Node& n) {
    for (std::size_t i = 0; i < xs.size(); ++i)
      if (xs[i]->requires_grad) xs[i]->grad[0] += n.grad[static_cast<int>(i)];
  });
}

// ---------------------------------------------------------------------------
// Broadcast helpers over [R, C] matrices
// ---------------------------------------------------------------------------

inline Var add_rowvec(const Var& x, const Var& v) {
  const int r = x->value.dim(0), c = x->value.dim(1);
  if (v->value.size() != c) throw std::invalid_argument("add_rowvec: width mismatch");
  Tensor out = x->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) += v->value[j];
  return detail::make_node(std::move(out), {x, v}, [x, v, r, c](Node& n) {
    if (x->requires_grad)
      for (int i = 0; i < n.grad.size(); ++i) x->grad[i] += n.grad[i];
    if (v->requires_grad)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) v->grad[j] += n.grad.at(i, j);
  });
}

inline Var mul_rowvec(const Var& x, const Var& v) {
  const int r = x->value.dim(0), c = x->value.dim(1);
  if (v->value.size() != c) throw std::invalid_argument("mul_rowvec: width mismatch");
  Tensor out = x->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) *= v->value[j];
  return detail::make_node(std::move(out), {x, v}, [x, v, r, c](Node& n) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        if (x->requires_grad) x->grad[i * c + j] += n.grad.at(i, j) * v->value[j];
        if (v->requires_grad) v->grad[j] += n.grad.at(i, j) * x->value.at(i, j);
      }
  });
}

/// Multiplies row i of x by s[i].
inline Var scale_rows(const Var& x, const Var& s) {
  const int r = x->value.dim(0), c = x->value.dim(1);
  if (s->value.size() != r) throw std::invalid_argument("scale_rows: length mismatch");
  Tensor out = x->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) *= s->value[i];
  return detail::make_node(std::move(out), {x, s}, [x, s, r, c](Node& n) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        if (x->requires_grad) x->grad[i * c + j] += n.grad.at(i, j) * s->value[i];
        if (s->requires_grad) s->grad[i] += n.grad.at(i, j) * x->value.at(i, j);
      }
  });
}

/// Subtracts v[i] from every entry of row i.
inline Var sub_colvec(const Var& x, const Var& v) {
  const int r = x->value.dim(0), c = x->value.dim(1);
  if (v->value.size() != r) throw std::invalid_argument("sub_colvec: length mismatch");
  Tensor out = x->value;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.at(i, j) -= v->value[i];
  return detail::make_node(std::move(out), {x, v}, [x, v, r, c](Node& n) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        if (x->requires_grad) x->grad[i * c + j] += n.grad.at(i, j);
        if (v->requires_grad) v->grad[i] -= n.grad.at(i, j);
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return detail::make_node(std::move(out), {a}, [a](Node& n) {
    const double g = n.grad[0];
    for (int i = 0; i < a->grad.size(); ++i) a->grad[i] += g;
  });
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / a->value.size()); }

/// Sums over columns: [R, C] -> [R].
inline Var sum_cols(const Var& a) {
  const int r = a->value.dim(0), c = a->value.dim(1);
  Tensor out({r});
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += a->value.at(i, j);
    out[i] = s;
  }
  return detail::make_node(std::move(out), {a}, [a, r, c](Node& n) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a->grad[i * c + j] += n.grad[i];
  });
}

/// Sums over rows: [R, C] -> [C].
inline Var sum_rows(const Var& a) {
  const int r = a->value.dim(0), c = a->value.dim(1);
  Tensor out({c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[j] += a->value.at(i, j);
  return detail::make_node(std::move(out), {a}, [a, r, c](Node& n) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) a->grad[i * c + j] += n.grad[j];
  });
}

/// Sums consecutive groups of `group` rows: [G*group, C] -> [G, C].
inline Var sum_groups(const Var& a, int group) {
  const int rows = a->value.dim(0), c = a->value.dim(1);
  if (rows % group != 0) throw std::invalid_argument("sum_groups: rows not divisible");
  const int g = rows / group;
  Tensor out({g, c});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out.at(i / group, j) += a->value.at(i, j);
  return detail::make_node(std::move(out), {a}, [a, rows, c, group](Node& n) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < c; ++j) a->grad[i * c + j] += n.grad.at(i / group, j);
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
  const int r = a->value.dim(0), k = a->value.dim(1);
  const int k2 = b->value.dim(0), c = b->value.dim(1);
  if (k != k2) throw std::invalid_argument("matmul: inner dimension mismatch");
  Tensor out({r, c});
  {
    detail::EigenConstMap ma(a->value.data(), r, k);
    detail::EigenConstMap mb(b->value.data(), k, c);
    detail::EigenMap mo(out.data(), r, c);
    mo.noalias() = ma * mb;
  }
  return detail::make_node(std::move(out), {a, b}, [a, b, r, k, c](Node& n) {
    detail::EigenConstMap go(n.grad.data(), r, c);
    if (a->requires_grad) {
      detail::EigenConstMap mb(b->value.data(), k, c);
      detail::EigenMap ga(a->grad.data(), r, k);
      ga.noalias() += go * mb.transpose();
    }
    if (b->requires_grad) {
      detail::EigenConstMap ma(a->value.data(), r, k);
      detail::EigenMap gb(b->grad.data(), k, c);
      gb.noalias() += ma.transpose() * go;
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

/// Row-wise softmax of an [R, C] matrix.
inline Var softmax_rows(const Var& a) {
  const int r = a->value.dim(0), c = a->value.dim(1);
  Tensor out({r, c});
  for (int i = 0; i < r; ++i) {
    double m = a->value.at(i, 0);
    for (int j = 1; j < c; ++j) m = std::max(m, a->value.at(i, j));
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(a->value.at(i, j) - m);
      out.at(i, j) = e;
      z += e;
    }
    for (int j = 0; j < c; ++j) out.at(i, j) /= z;
  }
  auto n = detail::make_node(std::move(out), {a}, nullptr);
  if (n->requires_grad) {
    n->backward_fn = [a, r, c](Node& nn) {
      for (int i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += nn.grad.at(i, j) * nn.value.at(i, j);
        for (int j = 0; j < c; ++j) {
          a->grad[i * c + j] += nn.value.at(i, j) * (nn.grad.at(i, j) - dot);
        }
      }
    };
  }
  return n;
}

/// Row-wise layer normalization with affine parameters gamma, beta (each [C]).
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta,
                           double eps = 1e-5) {
  const int r = x->value.dim(0), c = x->value.dim(1);
  Tensor out({r, c});
  Tensor mean({r}), inv_std({r});
  for (int i = 0; i < r; ++i) {
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += x->value.at(i, j);
    m /= c;
    double v = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = x->value.at(i, j) - m;
      v += d * d;
    }
    v /= c;
    mean[i] = m;
    inv_std[i] = 1.0 / std::sqrt(v + eps);
    for (int j = 0; j < c; ++j) {
      out.at(i, j) = (x->value.at(i, j) - m) * inv_std[i] * gamma->value[j] + beta->value[j];
    }
  }
  return detail::make_node(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, mean, inv_std, r, c](Node& n) {
        for (int i = 0; i < r; ++i) {
          // xhat = (x - mean) * inv_std
          double sum_g = 0.0, sum_gx = 0.0;
          for (int j = 0; j < c; ++j) {
            const double xhat = (x->value.at(i, j) - mean[i]) * inv_std[i];
            const double gy = n.grad.at(i, j) * gamma->value[j];
            sum_g += gy;
            sum_gx += gy * xhat;
            if (gamma->requires_grad) gamma->grad[j] += n.grad.at(i, j) * xhat;
            if (beta->requires_grad) beta->grad[j] += n.grad.at(i, j);
          }
          if (x->requires_grad) {
            for (int j = 0; j < c; ++j) {
              const double xhat = (x->value.at(i, j) - mean[i]) * inv_std[i];
              const double gy = n.grad.at(i, j) * gamma->value[j];
              x->grad[i * c + j] += inv_std[i] * (gy - sum_g / c - xhat * sum_gx / c);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial sampling
// ---------------------------------------------------------------------------

namespace detail {

struct BilinearCoeff {
  int x0, x1, y0, y1;
  double wx, wy;  // fractional weights toward x1 / y1
};

/// Border-clamped bilinear coefficients for a point in cell-center
/// coordinates (cell (row i, col j) sits at x = j, y = i).
inline BilinearCoeff bilinear_coeff(double px, double py, int w, int h) {
  BilinearCoeff b{};
  const double fx = std::floor(px);
  const double fy = std::floor(py);
  b.wx = px - fx;
  b.wy = py - fy;
  auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
  b.x0 = clampi(static_cast<int>(fx), 0, w - 1);
  b.x1 = clampi(static_cast<int>(fx) + 1, 0, w - 1);
  b.y0 = clampi(static_cast<int>(fy), 0, h - 1);
  b.y1 = clampi(static_cast<int>(fy) + 1, 0, h - 1);
  return b;
}

}  // namespace detail

/// Bilinear sampling of an [H, W, C] map at P continuous points (cell-center
/// coordinates, border-clamped). Differentiable in the map and in the points.
inline Var bilinear_sample(const Var& map, const Var& px, const Var& py) {
  const int h = map->value.dim(0), w = map->value.dim(1), c = map->value.dim(2);
  const int p = px->value.size();
  if (py->value.size() != p) throw std::invalid_argument("bilinear_sample: point mismatch");
  Tensor out({p, c});
  for (int i = 0; i < p; ++i) {
    const auto b = detail::bilinear_coeff(px->value[i], py->value[i], w, h);
    const double w00 = (1 - b.wx) * (1 - b.wy), w10 = b.wx * (1 - b.wy);
    const double w01 = (1 - b.wx) * b.wy, w11 = b.wx * b.wy;
    for (int ch = 0; ch < c; ++ch) {
      out.at(i, ch) = w00 * map->value.at(b.y0, b.x0, ch) + w10 * map->value.at(b.y0, b.x1, ch) +
                      w01 * map->value.at(b.y1, b.x0, ch) + w11 * map->value.at(b.y1, b.x1, ch);
    }
  }
  return detail::make_node(
      std::move(out), {map, px, py}, [map, px, py, h, w, c, p](Node& n) {
        for (int i = 0; i < p; ++i) {
          const auto b = detail::bilinear_coeff(px->value[i], py->value[i], w, h);
          const double w00 = (1 - b.wx) * (1 - b.wy), w10 = b.wx * (1 - b.wy);
          const double w01 = (1 - b.wx) * b.wy, w11 = b.wx * b.wy;
          double gx = 0.0, gy = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const double g = n.grad.at(i, ch);
            if (map->requires_grad) {
              map->grad[(b.y0 * w + b.x0) * c + ch] += g * w00;
              map->grad[(b.y0 * w + b.x1) * c + ch] += g * w10;
              map->grad[(b.y1 * w + b.x0) * c + ch] += g * w01;
              map->grad[(b.y1 * w + b.x1) * c + ch] += g * w11;
            }
            const double v00 = map->value.at(b.y0, b.x0, ch), v10 = map->value.at(b.y0, b.x1, ch);
            const double v01 = map->value.at(b.y1, b.x0, ch), v11 = map->value.at(b.y1, b.x1, ch);
            gx += g * ((1 - b.wy) * (v10 - v00) + b.wy * (v11 - v01));
            gy += g * ((1 - b.wx) * (v01 - v00) + b.wx * (v11 - v10));
          }
          if (px->requires_grad) px->grad[i] += gx;
          if (py->requires_grad) py->grad[i] += gy;
        }
      });
}

/// Averages an l x l grid of bilinear samples centered on each point; the
/// grid's vertical steps are stretched by `vexp`. Output [N, C].
inline Var mask_mean_sample(const Var& map, const Var& cx, const Var& cy, int l, int vexp) {
  const int h = map->value.dim(0), w = map->value.dim(1), c = map->value.dim(2);
  const int n_pts = cx->value.size();
  if (l < 1 || l % 2 == 0) throw std::invalid_argument("mask_mean_sample: scale must be odd");
  const int half = (l - 1) / 2;
  const double inv = 1.0 / (l * l);
  Tensor out({n_pts, c});
  for (int i = 0; i < n_pts; ++i) {
    for (int dy = -half; dy <= half; ++dy) {
      for (int dx = -half; dx <= half; ++dx) {
        const auto b = detail::bilinear_coeff(cx->value[i] + dx, cy->value[i] + dy * vexp, w, h);
        const double w00 = (1 - b.wx) * (1 - b.wy), w10 = b.wx * (1 - b.wy);
        const double w01 = (1 - b.wx) * b.wy, w11 = b.wx * b.wy;
        for (int ch = 0; ch < c; ++ch) {
          out.at(i, ch) += inv * (w00 * map->value.at(b.y0, b.x0, ch) +
                                  w10 * map->value.at(b.y0, b.x1, ch) +
                                  w01 * map->value.at(b.y1, b.x0, ch) +
                                  w11 * map->value.at(b.y1, b.x1, ch));
        }
      }
    }
  }
  return detail::make_node(
      std::move(out), {map, cx, cy},
      [map, cx, cy, l, vexp, h, w, c, n_pts, half, inv](Node& n) {
        for (int i = 0; i < n_pts; ++i) {
          double gx = 0.0, gy = 0.0;
          for (int dy = -half; dy <= half; ++dy) {
            for (int dx = -half; dx <= half; ++dx) {
              const auto b =
                  detail::bilinear_coeff(cx->value[i] + dx, cy->value[i] + dy * vexp, w, h);
              const double w00 = (1 - b.wx) * (1 - b.wy), w10 = b.wx * (1 - b.wy);
              const double w01 = (1 - b.wx) * b.wy, w11 = b.wx * b.wy;
              for (int ch = 0; ch < c; ++ch) {
                const double g = n.grad.at(i, ch) * inv;
                if (map->requires_grad) {
                  map->grad[(b.y0 * w + b.x0) * c + ch] += g * w00;
                  map->grad[(b.y0 * w + b.x1) * c + ch] += g * w10;
                  map->grad[(b.y1 * w + b.x0) * c + ch] += g * w01;
                  map->grad[(b.y1 * w + b.x1) * c + ch] += g * w11;
                }
                const double v00 = map->value.at(b.y0, b.x0, ch);
                const double v10 = map->value.at(b.y0, b.x1, ch);
                const double v01 = map->value.at(b.y1, b.x0, ch);
                const double v11 = map->value.at(b.y1, b.x1, ch);
                gx += g * ((1 - b.wy) * (v10 - v00) + b.wy * (v11 - v01));
                gy += g * ((1 - b.wx) * (v01 - v00) + b.wx * (v11 - v10));
              }
            }
          }
          if (cx->requires_grad) cx->grad[i] += gx;
          if (cy->requires_grad) cy->grad[i] += gy;
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution (same padding)
// ---------------------------------------------------------------------------

/// 2D convolution of an [H, W, Cin] input with [KH, KW, Cin, Cout] weights,
/// zero padding KH/2 x KW/2, square stride. Output [Ho, Wo, Cout].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride) {
  const int h = x->value.dim(0), w = x->value.dim(1), cin = x->value.dim(2);
  const int kh = weight->value.dim(0), kw = weight->value.dim(1);
  if (weight->value.dim(2) != cin) throw std::invalid_argument("conv2d: channel mismatch");
  const int cout = weight->value.dim(3);
  if (bias->value.size() != cout) throw std::invalid_argument("conv2d: bias mismatch");
  const int ph = kh / 2, pw = kw / 2;
  const int ho = (h + 2 * ph - kh) / stride + 1;
  const int wo = (w + 2 * pw - kw) / stride + 1;

  // im2col + GEMM; backward reverses through the same patch layout.
  const int patch = kh * kw * cin;
  Tensor cols({ho * wo, patch});
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const int row = oy * wo + ox;
      int k = 0;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride + ky - ph;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride + kx - pw;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
            for (int ci = 0; ci < cin; ++ci) cols.at(row, k++) = x->value.at(iy, ix, ci);
          } else {
            k += cin;
          }
        }
      }
    }
  }
  Tensor out({ho, wo, cout});
  {
    detail::EigenConstMap mc(cols.data(), ho * wo, patch);
    detail::EigenConstMap mw(weight->value.data(), patch, cout);
    detail::EigenMap mo(out.data(), ho * wo, cout);
    mo.noalias() = mc * mw;
    for (int r = 0; r < ho * wo; ++r)
      for (int co = 0; co < cout; ++co) out[r * cout + co] += bias->value[co];
  }
  return detail::make_node(
      std::move(out), {x, weight, bias},
      [x, weight, bias, cols, stride, h, w, cin, kh, kw, cout, ph, pw, ho, wo](Node& n) {
        const int patch2 = kh * kw * cin;
        detail::EigenConstMap go(n.grad.data(), ho * wo, cout);
        if (bias->requires_grad) {
          for (int r = 0; r < ho * wo; ++r)
            for (int co = 0; co < cout; ++co) bias->grad[co] += n.grad[r * cout + co];
        }
        if (weight->requires_grad) {
          detail::EigenConstMap mc(cols.data(), ho * wo, patch2);
          detail::EigenMap gw(weight->grad.data(), patch2, cout);
          gw.noalias() += mc.transpose() * go;
        }
        if (x->requires_grad) {
          Tensor gcols({ho * wo, patch2});
          detail::EigenConstMap mw(weight->value.data(), patch2, cout);
          detail::EigenMap gc(gcols.data(), ho * wo, patch2);
          gc.noalias() = go * mw.transpose();
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const int row = oy * wo + ox;
              int k = 0;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride + ky - ph;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ox * stride + kx - pw;
                  if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                    for (int ci = 0; ci < cin; ++ci)
                      x->grad[(iy * w + ix) * cin + ci] += gcols.at(row, k + ci);
                  }
                  k += cin;
                }
              }
            }
          }
        }
      });
}

}  // namespace scaledet
