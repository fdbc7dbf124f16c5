#pragma once

// Minimal tape-free reverse-mode differentiation over Tensor<Scalar>.
// Every op returns a Var (shared node); backward() topologically sorts the
// reachable graph and runs the recorded adjoints in reverse.

#include "maggie/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace maggie::ad {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables graph recording in the current scope (inference).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor<Scalar>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<Scalar>::zeros_like(value);
    return grad;
  }
  const Shape& shape() const { return value.shape(); }
  Index dim(int k) const { return value.dim(k); }
};

template <typename Scalar>
using Var = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
Var<Scalar> constant(Tensor<Scalar> value) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  return n;
}

template <typename Scalar>
Var<Scalar> parameter(Tensor<Scalar> value) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

template <typename Scalar>
Var<Scalar> make_node(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                      std::function<void(Node<Scalar>&)> backward) {
  auto n = std::make_shared<Node<Scalar>>();
  n->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& p : parents) any = any || (p && p->requires_grad);
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward = std::move(backward);
    }
  }
  return n;
}

// Returns the parent's grad buffer if it wants gradients, else nullptr.
template <typename Scalar>
Tensor<Scalar>* grad_of(Node<Scalar>& self, std::size_t k) {
  auto& p = self.parents[k];
  return (p && p->requires_grad) ? &p->grad_buffer() : nullptr;
}

/// Runs reverse accumulation from a scalar root. Intermediate graph edges are
/// released afterwards so a new forward pass can reuse the parameters.
template <typename Scalar>
void backward(const Var<Scalar>& root) {
  require(root->value.size() == 1, "backward: root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* p = node->parents[next++].get();
      if (p && p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node<Scalar>* n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
      n->grad = Tensor<Scalar>();
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a->shape() == b->shape(), "add: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat() + b->value.flat();
  return make_node<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* g = grad_of(self, k)) g->flat() += self.grad.flat();
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a->shape() == b->shape(), "sub: shape mismatch");
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat() - b->value.flat();
  return make_node<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat();
    if (auto* g = grad_of(self, 1)) g->flat() -= self.grad.flat();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a->shape() == b->shape(), "mul: shape mismatch");
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat() * b->value.flat();
  return make_node<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat() * self.parents[1]->value.flat();
    if (auto* g = grad_of(self, 1)) g->flat() += self.grad.flat() * self.parents[0]->value.flat();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar c) {
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat() * c;
  return make_node<Scalar>(std::move(out), {a}, [c](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat() * c;
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar c) {
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat() + c;
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat();
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> out(a->shape());
  out.flat() = Scalar(1) / (Scalar(1) + (-a->value.flat()).exp());
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) {
      auto y = self.value.flat();
      g->flat() += self.grad.flat() * y * (Scalar(1) - y);
    }
  });
}

template <typename Scalar>
Var<Scalar> tanh(const Var<Scalar>& a) {
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat().tanh();
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) {
      auto y = self.value.flat();
      g->flat() += self.grad.flat() * (Scalar(1) - y * y);
    }
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Tensor<Scalar> out(a->shape());
  out.flat() = a->value.flat().max(Scalar(0));
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0))
      g->flat() += (self.parents[0]->value.flat() > Scalar(0)).template cast<Scalar>() * self.grad.flat();
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope = Scalar(0.2)) {
  Tensor<Scalar> out(a->shape());
  auto x = a->value.flat();
  out.flat() = (x > Scalar(0)).select(x, x * slope);
  return make_node<Scalar>(std::move(out), {a}, [slope](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) {
      auto x = self.parents[0]->value.flat();
      g->flat() += (x > Scalar(0)).select(self.grad.flat(), self.grad.flat() * slope);
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Tensor<Scalar> out({1});
  out[0] = a->value.flat().sum();
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  const Index n = std::max<Index>(a->value.size(), 1);
  return scale(sum(a), Scalar(1) / Scalar(n));
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape s) {
  Tensor<Scalar> out = a->value.reshaped(std::move(s));
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->flat() += self.grad.flat();
  });
}

// ---------------------------------------------------------------------------
// Matrix ops on [rows, cols] tensors

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a->value.rank() == 2 && b->value.rank() == 2 && a->dim(1) == b->dim(0), "matmul: dimension mismatch");
  Tensor<Scalar> out({a->dim(0), b->dim(1)});
  out.mat().noalias() = a->value.mat() * b->value.mat();
  return make_node<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->mat().noalias() += self.grad.mat() * self.parents[1]->value.mat().transpose();
    if (auto* g = grad_of(self, 1)) g->mat().noalias() += self.parents[0]->value.mat().transpose() * self.grad.mat();
  });
}

/// a · bᵀ
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a->value.rank() == 2 && b->value.rank() == 2 && a->dim(1) == b->dim(1), "matmul_nt: dimension mismatch");
  Tensor<Scalar> out({a->dim(0), b->dim(0)});
  out.mat().noalias() = a->value.mat() * b->value.mat().transpose();
  return make_node<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->mat().noalias() += self.grad.mat() * self.parents[1]->value.mat();
    if (auto* g = grad_of(self, 1)) g->mat().noalias() += self.grad.mat().transpose() * self.parents[0]->value.mat();
  });
}

/// x Wᵀ + b, x: [R, in], W: [out, in], b: [out] (may be null).
template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const Var<Scalar>& b) {
  require(x->value.rank() == 2 && w->value.rank() == 2 && x->dim(1) == w->dim(1), "linear: dimension mismatch");
  Tensor<Scalar> out({x->dim(0), w->dim(0)});
  out.mat().noalias() = x->value.mat() * w->value.mat().transpose();
  if (b) out.mat().rowwise() += b->value.flat().matrix().transpose();
  std::vector<Var<Scalar>> parents{x, w};
  if (b) parents.push_back(b);
  return make_node<Scalar>(std::move(out), std::move(parents), [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->mat().noalias() += self.grad.mat() * self.parents[1]->value.mat();
    if (auto* g = grad_of(self, 1)) g->mat().noalias() += self.grad.mat().transpose() * self.parents[0]->value.mat();
    if (self.parents.size() > 2)
      if (auto* g = grad_of(self, 2)) g->flat().matrix() += self.grad.mat().colwise().sum().transpose();
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  require(a->value.rank() == 2, "transpose: rank 2 required");
  Tensor<Scalar> out({a->dim(1), a->dim(0)});
  out.mat() = a->value.mat().transpose();
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) g->mat() += self.grad.mat().transpose();
  });
}

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  require(a->value.rank() == 2, "softmax_rows: rank 2 required");
  Tensor<Scalar> out(a->shape());
  auto x = a->value.mat();
  auto y = out.mat();
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return make_node<Scalar>(std::move(out), {a}, [](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0)) {
      auto y = self.value.mat();
      auto gy = self.grad.mat();
      for (Index r = 0; r < y.rows(); ++r) {
        const Scalar dot = y.row(r).dot(gy.row(r));
        g->mat().row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
      }
    }
  });
}

/// Per-row normalisation over columns with affine (gamma, beta).
template <typename Scalar>
Var<Scalar> layer_norm_rows(const Var<Scalar>& a, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                            Scalar eps = Scalar(1e-5)) {
  require(a->value.rank() == 2 && gamma->value.size() == a->dim(1), "layer_norm_rows: shape mismatch");
  const Index rows = a->dim(0), cols = a->dim(1);
  Tensor<Scalar> out(a->shape());
  Tensor<Scalar> xhat(a->shape());
  Tensor<Scalar> inv_std({rows});
  auto x = a->value.mat();
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.mat().row(r) = (x.row(r).array() - mu).matrix() * inv_std[r];
  }
  out.mat() = (xhat.mat().array().rowwise() * gamma->value.flat().transpose()).rowwise() +
              beta->value.flat().transpose();
  return make_node<Scalar>(
      std::move(out), {a, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), cols](Node<Scalar>& self) {
        auto gy = self.grad.mat();
        if (auto* g = grad_of(self, 1))
          g->flat().matrix() += (gy.array() * xhat.mat().array()).colwise().sum().matrix().transpose();
        if (auto* g = grad_of(self, 2)) g->flat().matrix() += gy.colwise().sum().transpose();
        if (auto* g = grad_of(self, 0)) {
          auto gamma = self.parents[1]->value.flat();
          for (Index r = 0; r < gy.rows(); ++r) {
            Eigen::Array<Scalar, 1, Eigen::Dynamic> gx = gy.row(r).array() * gamma.transpose();
            const Scalar m1 = gx.mean();
            const Scalar m2 = (gx * xhat.mat().row(r).array()).mean();
            g->mat().row(r).array() += inv_std[r] * (gx - m1 - xhat.mat().row(r).array() * m2);
          }
        }
        (void)cols;
      });
}

// ---------------------------------------------------------------------------
// Structural ops

namespace detail {
inline void axis_split(const Shape& s, int axis, Index& outer, Index& inner) {
  outer = 1;
  inner = 1;
  for (int k = 0; k < axis; ++k) outer *= s[static_cast<std::size_t>(k)];
  for (std::size_t k = static_cast<std::size_t>(axis) + 1; k < s.size(); ++k) inner *= s[k];
}
}  // namespace detail

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  Shape s = parts[0]->shape();
  Index total = 0;
  for (const auto& p : parts) {
    require(p->value.rank() == static_cast<int>(s.size()), "concat: rank mismatch");
    for (int k = 0; k < static_cast<int>(s.size()); ++k)
      if (k != axis) require(p->dim(k) == s[static_cast<std::size_t>(k)], "concat: shape mismatch");
    total += p->dim(axis);
  }
  s[static_cast<std::size_t>(axis)] = total;
  Index outer, inner;
  detail::axis_split(s, axis, outer, inner);
  Tensor<Scalar> out(s);
  Index off = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const Index len = p->dim(axis) * inner;
    for (Index o = 0; o < outer; ++o)
      std::copy_n(p->value.data() + o * len, len, out.data() + o * total * inner + off * inner);
    offsets.push_back(off);
    off += p->dim(axis);
  }
  return make_node<Scalar>(std::move(out), parts, [offsets, outer, inner, total, axis](Node<Scalar>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      if (auto* g = grad_of(self, k)) {
        const Index len = self.parents[k]->dim(axis) * inner;
        for (Index o = 0; o < outer; ++o) {
          Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g->data() + o * len, len) +=
              Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(
                  self.grad.data() + o * total * inner + offsets[k] * inner, len);
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> slice(const Var<Scalar>& a, int axis, Index start, Index len) {
  require(start >= 0 && start + len <= a->dim(axis), "slice: out of range");
  Shape s = a->shape();
  const Index full = s[static_cast<std::size_t>(axis)];
  s[static_cast<std::size_t>(axis)] = len;
  Index outer, inner;
  detail::axis_split(s, axis, outer, inner);
  Tensor<Scalar> out(s);
  for (Index o = 0; o < outer; ++o)
    std::copy_n(a->value.data() + o * full * inner + start * inner, len * inner, out.data() + o * len * inner);
  return make_node<Scalar>(std::move(out), {a}, [outer, inner, full, start, len](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0))
      for (Index o = 0; o < outer; ++o)
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g->data() + o * full * inner + start * inner,
                                                            len * inner) +=
            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(self.grad.data() + o * len * inner,
                                                                      len * inner);
  });
}

/// Rows of x [R, C] selected by idx -> [idx.size(), C].
template <typename Scalar>
Var<Scalar> gather_rows(const Var<Scalar>& x, std::vector<Index> idx) {
  const Index cols = x->dim(1);
  Tensor<Scalar> out({static_cast<Index>(idx.size()), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] >= 0 && idx[r] < x->dim(0), "gather_rows: index out of range");
    out.mat().row(static_cast<Index>(r)) = x->value.mat().row(idx[r]);
  }
  return make_node<Scalar>(std::move(out), {x}, [idx = std::move(idx)](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t r = 0; r < idx.size(); ++r) g->mat().row(idx[r]) += self.grad.mat().row(static_cast<Index>(r));
  });
}

/// Scatters rows [P, 1] into a zero tensor of `shape` at flat offsets.
template <typename Scalar>
Var<Scalar> scatter_dense(const Var<Scalar>& x, std::vector<Index> offsets, Shape shape) {
  require(x->value.size() == static_cast<Index>(offsets.size()), "scatter_dense: size mismatch");
  Tensor<Scalar> out(std::move(shape));
  for (std::size_t p = 0; p < offsets.size(); ++p) out[offsets[p]] = x->value[static_cast<Index>(p)];
  return make_node<Scalar>(std::move(out), {x}, [offsets = std::move(offsets)](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0))
      for (std::size_t p = 0; p < offsets.size(); ++p) (*g)[static_cast<Index>(p)] += self.grad[offsets[p]];
  });
}

/// out[k] = sources[choice[k]][k]; all sources share one shape.
template <typename Scalar>
Var<Scalar> select_sources(const std::vector<Var<Scalar>>& sources, std::vector<std::uint8_t> choice) {
  require(!sources.empty(), "select_sources: no sources");
  const Shape& s = sources[0]->shape();
  for (const auto& src : sources) require(src->shape() == s, "select_sources: shape mismatch");
  require(static_cast<Index>(choice.size()) == shape_numel(s), "select_sources: choice size mismatch");
  Tensor<Scalar> out(s);
  for (Index k = 0; k < out.size(); ++k) out[k] = sources[choice[static_cast<std::size_t>(k)]]->value[k];
  return make_node<Scalar>(std::move(out), sources, [choice = std::move(choice)](Node<Scalar>& self) {
    std::vector<Tensor<Scalar>*> gs;
    for (std::size_t k = 0; k < self.parents.size(); ++k) gs.push_back(grad_of(self, k));
    for (Index k = 0; k < self.grad.size(); ++k)
      if (auto* g = gs[choice[static_cast<std::size_t>(k)]]) (*g)[k] += self.grad[k];
  });
}

/// For a [T, ...] tensor: out[t, rest] = a[src_t[t, rest], rest].
template <typename Scalar>
Var<Scalar> select_frames(const Var<Scalar>& a, std::vector<std::uint8_t> src_t) {
  const Index frames = a->dim(0);
  const Index per = a->value.size() / std::max<Index>(frames, 1);
  require(static_cast<Index>(src_t.size()) == a->value.size(), "select_frames: size mismatch");
  Tensor<Scalar> out(a->shape());
  for (Index k = 0; k < out.size(); ++k) out[k] = a->value[src_t[static_cast<std::size_t>(k)] * per + k % per];
  return make_node<Scalar>(std::move(out), {a}, [src_t = std::move(src_t), per](Node<Scalar>& self) {
    if (auto* g = grad_of(self, 0))
      for (Index k = 0; k < self.grad.size(); ++k)
        (*g)[src_t[static_cast<std::size_t>(k)] * per + k % per] += self.grad[k];
  });
}

}  // namespace maggie::ad
