#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "voxrep/common.hpp"
#include "voxrep/tensor.hpp"

// Reverse-mode tape. Every op builds a node whose backprop closure pulls the
// node's gradient into its parents. Leaf gradients accumulate across backward
// calls until explicitly zeroed.

namespace voxrep::tc {

template <class S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace detail {

inline uint64_t next_seq() {
    static thread_local uint64_t counter = 0;
    return ++counter;
}

template <class S>
struct Node {
    TensorData<S> val;
    AlignedVec<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    uint64_t seq = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backprop;

    AlignedVec<S>& ensure_grad() {
        if (grad.empty()) grad.assign(val.v.size(), S(0));
        return grad;
    }
};

inline bool& grad_enabled_flag() {
    static thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Scoped inference mode: ops built inside record no tape.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <class S>
class Var {
public:
    Var() = default;

    static Var leaf(TensorData<S> value, bool requires_grad) {
        Var v;
        v.n_ = std::make_shared<detail::Node<S>>();
        v.n_->val = std::move(value);
        v.n_->requires_grad = requires_grad && grad_enabled();
        v.n_->seq = detail::next_seq();
        return v;
    }

    static Var constant(TensorData<S> value) { return leaf(std::move(value), false); }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->val.shape; }
    int64_t numel() const { return n_->val.numel(); }
    const AlignedVec<S>& value() const { return n_->val.v; }
    AlignedVec<S>& value_mut() { return n_->val.v; }
    const TensorData<S>& tensor() const { return n_->val; }
    bool requires_grad() const { return n_->requires_grad; }

    const AlignedVec<S>& grad() const {
        n_->ensure_grad();
        return n_->grad;
    }
    AlignedVec<S>& grad_mut() { return n_->ensure_grad(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), S(0));
    }

    S item() const {
        if (numel() != 1) throw ShapeError("Var::item: tensor is not scalar");
        return n_->val.v[0];
    }

    std::shared_ptr<detail::Node<S>> node() const { return n_; }

    // Runs reverse-mode accumulation from this scalar.
    void backward() const;

private:
    std::shared_ptr<detail::Node<S>> n_;
};

namespace detail {

template <class S>
Var<S> make_op(TensorData<S> value, std::vector<std::shared_ptr<Node<S>>> parents,
               std::function<void(Node<S>&)> backprop) {
    Var<S> out = Var<S>::leaf(std::move(value), false);
    bool needs = false;
    if (grad_enabled_flag())
        for (auto& p : parents)
            if (p->requires_grad) needs = true;
    if (needs) {
        out.node()->requires_grad = true;
        out.node()->parents = std::move(parents);
        out.node()->backprop = std::move(backprop);
    }
    return out;
}

}  // namespace detail

template <class S>
void Var<S>::backward() const {
    if (!n_) throw StateError("backward: undefined variable");
    if (numel() != 1) throw ShapeError("backward: loss must be scalar");

    // Iterative DFS collecting the reachable subgraph, with cycle detection.
    using NodeT = detail::Node<S>;
    std::vector<NodeT*> order;
    std::unordered_map<NodeT*, int> state;  // 0 unseen, 1 on stack, 2 done
    std::vector<std::pair<NodeT*, size_t>> stack;
    stack.push_back({n_.get(), 0});
    state[n_.get()] = 1;
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT* parent = node->parents[idx++].get();
            int s = state[parent];
            if (s == 1) throw InternalError("backward: graph cycle detected");
            if (s == 0) {
                state[parent] = 1;
                stack.push_back({parent, 0});
            }
        } else {
            state[node] = 2;
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Tape order: every op is created after its parents, so descending
    // creation index is a valid reverse topological order.
    std::sort(order.begin(), order.end(),
              [](const NodeT* a, const NodeT* b) { return a->seq > b->seq; });

    // Interior grads are scratch per pass; only leaves accumulate across
    // backward calls.
    for (NodeT* node : order)
        if (node->backprop && !node->grad.empty())
            std::fill(node->grad.begin(), node->grad.end(), S(0));

    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (NodeT* node : order)
        if (node->backprop && node->requires_grad) node->backprop(*node);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.shape(), b.shape(), "add");
    TensorData<S> out = a.tensor();
    const S* bv = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(std::move(out), {pa, pb}, [pa, pb](detail::Node<S>& n) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.shape(), b.shape(), "sub");
    TensorData<S> out = a.tensor();
    const S* bv = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] -= bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(std::move(out), {pa, pb}, [pa, pb](detail::Node<S>& n) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    check_same_shape(a.shape(), b.shape(), "mul");
    TensorData<S> out = a.tensor();
    const S* bv = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] *= bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(std::move(out), {pa, pb}, [pa, pb](detail::Node<S>& n) {
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            const S* bv2 = pb->val.v.data();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv2[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            const S* av = pa->val.v.data();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

template <class S>
Var<S> add_scalar(const Var<S>& a, S c) {
    TensorData<S> out = a.tensor();
    for (auto& x : out.v) x += c;
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

template <class S>
Var<S> mul_scalar(const Var<S>& a, S c) {
    TensorData<S> out = a.tensor();
    for (auto& x : out.v) x *= c;
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa, c](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
    });
}

template <class S>
Var<S> vexp(const Var<S>& a) {
    TensorData<S> out = a.tensor();
    for (auto& x : out.v) x = std::exp(x);
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        const S* y = n.val.v.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y[i];
    });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
    TensorData<S> out = a.tensor();
    for (auto& x : out.v) {
        if (x >= 0) {
            x = S(1) / (S(1) + std::exp(-x));
        } else {
            S e = std::exp(x);
            x = e / (S(1) + e);
        }
    }
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        const S* y = n.val.v.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * y[i] * (S(1) - y[i]);
    });
}

template <class S>
Var<S> vtanh(const Var<S>& a) {
    TensorData<S> out = a.tensor();
    for (auto& x : out.v) x = std::tanh(x);
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        const S* y = n.val.v.data();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (S(1) - y[i] * y[i]);
    });
}

// alpha = 1: x for x >= 0, exp(x) - 1 below. C1 at zero.
template <class S>
Var<S> elu(const Var<S>& a) {
    TensorData<S> out = a.tensor();
    for (auto& x : out.v)
        if (x < 0) x = std::exp(x) - S(1);
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        const S* x = pa->val.v.data();
        const S* y = n.val.v.data();
        for (size_t i = 0; i < g.size(); ++i)
            g[i] += n.grad[i] * (x[i] >= 0 ? S(1) : y[i] + S(1));
    });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> sum(const Var<S>& a) {
    S acc = 0;
    for (S x : a.value()) acc += x;
    auto pa = a.node();
    return detail::make_op<S>(TensorData<S>::scalar(acc), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        const S s = n.grad[0];
        for (auto& x : g) x += s;
    });
}

template <class S>
Var<S> mean(const Var<S>& a) {
    return mul_scalar(sum(a), S(1) / static_cast<S>(a.numel()));
}

template <class S>
Var<S> reshape(const Var<S>& a, Shape new_shape) {
    if (::voxrep::numel(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    TensorData<S> out(std::move(new_shape), a.value());
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// Concatenate [n, c_i] matrices along columns.
template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
    const int64_t rows = parts[0].shape().at(0);
    int64_t cols = 0;
    for (auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != rows)
            throw ShapeError("concat_cols: inputs must be [n, c] with shared n");
        cols += p.shape()[1];
    }
    TensorData<S> out({rows, cols});
    std::vector<std::shared_ptr<detail::Node<S>>> parents;
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (auto& p : parts) {
        const int64_t c = p.shape()[1];
        for (int64_t r = 0; r < rows; ++r)
            std::copy_n(p.value().data() + r * c, c, out.v.data() + r * cols + off);
        parents.push_back(p.node());
        offsets.push_back(off);
        off += c;
    }
    return detail::make_op<S>(std::move(out), std::move(parents),
                              [rows, cols, offsets](detail::Node<S>& n) {
                                  for (size_t k = 0; k < n.parents.size(); ++k) {
                                      auto& p = n.parents[k];
                                      if (!p->requires_grad) continue;
                                      const int64_t c = p->val.shape[1];
                                      auto& g = p->ensure_grad();
                                      for (int64_t r = 0; r < rows; ++r) {
                                          const S* src = n.grad.data() + r * cols + offsets[k];
                                          S* dst = g.data() + r * c;
                                          for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                                      }
                                  }
                              });
}

// Columns [from, to) of an [n, c] matrix.
template <class S>
Var<S> slice_cols(const Var<S>& a, int64_t from, int64_t to) {
    if (a.shape().size() != 2) throw ShapeError("slice_cols: input must be 2-d");
    const int64_t rows = a.shape()[0], cols = a.shape()[1];
    if (from < 0 || to > cols || from >= to) throw ArgumentError("slice_cols: bad range");
    const int64_t width = to - from;
    TensorData<S> out({rows, width});
    for (int64_t r = 0; r < rows; ++r)
        std::copy_n(a.value().data() + r * cols + from, width, out.v.data() + r * width);
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa, from, width](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        const int64_t rows2 = n.val.shape[0];
        const int64_t cols2 = pa->val.shape[1];
        for (int64_t r = 0; r < rows2; ++r) {
            const S* src = n.grad.data() + r * width;
            S* dst = g.data() + r * cols2 + from;
            for (int64_t j = 0; j < width; ++j) dst[j] += src[j];
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    TensorData<S> out({m, n});
    ConstMatMap<S> A(a.value().data(), m, k), B(b.value().data(), k, n);
    MatMap<S>(out.v.data(), m, n).noalias() = A * B;
    auto pa = a.node(), pb = b.node();
    return detail::make_op<S>(std::move(out), {pa, pb}, [pa, pb, m, k, n](detail::Node<S>& nd) {
        ConstMatMap<S> G(nd.grad.data(), m, n);
        if (pa->requires_grad) {
            ConstMatMap<S> B2(pb->val.v.data(), k, n);
            MatMap<S>(pa->ensure_grad().data(), m, k).noalias() += G * B2.transpose();
        }
        if (pb->requires_grad) {
            ConstMatMap<S> A2(pa->val.v.data(), m, k);
            MatMap<S>(pb->ensure_grad().data(), k, n).noalias() += A2.transpose() * G;
        }
    });
}

// y = x W^T + b with x [n, f], W [o, f], b [o].
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " with W " +
                         shape_str(w.shape()));
    const int64_t n = x.shape()[0], f = x.shape()[1], o = w.shape()[0];
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != o))
        throw ShapeError("linear: bias must be [out_features]");
    TensorData<S> out({n, o});
    ConstMatMap<S> X(x.value().data(), n, f), W(w.value().data(), o, f);
    MatMap<S> Y(out.v.data(), n, o);
    Y.noalias() = X * W.transpose();
    if (b.defined()) {
        ConstMatMap<S> B(b.value().data(), 1, o);
        Y.rowwise() += B.row(0);
    }
    auto px = x.node(), pw = w.node();
    auto pb = b.defined() ? b.node() : nullptr;
    std::vector<std::shared_ptr<detail::Node<S>>> parents = {px, pw};
    if (pb) parents.push_back(pb);
    return detail::make_op<S>(std::move(out), std::move(parents),
                              [px, pw, pb, n, f, o](detail::Node<S>& nd) {
                                  ConstMatMap<S> G(nd.grad.data(), n, o);
                                  if (px->requires_grad) {
                                      ConstMatMap<S> W2(pw->val.v.data(), o, f);
                                      MatMap<S>(px->ensure_grad().data(), n, f).noalias() +=
                                          G * W2;
                                  }
                                  if (pw->requires_grad) {
                                      ConstMatMap<S> X2(px->val.v.data(), n, f);
                                      MatMap<S>(pw->ensure_grad().data(), o, f).noalias() +=
                                          G.transpose() * X2;
                                  }
                                  if (pb && pb->requires_grad) {
                                      auto& g = pb->ensure_grad();
                                      for (int64_t c = 0; c < o; ++c)
                                          for (int64_t r = 0; r < n; ++r)
                                              g[c] += nd.grad[r * o + c];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Dropout (inverted: scale by 1/(1-p) at train time, identity at eval)
// ---------------------------------------------------------------------------

template <class S>
Var<S> dropout(const Var<S>& a, double p, Rng& rng, bool train) {
    if (p < 0 || p >= 1) throw ArgumentError("dropout: p must be in [0, 1)");
    if (!train || p == 0.0) return a;
    auto mask = std::make_shared<AlignedVec<S>>(a.numel());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
    TensorData<S> out = a.tensor();
    for (int64_t i = 0; i < a.numel(); ++i) {
        const S m = rng.uniform() >= p ? keep_scale : S(0);
        (*mask)[i] = m;
        out.v[i] *= m;
    }
    auto pa = a.node();
    return detail::make_op<S>(std::move(out), {pa}, [pa, mask](detail::Node<S>& n) {
        auto& g = pa->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Stable mean BCE on logits with constant {0,1} targets.
template <class S>
Var<S> bce_with_logits_mean(const Var<S>& logits, const std::vector<S>& targets) {
    if (logits.numel() != static_cast<int64_t>(targets.size()))
        throw ShapeError("bce_with_logits_mean: size mismatch");
    const int64_t n = logits.numel();
    S acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const S x = logits.value()[i], t = targets[i];
        // log(1 + exp(-|x|)) + max(x, 0) - t*x
        acc += std::log1p(std::exp(-std::abs(x))) + std::max(x, S(0)) - t * x;
    }
    auto pa = logits.node();
    auto tgt = std::make_shared<std::vector<S>>(targets);
    return detail::make_op<S>(TensorData<S>::scalar(acc / static_cast<S>(n)), {pa},
                              [pa, tgt, n](detail::Node<S>& nd) {
                                  auto& g = pa->ensure_grad();
                                  const S scale = nd.grad[0] / static_cast<S>(n);
                                  for (int64_t i = 0; i < n; ++i) {
                                      const S x = pa->val.v[i];
                                      S s;
                                      if (x >= 0) {
                                          s = S(1) / (S(1) + std::exp(-x));
                                      } else {
                                          const S e = std::exp(x);
                                          s = e / (S(1) + e);
                                      }
                                      g[i] += scale * (s - (*tgt)[i]);
                                  }
                              });
}

// Mean squared error against constant targets.
template <class S>
Var<S> mse_mean(const Var<S>& pred, const std::vector<S>& targets) {
    if (pred.numel() != static_cast<int64_t>(targets.size()))
        throw ShapeError("mse_mean: size mismatch");
    const int64_t n = pred.numel();
    S acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const S d = pred.value()[i] - targets[i];
        acc += d * d;
    }
    auto pa = pred.node();
    auto tgt = std::make_shared<std::vector<S>>(targets);
    return detail::make_op<S>(TensorData<S>::scalar(acc / static_cast<S>(n)), {pa},
                              [pa, tgt, n](detail::Node<S>& nd) {
                                  auto& g = pa->ensure_grad();
                                  const S scale = S(2) * nd.grad[0] / static_cast<S>(n);
                                  for (int64_t i = 0; i < n; ++i)
                                      g[i] += scale * (pa->val.v[i] - (*tgt)[i]);
                              });
}

}  // namespace voxrep::tc
