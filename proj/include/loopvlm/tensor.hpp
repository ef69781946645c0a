#pragma once

// Dense row-major arrays with define-by-run reverse-mode differentiation.
// The graph is a shared_ptr DAG rebuilt on every forward pass, which makes
// variable-depth loops and truncated backprop (detach/no-grad) trivial.
// Matrix products are delegated to Eigen; everything else is plain loops.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "loopvlm/errors.hpp"
#include "loopvlm/rng.hpp"

namespace loopvlm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

// RMS-norm epsilon and optimizer epsilon live together so there is exactly
// one place that pins them.
struct NumericConstants {
    static constexpr double rmsnorm_eps = 1e-6;
    static constexpr double adam_eps = 1e-8;
    static constexpr double attn_mask_neg = -1e30;
};

namespace detail {

// thread-local recording switch (torch.no_grad analog)
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

template <class S>
struct GradTable;

template <class S>
struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // leaf accumulator, empty until first backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const std::vector<S>&, GradTable<S>&)> backprop;

    bool is_leaf() const { return parents.empty(); }
};

template <class S>
struct GradTable {
    std::unordered_map<const Node<S>*, std::vector<S>> slots;

    std::vector<S>& acc(const Node<S>* n) {
        auto it = slots.find(n);
        if (it == slots.end()) {
            it = slots.emplace(n, std::vector<S>(n->data.size(), S(0))).first;
        }
        return it->second;
    }
    const std::vector<S>* find(const Node<S>* n) const {
        auto it = slots.find(n);
        return it == slots.end() ? nullptr : &it->second;
    }
};

}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording_enabled() { return detail::grad_enabled_flag(); }

template <class S>
class Tensor {
public:
    using NodePtr = std::shared_ptr<detail::Node<S>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<S> values) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
            throw NumericError("tensor: " + shape_str(shape) + " does not hold " +
                               std::to_string(values.size()) + " values");
        }
        node_ = std::make_shared<detail::Node<S>>();
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) {
        return Tensor(shape, std::vector<S>(shape_numel(shape), S(0)));
    }
    static Tensor full(Shape shape, S v) {
        return Tensor(shape, std::vector<S>(shape_numel(shape), v));
    }
    static Tensor randn(Shape shape, Rng& rng, double stddev) {
        std::vector<S> d(shape_numel(shape));
        for (auto& x : d) x = static_cast<S>(stddev * rng.normal());
        return Tensor(std::move(shape), std::move(d));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[i]; }
    int rows() const { return node_->shape[0]; }
    int cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    const std::vector<S>& values() const { return node_->data; }
    std::vector<S>& mutable_values() { return node_->data; }  // optimizer updates only
    S at(int r, int c) const { return node_->data[static_cast<size_t>(r) * cols() + c]; }
    S item() const { return node_->data[0]; }

    Tensor& set_requires_grad(bool flag = true) {
        node_->requires_grad = flag;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf(); }

    // leaf gradient accumulator ("absent" until backward touches it)
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<S>& grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    NodePtr node() const { return node_; }
    const detail::Node<S>* raw() const { return node_.get(); }

    bool all_finite() const {
        for (S v : node_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    NodePtr node_;
};

namespace detail {

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using CMap = Eigen::Map<const EMat<S>>;
template <class S>
using MMap = Eigen::Map<EMat<S>>;

template <class S>
CMap<S> mat(const std::vector<S>& v, int r, int c) {
    return CMap<S>(v.data(), r, c);
}
template <class S>
MMap<S> mat(std::vector<S>& v, int r, int c) {
    return MMap<S>(v.data(), r, c);
}

// Builds the result node; records parents + backprop only while recording
// is on and some parent participates in differentiation.
template <class S>
Tensor<S> make_op(Shape shape, std::vector<S> values, std::vector<Tensor<S>> parents,
                  std::function<void(const std::vector<S>&, GradTable<S>&)> backprop) {
    Tensor<S> out(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled_flag()) {
        for (const auto& p : parents)
            if (p.requires_grad()) {
                needs = true;
                break;
            }
    }
    if (needs) {
        auto n = out.node();
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return out;
}

template <class S>
void check_2d(const Tensor<S>& t, const char* who) {
    if (t.rank() != 2) throw NumericError(std::string(who) + ": expected rank-2, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <class S>
struct GradResult {
    detail::GradTable<S> table;

    const std::vector<S>* find(const Tensor<S>& t) const { return table.find(t.raw()); }
    bool touched(const Tensor<S>& t) const { return table.find(t.raw()) != nullptr; }
};

// Nodes reachable through recorded edges (parents of differentiable ops).
template <class S>
std::unordered_set<const detail::Node<S>*> reachable_nodes(const Tensor<S>& root) {
    std::unordered_set<const detail::Node<S>*> seen;
    std::vector<const detail::Node<S>*> stack{root.raw()};
    while (!stack.empty()) {
        const auto* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    return seen;
}

// Reverse-mode sweep from root (seeded with ones). Visits each node exactly
// once in reverse topological order. Leaf gradients are returned in the
// GradResult and, when write_leaf_grads is set, also accumulated into each
// leaf's .grad buffer.
template <class S>
GradResult<S> backward(const Tensor<S>& root, bool write_leaf_grads = true) {
    GradResult<S> res;
    if (!root.node()->requires_grad) return res;

    // iterative postorder DFS over grad-requiring parents
    std::vector<const detail::Node<S>*> topo;
    std::unordered_set<const detail::Node<S>*> visited;
    struct Frame {
        const detail::Node<S>* n;
        size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root.raw()});
    visited.insert(root.raw());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            const auto* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }

    res.table.acc(root.raw()).assign(root.numel(), S(1));
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        const detail::Node<S>* n = *it;
        const std::vector<S>* gout = res.table.find(n);
        if (!gout) continue;
        if (n->backprop) n->backprop(*gout, res.table);
    }

    if (write_leaf_grads) {
        for (const auto* n : topo) {
            if (!n->is_leaf() || !n->requires_grad) continue;
            const std::vector<S>* g = res.table.find(n);
            if (!g) continue;
            auto* mut = const_cast<detail::Node<S>*>(n);
            if (mut->grad.empty()) mut->grad.assign(mut->data.size(), S(0));
            for (size_t i = 0; i < g->size(); ++i) mut->grad[i] += (*g)[i];
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// primitive operations

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw NumericError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(
        a.shape(), std::move(out), {a, b},
        [an, bn](const std::vector<S>& g, detail::GradTable<S>& t) {
            if (an->requires_grad) {
                auto& ga = t.acc(an.get());
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.acc(bn.get());
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw NumericError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(
        a.shape(), std::move(out), {a, b},
        [an, bn](const std::vector<S>& g, detail::GradTable<S>& t) {
            if (an->requires_grad) {
                auto& ga = t.acc(an.get());
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto& gb = t.acc(bn.get());
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
            }
        });
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto an = a.node();
    return detail::make_op<S>(a.shape(), std::move(out), {a},
                              [an, c](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& ga = t.acc(an.get());
                                  for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                              });
}

// multiply every entry by a 1-element tensor (learned gate)
template <class S>
Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& s) {
    if (s.numel() != 1) throw NumericError("scale_by: gate must be a single value, got " + shape_str(s.shape()));
    S c = s.item();
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto an = a.node();
    auto sn = s.node();
    return detail::make_op<S>(
        a.shape(), std::move(out), {a, s},
        [an, sn, c](const std::vector<S>& g, detail::GradTable<S>& t) {
            if (an->requires_grad) {
                auto& ga = t.acc(an.get());
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            }
            if (sn->requires_grad) {
                S acc = 0;
                for (size_t i = 0; i < g.size(); ++i) acc += g[i] * an->data[i];
                t.acc(sn.get())[0] += acc;
            }
        });
}

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_2d(a, "matmul");
    detail::check_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw NumericError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), p = b.cols();
    std::vector<S> out(static_cast<size_t>(m) * p);
    detail::mat(out, m, p).noalias() = detail::mat(a.values(), m, k) * detail::mat(b.values(), k, p);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(
        {m, p}, std::move(out), {a, b},
        [an, bn, m, k, p](const std::vector<S>& g, detail::GradTable<S>& t) {
            auto G = detail::mat(g, m, p);
            if (an->requires_grad)
                detail::mat(t.acc(an.get()), m, k).noalias() += G * detail::mat(bn->data, k, p).transpose();
            if (bn->requires_grad)
                detail::mat(t.acc(bn.get()), k, p).noalias() += detail::mat(an->data, m, k).transpose() * G;
        });
}

// a @ b^T without materializing the transpose (attention scores, tied unembedding)
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_2d(a, "matmul_nt");
    detail::check_2d(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw NumericError("matmul_nt: trailing extents differ, " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), p = b.rows();
    std::vector<S> out(static_cast<size_t>(m) * p);
    detail::mat(out, m, p).noalias() = detail::mat(a.values(), m, k) * detail::mat(b.values(), p, k).transpose();
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(
        {m, p}, std::move(out), {a, b},
        [an, bn, m, k, p](const std::vector<S>& g, detail::GradTable<S>& t) {
            auto G = detail::mat(g, m, p);
            if (an->requires_grad)
                detail::mat(t.acc(an.get()), m, k).noalias() += G * detail::mat(bn->data, p, k);
            if (bn->requires_grad)
                detail::mat(t.acc(bn.get()), p, k).noalias() += G.transpose() * detail::mat(an->data, m, k);
        });
}

// y = x @ w + b with b broadcast across rows
template <class S>
Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    detail::check_2d(x, "affine");
    detail::check_2d(w, "affine");
    if (x.cols() != w.rows())
        throw NumericError("affine: inner extents differ, " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    if (b.numel() != w.cols())
        throw NumericError("affine: bias length " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
    const int m = x.rows(), k = x.cols(), p = w.cols();
    std::vector<S> out(static_cast<size_t>(m) * p);
    detail::mat(out, m, p).noalias() = detail::mat(x.values(), m, k) * detail::mat(w.values(), k, p);
    const auto& bv = b.values();
    for (int r = 0; r < m; ++r) {
        S* row = out.data() + static_cast<size_t>(r) * p;
        for (int c = 0; c < p; ++c) row[c] += bv[c];
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_op<S>(
        {m, p}, std::move(out), {x, w, b},
        [xn, wn, bn, m, k, p](const std::vector<S>& g, detail::GradTable<S>& t) {
            auto G = detail::mat(g, m, p);
            if (xn->requires_grad)
                detail::mat(t.acc(xn.get()), m, k).noalias() += G * detail::mat(wn->data, k, p).transpose();
            if (wn->requires_grad)
                detail::mat(t.acc(wn.get()), k, p).noalias() += detail::mat(xn->data, m, k).transpose() * G;
            if (bn->requires_grad) {
                auto& gb = t.acc(bn.get());
                for (int r = 0; r < m; ++r) {
                    const S* row = g.data() + static_cast<size_t>(r) * p;
                    for (int c = 0; c < p; ++c) gb[c] += row[c];
                }
            }
        });
}

template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    detail::check_2d(a, "softmax_rows");
    const int n = a.rows(), m = a.cols();
    const auto& av = a.values();
    for (S v : av)
        if (std::isnan(static_cast<double>(v))) throw NumericError("softmax_rows: NaN input");
    std::vector<S> out(av.size());
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    for (int r = 0; r < n; ++r) {
        Eigen::Map<const Arr> in(av.data() + static_cast<size_t>(r) * m, m);
        Eigen::Map<Arr> o(out.data() + static_cast<size_t>(r) * m, m);
        o = (in - in.maxCoeff()).exp();
        o *= S(1) / o.sum();
    }
    auto an = a.node();
    auto on = out;  // copy kept by the closure for the Jacobian product
    return detail::make_op<S>(
        a.shape(), std::move(out), {a},
        [an, on, n, m](const std::vector<S>& g, detail::GradTable<S>& t) {
            auto& ga = t.acc(an.get());
            for (int r = 0; r < n; ++r) {
                const S* y = on.data() + static_cast<size_t>(r) * m;
                const S* gr = g.data() + static_cast<size_t>(r) * m;
                S dot = 0;
                for (int c = 0; c < m; ++c) dot += gr[c] * y[c];
                S* o = ga.data() + static_cast<size_t>(r) * m;
                for (int c = 0; c < m; ++c) o[c] += y[c] * (gr[c] - dot);
            }
        });
}

// row-wise x / sqrt(mean(x^2) + eps) * gain
template <class S>
Tensor<S> rmsnorm(const Tensor<S>& a, const Tensor<S>& gain) {
    detail::check_2d(a, "rmsnorm");
    const int n = a.rows(), h = a.cols();
    if (gain.numel() != h)
        throw NumericError("rmsnorm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(a.shape()));
    const S eps = static_cast<S>(NumericConstants::rmsnorm_eps);
    const auto& av = a.values();
    const auto& gv = gain.values();
    std::vector<S> out(av.size());
    std::vector<S> inv_rms(n);
    for (int r = 0; r < n; ++r) {
        const S* in = av.data() + static_cast<size_t>(r) * h;
        S ms = 0;
        for (int c = 0; c < h; ++c) ms += in[c] * in[c];
        ms /= static_cast<S>(h);
        S s = S(1) / std::sqrt(ms + eps);
        inv_rms[r] = s;
        S* o = out.data() + static_cast<size_t>(r) * h;
        for (int c = 0; c < h; ++c) o[c] = in[c] * s * gv[c];
    }
    auto an = a.node();
    auto gn = gain.node();
    return detail::make_op<S>(
        a.shape(), std::move(out), {a, gain},
        [an, gn, inv_rms, n, h](const std::vector<S>& g, detail::GradTable<S>& t) {
            for (int r = 0; r < n; ++r) {
                const S* x = an->data.data() + static_cast<size_t>(r) * h;
                const S* gr = g.data() + static_cast<size_t>(r) * h;
                const S s = inv_rms[r];
                if (an->requires_grad) {
                    S dot = 0;  // sum_i g_i * gain_i * x_i
                    for (int c = 0; c < h; ++c) dot += gr[c] * gn->data[c] * x[c];
                    const S k = dot * s * s * s / static_cast<S>(h);
                    S* o = t.acc(an.get()).data() + static_cast<size_t>(r) * h;
                    for (int c = 0; c < h; ++c) o[c] += gr[c] * gn->data[c] * s - x[c] * k;
                }
                if (gn->requires_grad) {
                    S* og = t.acc(gn.get()).data();
                    for (int c = 0; c < h; ++c) og[c] += gr[c] * x[c] * s;
                }
            }
        });
}

// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
    constexpr S c0 = static_cast<S>(0.7978845608028653559);  // sqrt(2/pi)
    constexpr S c1 = static_cast<S>(0.044715);
    const int64_t n = a.numel();
    std::vector<S> out(static_cast<size_t>(n));
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> x(a.values().data(), n);
    Eigen::Map<Arr>(out.data(), n) = S(0.5) * x * (S(1) + (c0 * (x + c1 * x.cube())).tanh());
    auto an = a.node();
    return detail::make_op<S>(
        a.shape(), std::move(out), {a},
        [an, n, c0, c1](const std::vector<S>& g, detail::GradTable<S>& t) {
            using ArrL = Eigen::Array<S, Eigen::Dynamic, 1>;
            Eigen::Map<const ArrL> x(an->data.data(), n);
            Eigen::Map<const ArrL> gr(g.data(), n);
            ArrL th = (c0 * (x + c1 * x.cube())).tanh();
            ArrL dudx = c0 * (S(1) + S(3) * c1 * x.square());
            Eigen::Map<ArrL>(t.acc(an.get()).data(), n) +=
                gr * (S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th.square()) * dudx);
        });
}

// [a | b] along columns
template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_2d(a, "concat_channels");
    detail::check_2d(b, "concat_channels");
    if (a.rows() != b.rows())
        throw NumericError("concat_channels: leading extents differ, " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    const int n = a.rows(), ca = a.cols(), cb = b.cols();
    std::vector<S> out(static_cast<size_t>(n) * (ca + cb));
    for (int r = 0; r < n; ++r) {
        std::memcpy(out.data() + static_cast<size_t>(r) * (ca + cb), a.values().data() + static_cast<size_t>(r) * ca,
                    sizeof(S) * ca);
        std::memcpy(out.data() + static_cast<size_t>(r) * (ca + cb) + ca,
                    b.values().data() + static_cast<size_t>(r) * cb, sizeof(S) * cb);
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<S>(
        {n, ca + cb}, std::move(out), {a, b},
        [an, bn, n, ca, cb](const std::vector<S>& g, detail::GradTable<S>& t) {
            if (an->requires_grad) {
                auto& ga = t.acc(an.get());
                for (int r = 0; r < n; ++r) {
                    const S* src = g.data() + static_cast<size_t>(r) * (ca + cb);
                    S* dst = ga.data() + static_cast<size_t>(r) * ca;
                    for (int c = 0; c < ca; ++c) dst[c] += src[c];
                }
            }
            if (bn->requires_grad) {
                auto& gb = t.acc(bn.get());
                for (int r = 0; r < n; ++r) {
                    const S* src = g.data() + static_cast<size_t>(r) * (ca + cb) + ca;
                    S* dst = gb.data() + static_cast<size_t>(r) * cb;
                    for (int c = 0; c < cb; ++c) dst[c] += src[c];
                }
            }
        });
}

template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int c0, int c1) {
    detail::check_2d(a, "slice_cols");
    if (c0 < 0 || c1 > a.cols() || c0 >= c1)
        throw NumericError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " +
                           shape_str(a.shape()));
    const int n = a.rows(), m = a.cols(), w = c1 - c0;
    std::vector<S> out(static_cast<size_t>(n) * w);
    for (int r = 0; r < n; ++r)
        std::memcpy(out.data() + static_cast<size_t>(r) * w, a.values().data() + static_cast<size_t>(r) * m + c0,
                    sizeof(S) * w);
    auto an = a.node();
    return detail::make_op<S>({n, w}, std::move(out), {a},
                              [an, n, m, w, c0](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& ga = t.acc(an.get());
                                  for (int r = 0; r < n; ++r) {
                                      const S* src = g.data() + static_cast<size_t>(r) * w;
                                      S* dst = ga.data() + static_cast<size_t>(r) * m + c0;
                                      for (int c = 0; c < w; ++c) dst[c] += src[c];
                                  }
                              });
}

template <class S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
    detail::check_2d(a, "slice_rows");
    if (r0 < 0 || r1 > a.rows() || r0 >= r1)
        throw NumericError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) + ") out of " +
                           shape_str(a.shape()));
    const int m = a.cols(), n = r1 - r0;
    std::vector<S> out(a.values().begin() + static_cast<size_t>(r0) * m, a.values().begin() + static_cast<size_t>(r1) * m);
    auto an = a.node();
    return detail::make_op<S>({n, m}, std::move(out), {a},
                              [an, r0, n, m](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& ga = t.acc(an.get());
                                  const size_t off = static_cast<size_t>(r0) * m;
                                  for (size_t i = 0; i < g.size(); ++i) ga[off + i] += g[i];
                              });
}

// rows [r0, r0+delta.rows) of base get delta added; all other rows pass through
template <class S>
Tensor<S> add_rows(const Tensor<S>& base, const Tensor<S>& delta, int r0) {
    detail::check_2d(base, "add_rows");
    detail::check_2d(delta, "add_rows");
    if (base.cols() != delta.cols() || r0 < 0 || r0 + delta.rows() > base.rows())
        throw NumericError("add_rows: patch " + shape_str(delta.shape()) + " at row " + std::to_string(r0) +
                           " does not fit " + shape_str(base.shape()));
    std::vector<S> out = base.values();
    const int m = base.cols(), k = delta.rows();
    for (int r = 0; r < k; ++r) {
        S* dst = out.data() + static_cast<size_t>(r0 + r) * m;
        const S* src = delta.values().data() + static_cast<size_t>(r) * m;
        for (int c = 0; c < m; ++c) dst[c] += src[c];
    }
    auto bn = base.node();
    auto dn = delta.node();
    return detail::make_op<S>(
        base.shape(), std::move(out), {base, delta},
        [bn, dn, r0, m, k](const std::vector<S>& g, detail::GradTable<S>& t) {
            if (bn->requires_grad) {
                auto& gb = t.acc(bn.get());
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
            if (dn->requires_grad) {
                auto& gd = t.acc(dn.get());
                const size_t off = static_cast<size_t>(r0) * m;
                for (size_t i = 0; i < static_cast<size_t>(k) * m; ++i) gd[i] += g[off + i];
            }
        });
}

// rows [r0, r0+patch.rows) of base replaced by patch
template <class S>
Tensor<S> set_rows(const Tensor<S>& base, const Tensor<S>& patch, int r0) {
    detail::check_2d(base, "set_rows");
    detail::check_2d(patch, "set_rows");
    if (base.cols() != patch.cols() || r0 < 0 || r0 + patch.rows() > base.rows())
        throw NumericError("set_rows: patch " + shape_str(patch.shape()) + " at row " + std::to_string(r0) +
                           " does not fit " + shape_str(base.shape()));
    std::vector<S> out = base.values();
    const int m = base.cols(), k = patch.rows();
    std::memcpy(out.data() + static_cast<size_t>(r0) * m, patch.values().data(), sizeof(S) * static_cast<size_t>(k) * m);
    auto bn = base.node();
    auto pn = patch.node();
    return detail::make_op<S>(
        base.shape(), std::move(out), {base, patch},
        [bn, pn, r0, m, k](const std::vector<S>& g, detail::GradTable<S>& t) {
            const size_t off = static_cast<size_t>(r0) * m;
            const size_t len = static_cast<size_t>(k) * m;
            if (bn->requires_grad) {
                auto& gb = t.acc(bn.get());
                for (size_t i = 0; i < off; ++i) gb[i] += g[i];
                for (size_t i = off + len; i < g.size(); ++i) gb[i] += g[i];
            }
            if (pn->requires_grad) {
                auto& gp = t.acc(pn.get());
                for (size_t i = 0; i < len; ++i) gp[i] += g[off + i];
            }
        });
}

// out row i = table row ids[i]; gradient scatter-adds into the table
template <class S>
Tensor<S> embedding_rows(const Tensor<S>& table, const std::vector<int>& ids) {
    detail::check_2d(table, "embedding_rows");
    const int m = table.cols();
    const int n = static_cast<int>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= table.rows())
            throw NumericError("embedding_rows: id " + std::to_string(id) + " outside table " +
                               shape_str(table.shape()));
    std::vector<S> out(static_cast<size_t>(n) * m);
    for (int r = 0; r < n; ++r)
        std::memcpy(out.data() + static_cast<size_t>(r) * m, table.values().data() + static_cast<size_t>(ids[r]) * m,
                    sizeof(S) * m);
    auto tn = table.node();
    auto ids_copy = ids;
    return detail::make_op<S>({n, m}, std::move(out), {table},
                              [tn, ids_copy, n, m](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& gt = t.acc(tn.get());
                                  for (int r = 0; r < n; ++r) {
                                      S* dst = gt.data() + static_cast<size_t>(ids_copy[r]) * m;
                                      const S* src = g.data() + static_cast<size_t>(r) * m;
                                      for (int c = 0; c < m; ++c) dst[c] += src[c];
                                  }
                              });
}

// out row i = [x[idx[i][0]] | x[idx[i][1]] | ...]; used by 2x2 patch merging
template <class S>
Tensor<S> gather_concat_rows(const Tensor<S>& x, const std::vector<std::vector<int>>& idx) {
    detail::check_2d(x, "gather_concat_rows");
    const int m = x.cols();
    const int n = static_cast<int>(idx.size());
    const int k = n ? static_cast<int>(idx[0].size()) : 0;
    std::vector<S> out(static_cast<size_t>(n) * k * m);
    for (int r = 0; r < n; ++r) {
        if (static_cast<int>(idx[r].size()) != k) throw NumericError("gather_concat_rows: ragged index list");
        for (int j = 0; j < k; ++j) {
            int src = idx[r][j];
            if (src < 0 || src >= x.rows())
                throw NumericError("gather_concat_rows: row " + std::to_string(src) + " outside " +
                                   shape_str(x.shape()));
            std::memcpy(out.data() + (static_cast<size_t>(r) * k + j) * m,
                        x.values().data() + static_cast<size_t>(src) * m, sizeof(S) * m);
        }
    }
    auto xn = x.node();
    auto idx_copy = idx;
    return detail::make_op<S>({n, k * m}, std::move(out), {x},
                              [xn, idx_copy, n, k, m](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& gx = t.acc(xn.get());
                                  for (int r = 0; r < n; ++r)
                                      for (int j = 0; j < k; ++j) {
                                          S* dst = gx.data() + static_cast<size_t>(idx_copy[r][j]) * m;
                                          const S* src = g.data() + (static_cast<size_t>(r) * k + j) * m;
                                          for (int c = 0; c < m; ++c) dst[c] += src[c];
                                      }
                              });
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    const auto& av = a.values();
    S sum = 0;
    for (S v : av) sum += v;
    const S inv = S(1) / static_cast<S>(av.size());
    auto an = a.node();
    return detail::make_op<S>({1}, {sum * inv}, {a},
                              [an, inv](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& ga = t.acc(an.get());
                                  const S gi = g[0] * inv;
                                  for (auto& v : ga) v += gi;
                              });
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    const auto& av = a.values();
    S sum = 0;
    for (S v : av) sum += v;
    auto an = a.node();
    return detail::make_op<S>({1}, {sum}, {a},
                              [an](const std::vector<S>& g, detail::GradTable<S>& t) {
                                  auto& ga = t.acc(an.get());
                                  for (auto& v : ga) v += g[0];
                              });
}

// value pass-through, gradient cut
template <class S>
Tensor<S> detach(const Tensor<S>& a) {
    return Tensor<S>(a.shape(), a.values());
}

// Mean cross-entropy of next-token prediction over masked positions:
// position j with mask[j] uses logits row j-1 and target ids[j].
template <class S>
Tensor<S> cross_entropy_next_token(const Tensor<S>& logits, const std::vector<int>& ids,
                                   const std::vector<uint8_t>& mask) {
    detail::check_2d(logits, "cross_entropy_next_token");
    if (ids.size() != mask.size()) throw NumericError("cross_entropy_next_token: ids/mask length mismatch");
    if (static_cast<int>(ids.size()) > logits.rows() + 1)
        throw NumericError("cross_entropy_next_token: more positions than logit rows");
    const int v = logits.cols();
    std::vector<std::pair<int, int>> pairs;  // (logit row, target id)
    for (size_t j = 0; j < mask.size(); ++j) {
        if (!mask[j]) continue;
        if (j == 0) throw NumericError("cross_entropy_next_token: mask cannot cover position 0");
        pairs.emplace_back(static_cast<int>(j) - 1, ids[j]);
    }
    if (pairs.empty()) throw NumericError("cross_entropy_next_token: empty target mask");
    const auto& lv = logits.values();
    double total = 0;
    std::vector<std::vector<S>> probs(pairs.size());
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    for (size_t p = 0; p < pairs.size(); ++p) {
        Eigen::Map<const Arr> row(lv.data() + static_cast<size_t>(pairs[p].first) * v, v);
        const S mx = row.maxCoeff();
        probs[p].resize(v);
        Eigen::Map<Arr> pr(probs[p].data(), v);
        pr = (row - mx).exp();
        const S sum = pr.sum();
        pr *= S(1) / sum;
        total += std::log(static_cast<double>(sum)) + static_cast<double>(mx) -
                 static_cast<double>(row[pairs[p].second]);
    }
    const S loss = static_cast<S>(total / static_cast<double>(pairs.size()));
    auto ln = logits.node();
    const S inv_m = S(1) / static_cast<S>(pairs.size());
    return detail::make_op<S>(
        {1}, {loss}, {logits},
        [ln, pairs, probs, v, inv_m](const std::vector<S>& g, detail::GradTable<S>& t) {
            auto& gl = t.acc(ln.get());
            const S go = g[0] * inv_m;
            for (size_t p = 0; p < pairs.size(); ++p) {
                S* dst = gl.data() + static_cast<size_t>(pairs[p].first) * v;
                const S* pr = probs[p].data();
                for (int c = 0; c < v; ++c) dst[c] += go * pr[c];
                dst[pairs[p].second] -= go;
            }
        });
}

// Fused multi-head attention: per-head scaled dot-product scores with an
// optional causal mask, stable softmax, and context gather, in one recorded
// node. Equivalent to composing slice/matmul_nt/softmax_rows/matmul per
// head; fused to keep graphs small on the hot path.
template <class S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads, bool causal) {
    detail::check_2d(q, "multi_head_attention");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw NumericError("multi_head_attention: q/k/v shapes differ, " + shape_str(q.shape()) + " vs " +
                           shape_str(k.shape()) + " vs " + shape_str(v.shape()));
    const int n = q.rows(), h = q.cols();
    if (h % heads != 0) throw NumericError("multi_head_attention: width not divisible by head count");
    const int dh = h / heads;
    const S scl = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    using Stride = Eigen::OuterStride<>;
    using StridedC = Eigen::Map<const detail::EMat<S>, 0, Stride>;
    using StridedM = Eigen::Map<detail::EMat<S>, 0, Stride>;

    std::vector<S> out(static_cast<size_t>(n) * h);
    // per-head softmax matrices kept for the backward closure; head blocks
    // are packed into compact matrices so the products hit the fast gemm path
    auto attn = std::make_shared<std::vector<detail::EMat<S>>>(static_cast<size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
        detail::EMat<S> Qh = StridedC(q.values().data() + static_cast<size_t>(hd) * dh, n, dh, Stride(h));
        detail::EMat<S> Kh = StridedC(k.values().data() + static_cast<size_t>(hd) * dh, n, dh, Stride(h));
        detail::EMat<S> Vh = StridedC(v.values().data() + static_cast<size_t>(hd) * dh, n, dh, Stride(h));
        detail::EMat<S> scores(n, n);
        scores.noalias() = Qh * Kh.transpose();
        scores *= scl;
        if (causal) {
            const S neg = static_cast<S>(NumericConstants::attn_mask_neg);
            for (int r = 0; r < n; ++r)
                for (int c = r + 1; c < n; ++c) scores(r, c) = neg;
        }
        for (int r = 0; r < n; ++r) {
            auto row = scores.row(r).array();
            row = (row - row.maxCoeff()).exp();
            row *= S(1) / row.sum();
        }
        detail::EMat<S> Oh(n, dh);
        Oh.noalias() = scores * Vh;
        StridedM(out.data() + static_cast<size_t>(hd) * dh, n, dh, Stride(h)) = Oh;
        (*attn)[static_cast<size_t>(hd)] = std::move(scores);
    }

    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return detail::make_op<S>(
        {n, h}, std::move(out), {q, k, v},
        [qn, kn, vn, attn, n, h, dh, heads, scl](const std::vector<S>& g, detail::GradTable<S>& t) {
            std::vector<S>* gq = qn->requires_grad ? &t.acc(qn.get()) : nullptr;
            std::vector<S>* gk = kn->requires_grad ? &t.acc(kn.get()) : nullptr;
            std::vector<S>* gv = vn->requires_grad ? &t.acc(vn.get()) : nullptr;
            for (int hd = 0; hd < heads; ++hd) {
                const size_t off = static_cast<size_t>(hd) * dh;
                detail::EMat<S> Go = StridedC(g.data() + off, n, dh, Stride(h));
                detail::EMat<S> Qh = StridedC(qn->data.data() + off, n, dh, Stride(h));
                detail::EMat<S> Kh = StridedC(kn->data.data() + off, n, dh, Stride(h));
                detail::EMat<S> Vh = StridedC(vn->data.data() + off, n, dh, Stride(h));
                const detail::EMat<S>& A = (*attn)[static_cast<size_t>(hd)];
                if (gv) {
                    detail::EMat<S> GVh(n, dh);
                    GVh.noalias() = A.transpose() * Go;
                    StridedM(gv->data() + off, n, dh, Stride(h)) += GVh;
                }
                if (gq || gk) {
                    detail::EMat<S> dA(n, n);
                    dA.noalias() = Go * Vh.transpose();
                    // softmax jacobian per row
                    for (int r = 0; r < n; ++r) {
                        S dot = 0;
                        for (int c = 0; c < n; ++c) dot += dA(r, c) * A(r, c);
                        for (int c = 0; c < n; ++c) dA(r, c) = A(r, c) * (dA(r, c) - dot);
                    }
                    if (gq) {
                        detail::EMat<S> GQh(n, dh);
                        GQh.noalias() = dA * Kh;
                        StridedM(gq->data() + off, n, dh, Stride(h)) += GQh * scl;
                    }
                    if (gk) {
                        detail::EMat<S> GKh(n, dh);
                        GKh.noalias() = dA.transpose() * Qh;
                        StridedM(gk->data() + off, n, dh, Stride(h)) += GKh * scl;
                    }
                }
            }
        });
}

// additive causal mask constant: 0 on/below diagonal, large negative above
template <class S>
Tensor<S> causal_mask(int n) {
    std::vector<S> m(static_cast<size_t>(n) * n, S(0));
    const S neg = static_cast<S>(NumericConstants::attn_mask_neg);
    for (int r = 0; r < n; ++r)
        for (int c = r + 1; c < n; ++c) m[static_cast<size_t>(r) * n + c] = neg;
    return Tensor<S>({n, n}, std::move(m));
}

}  // namespace loopvlm
