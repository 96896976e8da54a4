#pragma once

// Reverse-mode autodiff tensor core.
//
// Tensors are shared handles onto tape nodes. Ops build a DAG; calling
// backward() on a scalar propagates gradients to every requires_grad tensor.
// Leaf gradients accumulate across backward calls until zero_grad(); interior
// node gradients are reset at the start of each backward pass.
//
// Scalar type T is float for training and double for gradient-check mode.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cdnpg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << "]";
    return os.str();
}

// ---- grad mode --------------------------------------------------------------

inline bool& grad_mode_ref() {
    thread_local bool on = true;
    return on;
}
inline bool grad_enabled() { return grad_mode_ref(); }

// RAII guard: disables tape construction in scope (inference, finite differences).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_ref()) { grad_mode_ref() = false; }
    ~NoGradGuard() { grad_mode_ref() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- checked mode: NaN/Inf detection ----------------------------------------

inline bool& finite_checks_ref() {
    thread_local bool on = false;
    return on;
}
inline void set_finite_checks(bool v) { finite_checks_ref() = v; }
inline bool finite_checks_enabled() { return finite_checks_ref(); }

// ---- tape node ---------------------------------------------------------------

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized like value iff requires_grad
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return value.size(); }
    bool is_leaf() const { return !backward_fn; }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s, bool requires_grad = false) {
        return filled(std::move(s), T(0), requires_grad);
    }
    static Tensor ones(Shape s, bool requires_grad = false) {
        return filled(std::move(s), T(1), requires_grad);
    }
    static Tensor filled(Shape s, T v, bool requires_grad = false) {
        check_shape(s);
        auto n = std::make_shared<TensorNode<T>>();
        n->value.assign(shape_numel(s), v);
        n->shape = std::move(s);
        init_grad(*n, requires_grad);
        return Tensor(std::move(n));
    }
    static Tensor from_data(Shape s, std::vector<T> v, bool requires_grad = false) {
        check_shape(s);
        if (shape_numel(s) != v.size())
            throw std::runtime_error("tensor: data size " + std::to_string(v.size()) +
                                     " does not match shape " + shape_str(s));
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(s);
        n->value = std::move(v);
        init_grad(*n, requires_grad);
        return Tensor(std::move(n));
    }
    static Tensor scalar(T v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<T>& grad() const {
        if (!node_->requires_grad)
            throw std::runtime_error("tensor: grad() on a tensor that does not require grad");
        return node_->grad;
    }

    T item() const {
        if (numel() != 1)
            throw std::runtime_error("tensor: item() on non-scalar of shape " + shape_str(shape()));
        return node_->value[0];
    }
    T at(std::size_t i) const { return node_->value.at(i); }
    T at(std::size_t i, std::size_t j) const {
        if (rank() != 2) throw std::runtime_error("tensor: at(i,j) on rank-" + std::to_string(rank()));
        return node_->value.at(i * shape()[1] + j);
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Backpropagate from a scalar. Interior grads are recomputed from scratch;
    // leaf grads accumulate until explicitly zeroed.
    void backward() {
        if (numel() != 1)
            throw std::runtime_error("tensor: backward() requires a scalar, got shape " +
                                     shape_str(shape()));
        if (!node_->requires_grad)
            throw std::runtime_error("tensor: backward() on a tensor that does not require grad");

        std::vector<TensorNode<T>*> order;  // post-order: ancestors first, self last
        std::unordered_set<TensorNode<T>*> seen;
        struct Frame {
            TensorNode<T>* n;
            std::size_t next;
        };
        std::vector<Frame> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.n->parents.size()) {
                TensorNode<T>* p = f.n->parents[f.next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.n);
                stack.pop_back();
            }
        }
        for (TensorNode<T>* n : order)
            if (!n->is_leaf()) std::fill(n->grad.begin(), n->grad.end(), T(0));
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }

    std::shared_ptr<TensorNode<T>>& node() { return node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

private:
    static void check_shape(const Shape& s) {
        if (s.empty()) throw std::runtime_error("tensor: rank-0 shapes are not supported");
        for (std::size_t d : s)
            if (d == 0) throw std::runtime_error("tensor: zero-sized dimension in shape " + shape_str(s));
    }
    static void init_grad(TensorNode<T>& n, bool requires_grad) {
        n.requires_grad = requires_grad;
        if (requires_grad) n.grad.assign(n.value.size(), T(0));
    }

    std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

// ---- op construction ---------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backward_fn) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    if (grad_enabled())
        for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->grad.assign(n->value.size(), T(0));
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(n));
}

// Broadcasting over trailing dimensions with size-1 expansion.
struct BcastPlan {
    Shape out;
    std::vector<std::size_t> astride, bstride;  // per out-dim; 0 where broadcast
    std::size_t n = 1;
    bool same = false;
};

inline BcastPlan make_bcast_plan(const Shape& a, const Shape& b, const char* op) {
    BcastPlan p;
    if (a == b) {
        p.out = a;
        p.n = shape_numel(a);
        p.same = true;
        return p;
    }
    const std::size_t rank = std::max(a.size(), b.size());
    p.out.assign(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw std::runtime_error(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                     shape_str(b) + " are not broadcastable");
        p.out[rank - 1 - i] = std::max(da, db);
    }
    p.n = shape_numel(p.out);
    auto strides_for = [&](const Shape& s) {
        std::vector<std::size_t> own(s.size());
        std::size_t acc = 1;
        for (std::size_t i = s.size(); i-- > 0;) {
            own[i] = acc;
            acc *= s[i];
        }
        std::vector<std::size_t> st(rank, 0);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const std::size_t d = rank - s.size() + i;
            st[d] = (s[i] == 1 && p.out[d] > 1) ? 0 : own[i];
        }
        return st;
    };
    p.astride = strides_for(a);
    p.bstride = strides_for(b);
    return p;
}

// Calls body(out_idx, a_idx, b_idx) for every output element.
template <typename Body>
void bcast_for_each(const BcastPlan& p, Body&& body) {
    if (p.same) {
        for (std::size_t i = 0; i < p.n; ++i) body(i, i, i);
        return;
    }
    const std::size_t rank = p.out.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t oi = 0; oi < p.n; ++oi) {
        body(oi, ai, bi);
        for (std::size_t d = rank; d-- > 0;) {
            ai += p.astride[d];
            bi += p.bstride[d];
            if (++idx[d] < p.out[d]) break;
            idx[d] = 0;
            ai -= p.astride[d] * p.out[d];
            bi -= p.bstride[d] * p.out[d];
        }
    }
}

// Elementwise binary op with broadcasting. dfda/dfdb give d out / d operand at
// a point; gradients for broadcast operands are sum-reduced automatically.
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA dfda, DB dfdb) {
    BcastPlan plan = make_bcast_plan(a.shape(), b.shape(), name);
    std::vector<T> out(plan.n);
    {
        const std::vector<T>& av = a.data();
        const std::vector<T>& bv = b.data();
        bcast_for_each(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
            out[oi] = f(av[ai], bv[bi]);
        });
    }
    return make_op<T>(
        plan.out, std::move(out), {a, b},
        [plan, dfda, dfdb](TensorNode<T>& self) {
            TensorNode<T>& pa = *self.parents[0];
            TensorNode<T>& pb = *self.parents[1];
            bcast_for_each(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
                const T g = self.grad[oi];
                if (pa.requires_grad) pa.grad[ai] += g * dfda(pa.value[ai], pb.value[bi]);
                if (pb.requires_grad) pb.grad[bi] += g * dfdb(pa.value[ai], pb.value[bi]);
            });
        });
}

template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& x, const char*, F f, DF dfdx) {
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    return make_op<T>(x.shape(), std::move(out), {x}, [dfdx](TensorNode<T>& self) {
        TensorNode<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < self.value.size(); ++i)
            p.grad[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    });
}

}  // namespace detail

// ---- elementwise ops ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

// min/max route the gradient to the selected branch; ties select the first operand.
template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "minimum", [](T x, T y) { return x <= y ? x : y; },
        [](T x, T y) { return x <= y ? T(1) : T(0); }, [](T x, T y) { return x <= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, "maximum", [](T x, T y) { return x >= y ? x : y; },
        [](T x, T y) { return x >= y ? T(1) : T(0); }, [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> minimum(const Tensor<T>& a, std::type_identity_t<T> b) {
    return minimum(a, Tensor<T>::scalar(b));
}
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, std::type_identity_t<T> b) {
    return maximum(a, Tensor<T>::scalar(b));
}

// Gradient passes through wherever lo <= x <= hi (boundary included), matching
// the min/max tie rule for the composition min(max(x, lo), hi).
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, std::type_identity_t<T> lo, std::type_identity_t<T> hi) {
    if (!(lo <= hi)) throw std::runtime_error("clamp: lo > hi");
    return detail::unary_op(
        x, "clamp", [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
        [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v >= T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(
        x, "sigmoid",
        [](T v) { return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
        [](T, T y) { return y * (T(1) - y); });
}

// x^p for scalar p; x must be positive when p is non-integral.
template <typename T>
Tensor<T> powt(const Tensor<T>& x, std::type_identity_t<T> p) {
    return detail::unary_op(
        x, "pow", [p](T v) { return std::pow(v, p); },
        [p](T v, T) { return p * std::pow(v, p - T(1)); });
}

// base^x for scalar base > 0.
template <typename T>
Tensor<T> pow_base(std::type_identity_t<T> base, const Tensor<T>& x) {
    if (!(base > T(0))) throw std::runtime_error("pow_base: base must be positive");
    const T lb = std::log(base);
    return detail::unary_op(
        x, "pow_base", [base](T v) { return std::pow(base, v); },
        [lb](T, T y) { return y * lb; });
}

// ---- operator sugar ------------------------------------------------------------

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, std::type_identity_t<T> b) { return add(a, Tensor<T>::scalar(b)); }
template <typename T>
Tensor<T> operator+(std::type_identity_t<T> a, const Tensor<T>& b) { return add(Tensor<T>::scalar(a), b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, std::type_identity_t<T> b) { return sub(a, Tensor<T>::scalar(b)); }
template <typename T>
Tensor<T> operator-(std::type_identity_t<T> a, const Tensor<T>& b) { return sub(Tensor<T>::scalar(a), b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, std::type_identity_t<T> b) { return mul(a, Tensor<T>::scalar(b)); }
template <typename T>
Tensor<T> operator*(std::type_identity_t<T> a, const Tensor<T>& b) { return mul(Tensor<T>::scalar(a), b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, std::type_identity_t<T> b) { return div(a, Tensor<T>::scalar(b)); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& x) { return mul(x, Tensor<T>::scalar(T(-1))); }

// ---- reductions -----------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = 0;
    for (T v : x.data()) s += v;
    return detail::make_op<T>({1}, {s}, {x}, [](TensorNode<T>& self) {
        TensorNode<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        const T g = self.grad[0];
        for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += g;
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    const T inv = T(1) / T(x.numel());
    return sum_all(x) * inv;
}

namespace detail {
inline void resolve_axis(int& axis, std::size_t rank, const char* op) {
    if (axis < 0) axis += static_cast<int>(rank);
    if (axis < 0 || axis >= static_cast<int>(rank))
        throw std::runtime_error(std::string(op) + ": axis out of range for rank " +
                                 std::to_string(rank));
}
}  // namespace detail

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim) {
    detail::resolve_axis(axis, x.rank(), "sum_axis");
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    const std::size_t n = s[axis];
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (static_cast<int>(i) == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(s[i]);
        }
    }
    if (os.empty()) os.push_back(1);

    std::vector<T> out(outer * inner, T(0));
    const std::vector<T>& xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];

    return detail::make_op<T>(os, std::move(out), {x}, [outer, n, inner](TensorNode<T>& self) {
        TensorNode<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t i = 0; i < inner; ++i)
                    p.grad[(o * n + k) * inner + i] += self.grad[o * inner + i];
    });
}

// ---- softmax / layer norm --------------------------------------------------------

// Numerically stable softmax along `axis`. In checked mode non-finite inputs throw.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    detail::resolve_axis(axis, x.rank(), "softmax");
    if (finite_checks_enabled()) {
        const std::vector<T>& xv = x.data();
        for (std::size_t i = 0; i < xv.size(); ++i)
            if (!std::isfinite(xv[i]))
                throw std::runtime_error("softmax: non-finite input at flat index " +
                                         std::to_string(i));
    }
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    const std::size_t n = s[axis];
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            T mx = xv[o * n * inner + i];
            for (std::size_t k = 1; k < n; ++k)
                mx = std::max(mx, xv[(o * n + k) * inner + i]);
            T sum = 0;
            for (std::size_t k = 0; k < n; ++k) {
                const T e = std::exp(xv[(o * n + k) * inner + i] - mx);
                out[(o * n + k) * inner + i] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t k = 0; k < n; ++k) out[(o * n + k) * inner + i] *= inv;
        }
    }
    // dx_k = y_k * (g_k - sum_j g_j y_j)
    return detail::make_op<T>(s, std::move(out), {x}, [outer, n, inner](TensorNode<T>& self) {
        TensorNode<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                T dot = 0;
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t at = (o * n + k) * inner + i;
                    dot += self.grad[at] * self.value[at];
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t at = (o * n + k) * inner + i;
                    p.grad[at] += self.value[at] * (self.grad[at] - dot);
                }
            }
        }
    });
}

// Layer normalization over the last axis with learnable gain/bias of shape [D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     std::type_identity_t<T> eps = T(1e-5)) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
        throw std::runtime_error("layer_norm: gain/bias must have shape [" + std::to_string(d) +
                                 "], got " + shape_str(gain.shape()) + " and " +
                                 shape_str(bias.shape()));
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.data();
    const std::vector<T>& gv = gain.data();
    const std::vector<T>& bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xp = xv.data() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xp[j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) {
            const T c = xp[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = (xp[j] - mean) * inv * gv[j] + bv[j];
    }
    // dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
    return detail::make_op<T>(
        s, std::move(out), {x, gain, bias}, [rows, d, eps](TensorNode<T>& self) {
            TensorNode<T>& px = *self.parents[0];
            TensorNode<T>& pg = *self.parents[1];
            TensorNode<T>& pb = *self.parents[2];
            std::vector<T> xhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xp = px.value.data() + r * d;
                const T* gp = self.grad.data() + r * d;
                T mean = 0;
                for (std::size_t j = 0; j < d; ++j) mean += xp[j];
                mean /= T(d);
                T var = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const T c = xp[j] - mean;
                    var += c * c;
                }
                var /= T(d);
                const T inv = T(1) / std::sqrt(var + eps);
                for (std::size_t j = 0; j < d; ++j) xhat[j] = (xp[j] - mean) * inv;
                if (pg.requires_grad)
                    for (std::size_t j = 0; j < d; ++j) pg.grad[j] += gp[j] * xhat[j];
                if (pb.requires_grad)
                    for (std::size_t j = 0; j < d; ++j) pb.grad[j] += gp[j];
                if (px.requires_grad) {
                    T sum_dxh = 0, sum_dxh_xh = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = gp[j] * pg.value[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[j];
                    }
                    const T m1 = sum_dxh / T(d);
                    const T m2 = sum_dxh_xh / T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = gp[j] * pg.value[j];
                        px.grad[r * d + j] += inv * (dxh - m1 - xhat[j] * m2);
                    }
                }
            }
        });
}

// ---- matmul / transpose -----------------------------------------------------------

namespace detail {

template <typename T>
using EigenMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const EigenMat<T>>;

// Batch iteration plan for matmul: broadcast over leading (batch) dims.
struct BatchPlan {
    Shape batch;                                 // broadcast batch shape
    std::vector<std::size_t> astride, bstride;   // strides in matrix units
    std::size_t count = 1;
};

inline BatchPlan make_batch_plan(const Shape& abatch, const Shape& bbatch, const char* op) {
    BatchPlan p;
    const std::size_t rank = std::max(abatch.size(), bbatch.size());
    p.batch.assign(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < abatch.size() ? abatch[abatch.size() - 1 - i] : 1;
        const std::size_t db = i < bbatch.size() ? bbatch[bbatch.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1)
            throw std::runtime_error(std::string(op) + ": batch dimensions not broadcastable");
        p.batch[rank - 1 - i] = std::max(da, db);
    }
    p.count = shape_numel(p.batch);
    auto strides_for = [&](const Shape& s) {
        std::vector<std::size_t> own(s.size());
        std::size_t acc = 1;
        for (std::size_t i = s.size(); i-- > 0;) {
            own[i] = acc;
            acc *= s[i];
        }
        std::vector<std::size_t> st(rank, 0);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const std::size_t d = rank - s.size() + i;
            st[d] = (s[i] == 1 && p.batch[d] > 1) ? 0 : own[i];
        }
        return st;
    };
    p.astride = strides_for(abatch);
    p.bstride = strides_for(bbatch);
    return p;
}

template <typename Body>
void batch_for_each(const BatchPlan& p, Body&& body) {
    std::vector<std::size_t> idx(p.batch.size(), 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t oi = 0; oi < p.count; ++oi) {
        body(oi, ai, bi);
        for (std::size_t d = p.batch.size(); d-- > 0;) {
            ai += p.astride[d];
            bi += p.bstride[d];
            if (++idx[d] < p.batch[d]) break;
            idx[d] = 0;
            ai -= p.astride[d] * p.batch[d];
            bi -= p.bstride[d] * p.batch[d];
        }
    }
}

}  // namespace detail

// Matrix product over the last two dimensions; leading dimensions broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw std::runtime_error("matmul: operands must have rank >= 2, got " +
                                 shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
    const std::size_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
    if (k != k2)
        throw std::runtime_error("matmul: inner dimensions disagree for shapes " + shape_str(as) +
                                 " and " + shape_str(bs));
    Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
    detail::BatchPlan plan = detail::make_batch_plan(abatch, bbatch, "matmul");

    Shape os = plan.batch;
    os.push_back(m);
    os.push_back(n);
    std::vector<T> out(plan.count * m * n);
    {
        const T* ap = a.data().data();
        const T* bp = b.data().data();
        T* op = out.data();
        detail::batch_for_each(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
            detail::CMatMap<T> A(ap + ai * m * k, m, k);
            detail::CMatMap<T> B(bp + bi * k * n, k, n);
            detail::MatMap<T> C(op + oi * m * n, m, n);
            C.noalias() = A * B;
        });
    }
    return detail::make_op<T>(os, std::move(out), {a, b}, [plan, m, k, n](TensorNode<T>& self) {
        TensorNode<T>& pa = *self.parents[0];
        TensorNode<T>& pb = *self.parents[1];
        const T* gp = self.grad.data();
        detail::batch_for_each(plan, [&](std::size_t oi, std::size_t ai, std::size_t bi) {
            detail::CMatMap<T> G(gp + oi * m * n, m, n);
            detail::CMatMap<T> A(pa.value.data() + ai * m * k, m, k);
            detail::CMatMap<T> B(pb.value.data() + bi * k * n, k, n);
            if (pa.requires_grad) {
                detail::MatMap<T> GA(pa.grad.data() + ai * m * k, m, k);
                GA.noalias() += G * B.transpose();
            }
            if (pb.requires_grad) {
                detail::MatMap<T> GB(pb.grad.data() + bi * k * n, k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
    });
}

// Swap the last two dimensions.
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
    if (x.rank() < 2)
        throw std::runtime_error("transpose: rank >= 2 required, got " + shape_str(x.shape()));
    const Shape& s = x.shape();
    const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
    const std::size_t batch = x.numel() / (m * n);
    Shape os = s;
    std::swap(os[os.size() - 2], os[os.size() - 1]);
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.data();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                out[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
    return detail::make_op<T>(os, std::move(out), {x}, [batch, m, n](TensorNode<T>& self) {
        TensorNode<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    p.grad[b * m * n + i * n + j] += self.grad[b * m * n + j * m + i];
    });
}

// ---- slicing / concatenation (rank 2, column ranges) --------------------------------

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t len) {
    if (x.rank() != 2) throw std::runtime_error("slice_cols: rank-2 tensor required");
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    if (c0 + len > cols) throw std::runtime_error("slice_cols: column range out of bounds");
    std::vector<T> out(rows * len);
    const std::vector<T>& xv = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c) out[r * len + c] = xv[r * cols + c0 + c];
    return detail::make_op<T>({rows, len}, std::move(out), {x},
                              [rows, cols, c0, len](TensorNode<T>& self) {
                                  TensorNode<T>& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < len; ++c)
                                          p.grad[r * cols + c0 + c] += self.grad[r * len + c];
                              });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: no tensors given");
    const std::size_t rows = parts[0].shape()[0];
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.shape()[0] != rows)
            throw std::runtime_error("concat_cols: all parts must be rank-2 with equal rows");
        cols += p.shape()[1];
    }
    std::vector<T> out(rows * cols);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t w = p.shape()[1];
        const std::vector<T>& pv = p.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) out[r * cols + off + c] = pv[r * w + c];
        off += w;
    }
    return detail::make_op<T>({rows, cols}, std::move(out), parts,
                              [rows, cols, offsets](TensorNode<T>& self) {
                                  for (std::size_t k = 0; k < self.parents.size(); ++k) {
                                      TensorNode<T>& p = *self.parents[k];
                                      if (!p.requires_grad) continue;
                                      const std::size_t w = p.shape[1];
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t c = 0; c < w; ++c)
                                              p.grad[r * w + c] +=
                                                  self.grad[r * cols + offsets[k] + c];
                                  }
                              });
}

// ---- embedding lookup -----------------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::runtime_error("embedding: table must be rank 2");
    if (ids.empty()) throw std::runtime_error("embedding: empty id sequence");
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw std::runtime_error("embedding: token id " + std::to_string(id) +
                                     " out of range [0, " + std::to_string(v) + ")");
    std::vector<T> out(ids.size() * d);
    const std::vector<T>& tv = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    return detail::make_op<T>({ids.size(), d}, std::move(out), {table},
                              [ids, d](TensorNode<T>& self) {
                                  TensorNode<T>& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  for (std::size_t i = 0; i < ids.size(); ++i)
                                      for (std::size_t j = 0; j < d; ++j)
                                          p.grad[static_cast<std::size_t>(ids[i]) * d + j] +=
                                              self.grad[i * d + j];
                              });
}

// ---- dropout ---------------------------------------------------------------------------

// Inverted dropout: keeps scale at train time, identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937& rng) {
    if (p < 0.0 || p >= 1.0) throw std::runtime_error("dropout: p must lie in [0, 1)");
    if (p == 0.0) return x;
    std::bernoulli_distribution keep(1.0 - p);
    std::vector<T> mask(x.numel());
    const T scale = T(1.0 / (1.0 - p));
    for (auto& m : mask) m = keep(rng) ? scale : T(0);
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return detail::make_op<T>(x.shape(), std::move(out), {x},
                              [mask = std::move(mask)](TensorNode<T>& self) {
                                  TensorNode<T>& p = *self.parents[0];
                                  if (!p.requires_grad) return;
                                  for (std::size_t i = 0; i < mask.size(); ++i)
                                      p.grad[i] += self.grad[i] * mask[i];
                              });
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace cdnpg
