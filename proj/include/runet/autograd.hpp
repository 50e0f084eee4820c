#pragma once

#include <functional>
#include <memory>
#include <unordered_set>

#include "runet/tensor.hpp"

namespace runet {

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

// Dynamic-tape autograd node. An op's output node holds strong refs to its
// inputs plus a closure that pushes gradient into them; when no input requires
// grad the refs and closure are dropped at creation, so eval-mode graphs free
// themselves as soon as the output value goes out of scope.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // lazily allocated; empty means "never accumulated"
    bool requires_grad = false;
    std::vector<Var<T>> inputs;
    std::function<void(Node<T>&)> backprop;
    int backward_visits = 0;

    bool has_grad() const { return !grad.data.empty(); }

    Tensor<T>& ensure_grad() {
        if (!has_grad()) grad = Tensor<T>(value.shape);
        return grad;
    }

    void accumulate(const Tensor<T>& g) {
        if (g.shape != value.shape)
            throw ContractError(cat("gradient shape ", shape_str(g.shape),
                                    " does not match value shape ", shape_str(value.shape)));
        Tensor<T>& dst = ensure_grad();
        for (int64_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    void zero_grad() {
        if (has_grad()) grad.zero();
    }
};

// Thread-local switch for building graphs. evaluate() turns it off so forward
// passes allocate no tape.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = saved; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> v) {
    return leaf(std::move(v), false);
}

// The backprop closure must read forward results from n.value / captures only;
// inputs' values are reachable through n.inputs.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs,
               std::function<void(Node<T>&)> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool any = false;
    if (grad_enabled())
        for (const auto& in : inputs)
            if (in && in->requires_grad) any = true;
    if (any) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backprop = std::move(backprop);
    }
    return n;
}

// Reverse-mode sweep from a scalar root. Iterative DFS keeps deep step-unrolled
// graphs off the call stack. Gradients accumulate across repeated calls until
// zeroed by the caller.
template <typename T>
void backward(const Var<T>& root) {
    if (!root) throw ContractError("backward on null var");
    if (root->value.size() != 1)
        throw ContractError(cat("backward requires scalar root, got shape ",
                                shape_str(root->value.shape)));
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    struct Frame {
        Node<T>* node;
        size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_input < f.node->inputs.size()) {
            Node<T>* child = f.node->inputs[f.next_input++].get();
            if (child && child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    root->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop && n->has_grad()) {
            n->backprop(*n);
            n->backward_visits++;
        }
    }
}

// ---- elementwise ops ----

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw InvalidShapeError(cat(op, ": shape mismatch ", shape_str(a->value.shape), " vs ",
                                    shape_str(b->value.shape)));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        for (int k = 0; k < 2; ++k)
            if (n.inputs[k]->requires_grad) n.inputs[k]->accumulate(n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        if (n.inputs[0]->requires_grad) n.inputs[0]->accumulate(n.grad);
        if (n.inputs[1]->requires_grad) {
            Tensor<T> g = n.grad;
            for (int64_t i = 0; i < g.size(); ++i) g[i] = -g[i];
            n.inputs[1]->accumulate(g);
        }
    });
}

// Hadamard product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = a->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
        const Tensor<T>& av = n.inputs[0]->value;
        const Tensor<T>& bv = n.inputs[1]->value;
        if (n.inputs[0]->requires_grad) {
            Tensor<T> g(av.shape);
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * bv[i];
            n.inputs[0]->accumulate(g);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor<T> g(bv.shape);
            for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * av[i];
            n.inputs[1]->accumulate(g);
        }
    });
}

// y = scale * x + offset
template <typename T>
Var<T> affine(const Var<T>& x, T scale, T offset = T(0)) {
    Tensor<T> out = x->value;
    for (int64_t i = 0; i < out.size(); ++i) out[i] = scale * out[i] + offset;
    return make_op<T>(std::move(out), {x}, [scale](Node<T>& n) {
        Tensor<T> g = n.grad;
        for (int64_t i = 0; i < g.size(); ++i) g[i] *= scale;
        n.inputs[0]->accumulate(g);
    });
}

template <typename T>
Var<T> one_minus(const Var<T>& x) {
    return affine(x, T(-1), T(1));
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out(x->value.shape);
    for (int64_t i = 0; i < out.size(); ++i) {
        T v = x->value[i];
        out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                           : std::exp(v) / (T(1) + std::exp(v));
    }
    Tensor<T> y = out;  // d/dx = y(1-y)
    return make_op<T>(std::move(out), {x}, [y = std::move(y)](Node<T>& n) {
        Tensor<T> g(y.shape);
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * y[i] * (T(1) - y[i]);
        n.inputs[0]->accumulate(g);
    });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
    Tensor<T> out(x->value.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x->value[i]);
    Tensor<T> y = out;  // d/dx = 1 - y^2
    return make_op<T>(std::move(out), {x}, [y = std::move(y)](Node<T>& n) {
        Tensor<T> g(y.shape);
        for (int64_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * (T(1) - y[i] * y[i]);
        n.inputs[0]->accumulate(g);
    });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out(x->value.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
    return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
        const Tensor<T>& xv = n.inputs[0]->value;
        Tensor<T> g(xv.shape);
        for (int64_t i = 0; i < g.size(); ++i) g[i] = xv[i] > T(0) ? n.grad[i] : T(0);
        n.inputs[0]->accumulate(g);
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T s = 0;
    for (int64_t i = 0; i < x->value.size(); ++i) s += x->value[i];
    return make_op<T>(Tensor<T>({1}, std::vector<T>{s}), {x}, [](Node<T>& n) {
        Tensor<T> g(n.inputs[0]->value.shape, n.grad[0]);
        n.inputs[0]->accumulate(g);
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    return affine(sum_all(x), T(1) / static_cast<T>(x->value.size()));
}

// Concatenates two (N,C,H,W) tensors along channels.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const Tensor<T>&av = a->value, &bv = b->value;
    if (av.rank() != 4 || bv.rank() != 4)
        throw InvalidShapeError("concat_channels expects rank-4 tensors");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) || av.dim(3) != bv.dim(3))
        throw InvalidShapeError(cat("concat_channels: incompatible shapes ", shape_str(av.shape),
                                    " vs ", shape_str(bv.shape)));
    int N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
    Tensor<T> out({N, Ca + Cb, H, W});
    int64_t plane = static_cast<int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        T* dst = out.ptr() + n * static_cast<int64_t>(Ca + Cb) * plane;
        std::copy_n(av.ptr() + n * Ca * plane, Ca * plane, dst);
        std::copy_n(bv.ptr() + n * Cb * plane, Cb * plane, dst + Ca * plane);
    }
    return make_op<T>(std::move(out), {a, b}, [N, Ca, Cb, plane](Node<T>& n) {
        for (int k = 0; k < 2; ++k) {
            if (!n.inputs[k]->requires_grad) continue;
            int C = k == 0 ? Ca : Cb;
            int off = k == 0 ? 0 : Ca;
            Tensor<T> g(n.inputs[k]->value.shape);
            for (int i = 0; i < N; ++i)
                std::copy_n(n.grad.ptr() + (i * static_cast<int64_t>(Ca + Cb) + off) * plane,
                            C * plane, g.ptr() + i * static_cast<int64_t>(C) * plane);
            n.inputs[k]->accumulate(g);
        }
    });
}

}  // namespace runet
