#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "advlab/rng.hpp"

namespace advlab {

// Reverse-mode autodiff over dense tensors.
//
// Tensors are handles onto shared nodes. Ops record parents and a backward
// closure only when some input lies on a path to a grad-requiring leaf, so
// running a frozen model is automatically tape-free. All loops that write in
// parallel own disjoint output slices, which keeps results bitwise
// deterministic for any thread count.

template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;  // leaf flag set by the owner
    bool needs_grad = false;     // on a path to a requires_grad leaf
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;

    int64_t size() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape) {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value.assign(numel(n->shape), T(0));
        return Tensor(n);
    }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.node_->value.begin(), t.node_->value.end(), v);
        return t;
    }

    static Tensor from_vector(std::vector<int> shape, std::vector<T> v) {
        if (static_cast<int64_t>(v.size()) != numel(shape))
            throw std::invalid_argument("from_vector: size mismatch");
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(v);
        return Tensor(n);
    }

    static Tensor randn(std::vector<int> shape, RngStream& rng, T stddev = T(1)) {
        Tensor t = zeros(std::move(shape));
        for (auto& x : t.node_->value) x = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int64_t size() const { return node_->size(); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    const std::vector<T>& grad() const { return node_->grad; }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) {
        node_->requires_grad = b;
        node_->needs_grad = b;
        if (b) node_->ensure_grad();
    }

    T& at(std::initializer_list<int> idx) { return node_->value[flat_index(node_->shape, idx)]; }
    T at(std::initializer_list<int> idx) const { return node_->value[flat_index(node_->shape, idx)]; }

    // Deep copy of values into a fresh constant leaf.
    Tensor clone_detached() const {
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(n);
    }

    std::shared_ptr<TensorNode<T>> node() const { return node_; }

    static int64_t numel(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    static size_t flat_index(const std::vector<int>& shape, std::initializer_list<int> idx) {
        assert(idx.size() == shape.size());
        size_t f = 0;
        size_t i = 0;
        for (int v : idx) {
            f = f * static_cast<size_t>(shape[i]) + static_cast<size_t>(v);
            ++i;
        }
        return f;
    }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

namespace detail {
inline thread_local bool no_grad_flag = false;
}

// Scoped tape suppression for inference-only passes (sampling, evaluation).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::no_grad_flag) { detail::no_grad_flag = true; }
    ~NoGradGuard() { detail::no_grad_flag = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <typename T>
bool any_needs_grad(std::initializer_list<const Tensor<T>*> ts) {
    for (const auto* t : ts)
        if (t->node()->needs_grad) return true;
    return false;
}

template <typename T>
Tensor<T> make_op(std::vector<int> shape, std::vector<const Tensor<T>*> inputs,
                  std::function<void(TensorNode<T>&)> backward) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value.assign(Tensor<T>::numel(n->shape), T(0));
    bool needs = false;
    for (const auto* in : inputs) needs = needs || in->node()->needs_grad;
    if (needs && !no_grad_flag) {
        n->needs_grad = true;
        for (const auto* in : inputs) n->parents.push_back(in->node());
        n->backward = std::move(backward);
    }
    return Tensor<T>(n);
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar loss. Leaf grads accumulate;
// callers zero them between optimizer steps.
template <typename T>
void backward(const Tensor<T>& loss) {
    auto root = loss.node();
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!root->needs_grad) return;

    // Iterative topological order over the subgraph that needs grad.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode<T>* p = node->parents[next++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : order) n->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backward) n->backward(*n);
    }
}

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        a.shape(), {&a, &b}, [an, bn](TensorNode<T>& o) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < o.size(); ++i) bn->grad[i] += o.grad[i];
            }
        });
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("sub: shape mismatch");
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        a.shape(), {&a, &b}, [an, bn](TensorNode<T>& o) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < o.size(); ++i) bn->grad[i] -= o.grad[i];
            }
        });
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        a.shape(), {&a, &b}, [an, bn](TensorNode<T>& o) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < o.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
            }
        });
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    auto an = a.node();
    auto out = detail::make_op<T>(
        a.shape(), {&a}, [an, s](TensorNode<T>& o) {
            an->ensure_grad();
            for (int64_t i = 0; i < o.size(); ++i) an->grad[i] += o.grad[i] * s;
        });
    const T* pa = a.data();
    T* po = out.data();
    for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    auto xn = x.node();
    auto out = detail::make_op<T>(
        x.shape(), {&x}, [xn](TensorNode<T>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < o.size(); ++i) {
                T v = xn->value[i];
                T sg = T(1) / (T(1) + std::exp(-v));
                xn->grad[i] += o.grad[i] * sg * (T(1) + v * (T(1) - sg));
            }
        });
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < x.size(); ++i) {
        T sg = T(1) / (T(1) + std::exp(-px[i]));
        po[i] = px[i] * sg;
    }
    return out;
}

// Fresh constant leaf sharing no tape with the source.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return x.clone_detached();
}

// ---- linear algebra ----

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: bad shapes");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {m, n}, {&a, &b}, [an, bn, m, k, n](TensorNode<T>& o) {
            if (an->needs_grad) {
                an->ensure_grad();
                // dA = dO * B^T
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        T g = o.grad[static_cast<size_t>(i) * n + j];
                        if (g == T(0)) continue;
                        const T* brow = &bn->value[0];
                        for (int p = 0; p < k; ++p)
                            an->grad[static_cast<size_t>(i) * k + p] += g * brow[static_cast<size_t>(p) * n + j];
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                // dB = A^T * dO
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        T av = an->value[static_cast<size_t>(i) * k + p];
                        if (av == T(0)) continue;
                        for (int j = 0; j < n; ++j)
                            bn->grad[static_cast<size_t>(p) * n + j] += av * o.grad[static_cast<size_t>(i) * n + j];
                    }
            }
        });
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            T av = pa[static_cast<size_t>(i) * k + p];
            const T* brow = &pb[static_cast<size_t>(p) * n];
            T* orow = &po[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    return out;
}

// a[m,d] * b[n,d]^T -> [m,n]; used for attention scores.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: bad shapes");
    const int m = a.dim(0), d = a.dim(1), n = b.dim(0);
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {m, n}, {&a, &b}, [an, bn, m, d, n](TensorNode<T>& o) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        T g = o.grad[static_cast<size_t>(i) * n + j];
                        if (g == T(0)) continue;
                        for (int p = 0; p < d; ++p)
                            an->grad[static_cast<size_t>(i) * d + p] += g * bn->value[static_cast<size_t>(j) * d + p];
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        T g = o.grad[static_cast<size_t>(i) * n + j];
                        if (g == T(0)) continue;
                        for (int p = 0; p < d; ++p)
                            bn->grad[static_cast<size_t>(j) * d + p] += g * an->value[static_cast<size_t>(i) * d + p];
                    }
            }
        });
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            const T* ra = &pa[static_cast<size_t>(i) * d];
            const T* rb = &pb[static_cast<size_t>(j) * d];
            T acc = T(0);
            for (int p = 0; p < d; ++p) acc += ra[p] * rb[p];
            po[static_cast<size_t>(i) * n + j] = acc;
        }
    return out;
}

// x[m,k] * W[k,n] + b[n]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
        throw std::invalid_argument("linear: bad shapes");
    const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {m, n}, {&x, &w, &b}, [xn, wn, bn, m, k, n](TensorNode<T>& o) {
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        T g = o.grad[static_cast<size_t>(i) * n + j];
                        if (g == T(0)) continue;
                        for (int p = 0; p < k; ++p)
                            xn->grad[static_cast<size_t>(i) * k + p] += g * wn->value[static_cast<size_t>(p) * n + j];
                    }
            }
            if (wn->needs_grad) {
                wn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        T xv = xn->value[static_cast<size_t>(i) * k + p];
                        if (xv == T(0)) continue;
                        for (int j = 0; j < n; ++j)
                            wn->grad[static_cast<size_t>(p) * n + j] += xv * o.grad[static_cast<size_t>(i) * n + j];
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) bn->grad[j] += o.grad[static_cast<size_t>(i) * n + j];
            }
        });
    const T* px = x.data();
    const T* pw = w.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i) {
        T* orow = &po[static_cast<size_t>(i) * n];
        for (int j = 0; j < n; ++j) orow[j] = pb[j];
        for (int p = 0; p < k; ++p) {
            T xv = px[static_cast<size_t>(i) * k + p];
            const T* wrow = &pw[static_cast<size_t>(p) * n];
            for (int j = 0; j < n; ++j) orow[j] += xv * wrow[j];
        }
    }
    return out;
}

// ---- shape ops ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
    if (Tensor<T>::numel(shape) != x.size()) throw std::invalid_argument("reshape: numel mismatch");
    auto xn = x.node();
    auto out = detail::make_op<T>(
        std::move(shape), {&x}, [xn](TensorNode<T>& o) {
            xn->ensure_grad();
            for (int64_t i = 0; i < o.size(); ++i) xn->grad[i] += o.grad[i];
        });
    std::copy(x.values().begin(), x.values().end(), out.values().begin());
    return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("concat_rows: bad shapes");
    const int ma = a.dim(0), mb = b.dim(0), d = a.dim(1);
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {ma + mb, d}, {&a, &b}, [an, bn, ma, mb, d](TensorNode<T>& o) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < static_cast<int64_t>(ma) * d; ++i) an->grad[i] += o.grad[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                const int64_t off = static_cast<int64_t>(ma) * d;
                for (int64_t i = 0; i < static_cast<int64_t>(mb) * d; ++i) bn->grad[i] += o.grad[off + i];
            }
        });
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + a.size());
    return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(0) != b.dim(0))
        throw std::invalid_argument("concat_cols: bad shapes");
    const int m = a.dim(0), da = a.dim(1), db = b.dim(1);
    auto an = a.node();
    auto bn = b.node();
    auto out = detail::make_op<T>(
        {m, da + db}, {&a, &b}, [an, bn, m, da, db](TensorNode<T>& o) {
            for (int i = 0; i < m; ++i) {
                if (an->needs_grad) {
                    an->ensure_grad();
                    for (int j = 0; j < da; ++j)
                        an->grad[static_cast<size_t>(i) * da + j] += o.grad[static_cast<size_t>(i) * (da + db) + j];
                }
                if (bn->needs_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < db; ++j)
                        bn->grad[static_cast<size_t>(i) * db + j] += o.grad[static_cast<size_t>(i) * (da + db) + da + j];
                }
            }
        });
    T* po = out.data();
    for (int i = 0; i < m; ++i) {
        std::copy(&a.data()[static_cast<size_t>(i) * da], &a.data()[static_cast<size_t>(i) * da] + da,
                  &po[static_cast<size_t>(i) * (da + db)]);
        std::copy(&b.data()[static_cast<size_t>(i) * db], &b.data()[static_cast<size_t>(i) * db] + db,
                  &po[static_cast<size_t>(i) * (da + db) + da]);
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, int start, int len) {
    if (x.shape().size() != 2 || start < 0 || start + len > x.dim(0))
        throw std::invalid_argument("slice_rows: bad range");
    const int d = x.dim(1);
    auto xn = x.node();
    auto out = detail::make_op<T>(
        {len, d}, {&x}, [xn, start, len, d](TensorNode<T>& o) {
            xn->ensure_grad();
            const int64_t off = static_cast<int64_t>(start) * d;
            for (int64_t i = 0; i < static_cast<int64_t>(len) * d; ++i) xn->grad[off + i] += o.grad[i];
        });
    std::copy(x.values().begin() + static_cast<int64_t>(start) * d,
              x.values().begin() + static_cast<int64_t>(start + len) * d, out.values().begin());
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int start, int len) {
    if (x.shape().size() != 2 || start < 0 || start + len > x.dim(1))
        throw std::invalid_argument("slice_cols: bad range");
    const int m = x.dim(0), d = x.dim(1);
    auto xn = x.node();
    auto out = detail::make_op<T>(
        {m, len}, {&x}, [xn, start, len, m, d](TensorNode<T>& o) {
            xn->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < len; ++j)
                    xn->grad[static_cast<size_t>(i) * d + start + j] += o.grad[static_cast<size_t>(i) * len + j];
        });
    T* po = out.data();
    for (int i = 0; i < m; ++i)
        std::copy(&x.data()[static_cast<size_t>(i) * d + start], &x.data()[static_cast<size_t>(i) * d + start] + len,
                  &po[static_cast<size_t>(i) * len]);
    return out;
}

// ---- reductions ----

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {  // [m,d] -> [1,d]
    if (x.shape().size() != 2) throw std::invalid_argument("mean_rows: want 2-D");
    const int m = x.dim(0), d = x.dim(1);
    auto xn = x.node();
    auto out = detail::make_op<T>(
        {1, d}, {&x}, [xn, m, d](TensorNode<T>& o) {
            xn->ensure_grad();
            const T inv = T(1) / static_cast<T>(m);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < d; ++j) xn->grad[static_cast<size_t>(i) * d + j] += o.grad[j] * inv;
        });
    T* po = out.data();
    const T* px = x.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) po[j] += px[static_cast<size_t>(i) * d + j];
    for (int j = 0; j < d; ++j) po[j] /= static_cast<T>(m);
    return out;
}

template <typename T>
Tensor<T> repeat_row(const Tensor<T>& v, int n) {  // [1,d] -> [n,d]
    if (v.shape().size() != 2 || v.dim(0) != 1) throw std::invalid_argument("repeat_row: want [1,d]");
    const int d = v.dim(1);
    auto vn = v.node();
    auto out = detail::make_op<T>(
        {n, d}, {&v}, [vn, n, d](TensorNode<T>& o) {
            vn->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) vn->grad[j] += o.grad[static_cast<size_t>(i) * d + j];
        });
    T* po = out.data();
    for (int i = 0; i < n; ++i) std::copy(v.data(), v.data() + d, &po[static_cast<size_t>(i) * d]);
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    auto xn = x.node();
    const int64_t n = x.size();
    auto out = detail::make_op<T>(
        {1}, {&x}, [xn, n](TensorNode<T>& o) {
            xn->ensure_grad();
            const T g = o.grad[0] / static_cast<T>(n);
            for (int64_t i = 0; i < n; ++i) xn->grad[i] += g;
        });
    T acc = T(0);
    const T* px = x.data();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    out.data()[0] = acc / static_cast<T>(n);
    return out;
}

// mean((a-b)^2) over all elements
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mse: shape mismatch");
    auto an = a.node();
    auto bn = b.node();
    const int64_t n = a.size();
    auto out = detail::make_op<T>(
        {1}, {&a, &b}, [an, bn, n](TensorNode<T>& o) {
            const T g = o.grad[0] * T(2) / static_cast<T>(n);
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t i = 0; i < n; ++i) an->grad[i] += g * (an->value[i] - bn->value[i]);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) bn->grad[i] -= g * (an->value[i] - bn->value[i]);
            }
        });
    T acc = T(0);
    const T* pa = a.data();
    const T* pb = b.data();
    for (int64_t i = 0; i < n; ++i) {
        T d = pa[i] - pb[i];
        acc += d * d;
    }
    out.data()[0] = acc / static_cast<T>(n);
    return out;
}

// ---- normalization & softmax ----

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (x.shape().size() != 2 || gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1))
        throw std::invalid_argument("layer_norm: bad shapes");
    const int m = x.dim(0), d = x.dim(1);
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto out = detail::make_op<T>(
        {m, d}, {&x, &gamma, &beta}, [xn, gn, bn, m, d, eps](TensorNode<T>& o) {
            for (int i = 0; i < m; ++i) {
                const T* xr = &xn->value[static_cast<size_t>(i) * d];
                const T* gr = &o.grad[static_cast<size_t>(i) * d];
                T mu = T(0), var = T(0);
                for (int j = 0; j < d; ++j) mu += xr[j];
                mu /= static_cast<T>(d);
                for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
                var /= static_cast<T>(d);
                const T istd = T(1) / std::sqrt(var + eps);
                if (gn->needs_grad || bn->needs_grad) {
                    if (gn->needs_grad) gn->ensure_grad();
                    if (bn->needs_grad) bn->ensure_grad();
                    for (int j = 0; j < d; ++j) {
                        if (gn->needs_grad) gn->grad[j] += gr[j] * (xr[j] - mu) * istd;
                        if (bn->needs_grad) bn->grad[j] += gr[j];
                    }
                }
                if (xn->needs_grad) {
                    xn->ensure_grad();
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (int j = 0; j < d; ++j) {
                        T dxh = gr[j] * gn->value[j];
                        T xh = (xr[j] - mu) * istd;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh;
                    }
                    for (int j = 0; j < d; ++j) {
                        T dxh = gr[j] * gn->value[j];
                        T xh = (xr[j] - mu) * istd;
                        xn->grad[static_cast<size_t>(i) * d + j] +=
                            istd * (dxh - sum_dxhat / static_cast<T>(d) - xh * sum_dxhat_xhat / static_cast<T>(d));
                    }
                }
            }
        });
    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i) {
        const T* xr = &px[static_cast<size_t>(i) * d];
        T* orow = &po[static_cast<size_t>(i) * d];
        T mu = T(0), var = T(0);
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<T>(d);
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(d);
        const T istd = T(1) / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) orow[j] = pg[j] * (xr[j] - mu) * istd + pb[j];
    }
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows: want 2-D");
    const int m = x.dim(0), d = x.dim(1);
    auto xn = x.node();
    Tensor<T> out = detail::make_op<T>(
        {m, d}, {&x}, [xn, m, d](TensorNode<T>& o) {
            xn->ensure_grad();
            for (int i = 0; i < m; ++i) {
                const T* yr = &o.value[static_cast<size_t>(i) * d];
                const T* gr = &o.grad[static_cast<size_t>(i) * d];
                T dot = T(0);
                for (int j = 0; j < d; ++j) dot += yr[j] * gr[j];
                for (int j = 0; j < d; ++j) xn->grad[static_cast<size_t>(i) * d + j] += yr[j] * (gr[j] - dot);
            }
        });
    const T* px = x.data();
    T* po = out.data();
    for (int i = 0; i < m; ++i) {
        const T* xr = &px[static_cast<size_t>(i) * d];
        T* orow = &po[static_cast<size_t>(i) * d];
        T mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        T z = T(0);
        for (int j = 0; j < d; ++j) {
            orow[j] = std::exp(xr[j] - mx);
            z += orow[j];
        }
        for (int j = 0; j < d; ++j) orow[j] /= z;
    }
    return out;
}

// Mean softmax cross-entropy over rows against integer labels.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2 || static_cast<int>(labels.size()) != logits.dim(0))
        throw std::invalid_argument("cross_entropy_logits: bad shapes");
    const int m = logits.dim(0), k = logits.dim(1);
    auto xn = logits.node();
    auto labels_copy = labels;
    auto out = detail::make_op<T>(
        {1}, {&logits}, [xn, labels_copy, m, k](TensorNode<T>& o) {
            xn->ensure_grad();
            const T g = o.grad[0] / static_cast<T>(m);
            std::vector<T> p(static_cast<size_t>(k));
            for (int i = 0; i < m; ++i) {
                const T* xr = &xn->value[static_cast<size_t>(i) * k];
                T mx = xr[0];
                for (int j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
                T z = T(0);
                for (int j = 0; j < k; ++j) {
                    p[static_cast<size_t>(j)] = std::exp(xr[j] - mx);
                    z += p[static_cast<size_t>(j)];
                }
                for (int j = 0; j < k; ++j) {
                    T soft = p[static_cast<size_t>(j)] / z;
                    xn->grad[static_cast<size_t>(i) * k + j] += g * (soft - (j == labels_copy[static_cast<size_t>(i)] ? T(1) : T(0)));
                }
            }
        });
    T loss = T(0);
    const T* px = logits.data();
    for (int i = 0; i < m; ++i) {
        const T* xr = &px[static_cast<size_t>(i) * k];
        T mx = xr[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, xr[j]);
        T z = T(0);
        for (int j = 0; j < k; ++j) z += std::exp(xr[j] - mx);
        loss += std::log(z) + mx - xr[labels[static_cast<size_t>(i)]];
    }
    out.data()[0] = loss / static_cast<T>(m);
    return out;
}

// ---- embedding ----

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw std::invalid_argument("gather_rows: want 2-D table");
    const int d = table.dim(1);
    const int s = static_cast<int>(ids.size());
    auto tn = table.node();
    auto ids_copy = ids;
    auto out = detail::make_op<T>(
        {s, d}, {&table}, [tn, ids_copy, s, d](TensorNode<T>& o) {
            tn->ensure_grad();
            for (int i = 0; i < s; ++i) {
                const size_t r = static_cast<size_t>(ids_copy[static_cast<size_t>(i)]) * d;
                for (int j = 0; j < d; ++j) tn->grad[r + j] += o.grad[static_cast<size_t>(i) * d + j];
            }
        });
    T* po = out.data();
    for (int i = 0; i < s; ++i) {
        if (ids[static_cast<size_t>(i)] < 0 || ids[static_cast<size_t>(i)] >= table.dim(0))
            throw std::out_of_range("gather_rows: id out of range");
        std::copy(&table.data()[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d],
                  &table.data()[static_cast<size_t>(ids[static_cast<size_t>(i)]) * d] + d, &po[static_cast<size_t>(i) * d]);
    }
    return out;
}

}  // namespace advlab
