#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "flashmem/common.hpp"

namespace flashmem {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major tensor. `node` links the value into a Tape for
/// reverse-mode differentiation; -1 marks a constant.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (shape_numel(shape) != data.size())
            throw dimension_error("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                  std::to_string(data.size()) + " scalars");
    }

    static Tensor zeros(Shape s) {
        std::vector<T> d(shape_numel(s), T(0));
        return Tensor(std::move(s), std::move(d));
    }
    static Tensor full(Shape s, T v) {
        std::vector<T> d(shape_numel(s), v);
        return Tensor(std::move(s), std::move(d));
    }

    std::size_t size() const { return data.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    T& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

    bool tracked() const { return node >= 0; }
};

template <typename T>
inline void ensure_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data)
        if (!std::isfinite(v)) throw contract_error(std::string(op) + ": non-finite value produced");
}

/// Trainable or frozen weight. Gradients of frozen parameters stay
/// identically zero: the tape treats them as constants.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool train = true)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape)), trainable(train) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

/// Record of differentiable operations. Replaying in reverse visits each
/// node exactly once. Single-threaded by contract.
template <typename T>
class Tape {
public:
    using Pull = std::function<void(Tape&)>;

    int alloc(std::size_t grad_size) {
        nodes_.push_back(Node{std::vector<T>(grad_size, T(0)), nullptr});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void set_pull(int id, Pull fn) { nodes_[static_cast<std::size_t>(id)].pull = std::move(fn); }

    std::vector<T>& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    /// Registers a parameter as a leaf. Frozen parameters come back as
    /// constants so no gradient is ever computed for them.
    Tensor<T> watch(Parameter<T>& p) {
        Tensor<T> t = p.value;
        if (!p.trainable) return t;
        const int id = alloc(t.size());
        Parameter<T>* pp = &p;
        set_pull(id, [pp, id](Tape& tp) {
            const std::vector<T>& g = tp.grad(id);
            for (std::size_t i = 0; i < g.size(); ++i) pp->grad.data[i] += g[i];
        });
        t.node = id;
        return t;
    }

    /// Reverse sweep from a scalar loss. Accumulates into every watched
    /// trainable parameter's grad.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) throw contract_error("backward: loss must be a scalar");
        if (!loss.tracked()) return;  // detached loss: nothing reachable
        grad(loss.node)[0] += T(1);
        for (int id = loss.node; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            bool any = false;
            for (T g : n.grad)
                if (g != T(0)) {
                    any = true;
                    break;
                }
            if (any && n.pull) n.pull(*this);
        }
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<T> grad;
        Pull pull;
    };
    std::vector<Node> nodes_;
};

namespace detail {

template <typename T>
inline bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
    if (!tape) return false;
    for (const Tensor<T>* t : ins)
        if (t->tracked()) return true;
    return false;
}

template <typename T>
inline void axpy(std::vector<T>& dst, std::size_t off, const T a, const T* x, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[off + i] += a * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable kernels. Each op validates shapes, computes the forward
// value, checks finiteness, and (when tracked) records a pull closure that
// accumulates input gradients from the output gradient.
// ---------------------------------------------------------------------------

/// C[i,j] = sum_k A[i,k] * B[k,j]
template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& A, const Tensor<T>& B) {
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
        throw dimension_error("matmul: incompatible shapes " + shape_str(A.shape) + " x " + shape_str(B.shape));
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor<T> C = Tensor<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = &A.data[i * k];
        T* crow = &C.data[i * n];
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T a = arow[kk];
            const T* brow = &B.data[kk * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
    ensure_finite(C, "matmul");
    if (detail::want_grad(tape, {&A, &B})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, bn = B.node, ad = A.data, bd = B.data, m, k, n](Tape<T>& tp) {
            const std::vector<T>& gc = tp.grad(id);
            if (an >= 0) {  // dA = gC * B^T
                std::vector<T>& ga = tp.grad(an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        const T* gcrow = &gc[i * n];
                        const T* brow = &bd[kk * n];
                        for (std::size_t j = 0; j < n; ++j) acc += gcrow[j] * brow[j];
                        ga[i * k + kk] += acc;
                    }
            }
            if (bn >= 0) {  // dB = A^T * gC
                std::vector<T>& gb = tp.grad(bn);
                for (std::size_t i = 0; i < m; ++i) {
                    const T* arow = &ad[i * k];
                    const T* gcrow = &gc[i * n];
                    for (std::size_t kk = 0; kk < k; ++kk) detail::axpy(gb, kk * n, arow[kk], gcrow, n);
                }
            }
        });
    }
    return C;
}

/// C = A * B^T with A [m,k], B [n,k].
template <typename T>
Tensor<T> matmul_nt(Tape<T>* tape, const Tensor<T>& A, const Tensor<T>& B) {
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[1])
        throw dimension_error("matmul_nt: incompatible shapes " + shape_str(A.shape) + " x " + shape_str(B.shape));
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
    Tensor<T> C = Tensor<T>::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = &A.data[i * k];
        T* crow = &C.data[i * n];
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = &B.data[j * k];
            T acc = T(0);
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    }
    ensure_finite(C, "matmul_nt");
    if (detail::want_grad(tape, {&A, &B})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, bn = B.node, ad = A.data, bd = B.data, m, k, n](Tape<T>& tp) {
            const std::vector<T>& gc = tp.grad(id);
            if (an >= 0) {  // dA = gC * B
                std::vector<T>& ga = tp.grad(an);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) detail::axpy(ga, i * k, gc[i * n + j], &bd[j * k], k);
            }
            if (bn >= 0) {  // dB = gC^T * A
                std::vector<T>& gb = tp.grad(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) detail::axpy(gb, j * k, gc[i * n + j], &ad[i * k], k);
            }
        });
    }
    return C;
}

/// Elementwise sum, identical shapes.
template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& A, const Tensor<T>& B) {
    if (A.shape != B.shape)
        throw dimension_error("add: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> C = A;
    C.node = -1;
    for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
    ensure_finite(C, "add");
    if (detail::want_grad(tape, {&A, &B})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, bn = B.node](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            if (an >= 0) {
                std::vector<T>& ga = tp.grad(an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn >= 0) {
                std::vector<T>& gb = tp.grad(bn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return C;
}

/// Adds a row vector b to every row of A (trailing-dimension bias).
template <typename T>
Tensor<T> add_rowvec(Tape<T>* tape, const Tensor<T>& A, const Tensor<T>& b) {
    const std::size_t m = A.rows(), n = A.cols();
    if (b.size() != n)
        throw dimension_error("add_rowvec: bias " + shape_str(b.shape) + " vs columns " + std::to_string(n));
    Tensor<T> C = A;
    C.node = -1;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] += b.data[j];
    ensure_finite(C, "add_rowvec");
    if (detail::want_grad(tape, {&A, &b})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, bn = b.node, m, n](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            if (an >= 0) {
                std::vector<T>& ga = tp.grad(an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bn >= 0) {
                std::vector<T>& gb = tp.grad(bn);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
    }
    return C;
}

/// Elementwise product, identical shapes.
template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& A, const Tensor<T>& B) {
    if (A.shape != B.shape)
        throw dimension_error("mul: shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> C = A;
    C.node = -1;
    for (std::size_t i = 0; i < C.size(); ++i) C.data[i] *= B.data[i];
    ensure_finite(C, "mul");
    if (detail::want_grad(tape, {&A, &B})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, bn = B.node, ad = A.data, bd = B.data](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            if (an >= 0) {
                std::vector<T>& ga = tp.grad(an);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
            }
            if (bn >= 0) {
                std::vector<T>& gb = tp.grad(bn);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
            }
        });
    }
    return C;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& A, T s) {
    Tensor<T> C = A;
    C.node = -1;
    for (T& v : C.data) v *= s;
    ensure_finite(C, "scale");
    if (detail::want_grad(tape, {&A})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, s](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& ga = tp.grad(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
        });
    }
    return C;
}

/// SiLU activation x * sigmoid(x).
template <typename T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& A) {
    Tensor<T> C = A;
    C.node = -1;
    for (T& v : C.data) {
        const T s = T(1) / (T(1) + std::exp(-v));
        v = v * s;
    }
    ensure_finite(C, "silu");
    if (detail::want_grad(tape, {&A})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, ad = A.data](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& ga = tp.grad(an);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T x = ad[i];
                const T s = T(1) / (T(1) + std::exp(-x));
                ga[i] += g[i] * (s * (T(1) + x * (T(1) - s)));
            }
        });
    }
    return C;
}

/// Row-wise RMS normalization with learnable gain: y = x / rms(x) * w.
template <typename T>
Tensor<T> rmsnorm(Tape<T>* tape, const Tensor<T>& X, const Tensor<T>& w, T eps = T(1e-6)) {
    const std::size_t m = X.rows(), n = X.cols();
    if (w.size() != n) throw dimension_error("rmsnorm: gain " + shape_str(w.shape) + " vs columns " + std::to_string(n));
    Tensor<T> Y = Tensor<T>::zeros(X.shape);
    std::vector<T> inv_rms(m);
    for (std::size_t i = 0; i < m; ++i) {
        T ss = T(0);
        for (std::size_t j = 0; j < n; ++j) ss += X.data[i * n + j] * X.data[i * n + j];
        const T r = T(1) / std::sqrt(ss / T(n) + eps);
        inv_rms[i] = r;
        for (std::size_t j = 0; j < n; ++j) Y.data[i * n + j] = X.data[i * n + j] * r * w.data[j];
    }
    ensure_finite(Y, "rmsnorm");
    if (detail::want_grad(tape, {&X, &w})) {
        const int id = tape->alloc(Y.size());
        Y.node = id;
        tape->set_pull(id, [id, xn = X.node, wn = w.node, xd = X.data, wd = w.data, inv_rms, m, n, eps](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            for (std::size_t i = 0; i < m; ++i) {
                const T r = inv_rms[i];
                if (xn >= 0) {
                    // y_j = x_j * r * w_j, r = (mean(x^2)+eps)^{-1/2}
                    T dot = T(0);
                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * wd[j] * xd[i * n + j];
                    std::vector<T>& gx = tp.grad(xn);
                    const T c = dot * r * r * r / T(n);
                    for (std::size_t j = 0; j < n; ++j)
                        gx[i * n + j] += g[i * n + j] * wd[j] * r - c * xd[i * n + j];
                }
                if (wn >= 0) {
                    std::vector<T>& gw = tp.grad(wn);
                    for (std::size_t j = 0; j < n; ++j) gw[j] += g[i * n + j] * xd[i * n + j] * r;
                }
            }
        });
    }
    return Y;
}

/// Numerically stable row softmax (max subtraction). Rows sum to 1.
template <typename T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& X) {
    if (X.shape.empty() || X.shape.back() == 0) throw dimension_error("softmax_rows: empty last dimension");
    const std::size_t n = X.shape.back();
    const std::size_t m = X.size() / n;
    Tensor<T> P = Tensor<T>::zeros(X.shape);
    for (std::size_t i = 0; i < m; ++i) {
        const T* xr = &X.data[i * n];
        T* pr = &P.data[i * n];
        T mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) pr[j] *= inv;
    }
    ensure_finite(P, "softmax_rows");
    if (detail::want_grad(tape, {&X})) {
        const int id = tape->alloc(P.size());
        P.node = id;
        tape->set_pull(id, [id, xn = X.node, pd = P.data, m, n](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& gx = tp.grad(xn);
            for (std::size_t i = 0; i < m; ++i) {
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * pd[i * n + j];
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += pd[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return P;
}

/// Causal softmax: row i is a distribution over columns [0, offset+i] and
/// exactly zero beyond. offset = cache_len - n_queries for suffix queries.
template <typename T>
Tensor<T> causal_softmax(Tape<T>* tape, const Tensor<T>& X, std::size_t offset) {
    const std::size_t m = X.rows(), n = X.cols();
    if (n == 0) throw dimension_error("causal_softmax: empty rows");
    Tensor<T> P = Tensor<T>::zeros(X.shape);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t valid = std::min(n, offset + i + 1);
        if (valid == 0) throw dimension_error("causal_softmax: row with no valid columns");
        const T* xr = &X.data[i * n];
        T* pr = &P.data[i * n];
        T mx = xr[0];
        for (std::size_t j = 1; j < valid; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < valid; ++j) {
            pr[j] = std::exp(xr[j] - mx);
            sum += pr[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < valid; ++j) pr[j] *= inv;
    }
    ensure_finite(P, "causal_softmax");
    if (detail::want_grad(tape, {&X})) {
        const int id = tape->alloc(P.size());
        P.node = id;
        tape->set_pull(id, [id, xn = X.node, pd = P.data, m, n, offset](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& gx = tp.grad(xn);
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t valid = std::min(n, offset + i + 1);
                T dot = T(0);
                for (std::size_t j = 0; j < valid; ++j) dot += g[i * n + j] * pd[i * n + j];
                for (std::size_t j = 0; j < valid; ++j) gx[i * n + j] += pd[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return P;
}

/// Gathers embedding rows for a token id sequence.
template <typename T>
Tensor<T> embedding(Tape<T>* tape, const Tensor<T>& table, const std::vector<int>& ids) {
    const std::size_t v = table.rows(), d = table.cols();
    Tensor<T> Y = Tensor<T>::zeros({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw contract_error("embedding: token id " + std::to_string(ids[i]) + " out of vocabulary " +
                                 std::to_string(v));
        std::copy_n(&table.data[static_cast<std::size_t>(ids[i]) * d], d, &Y.data[i * d]);
    }
    if (detail::want_grad(tape, {&table})) {
        const int id = tape->alloc(Y.size());
        Y.node = id;
        tape->set_pull(id, [id, tn = table.node, ids, d](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& gt = tp.grad(tn);
            for (std::size_t i = 0; i < ids.size(); ++i)
                detail::axpy(gt, static_cast<std::size_t>(ids[i]) * d, T(1), &g[i * d], d);
        });
    }
    return Y;
}

/// Rotary position application on interleaved head layout [len, n_heads*d_head].
/// Pair (2i, 2i+1) inside each head is rotated by pos * base^(-2i/d_head).
template <typename T>
Tensor<T> rope(Tape<T>* tape, const Tensor<T>& X, const std::vector<int>& positions, T base, std::size_t n_heads) {
    const std::size_t m = X.rows(), n = X.cols();
    if (positions.size() != m) throw dimension_error("rope: positions length vs rows mismatch");
    if (n % n_heads != 0) throw dimension_error("rope: width not divisible by head count");
    const std::size_t dh = n / n_heads;
    if (dh % 2 != 0) throw dimension_error("rope: head dimension must be even");
    Tensor<T> Y = X;
    Y.node = -1;
    for (std::size_t r = 0; r < m; ++r) {
        const T pos = static_cast<T>(positions[r]);
        for (std::size_t h = 0; h < n_heads; ++h) {
            T* row = &Y.data[r * n + h * dh];
            for (std::size_t i = 0; i + 1 < dh; i += 2) {
                const T theta = pos * std::pow(base, -static_cast<T>(i) / static_cast<T>(dh));
                const T c = std::cos(theta), s = std::sin(theta);
                const T x0 = row[i], x1 = row[i + 1];
                row[i] = x0 * c - x1 * s;
                row[i + 1] = x0 * s + x1 * c;
            }
        }
    }
    ensure_finite(Y, "rope");
    if (detail::want_grad(tape, {&X})) {
        const int id = tape->alloc(Y.size());
        Y.node = id;
        tape->set_pull(id, [id, xn = X.node, positions, base, n_heads, m, n, dh](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& gx = tp.grad(xn);
            for (std::size_t r = 0; r < m; ++r) {
                const T pos = static_cast<T>(positions[r]);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t off = r * n + h * dh;
                    for (std::size_t i = 0; i + 1 < dh; i += 2) {
                        const T theta = pos * std::pow(base, -static_cast<T>(i) / static_cast<T>(dh));
                        const T c = std::cos(theta), s = std::sin(theta);
                        const T g0 = g[off + i], g1 = g[off + i + 1];
                        gx[off + i] += g0 * c + g1 * s;
                        gx[off + i + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        });
    }
    return Y;
}

/// Vertical concatenation of two matrices with equal column counts.
template <typename T>
Tensor<T> concat_rows(Tape<T>* tape, const Tensor<T>& A, const Tensor<T>& B) {
    if (A.cols() != B.cols()) throw dimension_error("concat_rows: column mismatch");
    const std::size_t n = A.cols();
    Tensor<T> C = Tensor<T>::zeros({A.rows() + B.rows(), n});
    std::copy(A.data.begin(), A.data.end(), C.data.begin());
    std::copy(B.data.begin(), B.data.end(), C.data.begin() + static_cast<std::ptrdiff_t>(A.size()));
    if (detail::want_grad(tape, {&A, &B})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, bn = B.node, asz = A.size()](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            if (an >= 0) {
                std::vector<T>& ga = tp.grad(an);
                for (std::size_t i = 0; i < asz; ++i) ga[i] += g[i];
            }
            if (bn >= 0) {
                std::vector<T>& gb = tp.grad(bn);
                for (std::size_t i = asz; i < g.size(); ++i) gb[i - asz] += g[i];
            }
        });
    }
    return C;
}

/// Row slice [start, start+count).
template <typename T>
Tensor<T> take_rows(Tape<T>* tape, const Tensor<T>& A, std::size_t start, std::size_t count) {
    if (start + count > A.rows()) throw dimension_error("take_rows: slice out of range");
    const std::size_t n = A.cols();
    Tensor<T> C = Tensor<T>::zeros({count, n});
    std::copy_n(&A.data[start * n], count * n, C.data.begin());
    if (detail::want_grad(tape, {&A})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, start, n](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& ga = tp.grad(an);
            for (std::size_t i = 0; i < g.size(); ++i) ga[start * n + i] += g[i];
        });
    }
    return C;
}

/// Column slice [start, start+count) of a 2D tensor.
template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& A, std::size_t start, std::size_t count) {
    const std::size_t m = A.rows(), n = A.cols();
    if (start + count > n) throw dimension_error("slice_cols: slice out of range");
    Tensor<T> C = Tensor<T>::zeros({m, count});
    for (std::size_t i = 0; i < m; ++i) std::copy_n(&A.data[i * n + start], count, &C.data[i * count]);
    if (detail::want_grad(tape, {&A})) {
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, an = A.node, start, count, m, n](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::vector<T>& ga = tp.grad(an);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < count; ++j) ga[i * n + start + j] += g[i * count + j];
        });
    }
    return C;
}

/// Horizontal concatenation of equally tall matrices.
template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: no inputs");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw dimension_error("concat_cols: row mismatch");
        n += p.cols();
    }
    Tensor<T> C = Tensor<T>::zeros({m, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < m; ++i) std::copy_n(&p.data[i * p.cols()], p.cols(), &C.data[i * n + off]);
        off += p.cols();
    }
    bool tracked = false;
    if (tape)
        for (const auto& p : parts)
            if (p.tracked()) tracked = true;
    if (tracked) {
        std::vector<int> nodes;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node);
            widths.push_back(p.cols());
        }
        const int id = tape->alloc(C.size());
        C.node = id;
        tape->set_pull(id, [id, nodes, widths, m, n](Tape<T>& tp) {
            const std::vector<T>& g = tp.grad(id);
            std::size_t off2 = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                if (nodes[p] >= 0) {
                    std::vector<T>& gp = tp.grad(nodes[p]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < widths[p]; ++j) gp[i * widths[p] + j] += g[i * n + off2 + j];
                }
                off2 += widths[p];
            }
        });
    }
    return C;
}

/// Sum of all entries, returned as a scalar tensor of shape [1].
template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& A) {
    Tensor<T> C = Tensor<T>::zeros({1});
    for (T v : A.data) C.data[0] += v;
    ensure_finite(C, "sum_all");
    if (detail::want_grad(tape, {&A})) {
        const int id = tape->alloc(1);
        C.node = id;
        tape->set_pull(id, [id, an = A.node](Tape<T>& tp) {
            const T g = tp.grad(id)[0];
            std::vector<T>& ga = tp.grad(an);
            for (T& v : ga) v += g;
        });
    }
    return C;
}

/// Mean cross-entropy over rows whose label is not the ignore sentinel -100.
/// logits: [m, V]; labels: length m.
template <typename T>
Tensor<T> cross_entropy_masked(Tape<T>* tape, const Tensor<T>& logits, const std::vector<int>& labels) {
    constexpr int kIgnore = -100;
    const std::size_t m = logits.rows(), v = logits.cols();
    if (labels.size() != m) throw dimension_error("cross_entropy_masked: labels length vs logit rows");
    std::size_t valid = 0;
    Tensor<T> loss = Tensor<T>::zeros({1});
    std::vector<T> probs;  // softmax rows for valid positions, for backward
    if (detail::want_grad(tape, {&logits})) probs.assign(m * v, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        const int lab = labels[i];
        if (lab == kIgnore) continue;
        if (lab < 0 || static_cast<std::size_t>(lab) >= v)
            throw contract_error("cross_entropy_masked: label out of range");
        ++valid;
        const T* row = &logits.data[i * v];
        T mx = row[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        const T lse = std::log(sum) + mx;
        loss.data[0] += lse - row[static_cast<std::size_t>(lab)];
        if (!probs.empty()) {
            const T inv = T(1) / sum;
            for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(row[j] - mx) * inv;
        }
    }
    if (valid == 0) throw contract_error("cross_entropy_masked: all labels are the ignore sentinel");
    loss.data[0] /= static_cast<T>(valid);
    ensure_finite(loss, "cross_entropy_masked");
    if (!probs.empty()) {
        const int id = tape->alloc(1);
        loss.node = id;
        tape->set_pull(id, [id, ln = logits.node, probs = std::move(probs), labels, m, v, valid](Tape<T>& tp) {
            const T g = tp.grad(id)[0] / static_cast<T>(valid);
            std::vector<T>& gl = tp.grad(ln);
            for (std::size_t i = 0; i < m; ++i) {
                if (labels[i] == kIgnore) continue;
                for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += g * probs[i * v + j];
                gl[i * v + static_cast<std::size_t>(labels[i])] -= g;
            }
        });
    }
    return loss;
}

}  // namespace flashmem
