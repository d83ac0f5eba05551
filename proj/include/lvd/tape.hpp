#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "lvd/tensor.hpp"

namespace lvd {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

// C[m,n] (+)= A[m,k] * B[k,n], row-major raw pointers
template <typename T>
void gemm_nn(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool acc) {
    MapRM<T> C(c, m, n);
    CMapRM<T> A(a, m, k), B(b, k, n);
    if (acc)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool acc) {
    MapRM<T> C(c, m, n);
    CMapRM<T> A(a, m, k), B(b, n, k);
    if (acc)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

// C[k,n] (+)= A[m,k]^T * B[m,n]
template <typename T>
void gemm_tn(T* c, const T* a, const T* b, int64_t m, int64_t k, int64_t n, bool acc) {
    MapRM<T> C(c, k, n);
    CMapRM<T> A(a, m, k), B(b, m, n);
    if (acc)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

template <typename T>
class Tape;

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& val() const;
};

// Reverse-mode tape. Nodes are created in topological order by the op
// functions below; backward() walks them in reverse. Single-threaded and
// fully deterministic: accumulation order is creation order.
template <typename T>
class Tape {
  public:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;  // allocated lazily during backward
        std::function<void(Tape&, int)> back;
        bool needs_grad = false;
    };

    Tape() = default;
    explicit Tape(bool inference) : inference_(inference) {}

    Var<T> make(Tensor<T> val, bool needs_grad, std::function<void(Tape&, int)> back = nullptr) {
        nodes_.push_back(Node{std::move(val), {}, std::move(back), needs_grad});
        return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var<T> constant(Tensor<T> t) { return make(std::move(t), false); }

    // Leaf tied to a long-lived parameter tensor; deduped by address so a
    // parameter used twice in one graph accumulates one gradient.
    Var<T> leaf(const Tensor<T>& src) {
        auto it = leaf_ids_.find(&src);
        if (it != leaf_ids_.end()) return Var<T>{this, it->second};
        Var<T> v = make(src, !inference_);
        leaf_ids_.emplace(&src, v.id);
        return v;
    }

    const Tensor<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    Tensor<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.val.shape);
        return n.grad;
    }

    void backward(Var<T> loss) {
        if (loss.tape != this) throw std::logic_error("tape: foreign var");
        if (val(loss.id).numel() != 1) throw std::logic_error("tape: backward needs scalar loss");
        grad_buf(loss.id).data[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || !n.back || n.grad.data.empty()) continue;
            n.back(*this, i);
        }
    }

    // gradient of a registered parameter leaf, or nullptr when untouched
    const Tensor<T>* grad_of(const Tensor<T>& src) const {
        auto it = leaf_ids_.find(&src);
        if (it == leaf_ids_.end()) return nullptr;
        const Node& n = nodes_[static_cast<size_t>(it->second)];
        return n.grad.data.empty() ? nullptr : &n.grad;
    }

    size_t size() const { return nodes_.size(); }

  private:
    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_ids_;
    bool inference_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::val() const {
    return tape->val(id);
}

namespace detail {

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape) throw std::logic_error("tape: vars from different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------- basic ops

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    Tape<T>& tp = *a.tape;
    check_same_shape(tp.val(a.id), tp.val(b.id), "add");
    Tensor<T> out = tp.val(a.id);
    const Tensor<T>& bv = tp.val(b.id);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    bool ng = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    int ai = a.id, bi = b.id;
    return tp.make(std::move(out), ng, [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        for (int p : {ai, bi}) {
            if (!t.wants_grad(p)) continue;
            Tensor<T>& pg = t.grad_buf(p);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
        }
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    Tape<T>& tp = *a.tape;
    check_same_shape(tp.val(a.id), tp.val(b.id), "sub");
    Tensor<T> out = tp.val(a.id);
    const Tensor<T>& bv = tp.val(b.id);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
    bool ng = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    int ai = a.id, bi = b.id;
    return tp.make(std::move(out), ng, [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(ai)) {
            Tensor<T>& pg = t.grad_buf(ai);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
        }
        if (t.wants_grad(bi)) {
            Tensor<T>& pg = t.grad_buf(bi);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] -= g.data[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    Tape<T>& tp = *a.tape;
    check_same_shape(tp.val(a.id), tp.val(b.id), "mul");
    Tensor<T> out = tp.val(a.id);
    const Tensor<T>& bv = tp.val(b.id);
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    bool ng = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    int ai = a.id, bi = b.id;
    return tp.make(std::move(out), ng, [ai, bi](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(ai)) {
            Tensor<T>& pg = t.grad_buf(ai);
            const Tensor<T>& ov = t.val(bi);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * ov.data[i];
        }
        if (t.wants_grad(bi)) {
            Tensor<T>& pg = t.grad_buf(bi);
            const Tensor<T>& ov = t.val(ai);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * ov.data[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& tp = *a.tape;
    Tensor<T> out = tp.val(a.id);
    for (auto& v : out.data) v *= c;
    int ai = a.id;
    return tp.make(std::move(out), tp.wants_grad(a.id), [ai, c](Tape<T>& t, int self) {
        if (!t.wants_grad(ai)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_buf(ai);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i] * c;
    });
}

// x: [N, D] plus row vector b: [D]
template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
    detail::same_tape(x, b);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const Tensor<T>& bv = tp.val(b.id);
    const int64_t d = bv.numel();
    if (xv.numel() % d != 0) throw std::invalid_argument("add_bias: width mismatch");
    Tensor<T> out = xv;
    const int64_t rows = xv.numel() / d;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out.data[static_cast<size_t>(r * d + j)] += bv.data[static_cast<size_t>(j)];
    bool ng = tp.wants_grad(x.id) || tp.wants_grad(b.id);
    int xi = x.id, bi = b.id;
    return tp.make(std::move(out), ng, [xi, bi, rows, d](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_buf(xi);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
        }
        if (t.wants_grad(bi)) {
            Tensor<T>& pg = t.grad_buf(bi);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j)
                    pg.data[static_cast<size_t>(j)] += g.data[static_cast<size_t>(r * d + j)];
        }
    });
}

// rows of x: [R, D] get pos[r % P] added; temporal position embeddings
template <typename T>
Var<T> add_rows_tiled(Var<T> x, Var<T> pos) {
    detail::same_tape(x, pos);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const Tensor<T>& pv = tp.val(pos.id);
    const int64_t d = pv.shape.back();
    const int64_t period = pv.numel() / d;
    const int64_t rows = xv.numel() / d;
    if (xv.shape.back() != d || rows % period != 0)
        throw std::invalid_argument("add_rows_tiled: shape mismatch");
    Tensor<T> out = xv;
    for (int64_t r = 0; r < rows; ++r) {
        const T* p = &pv.data[static_cast<size_t>((r % period) * d)];
        T* o = &out.data[static_cast<size_t>(r * d)];
        for (int64_t j = 0; j < d; ++j) o[j] += p[j];
    }
    bool ng = tp.wants_grad(x.id) || tp.wants_grad(pos.id);
    int xi = x.id, pi = pos.id;
    return tp.make(std::move(out), ng, [xi, pi, rows, d, period](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_buf(xi);
            for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
        }
        if (t.wants_grad(pi)) {
            Tensor<T>& pg = t.grad_buf(pi);
            for (int64_t r = 0; r < rows; ++r) {
                T* p = &pg.data[static_cast<size_t>((r % period) * d)];
                const T* gg = &g.data[static_cast<size_t>(r * d)];
                for (int64_t j = 0; j < d; ++j) p[j] += gg[j];
            }
        }
    });
}

// A: [m, k], B: [k, n]. When row_block > 0 the product runs one GEMM per
// block of A rows; blocks aligned with a frame axis make each frame's result
// bit-identical regardless of its position in the batch.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, int64_t row_block = 0) {
    detail::same_tape(a, b);
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.val(a.id);
    const Tensor<T>& bv = tp.val(b.id);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw std::invalid_argument("matmul: bad shapes " + av.shape_str() + " x " + bv.shape_str());
    const int64_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor<T> out({m, n});
    if (row_block > 0 && row_block < m && m % row_block == 0) {
        for (int64_t r = 0; r < m; r += row_block)
            gemm_nn(out.data.data() + r * n, av.data.data() + r * k, bv.data.data(), row_block, k, n,
                    false);
    } else {
        gemm_nn(out.data.data(), av.data.data(), bv.data.data(), m, k, n, false);
    }
    bool ng = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    int ai = a.id, bi = b.id;
    return tp.make(std::move(out), ng, [ai, bi, m, k, n](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(ai))
            gemm_nt(t.grad_buf(ai).data.data(), g.data.data(), t.val(bi).data.data(), m, n, k, true);
        if (t.wants_grad(bi))
            gemm_tn(t.grad_buf(bi).data.data(), t.val(ai).data.data(), g.data.data(), m, k, n, true);
    });
}

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int64_t> shape) {
    Tape<T>& tp = *x.tape;
    Tensor<T> out = tp.val(x.id).reshaped(std::move(shape));
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_buf(xi);
        for (size_t i = 0; i < g.data.size(); ++i) pg.data[i] += g.data[i];
    });
}

namespace detail {

inline std::vector<int64_t> permute_strides(const std::vector<int64_t>& shape) {
    std::vector<int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
    return st;
}

// flat index map realizing out[i] = in[map[i]]
inline std::vector<int64_t> permute_map(const std::vector<int64_t>& in_shape,
                                        const std::vector<int>& axes) {
    const size_t r = in_shape.size();
    std::vector<int64_t> out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
    auto in_st = permute_strides(in_shape);
    int64_t n = 1;
    for (auto d : out_shape) n *= d;
    std::vector<int64_t> map(static_cast<size_t>(n));
    std::vector<int64_t> idx(r, 0);
    for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        for (size_t i = 0; i < r; ++i) src += idx[i] * in_st[static_cast<size_t>(axes[i])];
        map[static_cast<size_t>(o)] = src;
        for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return map;
}

}  // namespace detail

namespace detail {

// gathered rank-4 transpose: out, walked linearly, reads strided input
template <typename T>
void permute4(const T* in, T* out, const std::vector<int64_t>& in_shape, const int* axes) {
    const int64_t s0 = in_shape[static_cast<size_t>(axes[0])],
                  s1 = in_shape[static_cast<size_t>(axes[1])],
                  s2 = in_shape[static_cast<size_t>(axes[2])],
                  s3 = in_shape[static_cast<size_t>(axes[3])];
    int64_t st[4] = {in_shape[1] * in_shape[2] * in_shape[3], in_shape[2] * in_shape[3],
                     in_shape[3], 1};
    const int64_t t0 = st[axes[0]], t1 = st[axes[1]], t2 = st[axes[2]], t3 = st[axes[3]];
    int64_t o = 0;
    for (int64_t a = 0; a < s0; ++a)
        for (int64_t b = 0; b < s1; ++b)
            for (int64_t c = 0; c < s2; ++c) {
                const T* src = in + a * t0 + b * t1 + c * t2;
                for (int64_t d = 0; d < s3; ++d) out[o++] = src[d * t3];
            }
}

}  // namespace detail

template <typename T>
Var<T> permute(Var<T> x, std::vector<int> axes) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    if (axes.size() != xv.shape.size()) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int64_t> out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = xv.shape[static_cast<size_t>(axes[i])];
    Tensor<T> out(out_shape);
    auto in_shape = std::make_shared<std::vector<int64_t>>(xv.shape);
    auto ax = std::make_shared<std::vector<int>>(axes);
    if (axes.size() == 4) {
        detail::permute4<T>(xv.data.data(), out.data.data(), xv.shape, axes.data());
    } else {
        auto map = detail::permute_map(xv.shape, axes);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = xv.data[static_cast<size_t>(map[i])];
    }
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi, in_shape, ax](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_buf(xi);
        if (ax->size() == 4) {
            // inverse scatter: walk the output in order, add into strided input slots
            const std::vector<int64_t>& ish = *in_shape;
            const int* axs = ax->data();
            const int64_t s0 = ish[static_cast<size_t>(axs[0])], s1 = ish[static_cast<size_t>(axs[1])],
                          s2 = ish[static_cast<size_t>(axs[2])], s3 = ish[static_cast<size_t>(axs[3])];
            int64_t st[4] = {ish[1] * ish[2] * ish[3], ish[2] * ish[3], ish[3], 1};
            const int64_t t0 = st[axs[0]], t1 = st[axs[1]], t2 = st[axs[2]], t3 = st[axs[3]];
            int64_t o = 0;
            for (int64_t a = 0; a < s0; ++a)
                for (int64_t b = 0; b < s1; ++b)
                    for (int64_t c = 0; c < s2; ++c) {
                        T* dst = pg.data.data() + a * t0 + b * t1 + c * t2;
                        for (int64_t d = 0; d < s3; ++d) dst[d * t3] += g.data[static_cast<size_t>(o++)];
                    }
        } else {
            auto map = detail::permute_map(*in_shape, *ax);
            for (size_t i = 0; i < g.data.size(); ++i)
                pg.data[static_cast<size_t>(map[i])] += g.data[i];
        }
    });
}

template <typename T>
Var<T> concat(Var<T> a, Var<T> b, int axis) {
    detail::same_tape(a, b);
    Tape<T>& tp = *a.tape;
    const Tensor<T>& av = tp.val(a.id);
    const Tensor<T>& bv = tp.val(b.id);
    if (av.rank() != bv.rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < av.rank(); ++i)
        if (i != axis && av.shape[static_cast<size_t>(i)] != bv.shape[static_cast<size_t>(i)])
            throw std::invalid_argument("concat: shape mismatch");
    std::vector<int64_t> out_shape = av.shape;
    out_shape[static_cast<size_t>(axis)] += bv.shape[static_cast<size_t>(axis)];
    // outer = product of dims before axis, inner = product after
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= av.shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < av.rank(); ++i) inner *= av.shape[static_cast<size_t>(i)];
    const int64_t wa = av.shape[static_cast<size_t>(axis)] * inner;
    const int64_t wb = bv.shape[static_cast<size_t>(axis)] * inner;
    Tensor<T> out(out_shape);
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(&av.data[static_cast<size_t>(o * wa)], wa, &out.data[static_cast<size_t>(o * (wa + wb))]);
        std::copy_n(&bv.data[static_cast<size_t>(o * wb)], wb, &out.data[static_cast<size_t>(o * (wa + wb) + wa)]);
    }
    bool ng = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    int ai = a.id, bi = b.id;
    return tp.make(std::move(out), ng, [ai, bi, outer, wa, wb](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        if (t.wants_grad(ai)) {
            Tensor<T>& pg = t.grad_buf(ai);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < wa; ++i)
                    pg.data[static_cast<size_t>(o * wa + i)] += g.data[static_cast<size_t>(o * (wa + wb) + i)];
        }
        if (t.wants_grad(bi)) {
            Tensor<T>& pg = t.grad_buf(bi);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t i = 0; i < wb; ++i)
                    pg.data[static_cast<size_t>(o * wb + i)] += g.data[static_cast<size_t>(o * (wa + wb) + wa + i)];
        }
    });
}

template <typename T>
Var<T> slice(Var<T> x, int axis, int64_t start, int64_t len) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const int64_t dim = xv.shape[static_cast<size_t>(axis)];
    if (start < 0 || start + len > dim) throw std::invalid_argument("slice: out of range");
    std::vector<int64_t> out_shape = xv.shape;
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= xv.shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.shape[static_cast<size_t>(i)];
    Tensor<T> out(out_shape);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(&xv.data[static_cast<size_t>((o * dim + start) * inner)], len * inner,
                    &out.data[static_cast<size_t>(o * len * inner)]);
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id),
                   [xi, axis, start, len, outer, inner, dim](Tape<T>& t, int self) {
                       if (!t.wants_grad(xi)) return;
                       const Tensor<T>& g = t.node(self).grad;
                       Tensor<T>& pg = t.grad_buf(xi);
                       for (int64_t o = 0; o < outer; ++o)
                           for (int64_t i = 0; i < len * inner; ++i)
                               pg.data[static_cast<size_t>((o * dim + start) * inner + i)] +=
                                   g.data[static_cast<size_t>(o * len * inner + i)];
                   });
}

// ----------------------------------------------------------- nonlinearities

template <typename T>
Var<T> silu(Var<T> x) {
    Tape<T>& tp = *x.tape;
    Tensor<T> out = tp.val(x.id);
    for (auto& v : out.data) {
        const T s = T(1) / (T(1) + std::exp(-v));
        v = v * s;
    }
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& xv = t.val(xi);
        Tensor<T>& pg = t.grad_buf(xi);
        for (size_t i = 0; i < g.data.size(); ++i) {
            const T v = xv.data[i];
            const T s = T(1) / (T(1) + std::exp(-v));
            pg.data[i] += g.data[i] * s * (T(1) + v * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> gelu(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const T c = static_cast<T>(0.7978845608028653558798921198687);  // sqrt(2/pi)
    const T k = static_cast<T>(0.044715);
    Tensor<T> out = tp.val(x.id);
    for (auto& v : out.data) {
        const T u = c * (v + k * v * v * v);
        v = T(0.5) * v * (T(1) + std::tanh(u));
    }
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi, c, k](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& xv = t.val(xi);
        Tensor<T>& pg = t.grad_buf(xi);
        for (size_t i = 0; i < g.data.size(); ++i) {
            const T v = xv.data[i];
            const T u = c * (v + k * v * v * v);
            const T th = std::tanh(u);
            const T sech2 = T(1) - th * th;
            const T d = T(0.5) * (T(1) + th) + T(0.5) * v * sech2 * c * (T(1) + T(3) * k * v * v);
            pg.data[i] += g.data[i] * d;
        }
    });
}

template <typename T>
Var<T> tanh_op(Var<T> x) {
    Tape<T>& tp = *x.tape;
    Tensor<T> out = tp.val(x.id);
    for (auto& v : out.data) v = std::tanh(v);
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& yv = t.val(self);
        Tensor<T>& pg = t.grad_buf(xi);
        for (size_t i = 0; i < g.data.size(); ++i)
            pg.data[i] += g.data[i] * (T(1) - yv.data[i] * yv.data[i]);
    });
}

// rows of x: [R, D]
template <typename T>
Var<T> softmax_rows(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const int64_t d = xv.shape.back();
    const int64_t rows = xv.numel() / d;
    Tensor<T> out = xv;
    for (int64_t r = 0; r < rows; ++r) {
        T* p = &out.data[static_cast<size_t>(r * d)];
        T mx = p[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, p[j]);
        T sum = T(0);
        for (int64_t j = 0; j < d; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        for (int64_t j = 0; j < d; ++j) p[j] /= sum;
    }
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi, rows, d](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& y = t.val(self);
        Tensor<T>& pg = t.grad_buf(xi);
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = &g.data[static_cast<size_t>(r * d)];
            const T* yr = &y.data[static_cast<size_t>(r * d)];
            T dot = T(0);
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            T* pr = &pg.data[static_cast<size_t>(r * d)];
            for (int64_t j = 0; j < d; ++j) pr[j] += yr[j] * (gr[j] - dot);
        }
    });
}

// --------------------------------------------------------------- reductions

template <typename T>
Var<T> mean_all(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    T acc = T(0);
    for (T v : xv.data) acc += v;
    Tensor<T> out({1});
    out.data[0] = acc / static_cast<T>(xv.numel());
    int xi = x.id;
    const T inv = T(1) / static_cast<T>(xv.numel());
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi, inv](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const T g = t.node(self).grad.data[0] * inv;
        Tensor<T>& pg = t.grad_buf(xi);
        for (auto& v : pg.data) v += g;
    });
}

// mean((a - b)^2) as one node
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    detail::same_tape(a, b);
    Tape<T>& tp = *a.tape;
    check_same_shape(tp.val(a.id), tp.val(b.id), "mse");
    const Tensor<T>& av = tp.val(a.id);
    const Tensor<T>& bv = tp.val(b.id);
    T acc = T(0);
    for (size_t i = 0; i < av.data.size(); ++i) {
        const T dv = av.data[i] - bv.data[i];
        acc += dv * dv;
    }
    Tensor<T> out({1});
    out.data[0] = acc / static_cast<T>(av.numel());
    bool ng = tp.wants_grad(a.id) || tp.wants_grad(b.id);
    int ai = a.id, bi = b.id;
    const T inv2 = T(2) / static_cast<T>(av.numel());
    return tp.make(std::move(out), ng, [ai, bi, inv2](Tape<T>& t, int self) {
        const T g = t.node(self).grad.data[0] * inv2;
        const Tensor<T>& av2 = t.val(ai);
        const Tensor<T>& bv2 = t.val(bi);
        if (t.wants_grad(ai)) {
            Tensor<T>& pg = t.grad_buf(ai);
            for (size_t i = 0; i < pg.data.size(); ++i) pg.data[i] += g * (av2.data[i] - bv2.data[i]);
        }
        if (t.wants_grad(bi)) {
            Tensor<T>& pg = t.grad_buf(bi);
            for (size_t i = 0; i < pg.data.size(); ++i) pg.data[i] -= g * (av2.data[i] - bv2.data[i]);
        }
    });
}

// ------------------------------------------------------------ normalization

// x: [N, C, H, W]; per-(sample, group) statistics, per-channel affine
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5)) {
    detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    if (xv.rank() != 4) throw std::invalid_argument("group_norm: want [N,C,H,W]");
    const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
    const int64_t cpg = C / groups, m = cpg * HW;
    const Tensor<T>& gv = tp.val(gamma.id);
    const Tensor<T>& bv = tp.val(beta.id);

    auto xhat = std::make_shared<Tensor<T>>(xv.shape);
    auto inv_std = std::make_shared<Tensor<T>>(std::vector<int64_t>{N, groups});
    Tensor<T> out(xv.shape);
    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            const int64_t base = (n * C + g * cpg) * HW;
            T mean = T(0);
            for (int64_t i = 0; i < m; ++i) mean += xv.data[static_cast<size_t>(base + i)];
            mean /= static_cast<T>(m);
            T var = T(0);
            for (int64_t i = 0; i < m; ++i) {
                const T d = xv.data[static_cast<size_t>(base + i)] - mean;
                var += d * d;
            }
            var /= static_cast<T>(m);
            const T is = T(1) / std::sqrt(var + eps);
            inv_std->data[static_cast<size_t>(n * groups + g)] = is;
            for (int64_t c = 0; c < cpg; ++c) {
                const int64_t ch = g * cpg + c;
                const T ga = gv.data[static_cast<size_t>(ch)], be = bv.data[static_cast<size_t>(ch)];
                for (int64_t i = 0; i < HW; ++i) {
                    const int64_t o = base + c * HW + i;
                    const T xh = (xv.data[static_cast<size_t>(o)] - mean) * is;
                    xhat->data[static_cast<size_t>(o)] = xh;
                    out.data[static_cast<size_t>(o)] = ga * xh + be;
                }
            }
        }
    bool ng = tp.wants_grad(x.id) || tp.wants_grad(gamma.id) || tp.wants_grad(beta.id);
    int xi = x.id, gi = gamma.id, bi = beta.id;
    return tp.make(std::move(out), ng, [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& gv2 = t.val(gi);
        if (t.wants_grad(gi) || t.wants_grad(bi)) {
            for (int64_t ch = 0; ch < C; ++ch) {
                T dg = T(0), db = T(0);
                for (int64_t n = 0; n < N; ++n) {
                    const int64_t base = (n * C + ch) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        dg += g.data[static_cast<size_t>(base + i)] * xhat->data[static_cast<size_t>(base + i)];
                        db += g.data[static_cast<size_t>(base + i)];
                    }
                }
                if (t.wants_grad(gi)) t.grad_buf(gi).data[static_cast<size_t>(ch)] += dg;
                if (t.wants_grad(bi)) t.grad_buf(bi).data[static_cast<size_t>(ch)] += db;
            }
        }
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_buf(xi);
            for (int64_t n = 0; n < N; ++n)
                for (int64_t gr = 0; gr < groups; ++gr) {
                    const int64_t base = (n * C + gr * cpg) * HW;
                    const T is = inv_std->data[static_cast<size_t>(n * groups + gr)];
                    T su = T(0), sux = T(0);
                    for (int64_t c = 0; c < cpg; ++c) {
                        const T ga = gv2.data[static_cast<size_t>(gr * cpg + c)];
                        for (int64_t i = 0; i < HW; ++i) {
                            const int64_t o = base + c * HW + i;
                            const T u = g.data[static_cast<size_t>(o)] * ga;
                            su += u;
                            sux += u * xhat->data[static_cast<size_t>(o)];
                        }
                    }
                    su /= static_cast<T>(m);
                    sux /= static_cast<T>(m);
                    for (int64_t c = 0; c < cpg; ++c) {
                        const T ga = gv2.data[static_cast<size_t>(gr * cpg + c)];
                        for (int64_t i = 0; i < HW; ++i) {
                            const int64_t o = base + c * HW + i;
                            const T u = g.data[static_cast<size_t>(o)] * ga;
                            pg.data[static_cast<size_t>(o)] +=
                                is * (u - su - xhat->data[static_cast<size_t>(o)] * sux);
                        }
                    }
                }
        }
    });
}

// x: [..., D]; per-row statistics over the last axis
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
    detail::same_tape(x, gamma);
    detail::same_tape(x, beta);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const int64_t d = xv.shape.back();
    const int64_t rows = xv.numel() / d;
    const Tensor<T>& gv = tp.val(gamma.id);
    const Tensor<T>& bv = tp.val(beta.id);
    if (gv.numel() != d || bv.numel() != d) throw std::invalid_argument("layer_norm: affine width");

    auto xhat = std::make_shared<Tensor<T>>(xv.shape);
    auto inv_std = std::make_shared<Tensor<T>>(std::vector<int64_t>{rows});
    Tensor<T> out(xv.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* px = &xv.data[static_cast<size_t>(r * d)];
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += px[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) {
            const T dv = px[j] - mean;
            var += dv * dv;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std->data[static_cast<size_t>(r)] = is;
        for (int64_t j = 0; j < d; ++j) {
            const T xh = (px[j] - mean) * is;
            xhat->data[static_cast<size_t>(r * d + j)] = xh;
            out.data[static_cast<size_t>(r * d + j)] = gv.data[static_cast<size_t>(j)] * xh + bv.data[static_cast<size_t>(j)];
        }
    }
    bool ng = tp.wants_grad(x.id) || tp.wants_grad(gamma.id) || tp.wants_grad(beta.id);
    int xi = x.id, gi = gamma.id, bi = beta.id;
    return tp.make(std::move(out), ng, [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& gv2 = t.val(gi);
        if (t.wants_grad(gi) || t.wants_grad(bi)) {
            for (int64_t j = 0; j < d; ++j) {
                T dg = T(0), db = T(0);
                for (int64_t r = 0; r < rows; ++r) {
                    dg += g.data[static_cast<size_t>(r * d + j)] * xhat->data[static_cast<size_t>(r * d + j)];
                    db += g.data[static_cast<size_t>(r * d + j)];
                }
                if (t.wants_grad(gi)) t.grad_buf(gi).data[static_cast<size_t>(j)] += dg;
                if (t.wants_grad(bi)) t.grad_buf(bi).data[static_cast<size_t>(j)] += db;
            }
        }
        if (t.wants_grad(xi)) {
            Tensor<T>& pg = t.grad_buf(xi);
            for (int64_t r = 0; r < rows; ++r) {
                const T is = inv_std->data[static_cast<size_t>(r)];
                T su = T(0), sux = T(0);
                for (int64_t j = 0; j < d; ++j) {
                    const T u = g.data[static_cast<size_t>(r * d + j)] * gv2.data[static_cast<size_t>(j)];
                    su += u;
                    sux += u * xhat->data[static_cast<size_t>(r * d + j)];
                }
                su /= static_cast<T>(d);
                sux /= static_cast<T>(d);
                for (int64_t j = 0; j < d; ++j) {
                    const T u = g.data[static_cast<size_t>(r * d + j)] * gv2.data[static_cast<size_t>(j)];
                    pg.data[static_cast<size_t>(r * d + j)] +=
                        is * (u - su - xhat->data[static_cast<size_t>(r * d + j)] * sux);
                }
            }
        }
    });
}

// ------------------------------------------------------------------- conv

namespace detail {

// clamped source coordinates per (output position, kernel tap); shared by
// the gather and scatter paths
struct ConvIndex {
    std::vector<int64_t> ys;  // [OH * k]
    std::vector<int64_t> xs;  // [OW * k]
};

inline ConvIndex conv_index(int64_t H, int64_t W, int k, int stride, int pad, int64_t OH,
                            int64_t OW) {
    ConvIndex ix;
    ix.ys.resize(static_cast<size_t>(OH * k));
    ix.xs.resize(static_cast<size_t>(OW * k));
    for (int64_t o = 0; o < OH; ++o)
        for (int kk = 0; kk < k; ++kk) {
            int64_t v = o * stride - pad + kk;
            ix.ys[static_cast<size_t>(o * k + kk)] = v < 0 ? 0 : (v >= H ? H - 1 : v);
        }
    for (int64_t o = 0; o < OW; ++o)
        for (int kk = 0; kk < k; ++kk) {
            int64_t v = o * stride - pad + kk;
            ix.xs[static_cast<size_t>(o * k + kk)] = v < 0 ? 0 : (v >= W ? W - 1 : v);
        }
    return ix;
}

// replicate-padded im2col for one sample; cols: [OH*OW, Cin*k*k]
template <typename T>
void im2col(const T* x, int64_t Cin, int64_t H, int64_t W, int k, const ConvIndex& ix, int64_t OH,
            int64_t OW, T* cols) {
    const int64_t CK = Cin * k * k;
    for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
            T* row = cols + (oy * OW + ox) * CK;
            const int64_t* ys = &ix.ys[static_cast<size_t>(oy * k)];
            const int64_t* xs = &ix.xs[static_cast<size_t>(ox * k)];
            for (int64_t ci = 0; ci < Cin; ++ci) {
                const T* plane = x + ci * H * W;
                T* dst = row + ci * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    const T* src = plane + ys[ky] * W;
                    for (int kx = 0; kx < k; ++kx) dst[ky * k + kx] = src[xs[kx]];
                }
            }
        }
}

template <typename T>
void col2im_add(const T* cols, int64_t Cin, int64_t H, int64_t W, int k, const ConvIndex& ix,
                int64_t OH, int64_t OW, T* dx) {
    const int64_t CK = Cin * k * k;
    for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
            const T* row = cols + (oy * OW + ox) * CK;
            const int64_t* ys = &ix.ys[static_cast<size_t>(oy * k)];
            const int64_t* xs = &ix.xs[static_cast<size_t>(ox * k)];
            for (int64_t ci = 0; ci < Cin; ++ci) {
                T* plane = dx + ci * H * W;
                const T* src = row + ci * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    T* dst = plane + ys[ky] * W;
                    for (int kx = 0; kx < k; ++kx) dst[xs[kx]] += src[ky * k + kx];
                }
            }
        }
}

}  // namespace detail

// x: [N, Cin, H, W], w: [Cout, Cin, k, k], b: [Cout]. Replicate padding so a
// constant map stays constant; samples are processed one GEMM each, which
// keeps per-frame results independent of batch composition.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
    detail::same_tape(x, w);
    detail::same_tape(x, b);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const Tensor<T>& wv = tp.val(w.id);
    if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: want 4-d tensors");
    const int64_t N = xv.shape[0], Cin = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const int64_t Cout = wv.shape[0];
    const int k = static_cast<int>(wv.shape[2]);
    if (wv.shape[1] != Cin || wv.shape[3] != k)
        throw std::invalid_argument("conv2d: kernel/channel mismatch " + xv.shape_str() + " vs " +
                                    wv.shape_str());
    const int64_t OH = (H + 2 * pad - k) / stride + 1;
    const int64_t OW = (W + 2 * pad - k) / stride + 1;
    const int64_t CK = Cin * k * k;

    // w viewed as [Cout, CK]; GEMM computes cols[OHW, CK] * w^T
    auto cols = std::make_shared<Tensor<T>>(std::vector<int64_t>{N * OH * OW, CK});
    auto cidx = std::make_shared<detail::ConvIndex>(detail::conv_index(H, W, k, stride, pad, OH, OW));
    Tensor<T> out({N, Cout, OH, OW});
    const Tensor<T>& bv = tp.val(b.id);
    std::vector<T> omat(static_cast<size_t>(OH * OW * Cout));
    for (int64_t n = 0; n < N; ++n) {
        T* c = &cols->data[static_cast<size_t>(n * OH * OW * CK)];
        detail::im2col(&xv.data[static_cast<size_t>(n * Cin * H * W)], Cin, H, W, k, *cidx, OH, OW, c);
        gemm_nt(omat.data(), c, wv.data.data(), OH * OW, CK, Cout, false);
        for (int64_t co = 0; co < Cout; ++co) {
            const T bb = bv.data[static_cast<size_t>(co)];
            T* dst = &out.data[static_cast<size_t>(((n * Cout) + co) * OH * OW)];
            for (int64_t i = 0; i < OH * OW; ++i) dst[i] = omat[static_cast<size_t>(i * Cout + co)] + bb;
        }
    }
    bool ng = tp.wants_grad(x.id) || tp.wants_grad(w.id) || tp.wants_grad(b.id);
    int xi = x.id, wi = w.id, bi = b.id;
    return tp.make(std::move(out), ng, [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& wv2 = t.val(wi);
        std::vector<T> gmat(static_cast<size_t>(OH * OW * Cout));
        std::vector<T> dcols(static_cast<size_t>(OH * OW * CK));
        const bool wx = t.wants_grad(xi), ww = t.wants_grad(wi), wb = t.wants_grad(bi);
        for (int64_t n = 0; n < N; ++n) {
            for (int64_t co = 0; co < Cout; ++co) {
                const T* src = &g.data[static_cast<size_t>(((n * Cout) + co) * OH * OW)];
                for (int64_t i = 0; i < OH * OW; ++i) gmat[static_cast<size_t>(i * Cout + co)] = src[i];
            }
            const T* c = &cols->data[static_cast<size_t>(n * OH * OW * CK)];
            if (ww)
                gemm_tn(t.grad_buf(wi).data.data(), gmat.data(), c, OH * OW, Cout, CK, true);
            if (wb) {
                Tensor<T>& pb = t.grad_buf(bi);
                for (int64_t i = 0; i < OH * OW; ++i)
                    for (int64_t co = 0; co < Cout; ++co)
                        pb.data[static_cast<size_t>(co)] += gmat[static_cast<size_t>(i * Cout + co)];
            }
            if (wx) {
                gemm_nn(dcols.data(), gmat.data(), wv2.data.data(), OH * OW, Cout, CK, false);
                detail::col2im_add(dcols.data(), Cin, H, W, k, *cidx, OH, OW,
                                   &t.grad_buf(xi).data[static_cast<size_t>(n * Cin * H * W)]);
            }
        }
    });
}

// nearest-neighbor 2x upsample; x: [N, C, H, W] -> [N, C, 2H, 2W]
template <typename T>
Var<T> upsample2x(Var<T> x) {
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const int64_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    Tensor<T> out({N, C, 2 * H, 2 * W});
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* src = &xv.data[static_cast<size_t>(nc * H * W)];
        T* dst = &out.data[static_cast<size_t>(nc * 4 * H * W)];
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xw = 0; xw < W; ++xw) {
                const T v = src[y * W + xw];
                dst[(2 * y) * 2 * W + 2 * xw] = v;
                dst[(2 * y) * 2 * W + 2 * xw + 1] = v;
                dst[(2 * y + 1) * 2 * W + 2 * xw] = v;
                dst[(2 * y + 1) * 2 * W + 2 * xw + 1] = v;
            }
    }
    int xi = x.id;
    return tp.make(std::move(out), tp.wants_grad(x.id), [xi, N, C, H, W](Tape<T>& t, int self) {
        if (!t.wants_grad(xi)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_buf(xi);
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* src = &g.data[static_cast<size_t>(nc * 4 * H * W)];
            T* dst = &pg.data[static_cast<size_t>(nc * H * W)];
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xw = 0; xw < W; ++xw)
                    dst[y * W + xw] += src[(2 * y) * 2 * W + 2 * xw] + src[(2 * y) * 2 * W + 2 * xw + 1] +
                                       src[(2 * y + 1) * 2 * W + 2 * xw] +
                                       src[(2 * y + 1) * 2 * W + 2 * xw + 1];
        }
    });
}

// x: [N, C, H, W] modulated per (n, c): x * (1 + s) + h
template <typename T>
Var<T> film(Var<T> x, Var<T> s, Var<T> h) {
    detail::same_tape(x, s);
    detail::same_tape(x, h);
    Tape<T>& tp = *x.tape;
    const Tensor<T>& xv = tp.val(x.id);
    const Tensor<T>& sv = tp.val(s.id);
    const Tensor<T>& hv = tp.val(h.id);
    const int64_t N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
    if (sv.numel() != N * C || hv.numel() != N * C) throw std::invalid_argument("film: want [N,C] scales");
    Tensor<T> out(xv.shape);
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T sc = T(1) + sv.data[static_cast<size_t>(nc)];
        const T sh = hv.data[static_cast<size_t>(nc)];
        const T* src = &xv.data[static_cast<size_t>(nc * HW)];
        T* dst = &out.data[static_cast<size_t>(nc * HW)];
        for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] * sc + sh;
    }
    bool ng = tp.wants_grad(x.id) || tp.wants_grad(s.id) || tp.wants_grad(h.id);
    int xi = x.id, si = s.id, hi = h.id;
    return tp.make(std::move(out), ng, [xi, si, hi, N, C, HW](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& xv2 = t.val(xi);
        const Tensor<T>& sv2 = t.val(si);
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const T* gg = &g.data[static_cast<size_t>(nc * HW)];
            if (t.wants_grad(xi)) {
                const T sc = T(1) + sv2.data[static_cast<size_t>(nc)];
                T* dst = &t.grad_buf(xi).data[static_cast<size_t>(nc * HW)];
                for (int64_t i = 0; i < HW; ++i) dst[i] += gg[i] * sc;
            }
            if (t.wants_grad(si)) {
                const T* src = &xv2.data[static_cast<size_t>(nc * HW)];
                T acc = T(0);
                for (int64_t i = 0; i < HW; ++i) acc += gg[i] * src[i];
                t.grad_buf(si).data[static_cast<size_t>(nc)] += acc;
            }
            if (t.wants_grad(hi)) {
                T acc = T(0);
                for (int64_t i = 0; i < HW; ++i) acc += gg[i];
                t.grad_buf(hi).data[static_cast<size_t>(nc)] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------- embedding

template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int>& ids) {
    Tape<T>& tp = *table.tape;
    const Tensor<T>& tv = tp.val(table.id);
    const int64_t V = tv.shape[0], D = tv.shape[1];
    Tensor<T> out({static_cast<int64_t>(ids.size()), D});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw std::out_of_range("embedding: id out of range");
        std::copy_n(&tv.data[static_cast<size_t>(ids[i] * D)], D, &out.data[i * static_cast<size_t>(D)]);
    }
    int ti = table.id;
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return tp.make(std::move(out), tp.wants_grad(table.id), [ti, ids_copy, D](Tape<T>& t, int self) {
        if (!t.wants_grad(ti)) return;
        const Tensor<T>& g = t.node(self).grad;
        Tensor<T>& pg = t.grad_buf(ti);
        for (size_t i = 0; i < ids_copy->size(); ++i) {
            const T* src = &g.data[i * static_cast<size_t>(D)];
            T* dst = &pg.data[static_cast<size_t>((*ids_copy)[i] * D)];
            for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
        }
    });
}

// ---------------------------------------------------------------- attention

namespace detail {

// numerically-stable row softmax in place; p: [rows, cols]
template <typename T>
void softmax_inplace(T* p, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        T* row = p + r * cols;
        T mx = row[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int64_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < cols; ++j) row[j] /= sum;
    }
}

}  // namespace detail

// Multi-head scaled dot-product attention over flattened token batches.
//   q: [B*Lq, heads*dh]; k,v: [B*Lk, heads*dh], or [Lk, heads*dh] with
//   shared_kv=true to reuse one key/value set across the whole batch.
// Softmax temperature is 1/sqrt(dh). Returns [B*Lq, heads*dh].
template <typename T>
Var<T> mha(Var<T> q, Var<T> k, Var<T> v, int64_t B, int heads, bool shared_kv = false) {
    detail::same_tape(q, k);
    detail::same_tape(q, v);
    Tape<T>& tp = *q.tape;
    const Tensor<T>& qv = tp.val(q.id);
    const Tensor<T>& kv = tp.val(k.id);
    const Tensor<T>& vv = tp.val(v.id);
    check_same_shape(kv, vv, "mha k/v");
    const int64_t D = qv.shape.back();
    if (kv.shape.back() != D || D % heads != 0) throw std::invalid_argument("mha: width mismatch");
    const int64_t dh = D / heads;
    const int64_t nq_rows = qv.numel() / D;
    const int64_t nk_rows = kv.numel() / D;
    if (nq_rows % B != 0 || (!shared_kv && nk_rows % B != 0))
        throw std::invalid_argument("mha: bad batch layout");
    const int64_t Lq = nq_rows / B;
    const int64_t Lk = shared_kv ? nk_rows : nk_rows / B;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));

    auto probs = std::make_shared<Tensor<T>>(std::vector<int64_t>{B, heads, Lq, Lk});
    Tensor<T> out({B * Lq, D});
    std::vector<T> qh(static_cast<size_t>(Lq * dh)), kh(static_cast<size_t>(Lk * dh)),
        vh(static_cast<size_t>(Lk * dh)), oh(static_cast<size_t>(Lq * dh));
    for (int64_t b = 0; b < B; ++b) {
        const int64_t kb = shared_kv ? 0 : b;
        for (int h = 0; h < heads; ++h) {
            // gather head slices (strided copy)
            for (int64_t i = 0; i < Lq; ++i)
                std::copy_n(&qv.data[static_cast<size_t>((b * Lq + i) * D + h * dh)], dh, &qh[static_cast<size_t>(i * dh)]);
            for (int64_t i = 0; i < Lk; ++i) {
                std::copy_n(&kv.data[static_cast<size_t>((kb * Lk + i) * D + h * dh)], dh, &kh[static_cast<size_t>(i * dh)]);
                std::copy_n(&vv.data[static_cast<size_t>((kb * Lk + i) * D + h * dh)], dh, &vh[static_cast<size_t>(i * dh)]);
            }
            T* p = &probs->data[static_cast<size_t>(((b * heads) + h) * Lq * Lk)];
            gemm_nt(p, qh.data(), kh.data(), Lq, dh, Lk, false);
            for (int64_t i = 0; i < Lq * Lk; ++i) p[i] *= sc;
            detail::softmax_inplace(p, Lq, Lk);
            gemm_nn(oh.data(), p, vh.data(), Lq, Lk, dh, false);
            for (int64_t i = 0; i < Lq; ++i)
                std::copy_n(&oh[static_cast<size_t>(i * dh)], dh, &out.data[static_cast<size_t>((b * Lq + i) * D + h * dh)]);
        }
    }
    bool ng = tp.wants_grad(q.id) || tp.wants_grad(k.id) || tp.wants_grad(v.id);
    int qi = q.id, ki = k.id, vi = v.id;
    return tp.make(std::move(out), ng, [=](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& qv2 = t.val(qi);
        const Tensor<T>& kv2 = t.val(ki);
        const Tensor<T>& vv2 = t.val(vi);
        const bool wq = t.wants_grad(qi), wk = t.wants_grad(ki), wv = t.wants_grad(vi);
        std::vector<T> qh2(static_cast<size_t>(Lq * dh)), kh2(static_cast<size_t>(Lk * dh)),
            vh2(static_cast<size_t>(Lk * dh)), go(static_cast<size_t>(Lq * dh)),
            dp(static_cast<size_t>(Lq * Lk)), ds(static_cast<size_t>(Lq * Lk)),
            dq(static_cast<size_t>(Lq * dh)), dk(static_cast<size_t>(Lk * dh)),
            dv(static_cast<size_t>(Lk * dh));
        for (int64_t b = 0; b < B; ++b) {
            const int64_t kb = shared_kv ? 0 : b;
            for (int h = 0; h < heads; ++h) {
                for (int64_t i = 0; i < Lq; ++i) {
                    std::copy_n(&qv2.data[static_cast<size_t>((b * Lq + i) * D + h * dh)], dh, &qh2[static_cast<size_t>(i * dh)]);
                    std::copy_n(&g.data[static_cast<size_t>((b * Lq + i) * D + h * dh)], dh, &go[static_cast<size_t>(i * dh)]);
                }
                for (int64_t i = 0; i < Lk; ++i) {
                    std::copy_n(&kv2.data[static_cast<size_t>((kb * Lk + i) * D + h * dh)], dh, &kh2[static_cast<size_t>(i * dh)]);
                    std::copy_n(&vv2.data[static_cast<size_t>((kb * Lk + i) * D + h * dh)], dh, &vh2[static_cast<size_t>(i * dh)]);
                }
                const T* p = &probs->data[static_cast<size_t>(((b * heads) + h) * Lq * Lk)];
                if (wv) {
                    gemm_tn(dv.data(), p, go.data(), Lq, Lk, dh, false);
                    for (int64_t i = 0; i < Lk; ++i) {
                        T* dst = &t.grad_buf(vi).data[static_cast<size_t>((kb * Lk + i) * D + h * dh)];
                        for (int64_t j = 0; j < dh; ++j) dst[j] += dv[static_cast<size_t>(i * dh + j)];
                    }
                }
                if (wq || wk) {
                    gemm_nt(dp.data(), go.data(), vh2.data(), Lq, dh, Lk, false);
                    // softmax backward rows: ds = (dp - sum(dp*p)) * p * sc
                    for (int64_t r = 0; r < Lq; ++r) {
                        T dot = T(0);
                        for (int64_t j = 0; j < Lk; ++j)
                            dot += dp[static_cast<size_t>(r * Lk + j)] * p[r * Lk + j];
                        for (int64_t j = 0; j < Lk; ++j)
                            ds[static_cast<size_t>(r * Lk + j)] =
                                (dp[static_cast<size_t>(r * Lk + j)] - dot) * p[r * Lk + j] * sc;
                    }
                    if (wq) {
                        gemm_nn(dq.data(), ds.data(), kh2.data(), Lq, Lk, dh, false);
                        for (int64_t i = 0; i < Lq; ++i) {
                            T* dst = &t.grad_buf(qi).data[static_cast<size_t>((b * Lq + i) * D + h * dh)];
                            for (int64_t j = 0; j < dh; ++j) dst[j] += dq[static_cast<size_t>(i * dh + j)];
                        }
                    }
                    if (wk) {
                        gemm_tn(dk.data(), ds.data(), qh2.data(), Lq, Lk, dh, false);
                        for (int64_t i = 0; i < Lk; ++i) {
                            T* dst = &t.grad_buf(ki).data[static_cast<size_t>((kb * Lk + i) * D + h * dh)];
                            for (int64_t j = 0; j < dh; ++j) dst[j] += dk[static_cast<size_t>(i * dh + j)];
                        }
                    }
                }
            }
        }
    });
}

}  // namespace lvd
