#pragma once

#include <string>
#include <vector>

#include "lvd/rng.hpp"
#include "lvd/tape.hpp"
#include "lvd/tensor.hpp"

namespace lvd {

// flat name -> tensor view over a model's parameters; ordering is the
// registration order and is the canonical ordering for optimizer state
template <typename T>
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor<T>*>> items;
    void add(const std::string& name, Tensor<T>& t) { items.emplace_back(name, &t); }
    Tensor<T>* find(const std::string& name) const {
        for (auto& [n, p] : items)
            if (n == name) return p;
        return nullptr;
    }
};

template <typename T>
void init_normal(Rng& rng, Tensor<T>& t, double stddev) {
    for (auto& v : t.data) v = static_cast<T>(rng.gaussian() * stddev);
}

// He-style fan-in init
template <typename T>
void init_kaiming(Rng& rng, Tensor<T>& t, int64_t fan_in) {
    init_normal(rng, t, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
void init_xavier(Rng& rng, Tensor<T>& t, int64_t fan_in, int64_t fan_out) {
    init_normal(rng, t, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
}

template <typename T>
struct Linear {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out], empty when bias-free
    bool bias = true;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng, bool with_bias = true, bool zero_init = false)
        : w({in, out}), bias(with_bias) {
        if (!zero_init) init_xavier(rng, w, in, out);
        if (with_bias) b = Tensor<T>::zeros({out});
    }

    Var<T> operator()(Tape<T>& tp, Var<T> x, int64_t row_block = 0) const {
        Var<T> y = matmul(x, tp.leaf(w), row_block);
        if (bias) y = add_bias(y, tp.leaf(b));
        return y;
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".w", w);
        if (bias) r.add(p + ".b", b);
    }
};

template <typename T>
struct Conv2dLayer {
    Tensor<T> w;  // [Cout, Cin, k, k]
    Tensor<T> b;  // [Cout]
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t cin, int64_t cout, int k, int stride_, Rng& rng, bool zero_init = false)
        : w({cout, cin, k, k}), b(Tensor<T>::zeros({cout})), stride(stride_), pad(k / 2) {
        if (!zero_init) init_kaiming(rng, w, cin * k * k);
    }

    Var<T> operator()(Tape<T>& tp, Var<T> x) const {
        return conv2d(x, tp.leaf(w), tp.leaf(b), stride, pad);
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".w", w);
        r.add(p + ".b", b);
    }
};

template <typename T>
struct GroupNormLayer {
    Tensor<T> gamma, beta;
    int groups = 8;

    GroupNormLayer() = default;
    GroupNormLayer(int64_t channels, int groups_)
        : gamma(Tensor<T>::full({channels}, T(1))), beta(Tensor<T>::zeros({channels})), groups(groups_) {}

    Var<T> operator()(Tape<T>& tp, Var<T> x) const {
        return group_norm(x, tp.leaf(gamma), tp.leaf(beta), groups);
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".g", gamma);
        r.add(p + ".b", beta);
    }
};

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma, beta;

    LayerNormLayer() = default;
    explicit LayerNormLayer(int64_t dim)
        : gamma(Tensor<T>::full({dim}, T(1))), beta(Tensor<T>::zeros({dim})) {}

    Var<T> operator()(Tape<T>& tp, Var<T> x) const {
        return layer_norm(x, tp.leaf(gamma), tp.leaf(beta));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".g", gamma);
        r.add(p + ".b", beta);
    }
};

// pre-norm residual self-attention over tokens; x: [B*Ltok, dim]
template <typename T>
struct SelfAttentionBlock {
    LayerNormLayer<T> ln;
    Linear<T> wq, wk, wv, wo;
    int heads = 1;

    SelfAttentionBlock() = default;
    SelfAttentionBlock(int64_t dim, int heads_, Rng& rng)
        : ln(dim),
          wq(dim, dim, rng, false),
          wk(dim, dim, rng, false),
          wv(dim, dim, rng, false),
          wo(dim, dim, rng, true),
          heads(heads_) {}

    Var<T> operator()(Tape<T>& tp, Var<T> x, int64_t B) const {
        const int64_t rb = (x.val().numel() / x.val().shape.back()) / B;
        Var<T> h = ln(tp, x);
        Var<T> a = mha(wq(tp, h, rb), wk(tp, h, rb), wv(tp, h, rb), B, heads);
        return add(x, wo(tp, a, rb));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        ln.register_params(r, p + ".ln");
        wq.register_params(r, p + ".q");
        wk.register_params(r, p + ".k");
        wv.register_params(r, p + ".v");
        wo.register_params(r, p + ".o");
    }
};

// pre-norm residual MLP; x: [R, dim]
template <typename T>
struct FeedForward {
    LayerNormLayer<T> ln;
    Linear<T> fc1, fc2;

    FeedForward() = default;
    FeedForward(int64_t dim, int64_t hidden, Rng& rng)
        : ln(dim), fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

    Var<T> operator()(Tape<T>& tp, Var<T> x, int64_t row_block = 0) const {
        return add(x, fc2(tp, gelu(fc1(tp, ln(tp, x), row_block)), row_block));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        ln.register_params(r, p + ".ln");
        fc1.register_params(r, p + ".fc1");
        fc2.register_params(r, p + ".fc2");
    }
};

// sinusoidal position/timestep features, no parameters
template <typename T>
Tensor<T> sinusoidal_embedding(double t, int64_t dim) {
    Tensor<T> out({1, dim});
    const int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                     static_cast<double>(half > 1 ? half - 1 : 1));
        out.data[static_cast<size_t>(i)] = static_cast<T>(std::sin(t * freq));
        out.data[static_cast<size_t>(half + i)] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

}  // namespace lvd
