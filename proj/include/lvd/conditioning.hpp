#pragma once

#include <string>
#include <vector>

#include "lvd/nn.hpp"

namespace lvd {

// Which image tokens feed the projection network: the full patch-token set
// (class token included) or only the global semantic token.
enum class CondMode { full_tokens, cls_only };

inline CondMode cond_mode_from(const std::string& s) {
    if (s == "full_tokens") return CondMode::full_tokens;
    if (s == "cls_only") return CondMode::cls_only;
    throw std::invalid_argument("cond.mode: unknown value '" + s + "'");
}

inline std::string to_string(CondMode m) {
    return m == CondMode::full_tokens ? "full_tokens" : "cls_only";
}

// Hash-vocabulary prompt encoder. Row 0 of the table is the learned null/pad
// row; the empty prompt maps to all-pad and doubles as the unconditional
// embedding for guidance.
template <typename T>
struct TextEncoder {
    int64_t vocab = 4096;
    int64_t len = 16;  // N_tex
    int64_t dim = 64;
    Tensor<T> embed;  // [vocab, dim]
    Tensor<T> pos;    // [len, dim]

    TextEncoder() = default;
    TextEncoder(int64_t vocab_, int64_t len_, int64_t dim_, Rng& rng)
        : vocab(vocab_), len(len_), dim(dim_), embed({vocab_, dim_}), pos({len_, dim_}) {
        init_normal(rng, embed, 0.02);
        init_normal(rng, pos, 0.02);
    }

    static uint64_t fnv1a(const std::string& s) {
        uint64_t h = 1469598103934665603ULL;
        for (char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ULL;
        }
        return h;
    }

    std::vector<int> tokenize(const std::string& prompt) const {
        std::vector<int> ids;
        std::string word;
        auto flush = [&] {
            if (!word.empty() && (int64_t)ids.size() < len) {
                ids.push_back(static_cast<int>(fnv1a(word) % static_cast<uint64_t>(vocab - 1)) + 1);
                word.clear();
            } else {
                word.clear();
            }
        };
        for (char c : prompt) {
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r')
                flush();
            else
                word.push_back(c);
        }
        flush();
        while ((int64_t)ids.size() < len) ids.push_back(0);  // pad / null row
        return ids;
    }

    // -> [len, dim]
    Var<T> encode(Tape<T>& tp, const std::string& prompt) const {
        return add(embedding(tp.leaf(embed), tokenize(prompt)), tp.leaf(pos));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".embed", embed);
        r.add(p + ".pos", pos);
    }
};

// Small ViT over patch tokens; exposes both the class token and the full
// token set, mirroring a CLIP-style image tower at toy scale.
template <typename T>
struct ImageEncoder {
    int64_t image_size = 64;
    int patch = 8;
    int64_t dim = 64;  // d_vis
    int heads = 2;
    int layers = 2;

    Linear<T> patch_proj;  // [3*p*p, dim]
    Tensor<T> cls;         // [1, dim]
    Tensor<T> pos;         // [K+1, dim]
    std::vector<SelfAttentionBlock<T>> attn;
    std::vector<FeedForward<T>> ff;
    LayerNormLayer<T> out_ln;

    ImageEncoder() = default;
    ImageEncoder(int64_t image_size_, int patch_, int64_t dim_, int heads_, int layers_, Rng& rng)
        : image_size(image_size_),
          patch(patch_),
          dim(dim_),
          heads(heads_),
          layers(layers_),
          patch_proj(3LL * patch_ * patch_, dim_, rng),
          cls({1, dim_}),
          pos({num_patches(image_size_, patch_) + 1, dim_}),
          out_ln(dim_) {
        init_normal(rng, cls, 0.02);
        init_normal(rng, pos, 0.02);
        for (int i = 0; i < layers_; ++i) {
            attn.emplace_back(dim_, heads_, rng);
            ff.emplace_back(dim_, 4 * dim_, rng);
        }
    }

    static int64_t num_patches(int64_t size, int p) { return (size / p) * (size / p); }
    int64_t tokens() const { return num_patches(image_size, patch) + 1; }

    // img: [3, H, W] -> [K, 3*p*p]; token k covers patch (k / (W/p), k % (W/p))
    static Tensor<T> patchify(const Tensor<T>& img, int p) {
        if (img.rank() != 3 || img.shape[0] != 3)
            throw std::invalid_argument("patchify: want [3, H, W]");
        const int64_t H = img.shape[1], W = img.shape[2];
        if (H != W || H % p != 0)
            throw std::invalid_argument("patchify: image must be square and divisible by patch");
        const int64_t n = H / p;
        Tensor<T> out({n * n, 3LL * p * p});
        for (int64_t py = 0; py < n; ++py)
            for (int64_t px = 0; px < n; ++px) {
                T* row = &out.data[static_cast<size_t>((py * n + px) * 3 * p * p)];
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t y = 0; y < p; ++y)
                        for (int64_t x = 0; x < p; ++x)
                            row[(c * p + y) * p + x] =
                                img.data[static_cast<size_t>((c * H + py * p + y) * W + px * p + x)];
            }
        return out;
    }

    // pre-transformer patch tokens (layer-0 input without cls/pos); [K, dim]
    Var<T> patch_tokens(Tape<T>& tp, const Tensor<T>& img) const {
        return patch_proj(tp, tp.constant(patchify(img, patch)));
    }

    // full token set, cls first; [K+1, dim]
    Var<T> encode(Tape<T>& tp, const Tensor<T>& img) const {
        Var<T> x = concat(tp.leaf(cls), patch_tokens(tp, img), 0);
        x = add(x, tp.leaf(pos));
        for (int i = 0; i < layers; ++i) {
            x = attn[static_cast<size_t>(i)](tp, x, 1);
            x = ff[static_cast<size_t>(i)](tp, x);
        }
        return out_ln(tp, x);
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        patch_proj.register_params(r, p + ".patch");
        r.add(p + ".cls", cls);
        r.add(p + ".pos", pos);
        for (int i = 0; i < layers; ++i) {
            attn[static_cast<size_t>(i)].register_params(r, p + ".attn" + std::to_string(i));
            ff[static_cast<size_t>(i)].register_params(r, p + ".ff" + std::to_string(i));
        }
        out_ln.register_params(r, p + ".out_ln");
    }
};

// mode selection over the encoder output; both modes produce P input tokens
template <typename T>
Var<T> select_condition_tokens(Var<T> vis_all, CondMode mode) {
    if (mode == CondMode::full_tokens) return vis_all;
    return slice(vis_all, 0, 0, 1);  // cls token only
}

// Learned-query cross-attention resampler: M queries attend to however many
// image tokens arrive and emit a fixed M x d context aligned with the text
// embedding width.
template <typename T>
struct Resampler {
    struct Block {
        LayerNormLayer<T> ln_q, ln_kv;
        Linear<T> wq, wk, wv, wo;
        FeedForward<T> ff;
    };

    int64_t queries = 16;  // M
    int64_t dim = 64;      // d
    int64_t vis_dim = 64;  // image token width
    int heads = 2;
    int layers = 2;

    Tensor<T> query;  // [M, dim]
    std::vector<Block> blocks;
    LayerNormLayer<T> out_ln;
    Linear<T> out_proj;  // dim -> dim

    Resampler() = default;
    Resampler(int64_t queries_, int64_t dim_, int64_t vis_dim_, int heads_, int layers_, Rng& rng)
        : queries(queries_),
          dim(dim_),
          vis_dim(vis_dim_),
          heads(heads_),
          layers(layers_),
          query({queries_, dim_}),
          out_ln(dim_),
          out_proj(dim_, dim_, rng) {
        init_normal(rng, query, 0.02);
        for (int i = 0; i < layers_; ++i) {
            Block b;
            b.ln_q = LayerNormLayer<T>(dim_);
            b.ln_kv = LayerNormLayer<T>(vis_dim_);
            b.wq = Linear<T>(dim_, dim_, rng, false);
            b.wk = Linear<T>(vis_dim_, dim_, rng, false);
            b.wv = Linear<T>(vis_dim_, dim_, rng, false);
            b.wo = Linear<T>(dim_, dim_, rng, true);
            b.ff = FeedForward<T>(dim_, 4 * dim_, rng);
            blocks.push_back(std::move(b));
        }
    }

    // vis: [Kt, vis_dim] -> [M, dim]
    Var<T> project(Tape<T>& tp, Var<T> vis) const {
        Var<T> q = tp.leaf(query);
        for (const Block& b : blocks) {
            Var<T> kv = b.ln_kv(tp, vis);
            Var<T> a = mha(b.wq(tp, b.ln_q(tp, q)), b.wk(tp, kv), b.wv(tp, kv), 1, heads);
            q = add(q, b.wo(tp, a));
            q = b.ff(tp, q);
        }
        return out_proj(tp, out_ln(tp, q));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        r.add(p + ".query", query);
        for (int i = 0; i < layers; ++i) {
            Block& b = blocks[static_cast<size_t>(i)];
            const std::string q = p + ".blk" + std::to_string(i);
            b.ln_q.register_params(r, q + ".ln_q");
            b.ln_kv.register_params(r, q + ".ln_kv");
            b.wq.register_params(r, q + ".q");
            b.wk.register_params(r, q + ".k");
            b.wv.register_params(r, q + ".v");
            b.wo.register_params(r, q + ".o");
            b.ff.register_params(r, q + ".ff");
        }
        out_ln.register_params(r, p + ".out_ln");
        out_proj.register_params(r, p + ".out_proj");
    }
};

}  // namespace lvd
