#pragma once

#include "lvd/conditioning.hpp"
#include "lvd/nn.hpp"

namespace lvd {

// Dual-stream cross-attention parameters. Relative to a text-only block the
// image stream adds only wk_img / wv_img; wv_img starts at zero so the image
// term vanishes at initialization and the block behaves text-only.
template <typename T>
struct AttentionWeights {
    Linear<T> wq;                // block width -> block width, bias-free
    Linear<T> wk_tex, wv_tex;    // ctx width -> block width
    Linear<T> wk_img, wv_img;    // ctx width -> block width; wv_img zero-init
    int heads = 1;

    AttentionWeights() = default;
    AttentionWeights(int64_t width, int64_t ctx_dim, int heads_, Rng& rng)
        : wq(width, width, rng, false),
          wk_tex(ctx_dim, width, rng, false),
          wv_tex(ctx_dim, width, rng, false),
          wk_img(ctx_dim, width, rng, false),
          wv_img(ctx_dim, width, rng, false, /*zero_init=*/true),
          heads(heads_) {}

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        wq.register_params(r, p + ".q");
        wk_tex.register_params(r, p + ".tex_k");
        wv_tex.register_params(r, p + ".tex_v");
        wk_img.register_params(r, p + ".img_k");
        wv_img.register_params(r, p + ".img_v");
    }
};

// F_out = softmax(Q Ktex^T / sqrt(d)) Vtex + softmax(Q Kimg^T / sqrt(d)) Vimg
// with one shared query projection; d is the per-head width.
// f_in: [B*Ltok, width], tex: [Ntex, ctx], img: [M, ctx] (both shared per batch)
template <typename T>
Var<T> dual_cross_attention(Tape<T>& tp, Var<T> f_in, Var<T> tex, Var<T> img,
                            const AttentionWeights<T>& w, int64_t B) {
    const int64_t rb = (f_in.val().numel() / f_in.val().shape.back()) / B;
    Var<T> q = w.wq(tp, f_in, rb);
    Var<T> a_tex = mha(q, w.wk_tex(tp, tex), w.wv_tex(tp, tex), B, w.heads, true);
    Var<T> a_img = mha(q, w.wk_img(tp, img), w.wv_img(tp, img), B, w.heads, true);
    return add(a_tex, a_img);
}

// pre-norm residual wrapper with shared output projection around Eq-style core
template <typename T>
struct DualCrossBlock {
    LayerNormLayer<T> ln;
    AttentionWeights<T> weights;
    Linear<T> wo;

    DualCrossBlock() = default;
    DualCrossBlock(int64_t width, int64_t ctx_dim, int heads, Rng& rng)
        : ln(width), weights(width, ctx_dim, heads, rng), wo(width, width, rng, true) {}

    Var<T> operator()(Tape<T>& tp, Var<T> x, Var<T> tex, Var<T> img, int64_t B) const {
        const int64_t rb = (x.val().numel() / x.val().shape.back()) / B;
        return add(x, wo(tp, dual_cross_attention(tp, ln(tp, x), tex, img, weights, B), rb));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        ln.register_params(r, p + ".ln");
        weights.register_params(r, p);
        wo.register_params(r, p + ".o");
    }
};

// GroupNorm/SiLU residual conv block with timestep scale-shift
template <typename T>
struct ResBlock {
    GroupNormLayer<T> gn1, gn2;
    Conv2dLayer<T> conv1, conv2;
    Linear<T> temb_proj;  // temb -> 2*cout (scale, shift)
    Conv2dLayer<T> skip;  // 1x1 when cin != cout
    bool chan_change = false;
    int64_t cout = 0;

    ResBlock() = default;
    ResBlock(int64_t cin, int64_t cout_, int64_t temb_dim, int groups, Rng& rng)
        : gn1(cin, groups),
          gn2(cout_, groups),
          conv1(cin, cout_, 3, 1, rng),
          conv2(cout_, cout_, 3, 1, rng),
          temb_proj(temb_dim, 2 * cout_, rng),
          chan_change(cin != cout_),
          cout(cout_) {
        if (chan_change) skip = Conv2dLayer<T>(cin, cout_, 1, 1, rng);
    }

    // x: [N, cin, h, w], temb: [N, temb_dim]
    Var<T> operator()(Tape<T>& tp, Var<T> x, Var<T> temb) const {
        Var<T> h = conv1(tp, silu(gn1(tp, x)));
        Var<T> e = temb_proj(tp, silu(temb), 1);
        Var<T> sc = slice(e, 1, 0, cout);
        Var<T> sh = slice(e, 1, cout, cout);
        h = film(gn2(tp, h), sc, sh);
        h = conv2(tp, silu(h));
        return add(h, chan_change ? skip(tp, x) : x);
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        gn1.register_params(r, p + ".gn1");
        gn2.register_params(r, p + ".gn2");
        conv1.register_params(r, p + ".conv1");
        conv2.register_params(r, p + ".conv2");
        temb_proj.register_params(r, p + ".temb");
        if (chan_change) skip.register_params(r, p + ".skip");
    }
};

// per-frame token transformer: self-attention, dual cross-attention, MLP
template <typename T>
struct SpatialTransformer {
    SelfAttentionBlock<T> self_attn;
    DualCrossBlock<T> cross;
    FeedForward<T> ff;

    SpatialTransformer() = default;
    SpatialTransformer(int64_t width, int64_t ctx_dim, int heads, Rng& rng)
        : self_attn(width, heads, rng), cross(width, ctx_dim, heads, rng), ff(width, 4 * width, rng) {}

    // x: [N, C, h, w]; frames stay independent (N is the token batch)
    Var<T> operator()(Tape<T>& tp, Var<T> x, Var<T> tex, Var<T> img) const {
        const auto& s = x.val().shape;
        const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
        Var<T> tok = reshape(permute(x, {0, 2, 3, 1}), {N * H * W, C});
        tok = self_attn(tp, tok, N);
        tok = cross(tp, tok, tex, img, N);
        tok = ff(tp, tok, H * W);
        return permute(reshape(tok, {N, H, W, C}), {0, 3, 1, 2});
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        self_attn.register_params(r, p + ".self");
        cross.register_params(r, p + ".cross");
        ff.register_params(r, p + ".ff");
    }
};

// Attention across the frame axis at each spatial location. The output
// projection starts at zero, so the block is the identity at initialization
// and the model begins as a per-frame image model. Learned frame-position
// rows feed the attention only, keeping the zero-init identity intact.
template <typename T>
struct TemporalAttention {
    LayerNormLayer<T> ln;
    Tensor<T> pos;  // [max_frames, C]
    Linear<T> wq, wk, wv;
    Linear<T> wo;  // zero-init
    int heads = 1;

    TemporalAttention() = default;
    TemporalAttention(int64_t width, int64_t max_frames, int heads_, Rng& rng)
        : ln(width),
          pos({max_frames, width}),
          wq(width, width, rng, false),
          wk(width, width, rng, false),
          wv(width, width, rng, false),
          wo(width, width, rng, true, /*zero_init=*/true),
          heads(heads_) {
        init_normal(rng, pos, 0.02);
    }

    // x: [L, C, h, w]
    Var<T> operator()(Tape<T>& tp, Var<T> x) const {
        const auto& s = x.val().shape;
        const int64_t L = s[0], C = s[1], H = s[2], W = s[3];
        if (L > pos.shape[0]) throw std::invalid_argument("temporal attention: too many frames");
        Var<T> tok = reshape(permute(x, {2, 3, 0, 1}), {H * W * L, C});
        Var<T> h = ln(tp, tok);
        h = add_rows_tiled(h, slice(tp.leaf(pos), 0, 0, L));
        Var<T> a = mha(wq(tp, h), wk(tp, h), wv(tp, h), H * W, heads);
        Var<T> o = wo(tp, a);
        o = permute(reshape(o, {H, W, L, C}), {2, 3, 0, 1});
        return add(x, o);
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        ln.register_params(r, p + ".ln");
        r.add(p + ".pos", pos);
        wq.register_params(r, p + ".q");
        wk.register_params(r, p + ".k");
        wv.register_params(r, p + ".v");
        wo.register_params(r, p + ".o");
    }
};

template <typename T>
struct DenoiserInput {
    Tensor<T> z_t;      // [L, C, h, w]
    Tensor<T> z_img;    // [C, h, w]; ignored when drop_image
    int t = 0;
    Tensor<T> tex;      // [Ntex, d]
    Tensor<T> img_ctx;  // [M, d]
    bool drop_image = false;
};

// channel-concat of the conditioning-image latent onto every frame:
// channels [0, C) noisy latent, [C, 2C) image latent (zeros when dropped)
template <typename T>
Tensor<T> assemble_input(const Tensor<T>& z_t, const Tensor<T>& z_img, bool drop_image) {
    if (z_t.rank() != 4) throw std::invalid_argument("assemble_input: z_t must be [L,C,h,w]");
    const int64_t L = z_t.shape[0], C = z_t.shape[1], H = z_t.shape[2], W = z_t.shape[3];
    if (!drop_image) {
        if (z_img.rank() != 3 || z_img.shape[0] != C || z_img.shape[1] != H || z_img.shape[2] != W)
            throw std::invalid_argument("assemble_input: z_img shape mismatch");
    }
    Tensor<T> out({L, 2 * C, H, W});
    const int64_t plane = C * H * W;
    for (int64_t l = 0; l < L; ++l) {
        std::copy_n(&z_t.data[static_cast<size_t>(l * plane)], plane,
                    &out.data[static_cast<size_t>(l * 2 * plane)]);
        if (!drop_image)
            std::copy_n(z_img.data.data(), plane, &out.data[static_cast<size_t>(l * 2 * plane + plane)]);
    }
    return out;
}

struct DenoiserConfig {
    int64_t latent_channels = 4;  // C
    int64_t width = 64;           // base width
    int heads = 2;
    int64_t ctx_dim = 64;   // text / image context width
    int64_t temb_dim = 128;
    int64_t max_frames = 32;
    int groups = 8;
};

// Two-level spatio-temporal U-Net predicting the added noise. Spatial blocks
// treat frames as batch entries; the temporal attention blocks are the only
// cross-frame paths.
template <typename T>
struct Denoiser {
    DenoiserConfig cfg;

    Linear<T> temb_fc1, temb_fc2;
    Conv2dLayer<T> conv_in;  // 2C -> w0
    ResBlock<T> down_res;
    SpatialTransformer<T> down_tf;
    TemporalAttention<T> down_tmp;
    Conv2dLayer<T> down_conv;  // w0 -> w1, stride 2
    ResBlock<T> mid_res1;
    SpatialTransformer<T> mid_tf;
    TemporalAttention<T> mid_tmp;
    ResBlock<T> mid_res2;
    Conv2dLayer<T> up_conv;  // w1 -> w0 after nearest upsample
    ResBlock<T> up_res;      // 2*w0 -> w0 (skip concat)
    SpatialTransformer<T> up_tf;
    TemporalAttention<T> up_tmp;
    GroupNormLayer<T> out_gn;
    Conv2dLayer<T> out_conv;  // w0 -> C, zero-init

    Denoiser() = default;
    Denoiser(const DenoiserConfig& c, Rng& rng)
        : cfg(c),
          temb_fc1(c.width, c.temb_dim, rng),
          temb_fc2(c.temb_dim, c.temb_dim, rng),
          conv_in(2 * c.latent_channels, c.width, 3, 1, rng),
          down_res(c.width, c.width, c.temb_dim, c.groups, rng),
          down_tf(c.width, c.ctx_dim, c.heads, rng),
          down_tmp(c.width, c.max_frames, c.heads, rng),
          down_conv(c.width, 2 * c.width, 3, 2, rng),
          mid_res1(2 * c.width, 2 * c.width, c.temb_dim, c.groups, rng),
          mid_tf(2 * c.width, c.ctx_dim, c.heads, rng),
          mid_tmp(2 * c.width, c.max_frames, c.heads, rng),
          mid_res2(2 * c.width, 2 * c.width, c.temb_dim, c.groups, rng),
          up_conv(2 * c.width, c.width, 3, 1, rng),
          up_res(2 * c.width, c.width, c.temb_dim, c.groups, rng),
          up_tf(c.width, c.ctx_dim, c.heads, rng),
          up_tmp(c.width, c.max_frames, c.heads, rng),
          out_gn(c.width, c.groups),
          out_conv(c.width, c.latent_channels, 3, 1, rng) {
        // damped output head: keeps initial predictions small while leaving
        // the adapter stage a live gradient path through the frozen body
        for (auto& v : out_conv.w.data) v *= T(0.1);
    }

    // x_in: [L, 2C, h, w] assembled input; tex/img_ctx already on the tape
    Var<T> forward(Tape<T>& tp, const Tensor<T>& x_in, int t, Var<T> tex, Var<T> img_ctx) const {
        const int64_t L = x_in.shape[0];
        Tensor<T> se = sinusoidal_embedding<T>(static_cast<double>(t), cfg.width);
        Tensor<T> se_rows({L, cfg.width});
        for (int64_t l = 0; l < L; ++l)
            std::copy_n(se.data.data(), cfg.width, &se_rows.data[static_cast<size_t>(l * cfg.width)]);
        Var<T> temb = temb_fc2(tp, silu(temb_fc1(tp, tp.constant(std::move(se_rows)), 1)), 1);

        Var<T> x = conv_in(tp, tp.constant(x_in));
        Var<T> h0 = down_tmp(tp, down_tf(tp, down_res(tp, x, temb), tex, img_ctx));
        Var<T> h1 = down_conv(tp, h0);
        Var<T> m = mid_res1(tp, h1, temb);
        m = mid_tf(tp, m, tex, img_ctx);
        m = mid_tmp(tp, m);
        m = mid_res2(tp, m, temb);
        Var<T> u = up_conv(tp, upsample2x(m));
        u = up_res(tp, concat(u, h0, 1), temb);
        u = up_tf(tp, u, tex, img_ctx);
        u = up_tmp(tp, u);
        return out_conv(tp, silu(out_gn(tp, u)));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        temb_fc1.register_params(r, p + ".temb1");
        temb_fc2.register_params(r, p + ".temb2");
        conv_in.register_params(r, p + ".conv_in");
        down_res.register_params(r, p + ".down.res");
        down_tf.register_params(r, p + ".down.tf");
        down_tmp.register_params(r, p + ".down.tmp");
        down_conv.register_params(r, p + ".down.conv");
        mid_res1.register_params(r, p + ".mid.res1");
        mid_tf.register_params(r, p + ".mid.tf");
        mid_tmp.register_params(r, p + ".mid.tmp");
        mid_res2.register_params(r, p + ".mid.res2");
        up_conv.register_params(r, p + ".up.conv");
        up_res.register_params(r, p + ".up.res");
        up_tf.register_params(r, p + ".up.tf");
        up_tmp.register_params(r, p + ".up.tmp");
        out_gn.register_params(r, p + ".out.gn");
        out_conv.register_params(r, p + ".out.conv");
    }
};

// inference path; params enter the tape as frozen leaves
template <typename T>
Tensor<T> predict_noise(const Denoiser<T>& net, const DenoiserInput<T>& in) {
    Tape<T> tp(true);
    Var<T> tex = tp.constant(in.tex);
    Var<T> ctx = tp.constant(in.img_ctx);
    Tensor<T> x_in = assemble_input(in.z_t, in.z_img, in.drop_image);
    return net.forward(tp, x_in, in.t, tex, ctx).val();
}

}  // namespace lvd
