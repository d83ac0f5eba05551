#pragma once

#include "lvd/nn.hpp"

namespace lvd {

struct CodecConfig {
    int64_t factor = 8;  // spatial downsampling, power of two
    int64_t latent_channels = 4;
    int64_t width = 32;  // multiple of 16 so group norm divides every stage
    int groups = 8;

    int stages() const {
        int64_t f = factor;
        int n = 0;
        while (f > 1) {
            if (f % 2 != 0) throw std::invalid_argument("codec: factor must be a power of two");
            f /= 2;
            ++n;
        }
        if (n == 0) throw std::invalid_argument("codec: factor must be >= 2");
        return n;
    }
    // widths grow by half the base per stage: w, 1.5w, 2w, ...
    int64_t stage_width(int i) const { return width + (width / 2) * i; }
};

// Frame-wise convolutional autoencoder; the frame axis is the batch axis, so
// frames never mix and per-frame locality is structural.
template <typename T>
struct Codec {
    CodecConfig cfg;

    // encoder
    Conv2dLayer<T> enc_in;
    std::vector<GroupNormLayer<T>> enc_gn;
    std::vector<Conv2dLayer<T>> enc_down;
    GroupNormLayer<T> enc_out_gn;
    Conv2dLayer<T> enc_out;

    // decoder
    Conv2dLayer<T> dec_in;
    std::vector<GroupNormLayer<T>> dec_gn;
    std::vector<Conv2dLayer<T>> dec_up;
    GroupNormLayer<T> dec_out_gn;
    Conv2dLayer<T> dec_out;

    Codec() = default;
    Codec(const CodecConfig& c, Rng& rng) : cfg(c) {
        const int n = c.stages();
        enc_in = Conv2dLayer<T>(3, c.stage_width(0), 3, 1, rng);
        for (int i = 0; i < n; ++i) {
            enc_gn.emplace_back(c.stage_width(i), c.groups);
            enc_down.emplace_back(c.stage_width(i), c.stage_width(i + 1), 3, 2, rng);
        }
        enc_out_gn = GroupNormLayer<T>(c.stage_width(n), c.groups);
        enc_out = Conv2dLayer<T>(c.stage_width(n), c.latent_channels, 3, 1, rng);

        dec_in = Conv2dLayer<T>(c.latent_channels, c.stage_width(n), 3, 1, rng);
        for (int i = n; i >= 1; --i) {
            dec_gn.emplace_back(c.stage_width(i), c.groups);
            dec_up.emplace_back(c.stage_width(i), c.stage_width(i - 1), 3, 1, rng);
        }
        dec_out_gn = GroupNormLayer<T>(c.stage_width(0), c.groups);
        dec_out = Conv2dLayer<T>(c.stage_width(0), 3, 3, 1, rng);
    }

    // frames: [N, 3, H, W] -> [N, C, H/f, W/f]
    Var<T> encode(Tape<T>& tp, Var<T> x) const {
        Var<T> h = enc_in(tp, x);
        for (size_t i = 0; i < enc_down.size(); ++i) h = enc_down[i](tp, silu(enc_gn[i](tp, h)));
        return enc_out(tp, silu(enc_out_gn(tp, h)));
    }

    // z: [N, C, h, w] -> [N, 3, H, W], tanh-bounded
    Var<T> decode(Tape<T>& tp, Var<T> z) const {
        Var<T> h = dec_in(tp, z);
        for (size_t i = 0; i < dec_up.size(); ++i)
            h = dec_up[i](tp, upsample2x(silu(dec_gn[i](tp, h))));
        return tanh_op(dec_out(tp, silu(dec_out_gn(tp, h))));
    }

    void register_params(ParamRegistry<T>& r, const std::string& p) {
        enc_in.register_params(r, p + ".enc.in");
        for (size_t i = 0; i < enc_down.size(); ++i) {
            enc_gn[i].register_params(r, p + ".enc.gn" + std::to_string(i));
            enc_down[i].register_params(r, p + ".enc.down" + std::to_string(i));
        }
        enc_out_gn.register_params(r, p + ".enc.out_gn");
        enc_out.register_params(r, p + ".enc.out");
        dec_in.register_params(r, p + ".dec.in");
        for (size_t i = 0; i < dec_up.size(); ++i) {
            dec_gn[i].register_params(r, p + ".dec.gn" + std::to_string(i));
            dec_up[i].register_params(r, p + ".dec.up" + std::to_string(i));
        }
        dec_out_gn.register_params(r, p + ".dec.out_gn");
        dec_out.register_params(r, p + ".dec.out");
    }
};

template <typename T>
void validate_video(const Tensor<T>& x, int64_t factor) {
    if (x.rank() != 4 || x.shape[1] != 3) throw std::invalid_argument("video: want [L, 3, H, W]");
    if (x.shape[0] < 1) throw std::invalid_argument("video: need at least one frame");
    if (x.shape[2] % factor != 0 || x.shape[3] % factor != 0)
        throw std::invalid_argument("video: H and W must be divisible by the spatial factor");
    for (T v : x.data)
        if (v < T(-1) - T(1e-6) || v > T(1) + T(1e-6))
            throw std::invalid_argument("video: values outside [-1, 1]");
}

// [L, 3, H, W] -> [L, C, H/f, W/f], frame by frame
template <typename T>
Tensor<T> encode_video(const Codec<T>& codec, const Tensor<T>& x) {
    validate_video(x, codec.cfg.factor);
    Tape<T> tp(true);
    return codec.encode(tp, tp.constant(x)).val();
}

// [L, C, h, w] -> [L, 3, H, W] clamped to [-1, 1]
template <typename T>
Tensor<T> decode_video(const Codec<T>& codec, const Tensor<T>& z) {
    if (z.rank() != 4 || z.shape[1] != codec.cfg.latent_channels)
        throw std::invalid_argument("decode_video: latent channel mismatch");
    Tape<T> tp(true);
    Tensor<T> out = codec.decode(tp, tp.constant(z)).val();
    for (auto& v : out.data) v = std::min(T(1), std::max(T(-1), v));
    return out;
}

}  // namespace lvd
