#pragma once

#include "lvd/codec.hpp"
#include "lvd/conditioning.hpp"
#include "lvd/config.hpp"
#include "lvd/denoiser.hpp"
#include "lvd/schedule.hpp"

namespace lvd {

struct ModelConfig {
    int T = 200;
    double beta_start = 1e-4, beta_end = 2e-2;
    int64_t frames = 16;  // L
    int64_t size = 64;    // H = W
    CodecConfig codec;
    int64_t text_vocab = 4096, text_len = 16, ctx_dim = 64;
    int image_patch = 8;
    int64_t image_dim = 64;
    int image_layers = 2, image_heads = 2;
    int64_t proj_queries = 16;
    int proj_layers = 2, proj_heads = 2;
    CondMode mode = CondMode::full_tokens;
    DenoiserConfig unet;

    static ModelConfig from(const Config& c) {
        ModelConfig m;
        m.T = static_cast<int>(c.geti("schedule.steps"));
        m.beta_start = c.getf("schedule.beta_start");
        m.beta_end = c.getf("schedule.beta_end");
        schedule_kind_from(c.gets("schedule.kind"));
        m.frames = c.geti("video.frames");
        m.size = c.geti("video.size");
        m.codec.factor = c.geti("codec.factor");
        m.codec.latent_channels = c.geti("codec.latent_channels");
        m.codec.width = c.geti("codec.width");
        m.text_vocab = c.geti("text.vocab");
        m.text_len = c.geti("text.len");
        m.ctx_dim = c.geti("text.dim");
        m.image_patch = static_cast<int>(c.geti("image.patch"));
        m.image_dim = c.geti("image.dim");
        m.image_layers = static_cast<int>(c.geti("image.layers"));
        m.image_heads = static_cast<int>(c.geti("image.heads"));
        m.proj_queries = c.geti("proj.queries");
        m.proj_layers = static_cast<int>(c.geti("proj.layers"));
        m.proj_heads = static_cast<int>(c.geti("proj.heads"));
        m.mode = cond_mode_from(c.gets("cond.mode"));
        m.unet.latent_channels = m.codec.latent_channels;
        m.unet.width = c.geti("unet.width");
        m.unet.heads = static_cast<int>(c.geti("unet.heads"));
        m.unet.ctx_dim = m.ctx_dim;
        m.unet.temb_dim = c.geti("unet.temb");
        m.unet.groups = static_cast<int>(c.geti("unet.groups"));
        m.unet.max_frames = std::max<int64_t>(m.frames, 16);
        validate(m);
        return m;
    }

    static void validate(const ModelConfig& m) {
        if (m.size % m.codec.factor != 0)
            throw std::runtime_error("config: video.size must be divisible by codec.factor");
        if (m.size % m.image_patch != 0)
            throw std::runtime_error("config: video.size must be divisible by image.patch");
        const int64_t latent = m.size / m.codec.factor;
        if (latent < 2 || latent % 2 != 0)
            throw std::runtime_error("config: latent grid must be even and >= 2");
        if (m.unet.width % m.unet.groups != 0 || m.codec.width % 16 != 0)
            throw std::runtime_error("config: widths must respect group-norm divisibility");
    }

    int64_t latent_size() const { return size / codec.factor; }
};

// All trainable components plus the derived schedule; initialization draws
// from per-module streams so any one module is stable under config changes
// elsewhere.
template <typename T>
struct Model {
    ModelConfig mc;
    NoiseSchedule sched;
    Codec<T> codec;
    TextEncoder<T> text;
    ImageEncoder<T> imgenc;
    Resampler<T> proj;
    Denoiser<T> unet;

    Model(const ModelConfig& m, uint64_t seed)
        : mc(m), sched(make_schedule(m.T, m.beta_start, m.beta_end)) {
        Rng r_codec(stream_seed(seed, "init/codec"));
        Rng r_text(stream_seed(seed, "init/text"));
        Rng r_img(stream_seed(seed, "init/imgenc"));
        Rng r_proj(stream_seed(seed, "init/proj"));
        Rng r_unet(stream_seed(seed, "init/unet"));
        codec = Codec<T>(m.codec, r_codec);
        text = TextEncoder<T>(m.text_vocab, m.text_len, m.ctx_dim, r_text);
        imgenc = ImageEncoder<T>(m.size, m.image_patch, m.image_dim, m.image_heads, m.image_layers, r_img);
        proj = Resampler<T>(m.proj_queries, m.ctx_dim, m.image_dim, m.proj_heads, m.proj_layers, r_proj);
        unet = Denoiser<T>(m.unet, r_unet);
    }

    void register_params(ParamRegistry<T>& r) {
        codec.register_params(r, "codec");
        text.register_params(r, "text");
        imgenc.register_params(r, "imgenc");
        proj.register_params(r, "proj");
        unet.register_params(r, "unet");
    }
};

}  // namespace lvd
