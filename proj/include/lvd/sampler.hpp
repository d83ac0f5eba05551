#pragma once

#include "lvd/model.hpp"
#include "lvd/rng.hpp"

namespace lvd {

struct SamplerConfig {
    int steps = 50;
    double eta = 0.0;
    double guidance = 7.5;  // w
    uint64_t seed = 0;
    bool drop_image = false;  // keep the prompt but zero both image streams
};

// eps_uncond + w * (eps_cond - eps_uncond), evaluated as the two-product
// form so w = 0 and w = 1 return their inputs exactly
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_uncond, double w) {
    check_same_shape(eps_cond, eps_uncond, "cfg_combine");
    const T cw = static_cast<T>(w);
    const T uw = T(1) - cw;
    Tensor<T> out;
    out.shape = eps_cond.shape;
    out.data.resize(eps_cond.data.size());
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = uw * eps_uncond.data[i] + cw * eps_cond.data[i];
    return out;
}

// strictly decreasing timestep subsequence with uniform stride, starting at
// the largest trained timestep T-1
inline std::vector<int> timestep_sequence(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("sampler: need 1 <= steps <= T");
    const int k = T / steps;
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int j = 0; j < steps; ++j) ts[static_cast<size_t>(j)] = T - 1 - j * k;
    return ts;
}

// One DDIM update from t to t_prev (t_prev = -1 finishes at the x0 estimate).
//   x0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t)
//   z' = sqrt(abar_p) x0 + sqrt(1-abar_p-sigma^2) eps + sigma noise
//   sigma = eta sqrt((1-abar_p)/(1-abar_t)) sqrt(1-abar_t/abar_p)
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_hat, int t, int t_prev, double eta,
                    const NoiseSchedule& s, const Tensor<T>& noise = {}) {
    check_same_shape(z_t, eps_hat, "ddim_step");
    check_t(s, t);
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    if (eta < 0.0 || eta > 1.0) throw std::invalid_argument("ddim_step: eta outside [0,1]");

    const double abar_t = s.alpha_bar[t];
    const T inv_sa = static_cast<T>(1.0 / std::sqrt(abar_t));
    const T sb = static_cast<T>(std::sqrt(1.0 - abar_t));
    Tensor<T> x0;
    x0.shape = z_t.shape;
    x0.data.resize(z_t.data.size());
    for (size_t i = 0; i < x0.data.size(); ++i)
        x0.data[i] = (z_t.data[i] - sb * eps_hat.data[i]) * inv_sa;
    if (t_prev < 0) return x0;

    check_t(s, t_prev);
    const double abar_p = s.alpha_bar[t_prev];
    const double sigma =
        eta * std::sqrt((1.0 - abar_p) / (1.0 - abar_t)) * std::sqrt(1.0 - abar_t / abar_p);
    const T sa_p = static_cast<T>(std::sqrt(abar_p));
    const T dir = static_cast<T>(std::sqrt(std::max(0.0, 1.0 - abar_p - sigma * sigma)));
    Tensor<T> out;
    out.shape = z_t.shape;
    out.data.resize(z_t.data.size());
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = sa_p * x0.data[i] + dir * eps_hat.data[i];
    if (sigma > 0.0) {
        check_same_shape(z_t, noise, "ddim_step noise");
        const T sg = static_cast<T>(sigma);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += sg * noise.data[i];
    }
    return out;
}

// Full image-to-video sampling: conditioning bundle, per-frame initial
// noise, guided DDIM loop, decode. normalization is the latent scale constant
// from codec training (0 means the codec was never calibrated).
template <typename T>
Tensor<T> generate(const Model<T>& model, T normalization, const Tensor<T>& image,
                   const std::string& prompt, const SamplerConfig& cfg) {
    if (normalization <= T(0)) throw std::runtime_error("generate: model has no latent normalization; train the codec first");
    if (cfg.steps < 1 || cfg.steps > model.mc.T)
        throw std::invalid_argument("generate: steps must be in [1, T]");
    if (cfg.guidance < 0.0) throw std::invalid_argument("generate: guidance must be >= 0");
    if (image.rank() != 3 || image.shape[0] != 3 || image.shape[1] != model.mc.size ||
        image.shape[2] != model.mc.size)
        throw std::invalid_argument("generate: image must be [3, " + std::to_string(model.mc.size) +
                                    ", " + std::to_string(model.mc.size) + "]");

    const int64_t L = model.mc.frames;
    const int64_t C = model.mc.codec.latent_channels;
    const int64_t hs = model.mc.latent_size();

    // conditioning bundle
    Tensor<T> single = image.reshaped({1, 3, model.mc.size, model.mc.size});
    Tensor<T> z_img = encode_video(model.codec, single).reshaped({C, hs, hs});
    const T inv_norm = T(1) / normalization;
    for (auto& v : z_img.data) v *= inv_norm;

    Tape<T> tp(true);
    Tensor<T> tex = model.text.encode(tp, prompt).val();
    Tensor<T> tex_null = model.text.encode(tp, "").val();
    Tensor<T> img_ctx =
        model.proj.project(tp, select_condition_tokens(model.imgenc.encode(tp, image), model.mc.mode))
            .val();
    Tensor<T> ctx_zero = Tensor<T>::zeros({model.mc.proj_queries, model.mc.ctx_dim});

    Rng init_rng(stream_seed(cfg.seed, "sample/init"));
    Rng step_rng(stream_seed(cfg.seed, "sample/ddim"));
    Tensor<T> z = init_rng.randn<T>({L, C, hs, hs});

    const auto ts = timestep_sequence(model.mc.T, cfg.steps);
    for (size_t j = 0; j < ts.size(); ++j) {
        const int t = ts[j];
        const int t_prev = (j + 1 < ts.size()) ? ts[j + 1] : -1;
        DenoiserInput<T> cond{z, z_img, t, tex, img_ctx, false};
        if (cfg.drop_image) cond = DenoiserInput<T>{z, {}, t, tex, ctx_zero, true};
        DenoiserInput<T> uncond{z, {}, t, tex_null, ctx_zero, true};
        Tensor<T> eps = cfg_combine(predict_noise(model.unet, cond), predict_noise(model.unet, uncond),
                                    cfg.guidance);
        Tensor<T> noise;
        if (cfg.eta > 0.0 && t_prev >= 0) noise = step_rng.randn<T>({L, C, hs, hs});
        z = ddim_step(z, eps, t, t_prev, cfg.eta, model.sched, noise);
    }

    for (auto& v : z.data) v *= normalization;
    return decode_video(model.codec, z);
}

}  // namespace lvd
