#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <memory>

#include "lvd/dataset.hpp"
#include "lvd/model.hpp"
#include "lvd/sampler.hpp"

namespace lvd {

enum class Stage { codec, image_adapter, video_finetune };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::codec: return "codec";
        case Stage::image_adapter: return "image_adapter";
        case Stage::video_finetune: return "video_finetune";
    }
    return "";
}

inline Stage stage_from(const std::string& s) {
    if (s == "codec") return Stage::codec;
    if (s == "image_adapter") return Stage::image_adapter;
    if (s == "video_finetune") return Stage::video_finetune;
    throw std::runtime_error("unknown stage '" + s + "'");
}

inline int stage_rank(Stage s) { return static_cast<int>(s); }

// Per-stage trainable subsets. The codec trains alone; the adapter stage
// trains the projection network, the newly added image cross-attention
// matrices, and both toy encoders; the finetune stage trains the denoiser
// and projection while the encoders and codec stay frozen.
inline bool trainable_param(Stage stage, const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    switch (stage) {
        case Stage::codec:
            return starts("codec.");
        case Stage::image_adapter:
            return starts("proj.") || starts("text.") || starts("imgenc.") ||
                   (starts("unet.") && (name.find(".cross.img_k") != std::string::npos ||
                                        name.find(".cross.img_v") != std::string::npos));
        case Stage::video_finetune:
            return starts("unet.") || starts("proj.");
    }
    return false;
}

struct AdamSlot {
    Tensor<float> m, v;
};

// Named parameters plus optimizer state and the training-stage tag. The
// model lives behind a stable pointer so the registry's tensor addresses
// survive moves.
struct ModelState {
    Config config;
    ModelConfig mcfg;
    std::unique_ptr<Model<float>> model;
    ParamRegistry<float> registry;
    Stage stage = Stage::codec;
    int64_t step = 0;           // step within the current stage
    float normalization = 0.f;  // latent scale constant; 0 until codec calibration
    std::vector<AdamSlot> opt;

    static ModelState create(const Config& cfg) {
        ModelState st;
        st.config = cfg;
        st.mcfg = ModelConfig::from(cfg);
        st.model = std::make_unique<Model<float>>(st.mcfg, static_cast<uint64_t>(cfg.geti("train.seed")));
        st.model->register_params(st.registry);
        for (auto& [name, t] : st.registry.items)
            st.opt.push_back({Tensor<float>::zeros(t->shape), Tensor<float>::zeros(t->shape)});
        return st;
    }
};

// forward-only stage transitions; same-stage calls resume
inline void advance_stage(ModelState& st, Stage target) {
    if (stage_rank(target) < stage_rank(st.stage))
        throw std::runtime_error(std::string("stage transitions only run forward: checkpoint is at '") +
                                 stage_name(st.stage) + "', requested '" + stage_name(target) + "'");
    if (target != st.stage) {
        if (target != Stage::codec && st.normalization <= 0.f)
            throw std::runtime_error("stage '" + std::string(stage_name(target)) +
                                     "' needs a calibrated codec checkpoint");
        st.stage = target;
        st.step = 0;
        for (auto& slot : st.opt) {
            slot.m.fill(0.f);
            slot.v.fill(0.f);
        }
    }
}

// one training item: a window of frames and its caption; latents may be
// supplied precomputed (the codec is frozen outside its own stage, so cached
// encodings are exact)
struct TrainItem {
    Tensor<float> frames;   // [L, 3, H, W]; L = 1 outside video_finetune
    std::string caption;
    Tensor<float> latents;  // [L, C, h, w] raw codec output, or empty
};

namespace detail {

inline void adam_update(ModelState& st, Tape<float>& tp, double lr) {
    const float b1 = 0.9f, b2 = 0.999f, eps = 1e-8f;
    const double t = static_cast<double>(st.step + 1);
    const float c1 = 1.0f - static_cast<float>(std::pow(b1, t));
    const float c2 = 1.0f - static_cast<float>(std::pow(b2, t));
    for (size_t i = 0; i < st.registry.items.size(); ++i) {
        auto& [name, param] = st.registry.items[i];
        if (!trainable_param(st.stage, name)) continue;
        const Tensor<float>* g = tp.grad_of(*param);
        if (!g) continue;
        AdamSlot& slot = st.opt[i];
        for (size_t j = 0; j < param->data.size(); ++j) {
            const float gj = g->data[j];
            slot.m.data[j] = b1 * slot.m.data[j] + (1.f - b1) * gj;
            slot.v.data[j] = b2 * slot.v.data[j] + (1.f - b2) * gj * gj;
            const float mh = slot.m.data[j] / c1;
            const float vh = slot.v.data[j] / c2;
            param->data[j] -= static_cast<float>(lr) * mh / (std::sqrt(vh) + eps);
        }
    }
}

}  // namespace detail

// One optimization step. Draws (t, eps, dropout) per item from `rng` in item
// order, builds the stage-appropriate graph, and updates only the stage's
// trainable subset. Returns the batch loss.
inline double train_step(ModelState& st, const std::vector<TrainItem>& batch, double lr,
                         double cond_drop, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    Model<float>& m = *st.model;
    Tape<float> tp;
    Var<float> total{};

    if (st.stage == Stage::codec) {
        // batch of single frames -> reconstruction MSE
        const int64_t H = batch[0].frames.shape[2], W = batch[0].frames.shape[3];
        Tensor<float> frames({static_cast<int64_t>(batch.size()), 3, H, W});
        int64_t off = 0;
        for (const auto& item : batch) {
            if (item.frames.shape[0] != 1)
                throw std::invalid_argument("train_step: codec stage wants single-frame items");
            std::copy_n(item.frames.data.data(), item.frames.numel(), &frames.data[static_cast<size_t>(off)]);
            off += item.frames.numel();
        }
        Var<float> x = tp.constant(frames);
        total = mse(m.codec.decode(tp, m.codec.encode(tp, x)), x);
    } else {
        if (st.normalization <= 0.f) throw std::runtime_error("train_step: codec not calibrated");
        const int64_t want_L = (st.stage == Stage::image_adapter) ? 1 : m.mc.frames;
        std::vector<Var<float>> losses;
        for (const auto& item : batch) {
            if (item.frames.shape[0] != want_L)
                throw std::invalid_argument(std::string("train_step: stage ") + stage_name(st.stage) +
                                            " wants " + std::to_string(want_L) + "-frame items");
            // frozen codec path
            Tensor<float> z = item.latents.data.empty() ? encode_video(m.codec, item.frames)
                                                        : item.latents;
            if (z.shape[0] != want_L)
                throw std::invalid_argument("train_step: latent frame count mismatch");
            const float inv = 1.0f / st.normalization;
            for (auto& v : z.data) v *= inv;
            const int64_t C = z.shape[1], hs = z.shape[2];
            Tensor<float> z_img({C, hs, hs});
            std::copy_n(z.data.data(), C * hs * hs, z_img.data.data());  // window frame 0

            const int t = static_cast<int>(rng.below(static_cast<uint64_t>(m.mc.T)));
            Tensor<float> eps = rng.randn<float>(z.shape);
            Tensor<float> z_t = q_sample(z, t, eps, m.sched);
            const bool drop = rng.uniform() < cond_drop;

            Tensor<float> x_in = assemble_input(z_t, z_img, drop);
            Var<float> tex = m.text.encode(tp, drop ? "" : item.caption);
            Var<float> ctx;
            if (drop) {
                ctx = tp.constant(Tensor<float>::zeros({m.mc.proj_queries, m.mc.ctx_dim}));
            } else {
                Tensor<float> pix({3, item.frames.shape[2], item.frames.shape[3]});
                std::copy_n(item.frames.data.data(), pix.numel(), pix.data.data());
                ctx = m.proj.project(tp, select_condition_tokens(m.imgenc.encode(tp, pix), m.mc.mode));
            }
            Var<float> eps_hat = m.unet.forward(tp, x_in, t, tex, ctx);
            losses.push_back(mse(eps_hat, tp.constant(eps)));
        }
        total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        total = scale(total, 1.0f / static_cast<float>(losses.size()));
    }

    const double loss = total.val().data[0];
    if (!std::isfinite(loss))
        throw std::runtime_error("training diverged: loss is not finite at step " +
                                 std::to_string(st.step) + " in stage " + stage_name(st.stage));
    tp.backward(total);
    detail::adam_update(st, tp, lr);
    st.step += 1;
    return loss;
}

// ------------------------------------------------------------- checkpoints

// Directory layout: manifest.json plus tensors.bin of raw little-endian f32
// data, row-major. Optimizer moments are stored alongside parameters under
// adam_m. / adam_v. names so a resumed run continues bit-for-bit.
inline void save_checkpoint(const ModelState& st, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream bin(dir + "/tensors.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: cannot write tensors under '" + dir + "'");
    nlohmann::json tensors = nlohmann::json::array();
    int64_t offset = 0;
    auto dump = [&](const std::string& name, const Tensor<float>& t) {
        bin.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        tensors.push_back({{"name", name},
                           {"shape", t.shape},
                           {"dtype", "f32"},
                           {"file", "tensors.bin"},
                           {"offset", offset}});
        offset += static_cast<int64_t>(t.data.size() * sizeof(float));
    };
    for (auto& [name, t] : st.registry.items) dump(name, *t);
    for (size_t i = 0; i < st.registry.items.size(); ++i) {
        dump("adam_m." + st.registry.items[i].first, st.opt[i].m);
        dump("adam_v." + st.registry.items[i].first, st.opt[i].v);
    }
    bin.close();

    nlohmann::json manifest = {
        {"format", "lvd-checkpoint-v1"},
        {"stage", stage_name(st.stage)},
        {"step", st.step},
        {"normalization", st.normalization},
        {"config", st.config.values()},
        {"tensors", tensors},
    };
    std::ofstream(dir + "/manifest.json") << manifest.dump(2) << "\n";
}

inline ModelState load_checkpoint(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("checkpoint: no manifest.json under '" + dir + "'");
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw std::runtime_error("checkpoint: manifest parse error: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "lvd-checkpoint-v1")
        throw std::runtime_error("checkpoint: unsupported format tag");

    Config cfg = Config::from_values(manifest.at("config").get<std::map<std::string, std::string>>());
    ModelState st = ModelState::create(cfg);
    st.stage = stage_from(manifest.at("stage").get<std::string>());
    st.step = manifest.at("step").get<int64_t>();
    st.normalization = manifest.at("normalization").get<float>();

    std::ifstream bin(dir + "/tensors.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("checkpoint: missing tensors.bin under '" + dir + "'");
    bin.seekg(0, std::ios::end);
    const int64_t fsize = bin.tellg();

    std::map<std::string, std::pair<int64_t, std::vector<int64_t>>> entries;
    for (const auto& e : manifest.at("tensors")) {
        if (e.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("checkpoint: unsupported dtype");
        entries[e.at("name").get<std::string>()] = {e.at("offset").get<int64_t>(),
                                                    e.at("shape").get<std::vector<int64_t>>()};
    }
    auto read_into = [&](const std::string& name, Tensor<float>& t) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
        const auto& [offset, shape] = it->second;
        if (shape != t.shape) throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        const int64_t bytes = t.numel() * static_cast<int64_t>(sizeof(float));
        if (offset + bytes > fsize)
            throw std::runtime_error("checkpoint: truncated tensors.bin (tensor '" + name + "')");
        bin.seekg(offset);
        bin.read(reinterpret_cast<char*>(t.data.data()), bytes);
        if (!bin) throw std::runtime_error("checkpoint: short read for '" + name + "'");
        entries.erase(it);
    };
    for (auto& [name, t] : st.registry.items) read_into(name, *t);
    for (size_t i = 0; i < st.registry.items.size(); ++i) {
        read_into("adam_m." + st.registry.items[i].first, st.opt[i].m);
        read_into("adam_v." + st.registry.items[i].first, st.opt[i].v);
    }
    if (!entries.empty())
        throw std::runtime_error("checkpoint: unexpected extra tensor '" + entries.begin()->first + "'");
    return st;
}

// --------------------------------------------------------------- run_stage

struct Corpus {
    std::vector<ClipRecord> records;
    std::vector<Tensor<float>> clips;  // decoded once; the corpus is small
};

inline Corpus load_corpus(const std::string& dir) {
    Corpus c;
    c.records = load_manifest(dir);
    for (const auto& r : c.records) c.clips.push_back(load_clip(r));
    return c;
}

struct RunOptions {
    std::string out_dir;
    int64_t steps = 0;
    int64_t checkpoint_every = 500;
    int64_t log_every = 25;
    int64_t batch = 16;
    double lr = 1e-4;
    double cond_drop = 0.1;
    uint64_t seed = 0;
    double stop_below = -1.0;  // early stop when the trailing-window mean drops below; off when < 0
    int64_t stop_window = 100;
};

namespace detail {

inline Tensor<float> gather_window(const Tensor<float>& clip, int64_t start, int stride, int64_t L) {
    const int64_t per = clip.numel() / clip.shape[0];
    Tensor<float> out({L, clip.shape[1], clip.shape[2], clip.shape[3]});
    for (int64_t i = 0; i < L; ++i)
        std::copy_n(&clip.data[static_cast<size_t>((start + i * stride) * per)], per,
                    &out.data[static_cast<size_t>(i * per)]);
    return out;
}

inline Tensor<float> single_frame(const Tensor<float>& clip, int64_t idx) {
    return gather_window(clip, idx, 1, 1);
}

// latent standard deviation over sampled corpus frames
inline float calibrate_normalization(const Model<float>& m, const Corpus& corpus, uint64_t seed) {
    Rng rng(stream_seed(seed, "calibrate"));
    double acc = 0.0, acc2 = 0.0;
    int64_t count = 0;
    const int64_t per_clip = std::max<int64_t>(1, 64 / static_cast<int64_t>(corpus.clips.size()));
    for (const auto& clip : corpus.clips) {
        for (int64_t k = 0; k < per_clip; ++k) {
            const int64_t idx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(clip.shape[0])));
            Tensor<float> z = encode_video(m.codec, single_frame(clip, idx));
            for (float v : z.data) {
                acc += v;
                acc2 += static_cast<double>(v) * v;
                ++count;
            }
        }
    }
    const double mean = acc / static_cast<double>(count);
    const double var = acc2 / static_cast<double>(count) - mean * mean;
    return static_cast<float>(std::sqrt(std::max(var, 1e-12)));
}

}  // namespace detail

// Loops train_step over batches drawn from per-step streams, appends to
// metrics.tsv, and checkpoints periodically. Batch composition and all noise
// depend only on (seed, stage, step), so a resumed run replays losses
// bit-for-bit.
inline void run_stage(ModelState& st, const Corpus& corpus, const RunOptions& opt) {
    namespace fs = std::filesystem;
    if (corpus.records.empty()) throw std::runtime_error("run_stage: empty corpus");
    fs::create_directories(opt.out_dir);
    std::ofstream metrics(opt.out_dir + "/metrics.tsv", std::ios::app);
    metrics << std::setprecision(17);

    // the codec is frozen outside its own stage; encode every corpus frame
    // once and gather latent windows per batch below
    std::vector<Tensor<float>> latent_clips;
    if (st.stage != Stage::codec) {
        for (const auto& clip : corpus.clips)
            latent_clips.push_back(encode_video(st.model->codec, clip));
    }

    std::vector<double> trailing;
    const int64_t L = st.mcfg.frames;
    for (int64_t i = 0; i < opt.steps; ++i) {
        Rng rng(stream_seed(opt.seed, std::string("train/") + stage_name(st.stage),
                            static_cast<uint64_t>(st.step)));
        std::vector<TrainItem> batch;
        for (int64_t b = 0; b < opt.batch; ++b) {
            const size_t ci = rng.below(corpus.clips.size());
            const Tensor<float>& clip = corpus.clips[ci];
            if (st.stage == Stage::video_finetune) {
                const auto [s, start] = sample_window(clip.shape[0], L, rng);
                batch.push_back({detail::gather_window(clip, start, s, L), corpus.records[ci].caption,
                                 detail::gather_window(latent_clips[ci], start, s, L)});
            } else if (st.stage == Stage::image_adapter) {
                const int64_t idx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(clip.shape[0])));
                batch.push_back({detail::single_frame(clip, idx), corpus.records[ci].caption,
                                 detail::single_frame(latent_clips[ci], idx)});
            } else {
                const int64_t idx = static_cast<int64_t>(rng.below(static_cast<uint64_t>(clip.shape[0])));
                batch.push_back({detail::single_frame(clip, idx), corpus.records[ci].caption, {}});
            }
        }
        const double loss = train_step(st, batch, opt.lr, opt.cond_drop, rng);
        trailing.push_back(loss);
        if (static_cast<int64_t>(trailing.size()) > opt.stop_window)
            trailing.erase(trailing.begin());

        if (st.step % opt.log_every == 0 || i + 1 == opt.steps)
            metrics << st.step << "\t" << stage_name(st.stage) << "\t" << loss << "\n" << std::flush;
        if (opt.checkpoint_every > 0 && st.step % opt.checkpoint_every == 0 && i + 1 < opt.steps)
            save_checkpoint(st, opt.out_dir + "/step_" + std::to_string(st.step));

        if (opt.stop_below > 0 && static_cast<int64_t>(trailing.size()) >= opt.stop_window) {
            double mean = 0;
            for (double v : trailing) mean += v;
            mean /= static_cast<double>(trailing.size());
            if (mean < opt.stop_below) break;
        }
    }
    if (st.stage == Stage::codec && st.normalization <= 0.f)
        st.normalization = detail::calibrate_normalization(*st.model, corpus, opt.seed);
    save_checkpoint(st, opt.out_dir + "/final");
}

// sampling entry point over a trained state
inline Tensor<float> generate(const ModelState& st, const Tensor<float>& image,
                              const std::string& prompt, const SamplerConfig& cfg) {
    return generate(*st.model, st.normalization, image, prompt, cfg);
}

}  // namespace lvd
