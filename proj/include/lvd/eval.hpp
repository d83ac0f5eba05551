#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "lvd/dataset.hpp"
#include "lvd/model.hpp"

namespace lvd {

// PSNR over [-1, 1] pixels, peak 2.0, capped at 99 dB for exact matches
inline double psnr(const Tensor<float>& a, const Tensor<float>& b, double peak = 2.0,
                   double cap = 99.0) {
    check_same_shape(a, b, "psnr");
    double mse_acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        mse_acc += d * d;
    }
    mse_acc /= static_cast<double>(a.numel());
    if (mse_acc <= 0.0) return cap;
    return std::min(cap, 10.0 * std::log10(peak * peak / mse_acc));
}

// mean absolute difference between adjacent frames; 0 for a single frame
inline double mean_adjacent_mad(const Tensor<float>& video) {
    if (video.rank() != 4) throw std::invalid_argument("mad: want [L, 3, H, W]");
    const int64_t L = video.shape[0];
    if (L < 2) return 0.0;
    const int64_t per = video.numel() / L;
    double acc = 0.0;
    for (int64_t l = 0; l + 1 < L; ++l) {
        const float* a = &video.data[static_cast<size_t>(l * per)];
        const float* b = &video.data[static_cast<size_t>((l + 1) * per)];
        for (int64_t i = 0; i < per; ++i) acc += std::abs(static_cast<double>(b[i]) - a[i]);
    }
    return acc / static_cast<double>((L - 1) * per);
}

// cosine between the frozen toy image encoder's class tokens of two images
inline double embed_cosine(const ImageEncoder<float>& enc, const Tensor<float>& a,
                           const Tensor<float>& b) {
    Tape<float> tp(true);
    const Tensor<float> ta = enc.encode(tp, a).val();
    const Tensor<float> tb = enc.encode(tp, b).val();
    const int64_t d = ta.shape[1];
    double dot = 0, na = 0, nb = 0;
    for (int64_t j = 0; j < d; ++j) {
        dot += static_cast<double>(ta.data[j]) * tb.data[j];  // row 0 = cls
        na += static_cast<double>(ta.data[j]) * ta.data[j];
        nb += static_cast<double>(tb.data[j]) * tb.data[j];
    }
    return dot / std::max(1e-12, std::sqrt(na) * std::sqrt(nb));
}

struct EvalRow {
    std::string clip_id;
    double first_frame_psnr = 0.0;
    double mean_adjacent_frame_mad = 0.0;
    std::vector<double> frame_cosine;  // per-frame cls cosine to the condition image
};

struct EvalReport {
    std::vector<EvalRow> rows;

    struct Stat {
        double mean = 0.0, stddev = 0.0;
    };
    static Stat stat(const std::vector<double>& xs) {
        Stat s;
        if (xs.empty()) return s;
        for (double v : xs) s.mean += v;
        s.mean /= static_cast<double>(xs.size());
        for (double v : xs) s.stddev += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(s.stddev / static_cast<double>(xs.size()));
        return s;
    }

    Stat psnr_stat() const { return stat(collect([](const EvalRow& r) { return r.first_frame_psnr; })); }
    Stat mad_stat() const {
        return stat(collect([](const EvalRow& r) { return r.mean_adjacent_frame_mad; }));
    }
    Stat cosine_stat() const {
        std::vector<double> xs;
        for (const auto& r : rows)
            for (double c : r.frame_cosine) xs.push_back(c);
        return stat(xs);
    }

    std::vector<double> collect(double (*f)(const EvalRow&)) const {
        std::vector<double> xs;
        for (const auto& r : rows) xs.push_back(f(r));
        return xs;
    }
};

inline EvalRow fidelity_metrics(const ImageEncoder<float>& enc, const Tensor<float>& video,
                                const Tensor<float>& condition, const std::string& clip_id) {
    EvalRow row;
    row.clip_id = clip_id;
    const int64_t L = video.shape[0];
    const int64_t per = video.numel() / L;
    Tensor<float> first({3, video.shape[2], video.shape[3]});
    std::copy_n(video.data.data(), per, first.data.data());
    row.first_frame_psnr = psnr(first, condition);
    row.mean_adjacent_frame_mad = mean_adjacent_mad(video);
    for (int64_t l = 0; l < L; ++l) {
        Tensor<float> fr({3, video.shape[2], video.shape[3]});
        std::copy_n(&video.data[static_cast<size_t>(l * per)], per, fr.data.data());
        row.frame_cosine.push_back(embed_cosine(enc, fr, condition));
    }
    return row;
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows)
        rows.push_back({{"clip_id", r.clip_id},
                        {"first_frame_psnr", r.first_frame_psnr},
                        {"mean_adjacent_frame_mad", r.mean_adjacent_frame_mad},
                        {"frame_cosine", r.frame_cosine}});
    const auto p = rep.psnr_stat(), m = rep.mad_stat(), c = rep.cosine_stat();
    return {{"rows", rows},
            {"aggregate",
             {{"first_frame_psnr_mean", p.mean},
              {"first_frame_psnr_std", p.stddev},
              {"mean_adjacent_frame_mad_mean", m.mean},
              {"mean_adjacent_frame_mad_std", m.stddev},
              {"frame_cosine_mean", c.mean},
              {"frame_cosine_std", c.stddev}}}};
}

// frames of one sample directory (frame_0000.png ...); [L, 3, H, W]
inline Tensor<float> load_sample_frames(const std::string& dir) {
    namespace fs = std::filesystem;
    int64_t count = 0;
    while (fs::exists(frame_path(dir, count))) ++count;
    if (count == 0) throw std::runtime_error("eval: no frames under '" + dir + "'");
    Tensor<float> first = read_png_rgb(frame_path(dir, 0));
    Tensor<float> out({count, 3, first.shape[1], first.shape[2]});
    std::copy_n(first.data.data(), first.numel(), out.data.data());
    for (int64_t i = 1; i < count; ++i) {
        Tensor<float> fr = read_png_rgb(frame_path(dir, i));
        check_same_shape(first, fr, "load_sample_frames");
        std::copy_n(fr.data.data(), fr.numel(), &out.data[static_cast<size_t>(i * fr.numel())]);
    }
    return out;
}

}  // namespace lvd
