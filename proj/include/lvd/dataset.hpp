#pragma once

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "lvd/image_io.hpp"
#include "lvd/rng.hpp"
#include "lvd/tensor.hpp"

namespace lvd {

struct ClipRecord {
    std::string clip_id;
    std::string frame_dir;  // absolute after load_manifest
    std::string caption;
    int64_t native_length = 0;
    int fps_tag = 0;
};

struct StrideSample {
    Tensor<float> frames;  // [L, 3, H, W]
    int stride = 1;
    int64_t start = 0;
};

namespace shapes {

struct Color {
    const char* name;
    float r, g, b;
};

inline const std::vector<Color>& colors() {
    static const std::vector<Color> c = {
        {"red", 0.90f, 0.12f, 0.12f},    {"green", 0.10f, 0.78f, 0.18f},
        {"blue", 0.15f, 0.25f, 0.92f},   {"yellow", 0.92f, 0.86f, 0.12f},
        {"magenta", 0.88f, 0.15f, 0.85f}, {"cyan", 0.10f, 0.80f, 0.85f},
    };
    return c;
}

inline const std::vector<const char*>& shape_names() {
    static const std::vector<const char*> s = {"circle", "square", "triangle"};
    return s;
}

enum class Motion { right, left, up, down, bounce, grow, shrink };

inline const char* motion_phrase(Motion m) {
    switch (m) {
        case Motion::right: return "moving right";
        case Motion::left: return "moving left";
        case Motion::up: return "moving up";
        case Motion::down: return "moving down";
        case Motion::bounce: return "bouncing around";
        case Motion::grow: return "growing";
        case Motion::shrink: return "shrinking";
    }
    return "";
}

struct ClipFactors {
    int color = 0;
    int shape = 0;
    Motion motion = Motion::right;
    double cx0 = 32, cy0 = 32;  // start center
    double vx = 0, vy = 0;      // px / frame
    double r0 = 9, r1 = 9;      // radius over the clip (grow/shrink ramp)
    float bg = 0.15f;           // background gray in [0,1]
};

inline ClipFactors make_factors(Rng& rng, int64_t frames, int64_t size) {
    ClipFactors f;
    f.color = static_cast<int>(rng.below(colors().size()));
    f.shape = static_cast<int>(rng.below(shape_names().size()));
    f.motion = static_cast<Motion>(rng.below(7));
    static const float bgs[4] = {0.08f, 0.16f, 0.24f, 0.32f};
    f.bg = bgs[rng.below(4)];

    const double F = static_cast<double>(frames - 1);
    auto urange = [&](double lo, double hi) { return lo + rng.uniform() * (hi - lo); };

    if (f.motion == Motion::grow || f.motion == Motion::shrink) {
        double small = urange(5.0, 7.0), big = urange(13.0, 16.0);
        f.r0 = f.motion == Motion::grow ? small : big;
        f.r1 = f.motion == Motion::grow ? big : small;
        const double m = big + 2.0;
        f.cx0 = urange(m, size - 1 - m);
        f.cy0 = urange(m, size - 1 - m);
    } else if (f.motion == Motion::bounce) {
        f.r0 = f.r1 = urange(7.0, 11.0);
        const double sp = urange(0.55, 0.8);
        const double ang = urange(0.35, 1.2);  // radians, off-axis
        f.vx = sp * std::cos(ang) * (rng.below(2) ? 1.0 : -1.0);
        f.vy = sp * std::sin(ang) * (rng.below(2) ? 1.0 : -1.0);
        const double m = f.r0 + 2.0;
        f.cx0 = urange(m, size - 1 - m);
        f.cy0 = urange(m, size - 1 - m);
    } else {
        f.r0 = f.r1 = urange(7.0, 11.0);
        const double speed = urange(0.25, 0.35);
        const double travel = speed * F;
        const double m = f.r0 + 2.0;
        double lo = m, hi = size - 1 - m - travel;  // feasible start along motion axis
        const double a0 = urange(lo, hi);
        const double b0 = urange(m, size - 1 - m);
        switch (f.motion) {
            case Motion::right: f.vx = speed; f.cx0 = a0; f.cy0 = b0; break;
            case Motion::left:  f.vx = -speed; f.cx0 = size - 1 - a0; f.cy0 = b0; break;
            case Motion::down:  f.vy = speed; f.cy0 = a0; f.cx0 = b0; break;
            case Motion::up:    f.vy = -speed; f.cy0 = size - 1 - a0; f.cx0 = b0; break;
            default: break;
        }
    }
    return f;
}

inline std::string caption_for(const ClipFactors& f) {
    return std::string("a ") + colors()[static_cast<size_t>(f.color)].name + " " +
           shape_names()[static_cast<size_t>(f.shape)] + " " + motion_phrase(f.motion);
}

// reflective fold of an unbounded coordinate into [lo, hi]
inline double fold(double x, double lo, double hi) {
    const double span = hi - lo;
    double u = std::fmod(x - lo, 2.0 * span);
    if (u < 0) u += 2.0 * span;
    return lo + (u <= span ? u : 2.0 * span - u);
}

inline bool inside(int shape, double dx, double dy, double r) {
    switch (shape) {
        case 0:  // circle
            return dx * dx + dy * dy <= r * r;
        case 1: {  // square, matched visual mass
            const double h = r * 0.82;
            return std::abs(dx) <= h && std::abs(dy) <= h;
        }
        default: {  // triangle, apex up, circumradius r
            const double x0 = 0, y0 = -r;
            const double x1 = -0.8660254037844386 * r, y1 = 0.5 * r;
            const double x2 = 0.8660254037844386 * r, y2 = 0.5 * r;
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            };
            const double s0 = side(x0, y0, x1, y1);
            const double s1 = side(x1, y1, x2, y2);
            const double s2 = side(x2, y2, x0, y0);
            return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
        }
    }
}

// anti-aliased render via 4x4 coverage sampling; values in [-1, 1]
inline Tensor<float> render_frame(const ClipFactors& f, int64_t frame, int64_t frames, int64_t size) {
    const double F = static_cast<double>(frames > 1 ? frames - 1 : 1);
    const double u = static_cast<double>(frame) / F;
    const double r = f.r0 + (f.r1 - f.r0) * u;
    double cx = f.cx0 + f.vx * static_cast<double>(frame);
    double cy = f.cy0 + f.vy * static_cast<double>(frame);
    if (f.motion == Motion::bounce) {
        const double m = r + 2.0;
        cx = fold(cx, m, size - 1 - m);
        cy = fold(cy, m, size - 1 - m);
    }
    const auto& col = colors()[static_cast<size_t>(f.color)];
    Tensor<float> img({3, size, size});
    const int ss = 4;
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            int hit = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss - 0.5;
                    const double py = y + (sy + 0.5) / ss - 0.5;
                    if (inside(f.shape, px - cx, py - cy, r)) ++hit;
                }
            const float a = static_cast<float>(hit) / (ss * ss);
            const float rgb[3] = {f.bg + a * (col.r - f.bg), f.bg + a * (col.g - f.bg),
                                  f.bg + a * (col.b - f.bg)};
            for (int c = 0; c < 3; ++c)
                img.data[static_cast<size_t>((c * size + y) * size + x)] = rgb[c] * 2.0f - 1.0f;
        }
    return img;
}

}  // namespace shapes

namespace detail {

inline std::string zero_pad(int64_t v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

}  // namespace detail

inline std::string frame_path(const std::string& dir, int64_t idx) {
    return dir + "/frame_" + detail::zero_pad(idx, 4) + ".png";
}

// Renders n_clips moving-shape clips, one directory per clip with 8-bit RGB
// frames plus caption.txt, and a top-level manifest.json. Deterministic for a
// given seed; each clip draws from its own stream.
inline std::vector<ClipRecord> generate_corpus(int64_t n_clips, uint64_t seed,
                                               const std::string& out_dir, int64_t frames = 96,
                                               int64_t size = 64, int fps_tag = 8) {
    if (n_clips < 1) throw std::invalid_argument("generate_corpus: n_clips must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        throw std::runtime_error("generate_corpus: cannot create '" + out_dir + "'");

    std::vector<ClipRecord> records;
    nlohmann::json manifest = nlohmann::json::array();
    for (int64_t i = 0; i < n_clips; ++i) {
        Rng rng(stream_seed(seed, "corpus/clip", static_cast<uint64_t>(i)));
        const auto f = shapes::make_factors(rng, frames, size);
        const std::string clip_id = "clip_" + detail::zero_pad(i, 4);
        const std::string dir = out_dir + "/" + clip_id;
        fs::create_directories(dir);
        for (int64_t t = 0; t < frames; ++t)
            write_png_rgb(frame_path(dir, t), shapes::render_frame(f, t, frames, size));
        const std::string caption = shapes::caption_for(f);
        std::ofstream(dir + "/caption.txt") << caption << "\n";
        ClipRecord rec{clip_id, dir, caption, frames, fps_tag};
        records.push_back(rec);
        manifest.push_back({{"clip_id", clip_id},
                            {"frame_dir", clip_id},
                            {"caption", caption},
                            {"native_length", frames},
                            {"fps_tag", fps_tag}});
    }
    std::ofstream(out_dir + "/manifest.json") << manifest.dump(2) << "\n";
    return records;
}

inline std::vector<ClipRecord> load_manifest(const std::string& corpus_dir) {
    std::ifstream in(corpus_dir + "/manifest.json");
    if (!in) throw std::runtime_error("dataset: no manifest.json under '" + corpus_dir + "'");
    nlohmann::json j;
    in >> j;
    std::vector<ClipRecord> records;
    for (const auto& e : j) {
        ClipRecord r;
        r.clip_id = e.at("clip_id").get<std::string>();
        r.frame_dir = corpus_dir + "/" + e.at("frame_dir").get<std::string>();
        r.caption = e.at("caption").get<std::string>();
        r.native_length = e.at("native_length").get<int64_t>();
        r.fps_tag = e.at("fps_tag").get<int>();
        if (r.caption.empty()) throw std::runtime_error("dataset: empty caption for " + r.clip_id);
        records.push_back(std::move(r));
    }
    return records;
}

// all frames of a clip; [native_length, 3, H, W]
inline Tensor<float> load_clip(const ClipRecord& rec) {
    Tensor<float> first = read_png_rgb(frame_path(rec.frame_dir, 0));
    const int64_t H = first.shape[1], W = first.shape[2];
    Tensor<float> out({rec.native_length, 3, H, W});
    std::copy_n(first.data.data(), first.numel(), out.data.data());
    for (int64_t i = 1; i < rec.native_length; ++i) {
        Tensor<float> fr = read_png_rgb(frame_path(rec.frame_dir, i));
        check_same_shape(first, fr, "load_clip");
        std::copy_n(fr.data.data(), fr.numel(), &out.data[static_cast<size_t>(i * fr.numel())]);
    }
    return out;
}

// Draws a stride uniformly from the subset of {lo..hi} that fits the clip,
// then a start uniformly from the feasible starts. Short clips simply lose
// the infeasible strides; a clip shorter than L frames is rejected.
inline std::pair<int, int64_t> sample_window(int64_t native_length, int64_t L, Rng& rng, int lo = 1,
                                             int hi = 6) {
    std::vector<int> feasible;
    for (int s = lo; s <= hi; ++s)
        if ((L - 1) * s + 1 <= native_length) feasible.push_back(s);
    if (feasible.empty())
        throw std::runtime_error("sample_window: clip too short (" + std::to_string(native_length) +
                                 " frames) for " + std::to_string(L) + " samples");
    const int s = feasible[rng.below(feasible.size())];
    const int64_t max_start = native_length - ((L - 1) * s + 1);
    const int64_t start = static_cast<int64_t>(rng.below(static_cast<uint64_t>(max_start + 1)));
    return {s, start};
}

// frames[i] = source[start + i * stride], read from disk
inline StrideSample sample_clip(const ClipRecord& rec, int64_t L, Rng& rng, int stride_lo = 1,
                                int stride_hi = 6) {
    const auto [s, start] = sample_window(rec.native_length, L, rng, stride_lo, stride_hi);
    Tensor<float> first = read_png_rgb(frame_path(rec.frame_dir, start));
    const int64_t H = first.shape[1], W = first.shape[2];
    StrideSample out;
    out.stride = s;
    out.start = start;
    out.frames = Tensor<float>({L, 3, H, W});
    std::copy_n(first.data.data(), first.numel(), out.frames.data.data());
    for (int64_t i = 1; i < L; ++i) {
        Tensor<float> fr = read_png_rgb(frame_path(rec.frame_dir, start + i * s));
        check_same_shape(first, fr, "sample_clip");
        std::copy_n(fr.data.data(), fr.numel(), &out.frames.data[static_cast<size_t>(i * fr.numel())]);
    }
    return out;
}

}  // namespace lvd
