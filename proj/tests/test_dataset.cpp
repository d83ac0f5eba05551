#include <catch2/catch_amalgamated.hpp>
#include <filesystem>
#include <fstream>
#include <regex>
#include <unistd.h>

#include "lvd/dataset.hpp"

using namespace lvd;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("lvd_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// intensity-weighted centroid of |frame - background|; the oracle for
// caption/motion consistency
std::pair<double, double> centroid(const Tensor<float>& frame) {
    const int64_t H = frame.shape[1], W = frame.shape[2];
    const float bg = frame.data[0];  // corner pixel is always background
    double wsum = 0, cx = 0, cy = 0;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
            double w = 0;
            for (int64_t c = 0; c < 3; ++c)
                w += std::abs(frame.data[(c * H + y) * W + x] - bg);
            wsum += w;
            cx += w * static_cast<double>(x);
            cy += w * static_cast<double>(y);
        }
    return {cx / wsum, cy / wsum};
}

}  // namespace

TEST_CASE("corpus generation is deterministic byte for byte") {
    const std::string d1 = temp_dir("corpus_a");
    const std::string d2 = temp_dir("corpus_b");
    generate_corpus(1, 7, d1, 12, 32);
    generate_corpus(1, 7, d2, 12, 32);
    for (int i = 0; i < 12; ++i) {
        auto a = slurp(frame_path(d1 + "/clip_0000", i));
        auto b = slurp(frame_path(d2 + "/clip_0000", i));
        REQUIRE(!a.empty());
        REQUIRE(a == b);
    }
    REQUIRE(slurp(d1 + "/manifest.json") == slurp(d2 + "/manifest.json"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}

TEST_CASE("captions follow the factor template") {
    const std::string dir = temp_dir("captions");
    auto records = generate_corpus(12, 3, dir, 4, 32);
    const std::regex grammar(
        "a (red|green|blue|yellow|magenta|cyan) (circle|square|triangle) "
        "(moving (left|right|up|down)|bouncing around|growing|shrinking)");
    for (const auto& r : records) {
        INFO(r.caption);
        REQUIRE(std::regex_match(r.caption, grammar));
        std::ifstream cap(r.frame_dir + "/caption.txt");
        std::string line;
        std::getline(cap, line);
        REQUIRE(line == r.caption);
    }
    fs::remove_all(dir);
}

TEST_CASE("motion direction matches the caption by centroid tracking") {
    // craft one clip per drift direction and check the centroid displacement
    for (auto motion : {shapes::Motion::right, shapes::Motion::left, shapes::Motion::up,
                        shapes::Motion::down}) {
        shapes::ClipFactors f;
        f.color = 2;
        f.shape = 0;
        f.motion = motion;
        f.cx0 = 32;
        f.cy0 = 32;
        f.r0 = f.r1 = 8;
        const double v = 0.3;
        f.vx = motion == shapes::Motion::right ? v : motion == shapes::Motion::left ? -v : 0;
        f.vy = motion == shapes::Motion::down ? v : motion == shapes::Motion::up ? -v : 0;

        const int64_t F = 40;
        auto first = shapes::render_frame(f, 0, F, 64);
        auto last = shapes::render_frame(f, F - 1, F, 64);
        auto [x0, y0] = centroid(first);
        auto [x1, y1] = centroid(last);
        const double dx = x1 - x0, dy = y1 - y0;
        switch (motion) {
            case shapes::Motion::right: REQUIRE(dx > 2.0); break;
            case shapes::Motion::left: REQUIRE(dx < -2.0); break;
            case shapes::Motion::down: REQUIRE(dy > 2.0); break;
            case shapes::Motion::up: REQUIRE(dy < -2.0); break;
            default: break;
        }
    }
}

TEST_CASE("generated 'moving right' clips drift right through the full pathway") {
    const std::string dir = temp_dir("right");
    // scan seeds until the corpus contains a rightward clip
    bool found = false;
    for (uint64_t seed = 0; seed < 40 && !found; ++seed) {
        fs::remove_all(dir);
        auto records = generate_corpus(1, seed, dir, 24, 64);
        if (records[0].caption.find("moving right") == std::string::npos) continue;
        found = true;
        auto clip = load_clip(records[0]);
        Tensor<float> first({3, 64, 64}), last({3, 64, 64});
        std::copy_n(clip.data.data(), first.numel(), first.data.data());
        std::copy_n(&clip.data[static_cast<size_t>(23 * first.numel())], first.numel(),
                    last.data.data());
        auto [x0, y0] = centroid(first);
        auto [x1, y1] = centroid(last);
        REQUIRE(x1 - x0 > 1.0);
    }
    REQUIRE(found);
    fs::remove_all(dir);
}

TEST_CASE("manifest round trip") {
    const std::string dir = temp_dir("manifest");
    auto written = generate_corpus(3, 11, dir, 6, 32, 12);
    auto loaded = load_manifest(dir);
    REQUIRE(loaded.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        REQUIRE(loaded[i].clip_id == written[i].clip_id);
        REQUIRE(loaded[i].caption == written[i].caption);
        REQUIRE(loaded[i].native_length == 6);
        REQUIRE(loaded[i].fps_tag == 12);
        REQUIRE(fs::exists(frame_path(loaded[i].frame_dir, 0)));
    }
    REQUIRE_THROWS(load_manifest(dir + "/nope"));
    fs::remove_all(dir);
}

TEST_CASE("sample_window forced case and feasibility restriction") {
    Rng rng(5);
    // native == L forces stride 1, start 0
    for (int i = 0; i < 20; ++i) {
        auto [s, start] = sample_window(16, 16, rng);
        REQUIRE(s == 1);
        REQUIRE(start == 0);
    }
    // native 31, L 16: only strides 1 and 2 fit
    for (int i = 0; i < 50; ++i) {
        auto [s, start] = sample_window(31, 16, rng);
        REQUIRE(s <= 2);
        REQUIRE(start + (16 - 1) * s <= 30);
    }
    REQUIRE_THROWS(sample_window(10, 16, rng));
}

TEST_CASE("stride frequencies are uniform over the feasible set") {
    Rng rng(9);
    const int n = 10000;
    int counts[7] = {0};
    for (int i = 0; i < n; ++i) {
        auto [s, start] = sample_window(96, 16, rng);
        counts[s]++;
    }
    // all strides 1..6 feasible; 3 sigma band around n/6
    const double p = 1.0 / 6.0;
    const double sigma = std::sqrt(n * p * (1 - p));
    for (int s = 1; s <= 6; ++s) {
        INFO("stride " << s << " count " << counts[s]);
        REQUIRE(std::abs(counts[s] - n * p) < 3.0 * sigma);
    }
}

TEST_CASE("sample_clip returns exactly the strided frames") {
    const std::string dir = temp_dir("stride");
    auto records = generate_corpus(1, 21, dir, 40, 32);
    auto clip = load_clip(records[0]);
    Rng rng(3);
    auto sample = sample_clip(records[0], 8, rng);
    REQUIRE(sample.frames.shape[0] == 8);
    const int64_t per = clip.numel() / clip.shape[0];
    for (int64_t i = 0; i < 8; ++i) {
        const int64_t src = sample.start + i * sample.stride;
        for (int64_t j = 0; j < per; ++j)
            REQUIRE(sample.frames.data[i * per + j] == clip.data[src * per + j]);
    }
    fs::remove_all(dir);
}

TEST_CASE("png round trip preserves pixels") {
    const std::string dir = temp_dir("png");
    shapes::ClipFactors f;
    auto img = shapes::render_frame(f, 0, 4, 32);
    write_png_rgb(dir + "/x.png", img);
    auto back = read_png_rgb(dir + "/x.png");
    REQUIRE(back.shape == img.shape);
    for (size_t i = 0; i < img.data.size(); ++i)
        REQUIRE(back.data[i] == Catch::Approx(img.data[i]).margin(1.0 / 127.5));
    REQUIRE_THROWS(read_png_rgb(dir + "/missing.png"));
    fs::remove_all(dir);
}

TEST_CASE("corpus rejects bad arguments") {
    const std::string dir = temp_dir("badargs");
    REQUIRE_THROWS(generate_corpus(0, 1, dir));
    fs::remove_all(dir);
}
