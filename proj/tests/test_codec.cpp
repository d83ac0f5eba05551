#include <catch2/catch_amalgamated.hpp>

#include "lvd/codec.hpp"

using namespace lvd;

namespace {

Codec<float> make_codec(int64_t factor = 8, int64_t width = 32) {
    CodecConfig c;
    c.factor = factor;
    c.width = width;
    Rng rng(1);
    return Codec<float>(c, rng);
}

Tensor<float> bounded_video(Rng& rng, std::vector<int64_t> shape) {
    auto t = rng.randn<float>(std::move(shape), 0.4);
    for (auto& v : t.data) v = std::max(-1.f, std::min(1.f, v));
    return t;
}

}  // namespace

TEST_CASE("latent shape arithmetic") {
    auto codec = make_codec(8);
    Rng rng(2);
    auto x = bounded_video(rng, {1, 3, 64, 64});
    auto z = encode_video(codec, x);
    REQUIRE(z.shape == std::vector<int64_t>{1, 4, 8, 8});
    auto back = decode_video(codec, z);
    REQUIRE(back.shape == x.shape);  // round trip restores the exact shape

    auto codec4 = make_codec(4, 16);
    auto x32 = bounded_video(rng, {2, 3, 32, 32});
    REQUIRE(encode_video(codec4, x32).shape == std::vector<int64_t>{2, 4, 8, 8});
}

TEST_CASE("frames are independent: reordering input reorders latents only") {
    auto codec = make_codec();
    Rng rng(3);
    auto x = bounded_video(rng, {4, 3, 64, 64});
    auto z = encode_video(codec, x);

    const int perm[4] = {2, 0, 3, 1};
    Tensor<float> xp({4, 3, 64, 64});
    const int64_t per = 3 * 64 * 64;
    for (int i = 0; i < 4; ++i)
        std::copy_n(&x.data[static_cast<size_t>(perm[i] * per)], per,
                    &xp.data[static_cast<size_t>(i * per)]);
    auto zp = encode_video(codec, xp);

    const int64_t zper = 4 * 8 * 8;
    for (int i = 0; i < 4; ++i)
        for (int64_t j = 0; j < zper; ++j)
            REQUIRE(zp.data[i * zper + j] == z.data[perm[i] * zper + j]);
}

TEST_CASE("editing one frame changes only that latent frame") {
    auto codec = make_codec();
    Rng rng(4);
    auto x = bounded_video(rng, {3, 3, 64, 64});
    auto z = encode_video(codec, x);
    auto x2 = x;
    x2.data[static_cast<size_t>(1 * 3 * 64 * 64 + 500)] = 0.9f;
    auto z2 = encode_video(codec, x2);
    const int64_t zper = 4 * 8 * 8;
    for (int i = 0; i < 3; ++i) {
        bool diff = false;
        for (int64_t j = 0; j < zper; ++j) diff |= z.data[i * zper + j] != z2.data[i * zper + j];
        REQUIRE(diff == (i == 1));
    }
}

TEST_CASE("zero latent decodes to a constant image of the right shape") {
    auto codec = make_codec();
    auto z = Tensor<float>::zeros({2, 4, 8, 8});
    auto x = decode_video(codec, z);
    REQUIRE(x.shape == std::vector<int64_t>{2, 3, 64, 64});
    // replicate padding keeps a constant map constant through every conv
    for (int64_t c = 0; c < 3; ++c) {
        const float v0 = x.data[c * 64 * 64];
        for (int64_t i = 0; i < 64 * 64; ++i)
            REQUIRE(x.data[c * 64 * 64 + i] == Catch::Approx(v0).margin(1e-6));
    }
    for (float v : x.data) {
        REQUIRE(v <= 1.f);
        REQUIRE(v >= -1.f);
    }
}

TEST_CASE("encode and decode are deterministic") {
    auto codec = make_codec();
    Rng rng(5);
    auto x = bounded_video(rng, {2, 3, 64, 64});
    auto z1 = encode_video(codec, x);
    auto z2 = encode_video(codec, x);
    REQUIRE(z1.data == z2.data);
    auto d1 = decode_video(codec, z1);
    auto d2 = decode_video(codec, z1);
    REQUIRE(d1.data == d2.data);
}

TEST_CASE("codec rejects malformed inputs") {
    auto codec = make_codec();
    Rng rng(6);
    REQUIRE_THROWS(encode_video(codec, bounded_video(rng, {1, 3, 60, 64})));  // not divisible
    Tensor<float> big({1, 3, 64, 64});
    big.fill(2.0f);  // outside [-1, 1]
    REQUIRE_THROWS(encode_video(codec, big));
    Tensor<float> wrong_ch({1, 2, 8, 8});
    REQUIRE_THROWS(decode_video(codec, wrong_ch));
    CodecConfig bad;
    bad.factor = 6;  // not a power of two
    REQUIRE_THROWS(bad.stages());
}
