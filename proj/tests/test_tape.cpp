#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "lvd/nn.hpp"
#include "lvd/rng.hpp"
#include "lvd/tape.hpp"

using namespace lvd;

namespace {

Tensor<double> randn(Rng& rng, std::vector<int64_t> shape) { return rng.randn<double>(std::move(shape)); }

}  // namespace

TEST_CASE("elementwise ops gradients") {
    Rng rng(1);
    auto a = randn(rng, {3, 4});
    auto b = randn(rng, {3, 4});

    auto res = gradcheck::check({&a, &b}, [&](Tape<double>& tp) {
        auto va = tp.leaf(a), vb = tp.leaf(b);
        auto y = add(mul(va, vb), sub(scale(va, 0.5), vb));
        return mean_all(silu(y));
    }, 6);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("bias and tiled-row add gradients") {
    Rng rng(2);
    auto x = randn(rng, {6, 5});
    auto b = randn(rng, {5});
    auto pos = randn(rng, {3, 5});
    auto res = gradcheck::check({&x, &b, &pos}, [&](Tape<double>& tp) {
        auto y = add_bias(tp.leaf(x), tp.leaf(b));
        y = add_rows_tiled(y, tp.leaf(pos));
        return mse(y, tp.constant(Tensor<double>::zeros({6, 5})));
    }, 6);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("matmul gradients") {
    Rng rng(3);
    auto a = randn(rng, {4, 3});
    auto b = randn(rng, {3, 5});
    auto res = gradcheck::check({&a, &b}, [&](Tape<double>& tp) {
        return mean_all(tanh_op(matmul(tp.leaf(a), tp.leaf(b))));
    }, 8);
    REQUIRE(res.max_rel_err < 1e-6);
    REQUIRE_THROWS([&] {
        Tape<double> tp;
        matmul(tp.leaf(a), tp.leaf(a));
    }());
}

TEST_CASE("reshape permute concat slice gradients") {
    Rng rng(4);
    auto a = randn(rng, {2, 3, 4});
    auto b = randn(rng, {2, 2, 4});
    auto res = gradcheck::check({&a, &b}, [&](Tape<double>& tp) {
        auto va = permute(tp.leaf(a), {1, 0, 2});       // [3,2,4]
        auto vb = permute(tp.leaf(b), {1, 0, 2});       // [2,2,4]
        auto c = concat(va, vb, 0);                     // [5,2,4]
        auto s = slice(c, 0, 1, 3);                     // [3,2,4]
        auto r = reshape(s, {6, 4});
        return mean_all(gelu(r));
    }, 8);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("permute forward correctness") {
    Tensor<double> x({2, 3});
    for (int i = 0; i < 6; ++i) x.data[i] = i;
    Tape<double> tp;
    auto y = permute(tp.leaf(x), {1, 0});
    REQUIRE(y.val().shape == std::vector<int64_t>{3, 2});
    REQUIRE(y.val().data == std::vector<double>{0, 3, 1, 4, 2, 5});
}

TEST_CASE("softmax rows sums to one and gradient") {
    Rng rng(5);
    auto x = randn(rng, {4, 6});
    Tape<double> tp;
    auto y = softmax_rows(tp.leaf(x));
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int j = 0; j < 6; ++j) s += y.val().data[r * 6 + j];
        REQUIRE(s == Catch::Approx(1.0).epsilon(1e-12));
    }
    auto w = randn(rng, {4, 6});
    auto res = gradcheck::check({&x}, [&](Tape<double>& t2) {
        return mse(softmax_rows(t2.leaf(x)), t2.constant(w));
    }, 8);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("group_norm gradients") {
    Rng rng(6);
    auto x = randn(rng, {2, 4, 3, 3});
    auto g = randn(rng, {4});
    auto b = randn(rng, {4});
    auto tgt = randn(rng, {2, 4, 3, 3});
    auto res = gradcheck::check({&x, &g, &b}, [&](Tape<double>& tp) {
        return mse(group_norm(tp.leaf(x), tp.leaf(g), tp.leaf(b), 2), tp.constant(tgt));
    }, 8, 1e-6);
    REQUIRE(res.max_rel_err < 1e-5);
}

TEST_CASE("layer_norm gradients") {
    Rng rng(7);
    auto x = randn(rng, {5, 6});
    auto g = randn(rng, {6});
    auto b = randn(rng, {6});
    auto tgt = randn(rng, {5, 6});
    auto res = gradcheck::check({&x, &g, &b}, [&](Tape<double>& tp) {
        return mse(layer_norm(tp.leaf(x), tp.leaf(g), tp.leaf(b)), tp.constant(tgt));
    }, 8, 1e-6);
    REQUIRE(res.max_rel_err < 1e-5);
}

TEST_CASE("conv2d gradients stride 1 and 2") {
    Rng rng(8);
    auto x = randn(rng, {2, 3, 6, 6});
    auto w = randn(rng, {4, 3, 3, 3});
    auto b = randn(rng, {4});
    auto tgt1 = randn(rng, {2, 4, 6, 6});
    auto res = gradcheck::check({&x, &w, &b}, [&](Tape<double>& tp) {
        return mse(conv2d(tp.leaf(x), tp.leaf(w), tp.leaf(b), 1, 1), tp.constant(tgt1));
    }, 8);
    REQUIRE(res.max_rel_err < 1e-6);

    auto tgt2 = randn(rng, {2, 4, 3, 3});
    auto res2 = gradcheck::check({&x, &w, &b}, [&](Tape<double>& tp) {
        return mse(conv2d(tp.leaf(x), tp.leaf(w), tp.leaf(b), 2, 1), tp.constant(tgt2));
    }, 8);
    REQUIRE(res2.max_rel_err < 1e-6);
}

TEST_CASE("conv2d replicate padding keeps constant maps constant") {
    Rng rng(9);
    Tensor<double> x({1, 2, 5, 5});
    x.fill(0.37);
    auto w = randn(rng, {3, 2, 3, 3});
    auto b = randn(rng, {3});
    Tape<double> tp;
    auto y = conv2d(tp.leaf(x), tp.leaf(w), tp.leaf(b), 1, 1);
    for (int c = 0; c < 3; ++c) {
        const double v0 = y.val().data[c * 25];
        for (int i = 0; i < 25; ++i) REQUIRE(y.val().data[c * 25 + i] == Catch::Approx(v0).epsilon(1e-12));
    }
}

TEST_CASE("upsample2x film embedding gradients") {
    Rng rng(10);
    auto x = randn(rng, {2, 3, 2, 2});
    auto s = randn(rng, {2, 3});
    auto h = randn(rng, {2, 3});
    auto tgt = randn(rng, {2, 3, 4, 4});
    auto res = gradcheck::check({&x, &s, &h}, [&](Tape<double>& tp) {
        return mse(upsample2x(film(tp.leaf(x), tp.leaf(s), tp.leaf(h))), tp.constant(tgt));
    }, 8);
    REQUIRE(res.max_rel_err < 1e-6);

    auto table = randn(rng, {7, 4});
    std::vector<int> ids = {3, 0, 3, 6};
    auto tgt2 = randn(rng, {4, 4});
    auto res2 = gradcheck::check({&table}, [&](Tape<double>& tp) {
        return mse(embedding(tp.leaf(table), ids), tp.constant(tgt2));
    }, 10);
    REQUIRE(res2.max_rel_err < 1e-6);
}

TEST_CASE("mha matches composed attention and gradients") {
    Rng rng(11);
    const int B = 2, Lq = 3, Lk = 4, heads = 2, dh = 3;
    const int D = heads * dh;
    auto q = randn(rng, {B * Lq, D});
    auto k = randn(rng, {B * Lk, D});
    auto v = randn(rng, {B * Lk, D});

    // brute-force oracle
    Tensor<double> want({B * Lq, D});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < Lq; ++i) {
                std::vector<double> logits(Lk);
                double mx = -1e300;
                for (int j = 0; j < Lk; ++j) {
                    double dot = 0;
                    for (int d = 0; d < dh; ++d)
                        dot += q.data[(b * Lq + i) * D + h * dh + d] * k.data[(b * Lk + j) * D + h * dh + d];
                    logits[j] = dot / std::sqrt((double)dh);
                    mx = std::max(mx, logits[j]);
                }
                double z = 0;
                for (int j = 0; j < Lk; ++j) z += std::exp(logits[j] - mx);
                for (int d = 0; d < dh; ++d) {
                    double acc = 0;
                    for (int j = 0; j < Lk; ++j)
                        acc += std::exp(logits[j] - mx) / z * v.data[(b * Lk + j) * D + h * dh + d];
                    want.data[(b * Lq + i) * D + h * dh + d] = acc;
                }
            }

    Tape<double> tp;
    auto out = mha(tp.leaf(q), tp.leaf(k), tp.leaf(v), B, heads);
    for (size_t i = 0; i < want.data.size(); ++i)
        REQUIRE(out.val().data[i] == Catch::Approx(want.data[i]).margin(1e-12));

    auto tgt = randn(rng, {B * Lq, D});
    auto res = gradcheck::check({&q, &k, &v}, [&](Tape<double>& t2) {
        return mse(mha(t2.leaf(q), t2.leaf(k), t2.leaf(v), B, heads), t2.constant(tgt));
    }, 8, 1e-6);
    REQUIRE(res.max_rel_err < 1e-5);
}

TEST_CASE("mha shared kv gradients") {
    Rng rng(12);
    const int B = 3, Lq = 2, Lk = 5, heads = 2, dh = 2;
    const int D = heads * dh;
    auto q = randn(rng, {B * Lq, D});
    auto k = randn(rng, {Lk, D});
    auto v = randn(rng, {Lk, D});
    auto tgt = randn(rng, {B * Lq, D});
    auto res = gradcheck::check({&q, &k, &v}, [&](Tape<double>& t2) {
        return mse(mha(t2.leaf(q), t2.leaf(k), t2.leaf(v), B, heads, true), t2.constant(tgt));
    }, 8, 1e-6);
    REQUIRE(res.max_rel_err < 1e-5);
}

TEST_CASE("parameter reused twice accumulates both gradient paths") {
    Rng rng(13);
    auto w = randn(rng, {3, 3});
    auto res = gradcheck::check({&w}, [&](Tape<double>& tp) {
        auto v = tp.leaf(w);
        return mean_all(matmul(v, v));
    }, 9);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("nn layers gradcheck") {
    Rng rng(14);
    Rng init(100);
    Linear<double> lin(5, 4, init);
    SelfAttentionBlock<double> attn(6, 2, init);
    FeedForward<double> ff(6, 12, init);
    auto x = randn(rng, {4, 5});
    auto xt = randn(rng, {8, 6});  // B=2, 4 tokens each

    auto res = gradcheck::check({&lin.w, &lin.b, &x}, [&](Tape<double>& tp) {
        return mean_all(silu(lin(tp, tp.leaf(x))));
    }, 6);
    REQUIRE(res.max_rel_err < 1e-6);

    std::vector<Tensor<double>*> ps = {&attn.wq.w, &attn.wk.w, &attn.wv.w, &attn.wo.w,
                                       &attn.ln.gamma, &ff.fc1.w, &ff.fc2.b, &xt};
    auto res2 = gradcheck::check(ps, [&](Tape<double>& tp) {
        auto y = attn(tp, tp.leaf(xt), 2);
        return mean_all(ff(tp, y));
    }, 5, 1e-6);
    REQUIRE(res2.max_rel_err < 1e-4);
}

TEST_CASE("sinusoidal embedding shape and range") {
    auto e = sinusoidal_embedding<double>(17.0, 8);
    REQUIRE(e.shape == std::vector<int64_t>{1, 8});
    for (double v : e.data) {
        REQUIRE(v <= 1.0);
        REQUIRE(v >= -1.0);
    }
    auto e2 = sinusoidal_embedding<double>(17.0, 8);
    REQUIRE(e.data == e2.data);
}

TEST_CASE("backward requires scalar loss") {
    Tape<double> tp;
    Rng rng(15);
    auto x = rng.randn<double>({2, 2});
    auto v = tp.leaf(x);
    REQUIRE_THROWS(tp.backward(v));
}
