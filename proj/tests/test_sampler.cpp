#include <catch2/catch_amalgamated.hpp>

#include "lvd/sampler.hpp"

using namespace lvd;

TEST_CASE("cfg_combine exact algebra") {
    Rng rng(1);
    auto c = rng.randn<double>({2, 3});
    auto u = rng.randn<double>({2, 3});

    auto w1 = cfg_combine(c, u, 1.0);
    REQUIRE(w1.data == c.data);
    auto w0 = cfg_combine(c, u, 0.0);
    REQUIRE(w0.data == u.data);

    auto z = Tensor<double>::zeros({2, 3});
    auto v = cfg_combine(c, z, 2.0);
    for (size_t i = 0; i < v.data.size(); ++i) REQUIRE(v.data[i] == 2.0 * c.data[i]);

    Tensor<double> bad({3, 2});
    REQUIRE_THROWS(cfg_combine(c, bad, 1.0));
}

TEST_CASE("timestep sequence is uniform, decreasing, and starts at T-1") {
    for (auto [T, steps] : std::vector<std::pair<int, int>>{{200, 50}, {200, 200}, {10, 3}, {7, 1}}) {
        auto ts = timestep_sequence(T, steps);
        REQUIRE(static_cast<int>(ts.size()) == steps);
        REQUIRE(ts.front() == T - 1);
        const int k = T / steps;
        for (size_t j = 0; j < ts.size(); ++j) {
            REQUIRE(ts[j] == T - 1 - static_cast<int>(j) * k);
            REQUIRE(ts[j] >= 0);
            if (j > 0) REQUIRE(ts[j] < ts[j - 1]);
        }
    }
    REQUIRE_THROWS(timestep_sequence(10, 11));
    REQUIRE_THROWS(timestep_sequence(10, 0));
}

TEST_CASE("ddim final step inverts q_sample at eta 0") {
    auto s = make_schedule(100, 1e-3, 2e-2);
    Rng rng(2);
    auto x0 = rng.randn<double>({2, 4});
    auto eps = rng.randn<double>({2, 4});
    const int t = 60;
    auto z_t = q_sample(x0, t, eps, s);
    // the exact noise as the prediction makes the final step recover x0
    auto rec = ddim_step(z_t, eps, t, -1, 0.0, s);
    for (size_t i = 0; i < rec.data.size(); ++i)
        REQUIRE(rec.data[i] == Catch::Approx(x0.data[i]).margin(1e-5));
}

TEST_CASE("ddim at eta 0 ignores the noise argument") {
    auto s = make_schedule(50, 1e-3, 2e-2);
    Rng rng(3);
    auto z = rng.randn<double>({3, 3});
    auto eps = rng.randn<double>({3, 3});
    auto n1 = rng.randn<double>({3, 3});
    auto a = ddim_step(z, eps, 30, 10, 0.0, s, n1);
    auto b = ddim_step(z, eps, 30, 10, 0.0, s);  // no noise at all
    REQUIRE(a.data == b.data);
}

TEST_CASE("ddim single step matches scalar oracle") {
    auto s = make_schedule(40, 1e-3, 3e-2);
    const int t = 39, t_prev = 17;
    const double z = 0.83, eps = -0.41, eta = 0.6, noise = 0.3;
    Tensor<double> zt({1}), ep({1}), nz({1});
    zt.data[0] = z;
    ep.data[0] = eps;
    nz.data[0] = noise;
    auto got = ddim_step(zt, ep, t, t_prev, eta, s, nz);

    // hand-rolled scalar route
    const double abar = s.alpha_bar[t], abar_p = s.alpha_bar[t_prev];
    const double x0 = (z - std::sqrt(1 - abar) * eps) / std::sqrt(abar);
    const double sigma = eta * std::sqrt((1 - abar_p) / (1 - abar)) * std::sqrt(1 - abar / abar_p);
    const double want = std::sqrt(abar_p) * x0 + std::sqrt(1 - abar_p - sigma * sigma) * eps +
                        sigma * noise;
    REQUIRE(got.data[0] == Catch::Approx(want).epsilon(1e-12));

    // single-step sampling (steps=1): from z_T straight to the x0 estimate
    auto one = ddim_step(zt, ep, t, -1, 0.0, s);
    REQUIRE(one.data[0] == Catch::Approx((z - std::sqrt(1 - abar) * eps) / std::sqrt(abar)));
}

TEST_CASE("ddim rejects bad arguments") {
    auto s = make_schedule(10, 1e-3, 2e-2);
    Tensor<double> z({2}), eps({2});
    REQUIRE_THROWS(ddim_step(z, eps, 3, 5, 0.0, s));
    REQUIRE_THROWS(ddim_step(z, eps, 3, 1, 1.5, s));
    REQUIRE_THROWS(ddim_step(z, eps, 3, 1, -0.1, s));
    Tensor<double> bad({3});
    REQUIRE_THROWS(ddim_step(z, bad, 3, 1, 0.0, s));
}

// Exact-posterior linear denoiser for scalar Gaussian data; both samplers
// below consume it, so any disagreement is the sampler's.
namespace {

struct LinearOracle {
    double mu0, var0;
    const NoiseSchedule& s;
    double eps_hat(double z, int t) const {
        const double abar = s.alpha_bar[t];
        const double prec = 1.0 / var0 + abar / (1.0 - abar);
        const double post_mean = (mu0 / var0 + std::sqrt(abar) * z / (1.0 - abar)) / prec;
        return (z - std::sqrt(abar) * post_mean) / std::sqrt(1.0 - abar);
    }
};

}  // namespace

TEST_CASE("ddim eta=1 with steps=T matches ancestral sampling moments") {
    const int T = 40;
    auto s = make_schedule(T, 5e-3, 8e-2);
    LinearOracle oracle{0.8, 0.25, s};

    const int n = 8000;
    Rng rng(7);
    double m_ddim = 0, v_ddim = 0, m_anc = 0, v_anc = 0;

    for (int i = 0; i < n; ++i) {
        // DDIM chain, eta = 1, full step sequence
        double z = rng.gaussian();
        for (int t = T - 1; t >= 0; --t) {
            Tensor<double> zt({1}), ep({1}), nz({1});
            zt.data[0] = z;
            ep.data[0] = oracle.eps_hat(z, t);
            nz.data[0] = rng.gaussian();
            z = ddim_step(zt, ep, t, t - 1, 1.0, s, nz).data[0];
        }
        m_ddim += z;
        v_ddim += z * z;

        // independent ancestral DDPM reference
        double y = rng.gaussian();
        for (int t = T - 1; t >= 1; --t) {
            const double eps = oracle.eps_hat(y, t);
            const double beta = s.beta[t];
            const double mean = (y - beta / std::sqrt(1.0 - s.alpha_bar[t]) * eps) / std::sqrt(s.alpha[t]);
            const double btil = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * beta;
            y = mean + std::sqrt(btil) * rng.gaussian();
        }
        const double eps0 = oracle.eps_hat(y, 0);
        y = (y - std::sqrt(1.0 - s.alpha_bar[0]) * eps0) / std::sqrt(s.alpha_bar[0]);
        m_anc += y;
        v_anc += y * y;
    }
    m_ddim /= n;
    v_ddim = v_ddim / n - m_ddim * m_ddim;
    m_anc /= n;
    v_anc = v_anc / n - m_anc * m_anc;

    const double se = std::sqrt(v_anc / n);
    REQUIRE(std::abs(m_ddim - m_anc) < 4.0 * se * std::sqrt(2.0));
    REQUIRE(std::abs(v_ddim - v_anc) < 0.05 * v_anc);
    // both should sit near the data distribution too
    REQUIRE(std::abs(m_ddim - oracle.mu0) < 0.08);
    REQUIRE(std::abs(v_ddim - oracle.var0) < 0.08 * oracle.var0 + 4.0 * se);
}
