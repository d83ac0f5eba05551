#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "lvd/tensor.hpp"

namespace lvd {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// xoshiro256++ with a self-contained gaussian; avoids the unspecified
// std::normal_distribution algorithm so streams are stable across toolchains.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t x = seed;
        for (int i = 0; i < 4; ++i) s_[i] = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int uniform_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // independent child stream; used for per-clip / per-step streams
    Rng fork(uint64_t tag) {
        uint64_t x = s_[0] ^ (tag * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
        return Rng(splitmix64(x) ^ s_[2]);
    }

    template <typename T>
    Tensor<T> randn(std::vector<int64_t> shape, double stddev = 1.0) {
        Tensor<T> t(std::move(shape));
        for (auto& v : t.data) v = static_cast<T>(gaussian() * stddev);
        return t;
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// stable stream id from (seed, label, index); FNV-1a over the label
inline uint64_t stream_seed(uint64_t seed, const std::string& label, uint64_t index = 0) {
    uint64_t h = 1469598103934665603ULL;
    for (char c : label) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    uint64_t x = seed ^ h;
    uint64_t mixed = splitmix64(x);
    x = mixed ^ (index * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
    return splitmix64(x);
}

}  // namespace lvd
