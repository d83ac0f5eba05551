#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "lvd/tensor.hpp"

namespace lvd {

// Forward-process variance schedule. Arrays are kept in double so the
// product/recursion identities hold to 1e-12; they are recomputed from the
// config, never serialized.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;       // variance increments, (0, 1)
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // running product of alpha
};

enum class ScheduleKind { linear };

inline ScheduleKind schedule_kind_from(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    throw std::invalid_argument("schedule: unknown kind '" + s + "'");
}

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::linear) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    (void)kind;  // only linear exists

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = (T == 1) ? beta_start
                            : beta_start + (beta_end - beta_start) * (double)t / (double)(T - 1);
        s.beta[t] = b;
        s.alpha[t] = 1.0 - b;
        prod *= s.alpha[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

inline void check_t(const NoiseSchedule& s, int t) {
    if (t < 0 || t >= s.T) throw std::out_of_range("schedule: timestep out of range");
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
    check_same_shape(x0, eps, "q_sample");
    check_t(s, t);
    const T a = static_cast<T>(std::sqrt(s.alpha_bar[t]));
    const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
    Tensor<T> out;
    out.shape = x0.shape;
    out.data.resize(x0.data.size());
    for (size_t i = 0; i < x0.data.size(); ++i) out.data[i] = a * x0.data[i] + b * eps.data[i];
    return out;
}

// mean squared error over all elements
template <typename T>
double training_loss(const Tensor<T>& eps_true, const Tensor<T>& eps_pred) {
    check_same_shape(eps_true, eps_pred, "training_loss");
    double acc = 0.0;
    for (size_t i = 0; i < eps_true.data.size(); ++i) {
        const double d = (double)eps_true.data[i] - (double)eps_pred.data[i];
        acc += d * d;
    }
    return acc / (double)eps_true.data.size();
}

// Applies the one-step kernel q(x_t | x_{t-1}) t+1 times. Verification oracle
// for q_sample's marginal statistics; not used on any training path.
template <typename T>
Tensor<T> iterative_forward(const Tensor<T>& x0, int t, const std::vector<Tensor<T>>& noise_stream,
                            const NoiseSchedule& s) {
    check_t(s, t);
    if ((int)noise_stream.size() != t + 1)
        throw std::invalid_argument("iterative_forward: need t+1 noise tensors");
    Tensor<T> x = x0;
    for (int i = 0; i <= t; ++i) {
        check_same_shape(x0, noise_stream[i], "iterative_forward");
        const T a = static_cast<T>(std::sqrt(1.0 - s.beta[i]));
        const T b = static_cast<T>(std::sqrt(s.beta[i]));
        for (size_t j = 0; j < x.data.size(); ++j)
            x.data[j] = a * x.data[j] + b * noise_stream[i].data[j];
    }
    return x;
}

}  // namespace lvd
