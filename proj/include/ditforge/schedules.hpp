#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ditforge/errors.hpp"
#include "ditforge/tensor.hpp"

namespace ditforge {

// Karras-style noise schedule on t in [0,1]. t=0 is the noise endpoint
// (sigma = sigma_max), t=1 the clean endpoint (sigma = sigma_min):
//   sigma(t) = (sigma_max^(1/rho) + t (sigma_min^(1/rho) - sigma_max^(1/rho)))^rho
// alpha(t) = 1 / (1 + sigma(t)^2) so the interpolant
//   x(t) = sqrt(alpha) x0 + sigma sqrt(alpha) eps
// has coefficient norm c_clean^2 + c_noise^2 = 1 exactly by construction.
struct ScheduleSpec {
    double sigma_min = 0.02;
    double sigma_max = 80.0;
    double rho = 7.0;

    void validate() const {
        if (!(sigma_min > 0.0) || !(sigma_max > sigma_min))
            throw ConfigError("schedule: need 0 < sigma_min < sigma_max");
        if (!(rho > 0.0)) throw ConfigError("schedule: rho must be > 0");
    }
};

inline double sigma_at(const ScheduleSpec& s, double t) {
    s.validate();
    if (!(t >= 0.0 && t <= 1.0))
        throw DomainError("sigma: t=" + std::to_string(t) + " outside [0,1]");
    if (t == 0.0) return s.sigma_max;
    if (t == 1.0) return s.sigma_min;
    double a = std::pow(s.sigma_max, 1.0 / s.rho);
    double b = std::pow(s.sigma_min, 1.0 / s.rho);
    return std::pow(a + t * (b - a), s.rho);
}

inline double alpha_at(const ScheduleSpec& s, double t) {
    double sg = sigma_at(s, t);
    return 1.0 / (1.0 + sg * sg);
}

// t that names the pure-noise endpoint of the schedule.
inline constexpr double noise_endpoint_time() { return 0.0; }

// Coefficients (c_clean, c_noise) of the interpolant at time t.
inline std::pair<double, double> interpolant_coefficients(const ScheduleSpec& s, double t) {
    double sg = sigma_at(s, t);
    double denom = std::sqrt(1.0 + sg * sg);
    return {1.0 / denom, sg / denom};
}

template <typename T>
Tensor<T> interpolate_state(const ScheduleSpec& s, const Tensor<T>& x0, const Tensor<T>& eps, double t) {
    if (!x0.same_shape(eps))
        throw ShapeError("interpolate: x0 " + x0.shape_str() + " vs eps " + eps.shape_str());
    auto [cc, cn] = interpolant_coefficients(s, t);
    Tensor<T> out(x0.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = static_cast<T>(cc) * x0[i] + static_cast<T>(cn) * eps[i];
    return out;
}

// Solves x(t_noise) = z for eps, so interpolate_state(x0, eps, t_noise)
// reconstructs z up to roundoff.
template <typename T>
Tensor<T> recover_epsilon(const ScheduleSpec& s, const Tensor<T>& z, const Tensor<T>& x0) {
    if (!z.same_shape(x0))
        throw ShapeError("recover_epsilon: z " + z.shape_str() + " vs x0 " + x0.shape_str());
    auto [cc, cn] = interpolant_coefficients(s, noise_endpoint_time());
    Tensor<T> out(z.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = (z[i] - static_cast<T>(cc) * x0[i]) / static_cast<T>(cn);
    return out;
}

// Layer/time pairing for intermediate supervision. Layers are strictly
// increasing in [1, depth]; times strictly decreasing with the final entry 0
// (the clean end in the listed orientation, where listed time 0 = clean).
struct Mi1Plan {
    std::vector<int> layers;
    std::vector<double> times;

    void validate(std::optional<int> depth = std::nullopt) const {
        if (layers.empty() || layers.size() != times.size())
            throw ConfigError("mi1 plan: need equal, nonempty layer and time lists");
        for (size_t i = 0; i < layers.size(); ++i) {
            if (layers[i] < 1) throw ConfigError("mi1 plan: layer indices are 1-based");
            if (i && layers[i] <= layers[i - 1])
                throw ConfigError("mi1 plan: layers must be strictly increasing");
            if (!(times[i] >= 0.0 && times[i] <= 1.0))
                throw ConfigError("mi1 plan: times must lie in [0,1]");
            if (i && times[i] >= times[i - 1])
                throw ConfigError("mi1 plan: times must be strictly decreasing");
        }
        if (times.back() != 0.0) throw ConfigError("mi1 plan: last time must be 0");
        if (depth) {
            if (layers.back() != *depth)
                throw ConfigError("mi1 plan: last layer must be the final layer " + std::to_string(*depth));
        }
    }
};

// Intermediate targets: the listed times use the orientation where 0 is the
// clean end, while the schedule's t runs from noise (0) to clean (1), so a
// listed time t maps to schedule time u = 1 - t. The last target (listed time
// 0, u = 1) is x0 up to the sigma_min floor.
template <typename T>
std::vector<std::pair<int, Tensor<T>>> mi1_targets(const ScheduleSpec& s, const Mi1Plan& plan,
                                                   const Tensor<T>& z, const Tensor<T>& x0) {
    plan.validate();
    Tensor<T> eps = recover_epsilon(s, z, x0);
    std::vector<std::pair<int, Tensor<T>>> out;
    out.reserve(plan.layers.size());
    for (size_t i = 0; i < plan.layers.size(); ++i) {
        double u = 1.0 - plan.times[i];
        out.emplace_back(plan.layers[i], interpolate_state(s, x0, eps, u));
    }
    return out;
}

} // namespace ditforge
