#include "vqlcmd/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace vqlcmd {

namespace {
constexpr double kPi = std::numbers::pi;
}

Schedule::Schedule(double shift, double t_min, double t_max)
    : shift_(shift), t_min_(t_min), t_max_(t_max) {
    if (!(0.0 < t_min_ && t_min_ < t_max_ && t_max_ < 1.0))
        throw ContractError("Schedule: need 0 < t_min < t_max < 1, got [" +
                            std::to_string(t_min_) + ", " + std::to_string(t_max_) + "]");
}

double Schedule::clamp_time(double t) const {
    return std::clamp(t, t_min_, t_max_);
}

double Schedule::log_snr(double t) const {
    const double tc = clamp_time(t);
    return -2.0 * std::log(std::tan(kPi * tc / 2.0)) + shift_;
}

double Schedule::snr(double t) const {
    return std::exp(log_snr(t));
}

double Schedule::snr_prime(double t) const {
    const double tc = clamp_time(t);
    // d/dt log snr = -2 pi / (2 tan(pi t/2) cos^2(pi t/2)) = -2 pi / sin(pi t)
    const double lambda_prime = -2.0 * kPi / std::sin(kPi * tc);
    return snr(tc) * lambda_prime;
}

Schedule::AlphaSigma Schedule::alpha_sigma(double t) const {
    const double lambda = log_snr(t);
    // sigmoid in a form stable for large |lambda|
    double alpha_sq;
    if (lambda >= 0.0)
        alpha_sq = 1.0 / (1.0 + std::exp(-lambda));
    else {
        const double e = std::exp(lambda);
        alpha_sq = e / (1.0 + e);
    }
    const double sigma_sq = 1.0 - alpha_sq;
    return {std::sqrt(alpha_sq), std::sqrt(sigma_sq)};
}

std::pair<double, double> Schedule::transition(double s, double t) const {
    const double sc = clamp_time(s), tc = clamp_time(t);
    if (sc > tc)
        throw OrderingError("transition: s=" + std::to_string(sc) + " > t=" + std::to_string(tc));
    const auto at = alpha_sigma(tc);
    const auto as = alpha_sigma(sc);
    const double alpha_ts = at.alpha / as.alpha;
    const double var_ts =
        std::max(0.0, at.sigma * at.sigma - alpha_ts * alpha_ts * as.sigma * as.sigma);
    return {alpha_ts, var_ts};
}

KernelCoeffs Schedule::posterior(double s, double t) const {
    const double sc = clamp_time(s), tc = clamp_time(t);
    if (sc > tc)
        throw OrderingError("posterior: s=" + std::to_string(sc) + " > t=" + std::to_string(tc));
    KernelCoeffs k;
    const auto [alpha_ts, var_ts] = transition(sc, tc);
    k.alpha_ts = alpha_ts;
    k.var_ts = var_ts;
    if (sc == tc) {
        k.post_coef_z = 1.0;
        k.post_coef_x = 0.0;
        k.post_var = 0.0;
        return k;
    }
    const auto at = alpha_sigma(tc);
    const auto as = alpha_sigma(sc);
    const double var_t = at.sigma * at.sigma;
    const double var_s = as.sigma * as.sigma;
    k.post_coef_z = alpha_ts * var_s / var_t;
    k.post_coef_x = as.alpha * var_ts / var_t;
    k.post_var = var_ts * var_s / var_t;
    return k;
}

std::vector<double> Schedule::time_grid(int n) const {
    if (n < 1) throw ContractError("time_grid: N must be >= 1");
    std::vector<double> grid(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i)
        grid[static_cast<std::size_t>(i)] =
            t_min_ + (t_max_ - t_min_) * static_cast<double>(i) / static_cast<double>(n);
    grid.front() = t_min_;
    grid.back() = t_max_;
    return grid;
}

}  // namespace vqlcmd
