#pragma once

#include <vector>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

// Posterior/transition coefficients between two times s <= t.
struct KernelCoeffs {
    double alpha_ts = 1.0;   // alpha_{t|s}
    double var_ts = 0.0;     // sigma^2_{t|s}
    double post_coef_z = 1.0;  // weight on z_t in the posterior mean
    double post_coef_x = 0.0;  // weight on the clean embedding
    double post_var = 0.0;     // sigma^2(s, t)
};

// Shifted cosine variance-preserving schedule:
//   log snr(t) = -2 log tan(pi t / 2) + shift
// Times are clamped into [t_min, t_max] since the tangent degenerates at the
// endpoints. All quantities are computed in double precision.
class Schedule {
public:
    explicit Schedule(double shift = 0.0, double t_min = 1e-5, double t_max = 1.0 - 1e-5);

    double shift() const { return shift_; }
    double t_min() const { return t_min_; }
    double t_max() const { return t_max_; }

    double clamp_time(double t) const;

    // log SNR at clamped t.
    double log_snr(double t) const;
    // snr(t) = exp(log_snr(t)).
    double snr(double t) const;
    // d/dt snr(t); strictly negative on the clamped interval.
    double snr_prime(double t) const;

    struct AlphaSigma {
        double alpha;
        double sigma;
    };
    // alpha_t^2 = sigmoid(log_snr(t)), sigma_t^2 = 1 - alpha_t^2.
    AlphaSigma alpha_sigma(double t) const;

    // (alpha_{t|s}, sigma^2_{t|s}) for s <= t.
    std::pair<double, double> transition(double s, double t) const;

    // Full posterior q(z_s | z_t, x) coefficients for s <= t.
    KernelCoeffs posterior(double s, double t) const;

    // N+1 uniformly spaced times from t_min to t_max.
    std::vector<double> time_grid(int n) const;

private:
    double shift_;
    double t_min_;
    double t_max_;
};

}  // namespace vqlcmd
