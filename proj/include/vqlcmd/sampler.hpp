#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vqlcmd/codebook.hpp"
#include "vqlcmd/denoiser.hpp"
#include "vqlcmd/schedule.hpp"

namespace vqlcmd {

enum class StepMode { ancestral, ddim };
enum class DecodeMode { sample, argmax };

StepMode step_mode_from_string(const std::string& s);
DecodeMode decode_mode_from_string(const std::string& s);
std::string to_string(StepMode m);
std::string to_string(DecodeMode m);

struct SampleConfig {
    int steps = 200;
    StepMode mode = StepMode::ancestral;
    double guidance = 0.0;  // omega >= 0
    DecodeMode decode = DecodeMode::sample;
    std::uint64_t seed = 0;
    bool record_trace = false;

    void validate() const;
};

// Mean per-token entropy of the predicted distribution at each step.
struct SampleTrace {
    std::vector<double> mean_entropy;
};

struct SampleResult {
    std::vector<int> tokens;
    SampleTrace trace;
};

// Deterministic PF-ODE Euler step from t down to s with endpoint prediction
// psi_ref: z_s = alpha_s psi + (sigma_s / sigma_t)(z_t - alpha_t psi).
Tensor ddim_step(const Tensor& z_t, const Tensor& psi_ref, double s, double t,
                 const Schedule& sched);

// Stochastic posterior step: mean from the kernel coefficients, variance
// sigma^2(s, t).
Tensor ancestral_step(const Tensor& z_t, const Tensor& psi_hat, double s, double t,
                      const Schedule& sched, Rng& rng);

// Classifier-free guidance on normalized log-probabilities:
// log_softmax((1 + omega) log p(x|z,y) - omega log p(x|z)). omega == 0
// returns the conditional logits untouched.
Tensor cfg_logits(const Tensor& cond, const Tensor& uncond, double omega);

// Per-row decode; the mask id never appears since logits only span K classes.
std::vector<int> decode(const Tensor& logits, DecodeMode mode, Rng& rng);

// Algorithm: start from z ~ N(0, I) at t_max, walk the time grid down with
// the chosen step mode, then decode at t_min. class_id < 0 = unconditional.
SampleResult sample(const DenoiserParams& params, const Codebook& cb, const Schedule& sched,
                    const SampleConfig& cfg, int class_id = -1);

// Batched variant: n independent chains advanced in lockstep (one network
// evaluation per step for the whole batch). Returns n * M token ids.
std::vector<int> sample_many(const DenoiserParams& params, const Codebook& cb,
                             const Schedule& sched, const SampleConfig& cfg, int n,
                             int class_id = -1, int max_chunk = 2048);

}  // namespace vqlcmd
