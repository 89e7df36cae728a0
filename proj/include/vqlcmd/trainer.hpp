#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "vqlcmd/codebook.hpp"
#include "vqlcmd/denoiser.hpp"
#include "vqlcmd/losses.hpp"
#include "vqlcmd/schedule.hpp"

namespace vqlcmd {

struct TrainConfig {
    double beta_dm = 0.005;
    double beta_cm = 1.0;
    double drop_rate = 0.2;
    double eta = 0.99;  // EMA rate
    double lr = 1e-3;
    int batch = 32;
    long steps = 20000;
    std::uint64_t seed = 0;
    double cond_drop_prob = 0.1;  // classifier-free condition dropping
    // Noise schedule (surfaced as [schedule] config keys).
    double shift = 0.0;
    double t_min = 1e-5;
    double t_max = 1.0 - 1e-5;
    int log_interval = 100;
    long ckpt_interval = 0;  // 0 = only on demand
    bool freeze_codebook = false;  // fixed-embeddings ablation

    void validate() const;
    Schedule make_schedule() const { return Schedule(shift, t_min, t_max); }
};

struct AdamState {
    double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    long t = 0;
    std::vector<std::vector<float>> m, v;  // aligned with the learnable list
};

// Full training state: student, EMA teacher, codebook, optimizer, rngs.
struct TrainerState {
    DenoiserConfig dcfg;
    TrainConfig tcfg;
    Schedule sched;
    DenoiserParams theta;
    DenoiserParams theta_ema;
    Codebook codebook;
    AdamState adam;
    long step = 0;
    Rng rng;       // all training randomness
    Rng data_rng;  // dataset draws

    static TrainerState init(const DenoiserConfig& dcfg, const TrainConfig& tcfg);

    // Optimizer-visible parameters: theta then the codebook table.
    std::vector<NamedTensor> learnable();
    // Everything checkpointed: learnable plus both EMA copies.
    std::vector<NamedTensor> all_arrays();
};

// t ~ U(t_min, t_max), s ~ U(t_min, t); s <= t by construction.
std::pair<double, double> sample_times(const Schedule& sched, Rng& rng);

// Frozen per-step randomness; the loss is deterministic given these.
struct StepDraws {
    std::vector<double> t, s;      // one pair per sequence
    std::vector<float> eps;        // student noise, (B*M*D)
    std::vector<float> eps0;       // reconstruction noise, (B*M*D)
    std::vector<int> dropped;      // student input ids after random dropping
    std::vector<int> eff_classes;  // after condition dropping; empty = unconditional
};

StepDraws make_draws(TrainerState& st, std::span<const int> tokens,
                     std::span<const int> classes);

// Assembles the full objective for one batch under the given draws.
TotalLoss compute_loss(TrainerState& st, std::span<const int> tokens, const StepDraws& draws);

// One optimization step: draws, loss, backward, Adam, EMA updates.
LossBreakdown train_step(TrainerState& st, std::span<const int> tokens,
                         std::span<const int> classes = {});

// Bias-corrected Adam over the aligned parameter list.
void optimizer_step(std::span<NamedTensor> params, AdamState& adam, double lr);

struct FitCallbacks {
    std::function<void(long step, const LossBreakdown&, const CollapseMetrics&)> on_log;
    std::function<void(long step)> on_checkpoint;
};

// Runs train steps until st.step reaches tcfg.steps (resume-friendly).
void fit(TrainerState& st, const std::function<std::vector<int>(int, Rng&)>& next_batch,
         const FitCallbacks& callbacks = {});

}  // namespace vqlcmd
