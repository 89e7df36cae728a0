#include "vqlcmd/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

StepMode step_mode_from_string(const std::string& s) {
    if (s == "ancestral") return StepMode::ancestral;
    if (s == "ddim") return StepMode::ddim;
    throw ConfigError("unknown step mode: " + s);
}

DecodeMode decode_mode_from_string(const std::string& s) {
    if (s == "sample") return DecodeMode::sample;
    if (s == "argmax") return DecodeMode::argmax;
    throw ConfigError("unknown decode mode: " + s);
}

std::string to_string(StepMode m) {
    return m == StepMode::ancestral ? "ancestral" : "ddim";
}

std::string to_string(DecodeMode m) {
    return m == DecodeMode::sample ? "sample" : "argmax";
}

void SampleConfig::validate() const {
    if (steps < 1) throw ContractError("SampleConfig: steps must be >= 1");
    if (guidance < 0.0) throw ContractError("SampleConfig: guidance must be >= 0");
}

Tensor ddim_step(const Tensor& z_t, const Tensor& psi_ref, double s, double t,
                 const Schedule& sched) {
    if (z_t.shape() != psi_ref.shape())
        throw ShapeError("ddim_step: shape mismatch " + shape_str(z_t.shape()) + " vs " +
                         shape_str(psi_ref.shape()));
    const double sc = sched.clamp_time(s), tc = sched.clamp_time(t);
    if (sc > tc)
        throw OrderingError("ddim_step: s=" + std::to_string(sc) + " > t=" + std::to_string(tc));
    if (sc == tc) return z_t.detach();
    const auto as = sched.alpha_sigma(sc);
    const auto at = sched.alpha_sigma(tc);
    const double ratio = as.sigma / at.sigma;
    const float* z = z_t.data().data();
    const float* psi = psi_ref.data().data();
    std::vector<float> out(z_t.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(as.alpha * psi[i] + ratio * (z[i] - at.alpha * psi[i]));
    return Tensor::from(z_t.shape(), std::move(out));
}

Tensor ancestral_step(const Tensor& z_t, const Tensor& psi_hat, double s, double t,
                      const Schedule& sched, Rng& rng) {
    if (z_t.shape() != psi_hat.shape())
        throw ShapeError("ancestral_step: shape mismatch " + shape_str(z_t.shape()) + " vs " +
                         shape_str(psi_hat.shape()));
    const KernelCoeffs k = sched.posterior(s, t);  // throws OrderingError when s > t
    const float* z = z_t.data().data();
    const float* psi = psi_hat.data().data();
    std::vector<float> out(z_t.numel());
    const double sd = std::sqrt(k.post_var);
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = k.post_coef_z * z[i] + k.post_coef_x * psi[i];
        if (k.post_var > 0.0) v += sd * rng.normal();
        out[i] = static_cast<float>(v);
    }
    return Tensor::from(z_t.shape(), std::move(out));
}

Tensor cfg_logits(const Tensor& cond, const Tensor& uncond, double omega) {
    if (cond.shape() != uncond.shape())
        throw ShapeError("cfg_logits: shape mismatch " + shape_str(cond.shape()) + " vs " +
                         shape_str(uncond.shape()));
    if (omega < 0.0) throw ContractError("cfg_logits: guidance must be >= 0");
    if (omega == 0.0) return cond;
    Tensor lc = log_softmax_last(cond);
    Tensor lu = log_softmax_last(uncond);
    Tensor combined = sub(scale(lc, 1.0 + omega), scale(lu, omega));
    return log_softmax_last(combined);
}

std::vector<int> decode(const Tensor& logits, DecodeMode mode, Rng& rng) {
    const int k = logits.cols();
    const int rows = static_cast<int>(logits.numel()) / k;
    const float* x = logits.data().data();
    std::vector<int> out(static_cast<std::size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        const float* row = x + static_cast<std::size_t>(i) * k;
        if (mode == DecodeMode::argmax) {
            int best = 0;
            for (int j = 1; j < k; ++j)
                if (row[j] > row[best]) best = j;
            out[static_cast<std::size_t>(i)] = best;
            continue;
        }
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double u = rng.uniform() * denom;
        double acc = 0.0;
        int pick = k - 1;
        for (int j = 0; j < k; ++j) {
            acc += std::exp(static_cast<double>(row[j]) - mx);
            if (u < acc) {
                pick = j;
                break;
            }
        }
        out[static_cast<std::size_t>(i)] = pick;
    }
    return out;
}

namespace {

double mean_row_entropy(const Tensor& probs) {
    const int k = probs.cols();
    const int rows = static_cast<int>(probs.numel()) / k;
    const float* p = probs.data().data();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.numel(); ++i)
        if (p[i] > 0.0f) acc -= static_cast<double>(p[i]) * std::log(static_cast<double>(p[i]));
    return acc / rows;
}

std::vector<int> run_chains(const DenoiserParams& params, const Codebook& cb,
                            const Schedule& sched, const SampleConfig& cfg, int n, int class_id,
                            Rng& rng, SampleTrace* trace) {
    NoGradGuard ng;
    const auto& dcfg = params.cfg;
    const int m = dcfg.M, d = dcfg.D;
    const bool guided = cfg.guidance > 0.0 && class_id >= 0 && dcfg.num_classes > 0;

    std::vector<double> ts(static_cast<std::size_t>(n));
    std::vector<int> cond_ids, null_ids;
    if (dcfg.num_classes > 0) {
        cond_ids.assign(static_cast<std::size_t>(n),
                        class_id >= 0 ? class_id : dcfg.null_class());
        null_ids.assign(static_cast<std::size_t>(n), dcfg.null_class());
    }

    auto logits_at = [&](const Tensor& z, double t) {
        std::fill(ts.begin(), ts.end(), t);
        std::span<const int> use = dcfg.num_classes > 0 ? std::span<const int>(cond_ids)
                                                        : std::span<const int>();
        Tensor logits = denoiser_forward(params, z, ts, use, /*train=*/false, nullptr);
        if (guided) {
            Tensor uncond =
                denoiser_forward(params, z, ts, null_ids, /*train=*/false, nullptr);
            logits = cfg_logits(logits, uncond, cfg.guidance);
        }
        return logits;
    };

    const std::vector<double> grid = sched.time_grid(cfg.steps);
    Tensor z = Tensor::randn({n * m, d}, rng);
    for (int step = cfg.steps; step >= 1; --step) {
        const double t = grid[static_cast<std::size_t>(step)];
        const double s = grid[static_cast<std::size_t>(step) - 1];
        Tensor logits = logits_at(z, t);
        Tensor probs = softmax_last(logits);
        if (trace) trace->mean_entropy.push_back(mean_row_entropy(probs));
        Tensor psi_hat = predicted_embedding(probs, cb);
        z = cfg.mode == StepMode::ddim ? ddim_step(z, psi_hat, s, t, sched)
                                       : ancestral_step(z, psi_hat, s, t, sched, rng);
        try {
            check_finite(z, "sampler state");
        } catch (const NumericError&) {
            throw NumericError("sampler state non-finite at step " + std::to_string(step));
        }
    }
    Tensor final_logits = logits_at(z, grid.front());
    if (trace) trace->mean_entropy.push_back(mean_row_entropy(softmax_last(final_logits)));
    return decode(final_logits, cfg.decode, rng);
}

}  // namespace

SampleResult sample(const DenoiserParams& params, const Codebook& cb, const Schedule& sched,
                    const SampleConfig& cfg, int class_id) {
    cfg.validate();
    Rng rng(cfg.seed);
    SampleResult res;
    res.tokens = run_chains(params, cb, sched, cfg, 1, class_id, rng,
                            cfg.record_trace ? &res.trace : nullptr);
    return res;
}

std::vector<int> sample_many(const DenoiserParams& params, const Codebook& cb,
                             const Schedule& sched, const SampleConfig& cfg, int n, int class_id,
                             int max_chunk) {
    cfg.validate();
    if (n < 1) throw ContractError("sample_many: n must be >= 1");
    if (max_chunk < 1) throw ContractError("sample_many: max_chunk must be >= 1");
    Rng rng(cfg.seed);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n) * params.cfg.M);
    for (int done = 0; done < n; done += max_chunk) {
        const int chunk = std::min(max_chunk, n - done);
        auto ids = run_chains(params, cb, sched, cfg, chunk, class_id, rng, nullptr);
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

}  // namespace vqlcmd
