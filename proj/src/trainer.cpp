#include "vqlcmd/trainer.hpp"

#include <cmath>
#include <sstream>
#include <string>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

void TrainConfig::validate() const {
    auto rate = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!rate(drop_rate) || !rate(eta) || !rate(cond_drop_prob))
        throw ContractError("TrainConfig: rates must lie in [0, 1]");
    if (!(lr > 0.0) && lr != 0.0) throw ContractError("TrainConfig: lr must be >= 0");
    if (batch < 1) throw ContractError("TrainConfig: batch must be >= 1");
    if (steps < 0) throw ContractError("TrainConfig: steps must be >= 0");
    if (!(beta_dm >= 0.0 && beta_cm >= 0.0))
        throw ContractError("TrainConfig: loss weights must be >= 0");
    if (!(0.0 < t_min && t_min < t_max && t_max < 1.0))
        throw ContractError("TrainConfig: need 0 < t_min < t_max < 1");
}

TrainerState TrainerState::init(const DenoiserConfig& dcfg, const TrainConfig& tcfg) {
    dcfg.validate();
    tcfg.validate();
    TrainerState st;
    st.dcfg = dcfg;
    st.tcfg = tcfg;
    st.sched = tcfg.make_schedule();
    st.rng = Rng(tcfg.seed);
    st.data_rng = Rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
    st.theta = DenoiserParams::init(dcfg, st.rng);
    st.theta_ema = st.theta.clone_detached();
    st.codebook = Codebook::init_gaussian(dcfg.K, dcfg.D, st.rng);
    const auto params = st.learnable();
    st.adam.m.resize(params.size());
    st.adam.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.adam.m[i].assign(params[i].tensor.numel(), 0.0f);
        st.adam.v[i].assign(params[i].tensor.numel(), 0.0f);
    }
    return st;
}

std::vector<NamedTensor> TrainerState::learnable() {
    std::vector<NamedTensor> out;
    for (auto& nt : theta.named()) out.push_back({"theta." + nt.name, nt.tensor});
    out.push_back({"codebook.table", codebook.table()});
    return out;
}

std::vector<NamedTensor> TrainerState::all_arrays() {
    std::vector<NamedTensor> out = learnable();
    for (auto& nt : theta_ema.named()) out.push_back({"theta_ema." + nt.name, nt.tensor});
    out.push_back({"codebook.ema_table", codebook.ema_table()});
    return out;
}

std::pair<double, double> sample_times(const Schedule& sched, Rng& rng) {
    const double t = rng.uniform(sched.t_min(), sched.t_max());
    const double s = rng.uniform(sched.t_min(), t);
    return {t, s};
}

StepDraws make_draws(TrainerState& st, std::span<const int> tokens,
                     std::span<const int> classes) {
    const int m = st.dcfg.M, d = st.dcfg.D;
    if (tokens.empty() || tokens.size() % static_cast<std::size_t>(m) != 0)
        throw ContractError("make_draws: token count is not a multiple of M");
    const int batch = static_cast<int>(tokens.size()) / m;
    StepDraws dr;
    dr.t.resize(static_cast<std::size_t>(batch));
    dr.s.resize(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        auto [t, s] = sample_times(st.sched, st.rng);
        dr.t[static_cast<std::size_t>(b)] = t;
        dr.s[static_cast<std::size_t>(b)] = s;
    }
    const std::size_t n = tokens.size() * static_cast<std::size_t>(d);
    dr.eps.resize(n);
    for (auto& e : dr.eps) e = static_cast<float>(st.rng.normal());
    dr.eps0.resize(n);
    for (auto& e : dr.eps0) e = static_cast<float>(st.rng.normal());
    dr.dropped = random_drop(tokens, st.tcfg.drop_rate, st.codebook.mask_id(), st.rng).tokens;
    if (!classes.empty()) {
        if (static_cast<int>(classes.size()) != batch)
            throw ContractError("make_draws: class count does not match batch");
        dr.eff_classes.assign(classes.begin(), classes.end());
        for (auto& c : dr.eff_classes)
            if (st.rng.uniform() < st.tcfg.cond_drop_prob) c = st.dcfg.null_class();
    }
    return dr;
}

namespace {

// alpha_t psi + sigma_t eps with per-sequence times, on the tape through psi.
Tensor noised(const Tensor& psi, std::span<const float> eps, std::span<const double> times,
              const Schedule& sched, int m, int d) {
    const int batch = static_cast<int>(times.size());
    std::vector<double> alphas(static_cast<std::size_t>(batch));
    std::vector<float> noise(eps.size());
    for (int b = 0; b < batch; ++b) {
        const auto as = sched.alpha_sigma(times[static_cast<std::size_t>(b)]);
        alphas[static_cast<std::size_t>(b)] = as.alpha;
        const std::size_t lo = static_cast<std::size_t>(b) * m * d;
        const std::size_t hi = lo + static_cast<std::size_t>(m) * d;
        for (std::size_t i = lo; i < hi; ++i)
            noise[i] = static_cast<float>(as.sigma * eps[i]);
    }
    Tensor noise_t = Tensor::from(psi.shape(), std::move(noise));
    return add(block_scale(psi, alphas), noise_t);
}

}  // namespace

TotalLoss compute_loss(TrainerState& st, std::span<const int> tokens, const StepDraws& draws) {
    const int m = st.dcfg.M, d = st.dcfg.D;
    const int batch = static_cast<int>(draws.t.size());
    const Schedule& sched = st.sched;

    // Student branch: noised dropped embeddings at per-sequence times t.
    Tensor psi_drop = st.codebook.embed(draws.dropped);
    Tensor z_t = noised(psi_drop, draws.eps, draws.t, sched, m, d);
    Tensor student_logits =
        denoiser_forward(st.theta, z_t, draws.t, draws.eff_classes, /*train=*/true, &st.rng);

    // Teacher branch: one DDIM step back along the PF-ODE under EMA
    // parameters and undropped EMA embeddings, all gradient-blocked.
    Tensor teacher_logits;
    {
        NoGradGuard ng;
        Tensor psi_bar = st.codebook.embed(tokens, /*use_ema=*/true);
        const float* zt = z_t.data().data();
        const float* pb = psi_bar.data().data();
        std::vector<float> zbar(z_t.numel());
        for (int b = 0; b < batch; ++b) {
            const auto at = sched.alpha_sigma(draws.t[static_cast<std::size_t>(b)]);
            const auto as = sched.alpha_sigma(draws.s[static_cast<std::size_t>(b)]);
            const double ratio = as.sigma / at.sigma;
            const std::size_t lo = static_cast<std::size_t>(b) * m * d;
            const std::size_t hi = lo + static_cast<std::size_t>(m) * d;
            for (std::size_t i = lo; i < hi; ++i)
                zbar[i] = static_cast<float>(as.alpha * pb[i] +
                                             ratio * (zt[i] - at.alpha * pb[i]));
        }
        Tensor zbar_t = Tensor::from(z_t.shape(), std::move(zbar));
        teacher_logits = denoiser_forward(st.theta_ema, zbar_t, draws.s, draws.eff_classes,
                                          /*train=*/false, nullptr);
    }

    Tensor cm = cm_loss(teacher_logits, student_logits);

    Tensor probs = softmax_last(student_logits);
    Tensor psi_hat = predicted_embedding(probs, st.codebook);
    Tensor psi_full = st.codebook.embed(tokens);
    Tensor dm = diffusion_loss(psi_full, psi_hat);

    // Reconstruction branch: fresh low-noise draw of the undropped embeddings.
    std::vector<double> t0(static_cast<std::size_t>(batch), sched.t_min());
    Tensor z_0 = noised(psi_full, draws.eps0, t0, sched, m, d);
    Tensor recon_logits =
        denoiser_forward(st.theta, z_0, t0, draws.eff_classes, /*train=*/true, &st.rng);
    Tensor recon = recon_loss(recon_logits, tokens);

    TotalLoss tl = total_loss(recon, dm, cm, st.tcfg.beta_dm, st.tcfg.beta_cm);

    // VLB-weighted diffusion term and prior KL, diagnostics only.
    {
        const float* pf = psi_full.data().data();
        const float* ph = psi_hat.data().data();
        const auto a1 = sched.alpha_sigma(sched.t_max());
        const double sigma1_sq = a1.sigma * a1.sigma;
        const double log_var = std::log(sigma1_sq);
        double vlb = 0.0, prior = 0.0;
        for (int b = 0; b < batch; ++b) {
            const std::size_t lo = static_cast<std::size_t>(b) * m * d;
            const std::size_t hi = lo + static_cast<std::size_t>(m) * d;
            double sse = 0.0, kl = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                const double diff = static_cast<double>(pf[i]) - ph[i];
                sse += diff * diff;
                const double mean = a1.alpha * pf[i];
                kl += 0.5 * (mean * mean + sigma1_sq - 1.0 - log_var);
            }
            vlb += -0.5 * sched.snr_prime(draws.t[static_cast<std::size_t>(b)]) * sse;
            prior += kl;
        }
        tl.breakdown.vlb_diffusion = vlb / batch;
        tl.breakdown.prior_kl = prior / batch;
    }
    return tl;
}

void optimizer_step(std::span<NamedTensor> params, AdamState& adam, double lr) {
    if (adam.m.size() != params.size() || adam.v.size() != params.size())
        throw ContractError("optimizer_step: moment buffers misaligned with parameters");
    adam.t += 1;
    const double bc1 = 1.0 - std::pow(adam.b1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(adam.b2, static_cast<double>(adam.t));
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto data = params[p].tensor.mutable_data();
        auto grad = params[p].tensor.grad();
        auto& m = adam.m[p];
        auto& v = adam.v[p];
        if (m.size() != data.size())
            throw ContractError("optimizer_step: moment size mismatch for " + params[p].name);
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            if (!std::isfinite(g))
                throw NumericError("optimizer_step: non-finite gradient in " + params[p].name);
            m[i] = static_cast<float>(adam.b1 * m[i] + (1.0 - adam.b1) * g);
            v[i] = static_cast<float>(adam.b2 * v[i] + (1.0 - adam.b2) * g * g);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            data[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + adam.eps));
        }
    }
}

LossBreakdown train_step(TrainerState& st, std::span<const int> tokens,
                         std::span<const int> classes) {
    StepDraws draws = make_draws(st, tokens, classes);
    TotalLoss tl = compute_loss(st, tokens, draws);
    if (!std::isfinite(tl.breakdown.total)) {
        std::ostringstream os;
        os << "train_step: non-finite loss at step " << st.step + 1 << " (recon="
           << tl.breakdown.recon << " dm=" << tl.breakdown.dm << " cm=" << tl.breakdown.cm
           << ")";
        throw NumericError(os.str());
    }
    auto params = st.learnable();
    for (auto& p : params) p.tensor.zero_grad();
    backward(tl.total);
    if (st.tcfg.freeze_codebook) st.codebook.table().zero_grad();
    optimizer_step(params, st.adam, st.tcfg.lr);
    st.theta_ema.ema_update_from(st.theta, st.tcfg.eta);
    st.codebook.ema_update(st.tcfg.eta);
    st.step += 1;
    return tl.breakdown;
}

void fit(TrainerState& st, const std::function<std::vector<int>(int, Rng&)>& next_batch,
         const FitCallbacks& callbacks) {
    while (st.step < st.tcfg.steps) {
        std::vector<int> batch = next_batch(st.tcfg.batch, st.data_rng);
        LossBreakdown bd = train_step(st, batch);
        if (callbacks.on_log && st.tcfg.log_interval > 0 &&
            st.step % st.tcfg.log_interval == 0)
            callbacks.on_log(st.step, bd, st.codebook.collapse_metrics());
        if (callbacks.on_checkpoint && st.tcfg.ckpt_interval > 0 &&
            st.step % st.tcfg.ckpt_interval == 0 && st.step < st.tcfg.steps)
            callbacks.on_checkpoint(st.step);
    }
}

}  // namespace vqlcmd
