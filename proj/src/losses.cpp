#include "vqlcmd/losses.hpp"

#include <cmath>
#include <string>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

Tensor recon_loss(const Tensor& logits, std::span<const int> tokens) {
    return nll_rows(log_softmax_last(logits), tokens);
}

Tensor diffusion_loss(const Tensor& psi, const Tensor& psi_hat) {
    if (psi.shape() != psi_hat.shape())
        throw ShapeError("diffusion_loss: shape mismatch " + shape_str(psi.shape()) + " vs " +
                         shape_str(psi_hat.shape()));
    Tensor d = sub(psi, psi_hat);
    return mean_all(mul(d, d));
}

Tensor vlb_diffusion_loss(const Tensor& psi, const Tensor& psi_hat, double t,
                          const Schedule& sched) {
    if (psi.shape() != psi_hat.shape())
        throw ShapeError("vlb_diffusion_loss: shape mismatch " + shape_str(psi.shape()) + " vs " +
                         shape_str(psi_hat.shape()));
    Tensor d = sub(psi, psi_hat);
    return scale(sum_all(mul(d, d)), -0.5 * sched.snr_prime(t));
}

Tensor cm_loss(const Tensor& teacher_logits, const Tensor& student_logits) {
    if (teacher_logits.shape() != student_logits.shape())
        throw ShapeError("cm_loss: shape mismatch " + shape_str(teacher_logits.shape()) + " vs " +
                         shape_str(student_logits.shape()));
    const int k = teacher_logits.cols();
    const int rows = static_cast<int>(teacher_logits.numel()) / k;

    // Teacher probabilities and entropy term, outside the tape.
    Tensor tp;
    double teacher_term = 0.0;  // (1/rows) sum_i sum_k p ln p
    {
        NoGradGuard ng;
        Tensor tlp = log_softmax_last(teacher_logits);
        tp = softmax_last(teacher_logits);
        const float* p = tp.data().data();
        const float* lp = tlp.data().data();
        double acc = 0.0;
        for (std::size_t i = 0; i < tp.numel(); ++i) acc += static_cast<double>(p[i]) * lp[i];
        teacher_term = acc / rows;
    }
    Tensor ls = log_softmax_last(student_logits);
    Tensor cross = scale(sum_all(mul(tp, ls)), -1.0 / rows);
    return add_const(cross, teacher_term);
}

double prior_kl(const Tensor& psi, double alpha1, double sigma1_sq) {
    double kl = 0.0;
    const double log_var = std::log(sigma1_sq);
    for (float v : psi.data()) {
        const double mean = alpha1 * static_cast<double>(v);
        kl += 0.5 * (mean * mean + sigma1_sq - 1.0 - log_var);
    }
    return kl;
}

double prior_kl(const Tensor& psi, const Schedule& sched) {
    const auto as = sched.alpha_sigma(sched.t_max());
    return prior_kl(psi, as.alpha, as.sigma * as.sigma);
}

TotalLoss total_loss(const Tensor& recon, const Tensor& dm, const Tensor& cm, double beta_dm,
                     double beta_cm) {
    const double r = recon.item_hi(), d = dm.item_hi(), c = cm.item_hi();
    if (!std::isfinite(r)) throw NumericError("total_loss: recon is not finite");
    if (!std::isfinite(d)) throw NumericError("total_loss: dm is not finite");
    if (!std::isfinite(c)) throw NumericError("total_loss: cm is not finite");
    TotalLoss out;
    out.total = add(add(recon, scale(dm, beta_dm)), scale(cm, beta_cm));
    out.breakdown.recon = r;
    out.breakdown.dm = d;
    out.breakdown.cm = c;
    out.breakdown.total = out.total.item_hi();
    return out;
}

}  // namespace vqlcmd
