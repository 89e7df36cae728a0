#pragma once

#include <span>

#include "vqlcmd/schedule.hpp"
#include "vqlcmd/tensor.hpp"

namespace vqlcmd {

// Per-step objective values; the weighted pieces satisfy
// total == recon + beta_dm * dm + beta_cm * cm.
struct LossBreakdown {
    double recon = 0.0;
    double dm = 0.0;
    double cm = 0.0;
    double total = 0.0;
    double vlb_diffusion = 0.0;  // diagnostic, never trained
    double prior_kl = 0.0;       // diagnostic, never trained
};

// Mean over tokens of -log softmax probability of the true token.
Tensor recon_loss(const Tensor& logits, std::span<const int> tokens);

// Mean squared error over all coordinates.
Tensor diffusion_loss(const Tensor& psi, const Tensor& psi_hat);

// -0.5 * snr'(t) * sum squared error; nonnegative since snr' < 0.
Tensor vlb_diffusion_loss(const Tensor& psi, const Tensor& psi_hat, double t,
                          const Schedule& sched);

// Mean over tokens of KL(softmax(teacher) || softmax(student)); the teacher
// side is treated as a constant.
Tensor cm_loss(const Tensor& teacher_logits, const Tensor& student_logits);

// Closed-form KL(N(alpha_1 psi, sigma_1^2 I) || N(0, I)) summed over
// coordinates, evaluated at t_max. Diagnostic only.
double prior_kl(const Tensor& psi, const Schedule& sched);
// Formula-level variant with explicit kernel scalars.
double prior_kl(const Tensor& psi, double alpha1, double sigma1_sq);

struct TotalLoss {
    Tensor total;  // differentiable
    LossBreakdown breakdown;
};

// recon + beta_dm * dm + beta_cm * cm, keeping the parts for logging.
TotalLoss total_loss(const Tensor& recon, const Tensor& dm, const Tensor& cm, double beta_dm,
                     double beta_cm);

}  // namespace vqlcmd
