#include "vqlcmd/codebook.hpp"

#include <cmath>
#include <string>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

Codebook Codebook::init_gaussian(int k, int d, Rng& rng) {
    if (k < 2) throw ContractError("Codebook: need K >= 2, got " + std::to_string(k));
    if (d < 1) throw ContractError("Codebook: need D >= 1, got " + std::to_string(d));
    const float stddev = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
    Tensor table = Tensor::randn({k + 1, d}, rng, stddev, /*requires_grad=*/true);
    Tensor ema = table.detach();
    return Codebook(k, d, std::move(table), std::move(ema));
}

Tensor Codebook::embed(std::span<const int> tokens, bool use_ema) const {
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] < 0 || tokens[i] > k_)
            throw IndexError("Codebook::embed: id " + std::to_string(tokens[i]) +
                             " at position " + std::to_string(i) + " outside [0, " +
                             std::to_string(k_) + "]");
    return embedding_lookup(use_ema ? ema_table_ : table_, tokens);
}

void Codebook::ema_update(double eta) {
    if (!(eta >= 0.0 && eta <= 1.0))
        throw ContractError("ema_update: eta must lie in [0, 1], got " + std::to_string(eta));
    auto ema = ema_table_.mutable_data();
    auto cur = table_.data();
    const float e = static_cast<float>(eta);
    const float one_minus = static_cast<float>(1.0 - eta);
    for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = e * ema[i] + one_minus * cur[i];
}

CollapseMetrics Codebook::collapse_metrics() const {
    CollapseMetrics m;
    const float* t = table_.data().data();
    const int k = k_, d = d_;
    double norm_sum = 0.0;
    for (int i = 0; i < k; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = t[static_cast<std::size_t>(i) * d + j];
            s += v * v;
        }
        norm_sum += std::sqrt(s);
    }
    m.mean_norm = norm_sum / k;
    double dist_sum = 0.0;
    int pairs = 0;
    for (int i = 0; i < k; ++i) {
        for (int j = i + 1; j < k; ++j) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) {
                const double diff = t[static_cast<std::size_t>(i) * d + c] -
                                    t[static_cast<std::size_t>(j) * d + c];
                s += diff * diff;
            }
            dist_sum += std::sqrt(s);
            ++pairs;
        }
    }
    m.mean_pairwise_distance = pairs > 0 ? dist_sum / pairs : 0.0;
    m.collapse_ratio = m.mean_norm > 0.0 ? m.mean_pairwise_distance / m.mean_norm : 0.0;
    return m;
}

DropResult random_drop(std::span<const int> tokens, double rate, int mask_id, Rng& rng) {
    if (!(rate >= 0.0 && rate <= 1.0))
        throw ContractError("random_drop: rate must lie in [0, 1], got " + std::to_string(rate));
    DropResult r;
    r.tokens.assign(tokens.begin(), tokens.end());
    r.keep.assign(tokens.size(), 1);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (rng.uniform() < rate) {
            r.tokens[i] = mask_id;
            r.keep[i] = 0;
        }
    }
    return r;
}

}  // namespace vqlcmd
