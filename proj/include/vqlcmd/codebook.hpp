#pragma once

#include <span>
#include <vector>

#include "vqlcmd/rng.hpp"
#include "vqlcmd/tensor.hpp"

namespace vqlcmd {

struct CollapseMetrics {
    double mean_norm = 0.0;
    double mean_pairwise_distance = 0.0;
    double collapse_ratio = 0.0;  // pairwise distance / norm; smaller = more collapsed
};

struct DropResult {
    std::vector<int> tokens;      // ids with dropped positions replaced by the mask id
    std::vector<uint8_t> keep;    // 1 = kept, 0 = replaced
};

// Learnable embedding table for K categories plus one [mask] row (row K),
// with a non-learnable EMA shadow.
class Codebook {
public:
    Codebook() = default;
    Codebook(int k, int d, Tensor table, Tensor ema_table)
        : k_(k), d_(d), table_(std::move(table)), ema_table_(std::move(ema_table)) {}

    // Entries i.i.d. N(0, D^{-1/2}); the EMA copy starts equal.
    static Codebook init_gaussian(int k, int d, Rng& rng);

    int K() const { return k_; }
    int D() const { return d_; }
    int mask_id() const { return k_; }

    Tensor& table() { return table_; }
    const Tensor& table() const { return table_; }
    Tensor& ema_table() { return ema_table_; }
    const Tensor& ema_table() const { return ema_table_; }

    // Rows of table (or ema_table) at the given token ids.
    Tensor embed(std::span<const int> tokens, bool use_ema = false) const;

    // ema_table <- eta * ema_table + (1 - eta) * table, outside the tape.
    void ema_update(double eta);

    CollapseMetrics collapse_metrics() const;

private:
    int k_ = 0;
    int d_ = 0;
    Tensor table_;
    Tensor ema_table_;
};

// Independently replaces each token with the mask id with probability rate.
DropResult random_drop(std::span<const int> tokens, double rate, int mask_id, Rng& rng);

}  // namespace vqlcmd
