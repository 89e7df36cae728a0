#pragma once

#include <span>
#include <string>
#include <vector>

#include "vqlcmd/rng.hpp"

namespace vqlcmd {

// Synthetic token distribution with exactly computable probabilities,
// standing in for an upstream tokenizer's codes.
struct SyntheticSpec {
    std::string kind;  // factorized | markov-grid | template-mixture
    int M = 0;
    int K = 0;

    // factorized: one probability row per position.
    std::vector<std::vector<double>> rows;
    // markov-grid: scan-order chain over the token grid.
    std::vector<double> init_dist;
    std::vector<std::vector<double>> transition;
    // template-mixture: uniform template pick, then i.i.d. corruption.
    std::vector<std::vector<int>> templates;
    double corrupt = 0.0;

    static SyntheticSpec factorized(std::vector<std::vector<double>> rows);
    static SyntheticSpec markov_grid(int m, std::vector<double> init,
                                     std::vector<std::vector<double>> transition);
    static SyntheticSpec template_mixture(int k, std::vector<std::vector<int>> templates,
                                          double corrupt);

    void validate() const;

    std::vector<int> sample_one(Rng& rng) const;
    // Exact log probability; -inf for impossible sequences.
    double true_logprob(std::span<const int> tokens) const;
    // Exact per-position marginals, M rows of K.
    std::vector<std::vector<double>> exact_marginals() const;
    // True when K^M fits under the enumeration limit.
    bool enumerable(std::size_t limit = 1000000) const;
};

// batch * M ids, i.i.d. sequences.
std::vector<int> gen_batch(const SyntheticSpec& spec, int batch, Rng& rng);

// 0.5 * sum |p - q|; both arguments must sum to 1 within 1e-6.
double tv_distance(std::span<const double> p, std::span<const double> q);

}  // namespace vqlcmd
