#pragma once

#include <span>
#include <string>
#include <vector>

#include "vqlcmd/codebook.hpp"
#include "vqlcmd/rng.hpp"
#include "vqlcmd/tensor.hpp"

namespace vqlcmd {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct DenoiserConfig {
    int layers = 2;
    int heads = 4;
    int width = 64;
    int mlp_ratio = 2;
    int D = 16;           // diffused embedding dimension
    int K = 8;            // token categories
    int M = 16;           // tokens per sequence
    int num_classes = 0;  // 0 = unconditional; id num_classes is the null token
    float attn_dropout = 0.1f;
    bool use_pos_embed = true;

    // "desk", "paper-small" (15L/8H/512) or "paper-imagenet" (24L/16H/768).
    static DenoiserConfig preset(const std::string& name);
    void validate() const;
    int null_class() const { return num_classes; }
};

struct DenoiserLayer {
    Tensor ada1_w, ada1_b;  // cond -> (a, b) for the attention sublayer, zero-init
    Tensor qkv_w, qkv_b;
    Tensor attn_out_w, attn_out_b;
    Tensor ada2_w, ada2_b;  // cond -> (a, b) for the mlp sublayer, zero-init
    Tensor fc1_w, fc1_b;
    Tensor fc2_w, fc2_b;
};

// Bidirectional transformer predicting K logits per token from noisy
// embeddings, the time, and an optional class condition (AdaLN injection).
struct DenoiserParams {
    DenoiserConfig cfg;
    Tensor in_w, in_b;
    Tensor pos;          // fixed sinusoidal positional table, not learned
    Tensor class_table;  // (num_classes + 1) x width, conditional models only
    Tensor cond_w, cond_b;
    std::vector<DenoiserLayer> layers;
    Tensor ada_final_w, ada_final_b;
    Tensor head_w, head_b;

    static DenoiserParams init(const DenoiserConfig& cfg, Rng& rng);

    std::vector<NamedTensor> named();
    // Detached deep copy used as the EMA teacher.
    DenoiserParams clone_detached() const;
    // this <- eta * this + (1 - eta) * src, elementwise, outside the tape.
    void ema_update_from(DenoiserParams& src, double eta);
};

// Sinusoidal features of a scalar time in [0, 1]; sin block then cos block.
Tensor time_embed(double t, int width);

// (1 + a) * LayerNorm(h) + b with (a, b) from a linear projection of cond.
// h is (B*M) x W, cond is B x W (or 1 x W broadcast over all rows).
Tensor adaln(const Tensor& h, const Tensor& cond, const Tensor& proj_w, const Tensor& proj_b);

// Per-token logits for a batch of B sequences stacked as (B*M) x D.
// ts holds one time per sequence; classes is empty (unconditional model) or
// one id per sequence with cfg.num_classes acting as the null token.
Tensor denoiser_forward(const DenoiserParams& params, const Tensor& z, std::span<const double> ts,
                        std::span<const int> classes, bool train, Rng* rng);

// Single-sequence convenience wrapper (class_id < 0 means unconditional).
Tensor denoiser_forward(const DenoiserParams& params, const Tensor& z, double t,
                        int class_id = -1, bool train = false, Rng* rng = nullptr);

// Probability-weighted average over the first K codebook rows:
// out[i] = sum_k probs[i, k] e_k. Rows of probs must sum to 1 within 1e-5.
Tensor predicted_embedding(const Tensor& probs, const Codebook& cb);

}  // namespace vqlcmd
