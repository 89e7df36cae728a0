#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vqlcmd/errors.hpp"
#include "vqlcmd/rng.hpp"

namespace vqlcmd {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorNode;

struct TensorData {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until touched by backward
    bool requires_grad = false;
    std::shared_ptr<TensorNode> node;  // producing op; null for leaves
    // Double-precision shadow of one-element results, carried through scalar
    // arithmetic so finite-difference oracles see past float resolution.
    double hi = 0.0;
    bool has_hi = false;
};

struct TensorNode {
    std::vector<std::shared_ptr<TensorData>> parents;
    // Reads out.grad and accumulates into the parents' grads.
    std::function<void(const TensorData& out)> backward;
};

// Dense row-major float32 tensor with an optional reverse-mode tape link.
// Copying a Tensor copies the handle, not the storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    std::size_t numel() const { return d_->data.size(); }
    // Rows/cols of a 2-d tensor (1-d counts as a single row).
    int rows() const;
    int cols() const;

    std::span<const float> data() const { return d_->data; }
    std::span<float> mutable_data() { return d_->data; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    // Gradient accumulated by backward(); empty span if never touched.
    std::span<const float> grad() const { return d_->grad; }
    std::span<float> mutable_grad();  // allocates zeros on first use
    void zero_grad();

    // Value of a one-element tensor.
    float item() const;
    // Value of a one-element tensor at double precision when the producing
    // chain tracked one (reductions and scalar arithmetic do).
    double item_hi() const;

    // Same values, cut loose from the tape; never requires grad.
    Tensor detach() const;

    std::shared_ptr<TensorData> ptr() const { return d_; }

    static Tensor wrap(std::shared_ptr<TensorData> d) {
        Tensor t;
        t.d_ = std::move(d);
        return t;
    }

private:
    std::shared_ptr<TensorData> d_;
};

// Grad recording is on by default; NoGradGuard turns it off for a scope
// (teacher targets, sampling).
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- elementwise / linear algebra ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor gelu(const Tensor& x);

// ---- rows/blocks ----
// Contiguous row range [start, start+count).
Tensor slice_rows(const Tensor& x, int start, int count);
// Contiguous column range of a 2-d tensor.
Tensor slice_cols(const Tensor& x, int start, int count);
// x has R rows, a has B rows with R % B == 0; row r combines with a[r / (R/B)].
Tensor block_add(const Tensor& x, const Tensor& a);
Tensor block_mul(const Tensor& x, const Tensor& a);
// Row r of x scaled by coeff[r / (R/B)] where B = coeff.size().
Tensor block_scale(const Tensor& x, std::span<const double> coeff);
// Row r of x plus p[r % p.rows] (positional-embedding tiling).
Tensor tile_add(const Tensor& x, const Tensor& p);

// ---- rowwise nonlinearities ----
Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
Tensor layer_norm_affine(const Tensor& h, const Tensor& gain, const Tensor& bias);

// ---- lookups and reductions ----
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// -mean_i log_probs[i, ids[i]]; log_probs is rows x K.
Tensor nll_rows(const Tensor& log_probs, std::span<const int> ids);

// Bidirectional multi-head self-attention over `batch` independent blocks of
// `tokens` rows each. q, k, v are (batch*tokens) x width with width % heads == 0.
// Dropout applies to the attention weights when train is true.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int tokens,
                 int heads, float dropout_rate, Rng* rng, bool train);

// Reverse-mode sweep from a scalar root. Grads of requires_grad leaves
// accumulate across calls; the tape is freed as it is consumed.
void backward(const Tensor& root);

// Max over all parameter coordinates of
// |analytic - central difference| / max(1e-8, |analytic| + |numeric|).
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps);

void check_finite(const Tensor& t, const std::string& what);

}  // namespace vqlcmd
