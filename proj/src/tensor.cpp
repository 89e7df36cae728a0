#include "vqlcmd/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace vqlcmd {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::shared_ptr<TensorData> alloc(Shape shape, std::vector<float> vals) {
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->data = std::move(vals);
    return d;
}

}  // namespace

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    auto d = alloc(std::move(shape), std::vector<float>(n, 0.0f));
    d->requires_grad = requires_grad;
    return wrap(std::move(d));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    auto d = alloc(std::move(shape), std::vector<float>(n, value));
    d->requires_grad = requires_grad;
    return wrap(std::move(d));
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    auto d = alloc(std::move(shape), std::move(data));
    d->requires_grad = requires_grad;
    return wrap(std::move(d));
}

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal() * stddev);
    auto d = alloc(std::move(shape), std::move(v));
    d->requires_grad = requires_grad;
    return wrap(std::move(d));
}

int Tensor::rows() const {
    if (ndim() == 1) return 1;
    if (ndim() == 2) return d_->shape[0];
    throw ShapeError("rows(): tensor has rank " + std::to_string(ndim()));
}

int Tensor::cols() const {
    if (ndim() == 1) return d_->shape[0];
    if (ndim() == 2) return d_->shape[1];
    throw ShapeError("cols(): tensor has rank " + std::to_string(ndim()));
}

std::span<float> Tensor::mutable_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0f);
    return d_->grad;
}

void Tensor::zero_grad() {
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (!defined() || numel() != 1)
        throw ContractError("item(): tensor is not a scalar");
    return d_->data[0];
}

Tensor Tensor::detach() const {
    auto d = alloc(d_->shape, d_->data);
    return wrap(std::move(d));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

namespace {

bool tape_wanted(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

void attach(Tensor& out, std::vector<std::shared_ptr<TensorData>> parents,
            std::function<void(const TensorData&)> fn) {
    out.ptr()->requires_grad = true;
    auto node = std::make_shared<TensorNode>();
    node->parents = std::move(parents);
    node->backward = std::move(fn);
    out.ptr()->node = std::move(node);
}

float* grad_buf(const std::shared_ptr<TensorData>& p) {
    if (p->grad.empty()) p->grad.assign(p->data.size(), 0.0f);
    return p->grad.data();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// Tiny row-major matmul helpers for the attention blocks (strided views).
void mm_nn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c,
           int ldc, bool accum) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (!accum)
            for (int j = 0; j < n; ++j) crow[j] = 0.0f;
        const float* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
        for (int l = 0; l < k; ++l) {
            const float av = arow[l];
            const float* brow = b + static_cast<std::ptrdiff_t>(l) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c = a * b^T where b is n x k row-major.
void mm_nt(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c,
           int ldc, bool accum) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::ptrdiff_t>(i) * lda;
        float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<std::ptrdiff_t>(j) * ldb;
            float s = accum ? crow[j] : 0.0f;
            for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] = s;
        }
    }
}

// c = a^T * b where a is k x m row-major.
void mm_tn(int m, int n, int k, const float* a, int lda, const float* b, int ldb, float* c,
           int ldc, bool accum) {
    if (!accum)
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) c[static_cast<std::ptrdiff_t>(i) * ldc + j] = 0.0f;
    for (int l = 0; l < k; ++l) {
        const float* arow = a + static_cast<std::ptrdiff_t>(l) * lda;
        const float* brow = b + static_cast<std::ptrdiff_t>(l) * ldb;
        for (int i = 0; i < m; ++i) {
            const float av = arow[i];
            float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

double Tensor::item_hi() const {
    if (!defined() || numel() != 1) throw ContractError("item_hi(): tensor is not a scalar");
    return d_->has_hi ? d_->hi : static_cast<double>(d_->data[0]);
}

namespace {

void set_hi(Tensor& t, double v) {
    t.ptr()->hi = v;
    t.ptr()->has_hi = true;
}

bool scalar_like(const Tensor& t) { return t.defined() && t.numel() == 1; }

}  // namespace

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i];
    Tensor r = Tensor::wrap(alloc(a.shape(), std::move(out)));
    if (scalar_like(a)) set_hi(r, a.item_hi() + b.item_hi());
    if (tape_wanted({&a, &b})) {
        auto da = a.ptr(), db = b.ptr();
        attach(r, {da, db}, [da, db](const TensorData& o) {
            const float* g = o.grad.data();
            if (da->requires_grad) {
                float* ga = grad_buf(da);
                for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
            }
            if (db->requires_grad) {
                float* gb = grad_buf(db);
                for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i];
    Tensor r = Tensor::wrap(alloc(a.shape(), std::move(out)));
    if (scalar_like(a)) set_hi(r, a.item_hi() - b.item_hi());
    if (tape_wanted({&a, &b})) {
        auto da = a.ptr(), db = b.ptr();
        attach(r, {da, db}, [da, db](const TensorData& o) {
            const float* g = o.grad.data();
            if (da->requires_grad) {
                float* ga = grad_buf(da);
                for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
            }
            if (db->requires_grad) {
                float* gb = grad_buf(db);
                for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    const float* pa = a.data().data();
    const float* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i];
    Tensor r = Tensor::wrap(alloc(a.shape(), std::move(out)));
    if (scalar_like(a)) set_hi(r, a.item_hi() * b.item_hi());
    if (tape_wanted({&a, &b})) {
        auto da = a.ptr(), db = b.ptr();
        attach(r, {da, db}, [da, db](const TensorData& o) {
            const float* g = o.grad.data();
            if (da->requires_grad) {
                float* ga = grad_buf(da);
                for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i] * db->data[i];
            }
            if (db->requires_grad) {
                float* gb = grad_buf(db);
                for (std::size_t i = 0; i < o.grad.size(); ++i) gb[i] += g[i] * da->data[i];
            }
        });
    }
    return r;
}

Tensor scale(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    const float* pa = a.data().data();
    const float cf = static_cast<float>(c);
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * cf;
    Tensor r = Tensor::wrap(alloc(a.shape(), std::move(out)));
    if (scalar_like(a)) set_hi(r, a.item_hi() * c);
    if (tape_wanted({&a})) {
        auto da = a.ptr();
        attach(r, {da}, [da, cf](const TensorData& o) {
            if (!da->requires_grad) return;
            float* ga = grad_buf(da);
            const float* g = o.grad.data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i] * cf;
        });
    }
    return r;
}

Tensor add_const(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    std::vector<float> out(n);
    const float* pa = a.data().data();
    const float cf = static_cast<float>(c);
    for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + cf;
    Tensor r = Tensor::wrap(alloc(a.shape(), std::move(out)));
    if (scalar_like(a)) set_hi(r, a.item_hi() + c);
    if (tape_wanted({&a})) {
        auto da = a.ptr();
        attach(r, {da}, [da](const TensorData& o) {
            if (!da->requires_grad) return;
            float* ga = grad_buf(da);
            const float* g = o.grad.data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += g[i];
        });
    }
    return r;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() > 2 || b.ndim() != 2)
        throw ShapeError("matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = a.rows(), k = a.cols();
    const int kb = b.rows(), n = b.cols();
    if (k != kb)
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<float> out(static_cast<std::size_t>(m) * n, 0.0f);
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, a.data().data(), k,
                b.data().data(), n, 0.0f, out.data(), n);
    Tensor r = Tensor::wrap(alloc({m, n}, std::move(out)));
    if (tape_wanted({&a, &b})) {
        auto da = a.ptr(), db = b.ptr();
        attach(r, {da, db}, [da, db, m, n, k](const TensorData& o) {
            const float* g = o.grad.data();
            if (da->requires_grad) {
                // dA += g . B^T
                cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0f, g, n,
                            db->data.data(), n, 1.0f, grad_buf(da), k);
            }
            if (db->requires_grad) {
                // dB += A^T . g
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0f,
                            da->data.data(), k, g, n, 1.0f, grad_buf(db), n);
            }
        });
    }
    return r;
}

Tensor gelu(const Tensor& x) {
    const std::size_t n = x.numel();
    std::vector<float> out(n);
    const float* px = x.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = px[i];
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
    Tensor r = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(r, {dx}, [dx](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float* g = o.grad.data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const double v = dx->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * static_cast<float>(cdf + v * pdf);
            }
        });
    }
    return r;
}

// ---- rows/blocks ----

Tensor slice_rows(const Tensor& x, int start, int count) {
    const int r = x.rows(), c = x.cols();
    if (start < 0 || count < 1 || start + count > r)
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
    std::vector<float> out(static_cast<std::size_t>(count) * c);
    std::memcpy(out.data(), x.data().data() + static_cast<std::size_t>(start) * c,
                out.size() * sizeof(float));
    Tensor res = Tensor::wrap(alloc({count, c}, std::move(out)));
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(res, {dx}, [dx, start, c](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx) + static_cast<std::size_t>(start) * c;
            const float* g = o.grad.data();
            for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += g[i];
        });
    }
    return res;
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    const int r = x.rows(), c = x.cols();
    if (start < 0 || count < 1 || start + count > c)
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_str(x.shape()));
    std::vector<float> out(static_cast<std::size_t>(r) * count);
    const float* px = x.data().data();
    for (int i = 0; i < r; ++i)
        std::memcpy(out.data() + static_cast<std::size_t>(i) * count,
                    px + static_cast<std::size_t>(i) * c + start,
                    static_cast<std::size_t>(count) * sizeof(float));
    Tensor res = Tensor::wrap(alloc({r, count}, std::move(out)));
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(res, {dx}, [dx, start, count, c, r](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float* g = o.grad.data();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < count; ++j)
                    gx[static_cast<std::size_t>(i) * c + start + j] +=
                        g[static_cast<std::size_t>(i) * count + j];
        });
    }
    return res;
}

namespace {

int block_count(const Tensor& x, const Tensor& a, const char* op) {
    const int r = x.rows(), c = x.cols();
    const int br = a.rows(), bc = a.cols();
    if (bc != c || br < 1 || r % br != 0)
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " does not tile " +
                         shape_str(x.shape()));
    return br;
}

}  // namespace

Tensor block_add(const Tensor& x, const Tensor& a) {
    const int nblocks = block_count(x, a, "block_add");
    const int r = x.rows(), c = x.cols();
    const int rows_per = r / nblocks;
    std::vector<float> out(x.numel());
    const float* px = x.data().data();
    const float* pa = a.data().data();
    for (int i = 0; i < r; ++i) {
        const float* arow = pa + static_cast<std::size_t>(i / rows_per) * c;
        const float* xrow = px + static_cast<std::size_t>(i) * c;
        float* orow = out.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) orow[j] = xrow[j] + arow[j];
    }
    Tensor res = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x, &a})) {
        auto dx = x.ptr(), da = a.ptr();
        attach(res, {dx, da}, [dx, da, r, c, rows_per](const TensorData& o) {
            const float* g = o.grad.data();
            if (dx->requires_grad) {
                float* gx = grad_buf(dx);
                for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += g[i];
            }
            if (da->requires_grad) {
                float* ga = grad_buf(da);
                for (int i = 0; i < r; ++i) {
                    float* garow = ga + static_cast<std::size_t>(i / rows_per) * c;
                    const float* grow = g + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) garow[j] += grow[j];
                }
            }
        });
    }
    return res;
}

Tensor block_mul(const Tensor& x, const Tensor& a) {
    const int nblocks = block_count(x, a, "block_mul");
    const int r = x.rows(), c = x.cols();
    const int rows_per = r / nblocks;
    std::vector<float> out(x.numel());
    const float* px = x.data().data();
    const float* pa = a.data().data();
    for (int i = 0; i < r; ++i) {
        const float* arow = pa + static_cast<std::size_t>(i / rows_per) * c;
        const float* xrow = px + static_cast<std::size_t>(i) * c;
        float* orow = out.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) orow[j] = xrow[j] * arow[j];
    }
    Tensor res = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x, &a})) {
        auto dx = x.ptr(), da = a.ptr();
        attach(res, {dx, da}, [dx, da, r, c, rows_per](const TensorData& o) {
            const float* g = o.grad.data();
            if (dx->requires_grad) {
                float* gx = grad_buf(dx);
                for (int i = 0; i < r; ++i) {
                    const float* arow = da->data.data() + static_cast<std::size_t>(i / rows_per) * c;
                    for (int j = 0; j < c; ++j)
                        gx[static_cast<std::size_t>(i) * c + j] +=
                            g[static_cast<std::size_t>(i) * c + j] * arow[j];
                }
            }
            if (da->requires_grad) {
                float* ga = grad_buf(da);
                for (int i = 0; i < r; ++i) {
                    float* garow = ga + static_cast<std::size_t>(i / rows_per) * c;
                    const float* xrow = dx->data.data() + static_cast<std::size_t>(i) * c;
                    const float* grow = g + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) garow[j] += grow[j] * xrow[j];
                }
            }
        });
    }
    return res;
}

Tensor block_scale(const Tensor& x, std::span<const double> coeff) {
    const int r = x.rows(), c = x.cols();
    const int nblocks = static_cast<int>(coeff.size());
    if (nblocks < 1 || r % nblocks != 0)
        throw ShapeError("block_scale: " + std::to_string(nblocks) + " coefficients do not tile " +
                         shape_str(x.shape()));
    const int rows_per = r / nblocks;
    std::vector<float> out(x.numel());
    const float* px = x.data().data();
    for (int i = 0; i < r; ++i) {
        const float cf = static_cast<float>(coeff[static_cast<std::size_t>(i / rows_per)]);
        const float* xrow = px + static_cast<std::size_t>(i) * c;
        float* orow = out.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) orow[j] = xrow[j] * cf;
    }
    Tensor res = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        std::vector<double> cvec(coeff.begin(), coeff.end());
        attach(res, {dx}, [dx, cvec = std::move(cvec), r, c, rows_per](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float* g = o.grad.data();
            for (int i = 0; i < r; ++i) {
                const float cf = static_cast<float>(cvec[static_cast<std::size_t>(i / rows_per)]);
                for (int j = 0; j < c; ++j)
                    gx[static_cast<std::size_t>(i) * c + j] +=
                        g[static_cast<std::size_t>(i) * c + j] * cf;
            }
        });
    }
    return res;
}

Tensor tile_add(const Tensor& x, const Tensor& p) {
    const int r = x.rows(), c = x.cols();
    const int pr = p.rows(), pc = p.cols();
    if (pc != c || pr < 1 || r % pr != 0)
        throw ShapeError("tile_add: " + shape_str(p.shape()) + " does not tile " +
                         shape_str(x.shape()));
    std::vector<float> out(x.numel());
    const float* px = x.data().data();
    const float* pp = p.data().data();
    for (int i = 0; i < r; ++i) {
        const float* prow = pp + static_cast<std::size_t>(i % pr) * c;
        const float* xrow = px + static_cast<std::size_t>(i) * c;
        float* orow = out.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) orow[j] = xrow[j] + prow[j];
    }
    Tensor res = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x, &p})) {
        auto dx = x.ptr(), dp = p.ptr();
        attach(res, {dx, dp}, [dx, dp, r, c, pr](const TensorData& o) {
            const float* g = o.grad.data();
            if (dx->requires_grad) {
                float* gx = grad_buf(dx);
                for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += g[i];
            }
            if (dp->requires_grad) {
                float* gp = grad_buf(dp);
                for (int i = 0; i < r; ++i) {
                    float* gprow = gp + static_cast<std::size_t>(i % pr) * c;
                    const float* grow = g + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) gprow[j] += grow[j];
                }
            }
        });
    }
    return res;
}

// ---- rowwise nonlinearities ----

namespace {

void rowwise_softmax(const float* in, float* out, int rows, int k, bool log_form,
                     const char* op) {
    for (int i = 0; i < rows; ++i) {
        const float* x = in + static_cast<std::size_t>(i) * k;
        float* y = out + static_cast<std::size_t>(i) * k;
        float mx = x[0];
        for (int j = 0; j < k; ++j) {
            if (!std::isfinite(x[j]))
                throw NumericError(std::string(op) + ": non-finite input at row " +
                                   std::to_string(i));
            mx = std::max(mx, x[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(x[j]) - mx);
        if (log_form) {
            const double log_denom = std::log(denom);
            for (int j = 0; j < k; ++j)
                y[j] = static_cast<float>((static_cast<double>(x[j]) - mx) - log_denom);
        } else {
            for (int j = 0; j < k; ++j)
                y[j] = static_cast<float>(std::exp(static_cast<double>(x[j]) - mx) / denom);
        }
    }
}

}  // namespace

Tensor softmax_last(const Tensor& x) {
    const int k = x.cols();
    const int rows = static_cast<int>(x.numel()) / k;
    if (k < 1) throw ShapeError("softmax_last: empty last dimension");
    std::vector<float> out(x.numel());
    rowwise_softmax(x.data().data(), out.data(), rows, k, false, "softmax_last");
    Tensor res = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(res, {dx}, [dx, rows, k](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float* g = o.grad.data();
            const float* y = o.data.data();
            for (int i = 0; i < rows; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * k;
                double dot = 0.0;
                for (int j = 0; j < k; ++j) dot += static_cast<double>(g[off + j]) * y[off + j];
                for (int j = 0; j < k; ++j)
                    gx[off + j] += y[off + j] * (g[off + j] - static_cast<float>(dot));
            }
        });
    }
    return res;
}

Tensor log_softmax_last(const Tensor& x) {
    const int k = x.cols();
    const int rows = static_cast<int>(x.numel()) / k;
    if (k < 1) throw ShapeError("log_softmax_last: empty last dimension");
    std::vector<float> out(x.numel());
    rowwise_softmax(x.data().data(), out.data(), rows, k, true, "log_softmax_last");
    Tensor res = Tensor::wrap(alloc(x.shape(), std::move(out)));
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(res, {dx}, [dx, rows, k](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float* g = o.grad.data();
            const float* y = o.data.data();
            for (int i = 0; i < rows; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * k;
                double gsum = 0.0;
                for (int j = 0; j < k; ++j) gsum += g[off + j];
                for (int j = 0; j < k; ++j)
                    gx[off + j] += g[off + j] - static_cast<float>(gsum * std::exp(
                                                    static_cast<double>(y[off + j])));
            }
        });
    }
    return res;
}

Tensor layer_norm_affine(const Tensor& h, const Tensor& gain, const Tensor& bias) {
    const int w = h.cols();
    const int rows = static_cast<int>(h.numel()) / w;
    if (w < 2)
        throw ShapeError("layer_norm_affine: width " + std::to_string(w) + " < 2");
    if (gain.numel() != static_cast<std::size_t>(w) || bias.numel() != static_cast<std::size_t>(w))
        throw ShapeError("layer_norm_affine: gain/bias length mismatch for width " +
                         std::to_string(w));
    constexpr double kEps = 1e-5;
    std::vector<float> out(h.numel());
    auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * 2);
    const float* ph = h.data().data();
    const float* pg = gain.data().data();
    const float* pb = bias.data().data();
    for (int i = 0; i < rows; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * w;
        double mean = 0.0;
        for (int j = 0; j < w; ++j) mean += ph[off + j];
        mean /= w;
        double var = 0.0;
        for (int j = 0; j < w; ++j) {
            const double d = ph[off + j] - mean;
            var += d * d;
        }
        var /= w;
        const double invstd = 1.0 / std::sqrt(var + kEps);
        (*stats)[static_cast<std::size_t>(i) * 2] = mean;
        (*stats)[static_cast<std::size_t>(i) * 2 + 1] = invstd;
        for (int j = 0; j < w; ++j) {
            const double xhat = (ph[off + j] - mean) * invstd;
            out[off + j] = static_cast<float>(xhat * pg[j] + pb[j]);
        }
    }
    Tensor res = Tensor::wrap(alloc(h.shape(), std::move(out)));
    if (tape_wanted({&h, &gain, &bias})) {
        auto dh = h.ptr(), dg = gain.ptr(), db = bias.ptr();
        attach(res, {dh, dg, db}, [dh, dg, db, stats, rows, w](const TensorData& o) {
            const float* g = o.grad.data();
            for (int i = 0; i < rows; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * w;
                const double mean = (*stats)[static_cast<std::size_t>(i) * 2];
                const double invstd = (*stats)[static_cast<std::size_t>(i) * 2 + 1];
                if (dg->requires_grad || db->requires_grad) {
                    float* gg = dg->requires_grad ? grad_buf(dg) : nullptr;
                    float* gb = db->requires_grad ? grad_buf(db) : nullptr;
                    for (int j = 0; j < w; ++j) {
                        const double xhat = (dh->data[off + j] - mean) * invstd;
                        if (gg) gg[j] += static_cast<float>(g[off + j] * xhat);
                        if (gb) gb[j] += g[off + j];
                    }
                }
                if (dh->requires_grad) {
                    float* gh = grad_buf(dh);
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < w; ++j) {
                        const double xhat = (dh->data[off + j] - mean) * invstd;
                        const double dxhat = static_cast<double>(g[off + j]) * dg->data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for (int j = 0; j < w; ++j) {
                        const double xhat = (dh->data[off + j] - mean) * invstd;
                        const double dxhat = static_cast<double>(g[off + j]) * dg->data[j];
                        gh[off + j] += static_cast<float>(
                            invstd * (dxhat - sum_dxhat / w - xhat * sum_dxhat_xhat / w));
                    }
                }
            }
        });
    }
    return res;
}

// ---- lookups and reductions ----

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    const int rows = table.rows(), d = table.cols();
    const int m = static_cast<int>(ids.size());
    std::vector<float> out(static_cast<std::size_t>(m) * d);
    const float* pt = table.data().data();
    for (int i = 0; i < m; ++i) {
        const int id = ids[i];
        if (id < 0 || id >= rows)
            throw IndexError("embedding_lookup: id " + std::to_string(id) + " at position " +
                             std::to_string(i) + " outside table of " + std::to_string(rows) +
                             " rows");
        std::memcpy(out.data() + static_cast<std::size_t>(i) * d,
                    pt + static_cast<std::size_t>(id) * d,
                    static_cast<std::size_t>(d) * sizeof(float));
    }
    Tensor res = Tensor::wrap(alloc({m, d}, std::move(out)));
    if (tape_wanted({&table})) {
        auto dt = table.ptr();
        std::vector<int> idv(ids.begin(), ids.end());
        attach(res, {dt}, [dt, idv = std::move(idv), d](const TensorData& o) {
            if (!dt->requires_grad) return;
            float* gt = grad_buf(dt);
            const float* g = o.grad.data();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                float* trow = gt + static_cast<std::size_t>(idv[i]) * d;
                const float* grow = g + i * d;
                for (int j = 0; j < d; ++j) trow[j] += grow[j];
            }
        });
    }
    return res;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    Tensor res = Tensor::wrap(alloc({1}, {static_cast<float>(s)}));
    set_hi(res, s);
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(res, {dx}, [dx](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float g = o.grad[0];
            for (std::size_t i = 0; i < dx->data.size(); ++i) gx[i] += g;
        });
    }
    return res;
}

Tensor mean_all(const Tensor& x) {
    const double n = static_cast<double>(x.numel());
    double s = 0.0;
    for (float v : x.data()) s += v;
    Tensor res = Tensor::wrap(alloc({1}, {static_cast<float>(s / n)}));
    set_hi(res, s / n);
    if (tape_wanted({&x})) {
        auto dx = x.ptr();
        attach(res, {dx}, [dx, n](const TensorData& o) {
            if (!dx->requires_grad) return;
            float* gx = grad_buf(dx);
            const float g = static_cast<float>(o.grad[0] / n);
            for (std::size_t i = 0; i < dx->data.size(); ++i) gx[i] += g;
        });
    }
    return res;
}

Tensor nll_rows(const Tensor& log_probs, std::span<const int> ids) {
    const int rows = log_probs.rows(), k = log_probs.cols();
    if (static_cast<int>(ids.size()) != rows)
        throw ShapeError("nll_rows: " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(rows) + " rows");
    const float* lp = log_probs.data().data();
    double s = 0.0;
    for (int i = 0; i < rows; ++i) {
        const int id = ids[i];
        if (id < 0 || id >= k)
            throw IndexError("nll_rows: id " + std::to_string(id) + " at row " +
                             std::to_string(i) + " outside [0, " + std::to_string(k) + ")");
        s -= lp[static_cast<std::size_t>(i) * k + id];
    }
    const double val = s / rows;
    Tensor res = Tensor::wrap(alloc({1}, {static_cast<float>(val)}));
    set_hi(res, val);
    if (tape_wanted({&log_probs})) {
        auto dl = log_probs.ptr();
        std::vector<int> idv(ids.begin(), ids.end());
        attach(res, {dl}, [dl, idv = std::move(idv), rows, k](const TensorData& o) {
            if (!dl->requires_grad) return;
            float* gl = grad_buf(dl);
            const float g = o.grad[0] / static_cast<float>(rows);
            for (int i = 0; i < rows; ++i)
                gl[static_cast<std::size_t>(i) * k + idv[i]] -= g;
        });
    }
    return res;
}

// ---- attention ----

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int tokens,
                 int heads, float dropout_rate, Rng* rng, bool train) {
    const int w = q.cols();
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    if (w % heads != 0)
        throw ShapeError("attention: width " + std::to_string(w) + " not divisible by " +
                         std::to_string(heads) + " heads");
    if (q.rows() != batch * tokens)
        throw ShapeError("attention: " + shape_str(q.shape()) + " does not hold " +
                         std::to_string(batch) + " blocks of " + std::to_string(tokens) +
                         " tokens");
    const int dh = w / heads;
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
    const bool drop = train && dropout_rate > 0.0f;
    if (drop && rng == nullptr)
        throw ContractError("attention: dropout requires an rng in train mode");

    const std::size_t block_elems = static_cast<std::size_t>(tokens) * tokens;
    auto probs = std::make_shared<std::vector<float>>(
        static_cast<std::size_t>(batch) * heads * block_elems);
    std::shared_ptr<std::vector<float>> keep;  // dropout multipliers, empty when off
    if (drop)
        keep = std::make_shared<std::vector<float>>(probs->size());
    const float inv_keep = drop ? 1.0f / (1.0f - dropout_rate) : 1.0f;

    std::vector<float> out(q.numel(), 0.0f);
    std::vector<float> scores(block_elems);
    std::vector<float> applied(block_elems);
    const float* pq = q.data().data();
    const float* pk = k.data().data();
    const float* pv = v.data().data();

    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const std::size_t qoff = static_cast<std::size_t>(b) * tokens * w + h * dh;
            mm_nt(tokens, tokens, dh, pq + qoff, w, pk + qoff, w, scores.data(), tokens, false);
            float* pblock =
                probs->data() + (static_cast<std::size_t>(b) * heads + h) * block_elems;
            for (int i = 0; i < tokens; ++i) {
                float mx = -std::numeric_limits<float>::infinity();
                for (int j = 0; j < tokens; ++j) {
                    scores[static_cast<std::size_t>(i) * tokens + j] *= sc;
                    mx = std::max(mx, scores[static_cast<std::size_t>(i) * tokens + j]);
                }
                double denom = 0.0;
                for (int j = 0; j < tokens; ++j)
                    denom += std::exp(
                        static_cast<double>(scores[static_cast<std::size_t>(i) * tokens + j]) - mx);
                for (int j = 0; j < tokens; ++j)
                    pblock[static_cast<std::size_t>(i) * tokens + j] = static_cast<float>(
                        std::exp(static_cast<double>(
                                     scores[static_cast<std::size_t>(i) * tokens + j]) -
                                 mx) /
                        denom);
            }
            const float* use = pblock;
            if (drop) {
                float* kblock =
                    keep->data() + (static_cast<std::size_t>(b) * heads + h) * block_elems;
                for (std::size_t e = 0; e < block_elems; ++e) {
                    kblock[e] = (rng->uniform() >= dropout_rate) ? inv_keep : 0.0f;
                    applied[e] = pblock[e] * kblock[e];
                }
                use = applied.data();
            }
            mm_nn(tokens, dh, tokens, use, tokens, pv + qoff, w, out.data() + qoff, w, false);
        }
    }

    Tensor res = Tensor::wrap(alloc(q.shape(), std::move(out)));
    if (tape_wanted({&q, &k, &v})) {
        auto dq = q.ptr(), dk = k.ptr(), dv = v.ptr();
        attach(res, {dq, dk, dv},
               [dq, dk, dv, probs, keep, batch, tokens, heads, dh, w, sc,
                block_elems](const TensorData& o) {
                   const float* g = o.grad.data();
                   std::vector<float> dpp(block_elems);
                   std::vector<float> ds(block_elems);
                   std::vector<float> pa(block_elems);
                   for (int b = 0; b < batch; ++b) {
                       for (int h = 0; h < heads; ++h) {
                           const std::size_t off =
                               static_cast<std::size_t>(b) * tokens * w + h * dh;
                           const float* pblock = probs->data() +
                                                 (static_cast<std::size_t>(b) * heads + h) *
                                                     block_elems;
                           const float* kblock =
                               keep ? keep->data() + (static_cast<std::size_t>(b) * heads + h) *
                                                         block_elems
                                    : nullptr;
                           for (std::size_t e = 0; e < block_elems; ++e)
                               pa[e] = kblock ? pblock[e] * kblock[e] : pblock[e];
                           if (dv->requires_grad)
                               mm_tn(tokens, dh, tokens, pa.data(), tokens, g + off, w,
                                     grad_buf(dv) + off, w, true);
                           // d(applied probs) = dO . V^T
                           mm_nt(tokens, tokens, dh, g + off, w, dv->data.data() + off, w,
                                 dpp.data(), tokens, false);
                           if (kblock)
                               for (std::size_t e = 0; e < block_elems; ++e) dpp[e] *= kblock[e];
                           // softmax jacobian, then fold in the scale factor
                           for (int i = 0; i < tokens; ++i) {
                               const std::size_t roff = static_cast<std::size_t>(i) * tokens;
                               double dot = 0.0;
                               for (int j = 0; j < tokens; ++j)
                                   dot += static_cast<double>(dpp[roff + j]) * pblock[roff + j];
                               for (int j = 0; j < tokens; ++j)
                                   ds[roff + j] = sc * pblock[roff + j] *
                                                  (dpp[roff + j] - static_cast<float>(dot));
                           }
                           if (dq->requires_grad)
                               mm_nn(tokens, dh, tokens, ds.data(), tokens,
                                     dk->data.data() + off, w, grad_buf(dq) + off, w, true);
                           if (dk->requires_grad)
                               mm_tn(tokens, dh, tokens, ds.data(), tokens,
                                     dq->data.data() + off, w, grad_buf(dk) + off, w, true);
                       }
                   }
               });
    }
    return res;
}

// ---- engine ----

void backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1)
        throw ContractError("backward: root must be a defined scalar tensor");
    auto rd = root.ptr();
    std::vector<std::shared_ptr<TensorData>> order;
    std::unordered_set<const TensorData*> visited;
    struct Frame {
        std::shared_ptr<TensorData> d;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    visited.insert(rd.get());
    stack.push_back({rd, 0});
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& node = f.d->node;
        if (node && f.next < node->parents.size()) {
            auto p = node->parents[f.next++];
            if (p && visited.insert(p.get()).second) stack.push_back({std::move(p), 0});
        } else {
            order.push_back(f.d);
            stack.pop_back();
        }
    }
    if (rd->grad.empty()) rd->grad.assign(1, 0.0f);
    rd->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& d = *it;
        if (d->node) {
            if (d->node->backward) d->node->backward(*d);
            d->node.reset();  // tape is freed as it is consumed
            d->grad.clear();  // only leaves keep their gradients
            d->grad.shrink_to_fit();
        }
    }
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
    for (auto& p : params) p.zero_grad();
    Tensor out = f();
    backward(out);
    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        auto g = p.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(p.numel(), 0.0f);
    }
    double max_err = 0.0;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto data = params[pi].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const float orig = data[i];
            data[i] = static_cast<float>(orig + eps);
            const double actual_plus = data[i];
            const double fp = f().item_hi();
            data[i] = static_cast<float>(orig - eps);
            const double actual_minus = data[i];
            const double fm = f().item_hi();
            data[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite objective during perturbation");
            const double numeric = (fp - fm) / (actual_plus - actual_minus);
            const double a = analytic[pi][i];
            const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

void check_finite(const Tensor& t, const std::string& what) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw NumericError(what + ": non-finite value");
}

}  // namespace vqlcmd
