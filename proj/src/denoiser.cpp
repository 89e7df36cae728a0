#include "vqlcmd/denoiser.hpp"

#include <cmath>
#include <string>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

DenoiserConfig DenoiserConfig::preset(const std::string& name) {
    DenoiserConfig c;
    if (name == "desk") {
        c.layers = 2;
        c.heads = 4;
        c.width = 64;
        c.mlp_ratio = 2;
    } else if (name == "paper-small") {
        c.layers = 15;
        c.heads = 8;
        c.width = 512;
        c.mlp_ratio = 4;
    } else if (name == "paper-imagenet") {
        c.layers = 24;
        c.heads = 16;
        c.width = 768;
        c.mlp_ratio = 4;
    } else {
        throw ConfigError("unknown denoiser preset: " + name);
    }
    return c;
}

void DenoiserConfig::validate() const {
    if (layers < 1 || heads < 1 || width < 2 || mlp_ratio < 1)
        throw ContractError("DenoiserConfig: bad architecture sizes");
    if (width % heads != 0)
        throw ContractError("DenoiserConfig: width " + std::to_string(width) +
                            " not divisible by heads " + std::to_string(heads));
    if (D < 1 || K < 2 || M < 1) throw ContractError("DenoiserConfig: bad D/K/M");
    if (num_classes < 0) throw ContractError("DenoiserConfig: negative num_classes");
    if (!(attn_dropout >= 0.0f && attn_dropout < 1.0f))
        throw ContractError("DenoiserConfig: attn_dropout outside [0, 1)");
}

Tensor time_embed(double t, int width) {
    const int half = width / 2;
    std::vector<float> v(static_cast<std::size_t>(width), 0.0f);
    const double pos = t * 1000.0;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        v[static_cast<std::size_t>(i)] = static_cast<float>(std::sin(pos * freq));
        v[static_cast<std::size_t>(half + i)] = static_cast<float>(std::cos(pos * freq));
    }
    if (width % 2 == 1) v[static_cast<std::size_t>(width - 1)] = 1.0f;
    return Tensor::from({width}, std::move(v));
}

namespace {

Tensor sinusoidal_positions(int m, int width) {
    std::vector<float> v(static_cast<std::size_t>(m) * width);
    const int half = width / 2;
    for (int p = 0; p < m; ++p) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
            v[static_cast<std::size_t>(p) * width + i] = static_cast<float>(std::sin(p * freq));
            v[static_cast<std::size_t>(p) * width + half + i] =
                static_cast<float>(std::cos(p * freq));
        }
    }
    return Tensor::from({m, width}, std::move(v));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return block_add(matmul(x, w), b);
}

Tensor normal_init(Shape shape, int fan_in, Rng& rng) {
    const float stddev = static_cast<float>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    return Tensor::randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
}

}  // namespace

DenoiserParams DenoiserParams::init(const DenoiserConfig& cfg, Rng& rng) {
    cfg.validate();
    const int w = cfg.width, d = cfg.D, k = cfg.K, r = cfg.mlp_ratio;
    DenoiserParams p;
    p.cfg = cfg;
    p.in_w = normal_init({d, w}, d, rng);
    p.in_b = Tensor::zeros({1, w}, true);
    p.pos = sinusoidal_positions(cfg.M, w);
    if (cfg.num_classes > 0) p.class_table = normal_init({cfg.num_classes + 1, w}, w, rng);
    p.cond_w = normal_init({w, w}, w, rng);
    p.cond_b = Tensor::zeros({1, w}, true);
    p.layers.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& l : p.layers) {
        l.ada1_w = Tensor::zeros({w, 2 * w}, true);
        l.ada1_b = Tensor::zeros({1, 2 * w}, true);
        l.qkv_w = normal_init({w, 3 * w}, w, rng);
        l.qkv_b = Tensor::zeros({1, 3 * w}, true);
        l.attn_out_w = normal_init({w, w}, w, rng);
        l.attn_out_b = Tensor::zeros({1, w}, true);
        l.ada2_w = Tensor::zeros({w, 2 * w}, true);
        l.ada2_b = Tensor::zeros({1, 2 * w}, true);
        l.fc1_w = normal_init({w, r * w}, w, rng);
        l.fc1_b = Tensor::zeros({1, r * w}, true);
        l.fc2_w = normal_init({r * w, w}, r * w, rng);
        l.fc2_b = Tensor::zeros({1, w}, true);
    }
    p.ada_final_w = Tensor::zeros({w, 2 * w}, true);
    p.ada_final_b = Tensor::zeros({1, 2 * w}, true);
    p.head_w = normal_init({w, k}, w, rng);
    p.head_b = Tensor::zeros({1, k}, true);
    return p;
}

std::vector<NamedTensor> DenoiserParams::named() {
    std::vector<NamedTensor> out;
    out.push_back({"in_w", in_w});
    out.push_back({"in_b", in_b});
    if (class_table.defined()) out.push_back({"class_table", class_table});
    out.push_back({"cond_w", cond_w});
    out.push_back({"cond_b", cond_b});
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        const std::string pre = "layer" + std::to_string(i) + ".";
        out.push_back({pre + "ada1_w", l.ada1_w});
        out.push_back({pre + "ada1_b", l.ada1_b});
        out.push_back({pre + "qkv_w", l.qkv_w});
        out.push_back({pre + "qkv_b", l.qkv_b});
        out.push_back({pre + "attn_out_w", l.attn_out_w});
        out.push_back({pre + "attn_out_b", l.attn_out_b});
        out.push_back({pre + "ada2_w", l.ada2_w});
        out.push_back({pre + "ada2_b", l.ada2_b});
        out.push_back({pre + "fc1_w", l.fc1_w});
        out.push_back({pre + "fc1_b", l.fc1_b});
        out.push_back({pre + "fc2_w", l.fc2_w});
        out.push_back({pre + "fc2_b", l.fc2_b});
    }
    out.push_back({"ada_final_w", ada_final_w});
    out.push_back({"ada_final_b", ada_final_b});
    out.push_back({"head_w", head_w});
    out.push_back({"head_b", head_b});
    return out;
}

DenoiserParams DenoiserParams::clone_detached() const {
    DenoiserParams c;
    c.cfg = cfg;
    c.pos = pos;
    c.in_w = in_w.detach();
    c.in_b = in_b.detach();
    if (class_table.defined()) c.class_table = class_table.detach();
    c.cond_w = cond_w.detach();
    c.cond_b = cond_b.detach();
    c.layers.resize(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        auto& o = c.layers[i];
        o.ada1_w = l.ada1_w.detach();
        o.ada1_b = l.ada1_b.detach();
        o.qkv_w = l.qkv_w.detach();
        o.qkv_b = l.qkv_b.detach();
        o.attn_out_w = l.attn_out_w.detach();
        o.attn_out_b = l.attn_out_b.detach();
        o.ada2_w = l.ada2_w.detach();
        o.ada2_b = l.ada2_b.detach();
        o.fc1_w = l.fc1_w.detach();
        o.fc1_b = l.fc1_b.detach();
        o.fc2_w = l.fc2_w.detach();
        o.fc2_b = l.fc2_b.detach();
    }
    c.ada_final_w = ada_final_w.detach();
    c.ada_final_b = ada_final_b.detach();
    c.head_w = head_w.detach();
    c.head_b = head_b.detach();
    return c;
}

void DenoiserParams::ema_update_from(DenoiserParams& src, double eta) {
    auto mine = named();
    auto theirs = src.named();
    if (mine.size() != theirs.size())
        throw ContractError("ema_update_from: parameter lists disagree");
    const float e = static_cast<float>(eta);
    const float one_minus = static_cast<float>(1.0 - eta);
    for (std::size_t i = 0; i < mine.size(); ++i) {
        auto dst = mine[i].tensor.mutable_data();
        auto s = theirs[i].tensor.data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = e * dst[j] + one_minus * s[j];
    }
}

Tensor adaln(const Tensor& h, const Tensor& cond, const Tensor& proj_w, const Tensor& proj_b) {
    const int w = h.cols();
    if (proj_w.rows() != cond.cols() || proj_w.cols() != 2 * w)
        throw ShapeError("adaln: projection " + shape_str(proj_w.shape()) + " incompatible with " +
                         shape_str(h.shape()));
    Tensor ab = linear(cond, proj_w, proj_b);
    Tensor a = slice_cols(ab, 0, w);
    Tensor b = slice_cols(ab, w, w);
    Tensor gain = Tensor::full({w}, 1.0f);
    Tensor bias = Tensor::zeros({w});
    Tensor ln = layer_norm_affine(h, gain, bias);
    return block_add(block_mul(ln, add_const(a, 1.0)), b);
}

Tensor denoiser_forward(const DenoiserParams& params, const Tensor& z, std::span<const double> ts,
                        std::span<const int> classes, bool train, Rng* rng) {
    const auto& cfg = params.cfg;
    const int batch = static_cast<int>(ts.size());
    if (batch < 1) throw ContractError("denoiser_forward: empty batch");
    if (z.rows() != batch * cfg.M || z.cols() != cfg.D)
        throw ShapeError("denoiser_forward: z is " + shape_str(z.shape()) + ", expected (" +
                         std::to_string(batch * cfg.M) + "x" + std::to_string(cfg.D) + ")");
    check_finite(z, "denoiser input");

    // Condition signal: time features plus (for conditional models) a class
    // embedding, mixed by one gelu mlp. Collapses to a single broadcast row
    // when every sequence shares the same (t, class).
    std::vector<int> class_ids;
    if (cfg.num_classes > 0) {
        if (classes.empty())
            class_ids.assign(static_cast<std::size_t>(batch), cfg.null_class());
        else if (static_cast<int>(classes.size()) == batch)
            class_ids.assign(classes.begin(), classes.end());
        else
            throw ShapeError("denoiser_forward: class count does not match batch");
        for (std::size_t i = 0; i < class_ids.size(); ++i)
            if (class_ids[i] < 0 || class_ids[i] > cfg.num_classes)
                throw IndexError("denoiser_forward: class id " + std::to_string(class_ids[i]) +
                                 " at sequence " + std::to_string(i) + " outside [0, " +
                                 std::to_string(cfg.num_classes) + "]");
    } else if (!classes.empty()) {
        throw ContractError("denoiser_forward: class ids passed to an unconditional model");
    }

    bool uniform = true;
    for (int b = 1; b < batch && uniform; ++b) {
        if (ts[static_cast<std::size_t>(b)] != ts[0]) uniform = false;
        if (!class_ids.empty() && class_ids[static_cast<std::size_t>(b)] != class_ids[0])
            uniform = false;
    }

    const int cond_rows = uniform ? 1 : batch;
    const int w = cfg.width;
    std::vector<float> tf(static_cast<std::size_t>(cond_rows) * w);
    for (int b = 0; b < cond_rows; ++b) {
        Tensor one = time_embed(ts[static_cast<std::size_t>(b)], w);
        std::copy(one.data().begin(), one.data().end(),
                  tf.begin() + static_cast<std::size_t>(b) * w);
    }
    Tensor cond_in = Tensor::from({cond_rows, w}, std::move(tf));
    if (cfg.num_classes > 0) {
        std::span<const int> use(class_ids);
        cond_in = add(cond_in, embedding_lookup(params.class_table, use.subspan(0, cond_rows)));
    }
    Tensor cond = gelu(linear(cond_in, params.cond_w, params.cond_b));

    Tensor h = linear(z, params.in_w, params.in_b);
    if (cfg.use_pos_embed) h = tile_add(h, params.pos);

    for (std::size_t i = 0; i < params.layers.size(); ++i) {
        const auto& l = params.layers[i];
        Tensor hn = adaln(h, cond, l.ada1_w, l.ada1_b);
        Tensor qkv = linear(hn, l.qkv_w, l.qkv_b);
        Tensor q = slice_cols(qkv, 0, w);
        Tensor k = slice_cols(qkv, w, w);
        Tensor v = slice_cols(qkv, 2 * w, w);
        Tensor att = attention(q, k, v, batch, cfg.M, cfg.heads, cfg.attn_dropout, rng, train);
        h = add(h, linear(att, l.attn_out_w, l.attn_out_b));
        check_finite(h, "denoiser layer " + std::to_string(i) + " (attention)");
        Tensor hn2 = adaln(h, cond, l.ada2_w, l.ada2_b);
        Tensor f = gelu(linear(hn2, l.fc1_w, l.fc1_b));
        h = add(h, linear(f, l.fc2_w, l.fc2_b));
        check_finite(h, "denoiser layer " + std::to_string(i) + " (mlp)");
    }

    Tensor hf = adaln(h, cond, params.ada_final_w, params.ada_final_b);
    Tensor logits = linear(hf, params.head_w, params.head_b);
    check_finite(logits, "denoiser head");
    return logits;
}

Tensor denoiser_forward(const DenoiserParams& params, const Tensor& z, double t, int class_id,
                        bool train, Rng* rng) {
    const double ts[1] = {t};
    if (params.cfg.num_classes > 0) {
        const int cs[1] = {class_id >= 0 ? class_id : params.cfg.null_class()};
        return denoiser_forward(params, z, ts, cs, train, rng);
    }
    return denoiser_forward(params, z, ts, {}, train, rng);
}

Tensor predicted_embedding(const Tensor& probs, const Codebook& cb) {
    const int k = cb.K();
    if (probs.cols() != k)
        throw ShapeError("predicted_embedding: probs " + shape_str(probs.shape()) +
                         " vs K=" + std::to_string(k));
    const int rows = probs.rows();
    const float* p = probs.data().data();
    for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += p[static_cast<std::size_t>(i) * k + j];
        if (std::abs(s - 1.0) > 1e-5)
            throw ContractError("predicted_embedding: row " + std::to_string(i) +
                                " sums to " + std::to_string(s));
    }
    Tensor embeddings = slice_rows(cb.table(), 0, k);  // mask row excluded
    return matmul(probs, embeddings);
}

}  // namespace vqlcmd
