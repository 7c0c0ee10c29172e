#ifndef OTFE_PARAMS_HPP
#define OTFE_PARAMS_HPP

#include <cmath>
#include <functional>
#include <string>

#include "otfe/matrix.hpp"

namespace otfe {

// Runtime model configuration. Defaults follow the reference training setup;
// synthetic desk-scale runs override dim and the trainer picks lr presets.
struct Hyperparams {
    int dim = 512;
    int heads = 8;
    int ffn_mult = 4;          // hidden width = ffn_mult * dim
    int depth = 1;             // encoders are single-layer by contract
    bool allow_depth_override = false;

    double logit_scale = 100.0;        // multiplier applied to similarities in the loss
    bool literal_temperature = false;  // divide by logit_scale instead of multiplying
    double task_weight = 0.2;          // p: outfit-to-text mixing weight
    double style_weight = 0.3;         // alpha
    double outfit_weight = 0.3;        // beta
    double cluster_ratio_outfit = 1.0 / 3.0;  // k_o
    double cluster_ratio_text = 1.0 / 6.0;    // k_t

    bool level_item = true;
    bool level_style = true;
    bool level_outfit = true;

    bool share_style_wti = false;  // style level reuses item-level weighting heads
    bool greedy_init = true;       // k-means seeding; false = seeded random init
    int kmeans_max_iter = 100;
    double kmeans_tol = 1e-6;
    bool strict_norm = false;      // error on exactly-zero rows in cosine paths

    void validate() const {
        if (dim < 1) throw ConfigError("dim must be >= 1");
        if (heads < 1 || dim % heads != 0)
            throw ConfigError("dim (" + std::to_string(dim) + ") must be divisible by heads (" +
                              std::to_string(heads) + ")");
        if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
        if (depth != 1 && !allow_depth_override)
            throw ConfigError("encoder depth is fixed at 1; set allow_depth_override to experiment");
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (logit_scale <= 0) throw ConfigError("logit_scale must be > 0");
        if (task_weight < 0) throw ConfigError("task_weight must be >= 0");
        if (style_weight < 0 || outfit_weight < 0)
            throw ConfigError("style/outfit loss weights must be >= 0");
        if (cluster_ratio_outfit <= 0 || cluster_ratio_outfit > 1 || cluster_ratio_text <= 0 ||
            cluster_ratio_text > 1)
            throw ConfigError("cluster ratios must be in (0, 1]");
        if (kmeans_max_iter < 1) throw ConfigError("kmeans_max_iter must be >= 1");
    }
};

template <typename T>
struct AdapterParams {
    Matrix<T> weight;  // D x D, identity at init
    Matrix<T> bias;    // 1 x D, zero at init

    static AdapterParams identity(int dim) {
        return {Matrix<T>::identity(dim), Matrix<T>(1, dim)};
    }
};

// Token weighting heads: linear map D -> 1 per modality, softmax over active
// tokens. Zero init gives uniform weights.
template <typename T>
struct WtiParams {
    Matrix<T> outfit_weight;  // D x 1
    Matrix<T> outfit_bias;    // 1 x 1
    Matrix<T> text_weight;    // D x 1
    Matrix<T> text_bias;      // 1 x 1

    static WtiParams zeros(int dim) {
        return {Matrix<T>(dim, 1), Matrix<T>(1, 1), Matrix<T>(dim, 1), Matrix<T>(1, 1)};
    }
};

template <typename T>
struct TransformerLayerParams {
    Matrix<T> query_proj, key_proj, value_proj, output_proj;  // D x D
    Matrix<T> ffn_in;        // D x H
    Matrix<T> ffn_in_bias;   // 1 x H
    Matrix<T> ffn_out;       // H x D
    Matrix<T> ffn_out_bias;  // 1 x D
    Matrix<T> attn_norm_gain, attn_norm_bias;  // 1 x D
    Matrix<T> ffn_norm_gain, ffn_norm_bias;    // 1 x D
    int heads = 1;

    // Output-side projections start at zero so the untrained layer is the
    // identity map on active rows.
    static TransformerLayerParams init(int dim, int heads, int ffn_mult, Rng& rng) {
        const int hidden = dim * ffn_mult;
        const double a = 1.0 / std::sqrt(static_cast<double>(dim));
        TransformerLayerParams p;
        p.heads = heads;
        p.query_proj = Matrix<T>(dim, dim);
        p.key_proj = Matrix<T>(dim, dim);
        p.value_proj = Matrix<T>(dim, dim);
        p.output_proj = Matrix<T>(dim, dim);
        p.ffn_in = Matrix<T>(dim, hidden);
        p.ffn_in_bias = Matrix<T>(1, hidden);
        p.ffn_out = Matrix<T>(hidden, dim);
        p.ffn_out_bias = Matrix<T>(1, dim);
        p.attn_norm_gain = Matrix<T>(1, dim, T(1));
        p.attn_norm_bias = Matrix<T>(1, dim);
        p.ffn_norm_gain = Matrix<T>(1, dim, T(1));
        p.ffn_norm_bias = Matrix<T>(1, dim);
        p.query_proj.fill_uniform(rng, -a, a);
        p.key_proj.fill_uniform(rng, -a, a);
        p.value_proj.fill_uniform(rng, -a, a);
        p.ffn_in.fill_uniform(rng, -a, a);
        return p;
    }
};

// Every trainable matrix in the engine: modality adapters, the item- and
// style-level weighting heads, and the four set encoders (style stage and
// pooling stage, per modality).
template <typename T>
struct HeadParams {
    AdapterParams<T> outfit_adapter, text_adapter;
    WtiParams<T> item_wti, style_wti;
    TransformerLayerParams<T> style_enc_outfit, style_enc_text;
    TransformerLayerParams<T> pool_enc_outfit, pool_enc_text;
    int dim = 0;

    static HeadParams init(const Hyperparams& hp, std::uint64_t seed) {
        hp.validate();
        Rng rng(mix64(seed));
        HeadParams p;
        p.dim = hp.dim;
        p.outfit_adapter = AdapterParams<T>::identity(hp.dim);
        p.text_adapter = AdapterParams<T>::identity(hp.dim);
        p.item_wti = WtiParams<T>::zeros(hp.dim);
        p.style_wti = WtiParams<T>::zeros(hp.dim);
        p.style_enc_outfit = TransformerLayerParams<T>::init(hp.dim, hp.heads, hp.ffn_mult, rng);
        p.style_enc_text = TransformerLayerParams<T>::init(hp.dim, hp.heads, hp.ffn_mult, rng);
        p.pool_enc_outfit = TransformerLayerParams<T>::init(hp.dim, hp.heads, hp.ffn_mult, rng);
        p.pool_enc_text = TransformerLayerParams<T>::init(hp.dim, hp.heads, hp.ffn_mult, rng);
        return p;
    }

    template <typename U>
    HeadParams<U> cast() {
        HeadParams<U> out;
        out.dim = dim;
        out.style_enc_outfit.heads = style_enc_outfit.heads;
        out.style_enc_text.heads = style_enc_text.heads;
        out.pool_enc_outfit.heads = pool_enc_outfit.heads;
        out.pool_enc_text.heads = pool_enc_text.heads;
        for_each([&](const std::string& name, Matrix<T>& m) {
            out.find(name) = m.template cast<U>();
        });
        return out;
    }

    // Canonical traversal order; Adam, checkpoints and gradient checks all
    // iterate parameters in this order.
    template <typename Fn>
    void for_each(Fn&& fn) {
        auto adapter = [&](const std::string& pre, AdapterParams<T>& a) {
            fn(pre + ".weight", a.weight);
            fn(pre + ".bias", a.bias);
        };
        auto wti = [&](const std::string& pre, WtiParams<T>& w) {
            fn(pre + ".outfit_weight", w.outfit_weight);
            fn(pre + ".outfit_bias", w.outfit_bias);
            fn(pre + ".text_weight", w.text_weight);
            fn(pre + ".text_bias", w.text_bias);
        };
        auto layer = [&](const std::string& pre, TransformerLayerParams<T>& l) {
            fn(pre + ".query_proj", l.query_proj);
            fn(pre + ".key_proj", l.key_proj);
            fn(pre + ".value_proj", l.value_proj);
            fn(pre + ".output_proj", l.output_proj);
            fn(pre + ".ffn_in", l.ffn_in);
            fn(pre + ".ffn_in_bias", l.ffn_in_bias);
            fn(pre + ".ffn_out", l.ffn_out);
            fn(pre + ".ffn_out_bias", l.ffn_out_bias);
            fn(pre + ".attn_norm_gain", l.attn_norm_gain);
            fn(pre + ".attn_norm_bias", l.attn_norm_bias);
            fn(pre + ".ffn_norm_gain", l.ffn_norm_gain);
            fn(pre + ".ffn_norm_bias", l.ffn_norm_bias);
        };
        adapter("adapter.outfit", outfit_adapter);
        adapter("adapter.text", text_adapter);
        wti("wti.item", item_wti);
        wti("wti.style", style_wti);
        layer("enc.style.outfit", style_enc_outfit);
        layer("enc.style.text", style_enc_text);
        layer("enc.pool.outfit", pool_enc_outfit);
        layer("enc.pool.text", pool_enc_text);
    }

    Matrix<T>& find(const std::string& name) {
        Matrix<T>* hit = nullptr;
        for_each([&](const std::string& n, Matrix<T>& m) {
            if (n == name) hit = &m;
        });
        if (hit == nullptr) throw Error("unknown parameter: " + name);
        return *hit;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for_each([&](const std::string&, Matrix<T>& m) { n += m.size(); });
        return n;
    }
};

using HeadParamsF = HeadParams<float>;
using HeadParamsD = HeadParams<double>;

}  // namespace otfe

#endif
