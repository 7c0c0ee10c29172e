#ifndef OTFE_ENCODERS_HPP
#define OTFE_ENCODERS_HPP

#include <cmath>
#include <vector>

#include "otfe/graph.hpp"
#include "otfe/params.hpp"

namespace otfe {

// Tape handles for one parameter set, registered as leaves once per Graph.

struct AdapterNodes {
    NodeId weight, bias;
};

struct WtiNodes {
    NodeId outfit_weight, outfit_bias, text_weight, text_bias;
};

struct TransformerLayerNodes {
    NodeId query_proj, key_proj, value_proj, output_proj;
    NodeId ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
    NodeId attn_norm_gain, attn_norm_bias, ffn_norm_gain, ffn_norm_bias;
    int heads = 1;
};

struct ModelNodes {
    AdapterNodes outfit_adapter, text_adapter;
    WtiNodes item_wti, style_wti;
    TransformerLayerNodes style_enc_outfit, style_enc_text;
    TransformerLayerNodes pool_enc_outfit, pool_enc_text;
};

template <typename T>
AdapterNodes register_adapter(Graph<T>& g, const AdapterParams<T>& p, const std::string& prefix) {
    return {g.leaf(p.weight, prefix + ".weight"), g.leaf(p.bias, prefix + ".bias")};
}

template <typename T>
WtiNodes register_wti(Graph<T>& g, const WtiParams<T>& p, const std::string& prefix) {
    return {g.leaf(p.outfit_weight, prefix + ".outfit_weight"),
            g.leaf(p.outfit_bias, prefix + ".outfit_bias"),
            g.leaf(p.text_weight, prefix + ".text_weight"),
            g.leaf(p.text_bias, prefix + ".text_bias")};
}

template <typename T>
TransformerLayerNodes register_layer(Graph<T>& g, const TransformerLayerParams<T>& p,
                                     const std::string& prefix) {
    TransformerLayerNodes n;
    n.query_proj = g.leaf(p.query_proj, prefix + ".query_proj");
    n.key_proj = g.leaf(p.key_proj, prefix + ".key_proj");
    n.value_proj = g.leaf(p.value_proj, prefix + ".value_proj");
    n.output_proj = g.leaf(p.output_proj, prefix + ".output_proj");
    n.ffn_in = g.leaf(p.ffn_in, prefix + ".ffn_in");
    n.ffn_in_bias = g.leaf(p.ffn_in_bias, prefix + ".ffn_in_bias");
    n.ffn_out = g.leaf(p.ffn_out, prefix + ".ffn_out");
    n.ffn_out_bias = g.leaf(p.ffn_out_bias, prefix + ".ffn_out_bias");
    n.attn_norm_gain = g.leaf(p.attn_norm_gain, prefix + ".attn_norm_gain");
    n.attn_norm_bias = g.leaf(p.attn_norm_bias, prefix + ".attn_norm_bias");
    n.ffn_norm_gain = g.leaf(p.ffn_norm_gain, prefix + ".ffn_norm_gain");
    n.ffn_norm_bias = g.leaf(p.ffn_norm_bias, prefix + ".ffn_norm_bias");
    n.heads = p.heads;
    return n;
}

// Registers every trainable matrix under its canonical name, in the
// HeadParams<T>::for_each order.
template <typename T>
ModelNodes register_params(Graph<T>& g, const HeadParams<T>& p) {
    ModelNodes n;
    n.outfit_adapter = register_adapter(g, p.outfit_adapter, "adapter.outfit");
    n.text_adapter = register_adapter(g, p.text_adapter, "adapter.text");
    n.item_wti = register_wti(g, p.item_wti, "wti.item");
    n.style_wti = register_wti(g, p.style_wti, "wti.style");
    n.style_enc_outfit = register_layer(g, p.style_enc_outfit, "enc.style.outfit");
    n.style_enc_text = register_layer(g, p.style_enc_text, "enc.style.text");
    n.pool_enc_outfit = register_layer(g, p.pool_enc_outfit, "enc.pool.outfit");
    n.pool_enc_text = register_layer(g, p.pool_enc_text, "enc.pool.text");
    return n;
}

// Row-wise affine map X*W + b.
template <typename T>
NodeId apply_adapter(Graph<T>& g, NodeId x, const AdapterNodes& a) {
    return g.add_row_bias(g.matmul(x, a.weight), a.bias);
}

// Single pre-layer-norm transformer encoder layer over a token set. No
// positional signal: item/token order carries no meaning here. Masked
// positions neither attend nor are attended to, and their output rows are
// zeroed.
template <typename T>
NodeId transformer_layer_forward(Graph<T>& g, NodeId x, const TransformerLayerNodes& p,
                                 const Mask& mask) {
    const Matrix<T>& X = g.value(x);
    const int n = X.rows();
    const int dim = X.cols();
    if (mask.size() != n)
        throw ShapeError("transformer-layer: mask length " + std::to_string(mask.size()) +
                         " vs rows " + std::to_string(n));
    mask.require_nonempty("transformer-layer");
    if (p.heads < 1 || dim % p.heads != 0)
        throw ShapeError("transformer-layer: dim " + std::to_string(dim) +
                         " not divisible by heads " + std::to_string(p.heads));
    const int head_dim = dim / p.heads;

    NodeId h = g.layer_norm(x, p.attn_norm_gain, p.attn_norm_bias);
    NodeId q = g.matmul(h, p.query_proj);
    NodeId k = g.matmul(h, p.key_proj);
    NodeId v = g.matmul(h, p.value_proj);

    std::vector<NodeId> head_outs;
    head_outs.reserve(static_cast<std::size_t>(p.heads));
    for (int hd = 0; hd < p.heads; ++hd) {
        const int j0 = hd * head_dim, j1 = j0 + head_dim;
        NodeId qh = g.slice_cols(q, j0, j1);
        NodeId kh = g.slice_cols(k, j0, j1);
        NodeId vh = g.slice_cols(v, j0, j1);
        NodeId scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        NodeId attn = g.masked_softmax(scores, mask);  // keys at inactive positions get zero weight
        head_outs.push_back(g.matmul(attn, vh));
    }
    NodeId merged = p.heads == 1 ? head_outs[0] : g.concat_cols(head_outs);
    NodeId attn_out = g.matmul(merged, p.output_proj);
    NodeId x1 = g.add(x, attn_out);

    NodeId h2 = g.layer_norm(x1, p.ffn_norm_gain, p.ffn_norm_bias);
    NodeId f = g.add_row_bias(g.matmul(h2, p.ffn_in), p.ffn_in_bias);
    f = g.gelu(f);
    f = g.add_row_bias(g.matmul(f, p.ffn_out), p.ffn_out_bias);
    NodeId x2 = g.add(x1, f);

    return g.mask_rows(x2, mask);
}

// Stacks `depth` layers with shared parameters; exists only for the explicit
// depth-override escape hatch, depth is 1 everywhere by contract.
template <typename T>
NodeId encoder_forward(Graph<T>& g, NodeId x, const TransformerLayerNodes& p, const Mask& mask,
                       int depth = 1) {
    NodeId out = x;
    for (int i = 0; i < depth; ++i) out = transformer_layer_forward(g, out, p, mask);
    return out;
}

}  // namespace otfe

#endif
