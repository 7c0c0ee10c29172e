#ifndef OTFE_INTERACTION_HPP
#define OTFE_INTERACTION_HPP

#include <vector>

#include "otfe/encoders.hpp"
#include "otfe/graph.hpp"

namespace otfe {

enum class SimilarityLevel { item, style, outfit };

// Softmax token weights from a D->1 weighting head, over active rows of a
// token matrix. Result is 1 x N.
template <typename T>
NodeId token_weights(Graph<T>& g, NodeId tokens, NodeId head_weight, NodeId head_bias,
                     const Mask& mask) {
    mask.require_nonempty("token-weights");
    NodeId logits = g.add_scalar(g.matmul(tokens, head_weight), head_bias);  // N x 1
    return g.masked_softmax(g.transpose(logits), mask);
}

// Weighted token-wise interaction similarity between one outfit's item
// embeddings and one text's token embeddings:
//
//   s = (t2o + p * o2t) / (1 + p)
//   t2o = sum_i w_o[i] * max_j cos(o_i, t_j)
//   o2t = sum_j w_t[j] * max_i cos(o_i, t_j)
//
// Intermediate handles are exposed so the batch builder can reuse per-sample
// results across the B x B grid.
template <typename T>
struct WtiSide {
    NodeId normalized;   // rows l2-normalized token matrix
    NodeId weights;      // 1 x N softmax weights
    Mask mask;
};

template <typename T>
WtiSide<T> wti_prepare_outfit(Graph<T>& g, NodeId tokens, const WtiNodes& wti, const Mask& mask,
                              bool strict = false) {
    mask.require_nonempty("wti: outfit side");
    return {g.row_l2_normalize(tokens, strict),
            token_weights(g, tokens, wti.outfit_weight, wti.outfit_bias, mask), mask};
}

template <typename T>
WtiSide<T> wti_prepare_text(Graph<T>& g, NodeId tokens, const WtiNodes& wti, const Mask& mask,
                            bool strict = false) {
    mask.require_nonempty("wti: text side");
    return {g.row_l2_normalize(tokens, strict),
            token_weights(g, tokens, wti.text_weight, wti.text_bias, mask), mask};
}

// Similarity of a prepared pair. p = 0 reduces exactly to the outfit-side
// (text-to-outfit) term.
template <typename T>
NodeId wti_pair_similarity(Graph<T>& g, const WtiSide<T>& outfit, const WtiSide<T>& text,
                           double task_weight) {
    NodeId cos = g.matmul(outfit.normalized, g.transpose(text.normalized));  // N_o x N_t
    NodeId t2o = g.matmul(outfit.weights, g.masked_row_max(cos, text.mask));       // 1 x 1
    NodeId o2t = g.matmul(text.weights, g.masked_row_max(g.transpose(cos), outfit.mask));
    return g.divide(g.add(t2o, g.scale(o2t, task_weight)), 1.0 + task_weight);
}

// One-shot form used by tests and the op-level contract.
template <typename T>
NodeId wti_similarity(Graph<T>& g, NodeId outfit_tokens, NodeId text_tokens, const WtiNodes& wti,
                      double task_weight, const Mask& outfit_mask, const Mask& text_mask,
                      bool strict = false) {
    WtiSide<T> o = wti_prepare_outfit(g, outfit_tokens, wti, outfit_mask, strict);
    WtiSide<T> t = wti_prepare_text(g, text_tokens, wti, text_mask, strict);
    return wti_pair_similarity(g, o, t, task_weight);
}

// B x B similarity matrix: entry (n, m) = similarity(outfit n, text m).
template <typename T>
NodeId batch_similarity(Graph<T>& g, const std::vector<WtiSide<T>>& outfits,
                        const std::vector<WtiSide<T>>& texts, double task_weight) {
    const int b = static_cast<int>(outfits.size());
    if (b == 0 || texts.size() != outfits.size())
        throw ShapeError("batch-similarity: outfit/text side counts differ");
    std::vector<NodeId> cells;
    cells.reserve(static_cast<std::size_t>(b) * b);
    for (int n = 0; n < b; ++n)
        for (int m = 0; m < b; ++m)
            cells.push_back(wti_pair_similarity(g, outfits[static_cast<std::size_t>(n)],
                                                texts[static_cast<std::size_t>(m)], task_weight));
    return g.stack_scalars(b, b, cells);
}

// Symmetric InfoNCE over a B x B similarity matrix. Logits are S * scale by
// default; the literal flag instead divides by scale (the temperature-as-
// divisor reading).
template <typename T>
NodeId similarity_logits(Graph<T>& g, NodeId sim, double scale, bool literal_temperature) {
    if (scale <= 0) throw ShapeError("info-nce: logit scale must be > 0");
    return literal_temperature ? g.divide(sim, scale) : g.scale(sim, scale);
}

template <typename T>
struct InfoNceNodes {
    NodeId loss;            // scalar
    NodeId row_direction;   // -(1/B) sum_n log softmax_row(n)[n]
    NodeId col_direction;
};

template <typename T>
InfoNceNodes<T> info_nce_nodes(Graph<T>& g, NodeId sim, double scale, bool literal_temperature) {
    const Matrix<T>& S = g.value(sim);
    if (S.rows() != S.cols())
        throw ShapeError("info-nce: similarity matrix must be square, got " + S.shape_str());
    const int b = S.rows();
    const Mask full = Mask::all(b);
    NodeId logits = similarity_logits(g, sim, scale, literal_temperature);
    NodeId eye = g.constant(Matrix<T>::identity(b));
    NodeId row_lp = g.masked_log_softmax(logits, full);
    NodeId col_lp = g.masked_log_softmax(g.transpose(logits), full);
    NodeId row_term = g.scale(g.sum_all(g.hadamard(row_lp, eye)), -1.0 / b);
    NodeId col_term = g.scale(g.sum_all(g.hadamard(col_lp, eye)), -1.0 / b);
    return {g.add(row_term, col_term), row_term, col_term};
}

template <typename T>
NodeId info_nce(Graph<T>& g, NodeId sim, double scale, bool literal_temperature = false) {
    return info_nce_nodes(g, sim, scale, literal_temperature).loss;
}

}  // namespace otfe

#endif
