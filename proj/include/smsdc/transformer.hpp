#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "smsdc/ops.hpp"
#include "smsdc/tensor.hpp"

namespace smsdc {

/// Per-head projection matrices. Projections are bias-free; the head's
/// output projection maps back to model width so heads sum instead of
/// concatenating (same computation, per-head parameters).
struct AttentionHead {
    Tensor wq, wk, wv;  // {d_model, d_head}
    Tensor wo;          // {d_head, d_model}
};

struct TransformerLayerParams {
    std::vector<AttentionHead> heads;
    Tensor ffn_w1, ffn_b1;  // {d_model, ffn_dim}, {ffn_dim}
    Tensor ffn_w2, ffn_b2;  // {ffn_dim, d_model}, {d_model}
    Tensor ln1_gamma, ln1_beta;
    Tensor ln2_gamma, ln2_beta;
};

struct TransformerParams {
    std::size_t model_dim = 0;
    std::size_t head_count = 1;
    std::size_t ffn_dim = 0;
    std::vector<TransformerLayerParams> layers;

    static TransformerParams init(std::size_t model_dim, std::size_t head_count,
                                  std::size_t ffn_dim, std::size_t layer_count,
                                  std::mt19937_64& rng, const std::string& path_prefix) {
        if (head_count == 0 || model_dim % head_count != 0) {
            throw ConfigError("model width " + std::to_string(model_dim) +
                              " is not divisible into " + std::to_string(head_count) + " heads");
        }
        if (layer_count < 1) throw ConfigError("transformer needs at least one layer");
        TransformerParams p;
        p.model_dim = model_dim;
        p.head_count = head_count;
        p.ffn_dim = ffn_dim;
        const std::size_t d_head = model_dim / head_count;
        const double pb = 1.0 / std::sqrt(static_cast<double>(model_dim));
        const double ob = 1.0 / std::sqrt(static_cast<double>(d_head));
        const double fb = 1.0 / std::sqrt(static_cast<double>(ffn_dim));
        for (std::size_t l = 0; l < layer_count; ++l) {
            const std::string base = path_prefix + ".layer" + std::to_string(l);
            TransformerLayerParams layer;
            for (std::size_t h = 0; h < head_count; ++h) {
                const std::string hb = base + ".head" + std::to_string(h);
                AttentionHead head;
                head.wq = Tensor::uniform({model_dim, d_head}, -pb, pb, rng, true);
                head.wk = Tensor::uniform({model_dim, d_head}, -pb, pb, rng, true);
                head.wv = Tensor::uniform({model_dim, d_head}, -pb, pb, rng, true);
                head.wo = Tensor::uniform({d_head, model_dim}, -ob, ob, rng, true);
                head.wq.set_name(hb + ".wq");
                head.wk.set_name(hb + ".wk");
                head.wv.set_name(hb + ".wv");
                head.wo.set_name(hb + ".wo");
                layer.heads.push_back(std::move(head));
            }
            layer.ffn_w1 = Tensor::uniform({model_dim, ffn_dim}, -pb, pb, rng, true);
            layer.ffn_b1 = Tensor::zeros({ffn_dim}, true);
            layer.ffn_w2 = Tensor::uniform({ffn_dim, model_dim}, -fb, fb, rng, true);
            layer.ffn_b2 = Tensor::zeros({model_dim}, true);
            layer.ln1_gamma = Tensor::full({model_dim}, 1.0, true);
            layer.ln1_beta = Tensor::zeros({model_dim}, true);
            layer.ln2_gamma = Tensor::full({model_dim}, 1.0, true);
            layer.ln2_beta = Tensor::zeros({model_dim}, true);
            layer.ffn_w1.set_name(base + ".ffn_w1");
            layer.ffn_b1.set_name(base + ".ffn_b1");
            layer.ffn_w2.set_name(base + ".ffn_w2");
            layer.ffn_b2.set_name(base + ".ffn_b2");
            layer.ln1_gamma.set_name(base + ".ln1_gamma");
            layer.ln1_beta.set_name(base + ".ln1_beta");
            layer.ln2_gamma.set_name(base + ".ln2_gamma");
            layer.ln2_beta.set_name(base + ".ln2_beta");
            p.layers.push_back(std::move(layer));
        }
        return p;
    }
};

/// Scaled dot-product self-attention summed over heads. No causal mask:
/// retrieval encoders see the whole sequence. Optionally exposes the
/// per-head attention matrices (softmax outputs) for inspection.
inline Tensor multi_head_self_attention(const Tensor& x, const TransformerLayerParams& layer,
                                        std::vector<Tensor>* attention_out = nullptr) {
    if (x.rank() != 2) throw ShapeError("attention input must be M x d, got " + shape_str(x.shape()));
    if (layer.heads.empty()) throw ConfigError("attention layer has no heads");
    const std::size_t d_head = layer.heads[0].wq.extent(1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));
    Tensor out;
    for (const AttentionHead& h : layer.heads) {
        Tensor q = matmul(x, h.wq);
        Tensor k = matmul(x, h.wk);
        Tensor v = matmul(x, h.wv);
        Tensor attn = softmax_rows(mul(matmul(q, transpose(k)), scale));
        if (attention_out) attention_out->push_back(attn);
        Tensor contrib = matmul(matmul(attn, v), h.wo);
        out = out.defined() ? add(out, contrib) : contrib;
    }
    return out;
}

/// Post-norm encoder layer: LN(x + MHSA(x)) then LN(y + FFN(y)),
/// FFN(y) = relu(y W1 + b1) W2 + b2.
inline Tensor transformer_layer(const Tensor& x, const TransformerLayerParams& layer) {
    Tensor y = layer_norm_rows(add(x, multi_head_self_attention(x, layer)), layer.ln1_gamma,
                               layer.ln1_beta);
    Tensor ffn = add_row_vector(
        matmul(relu(add_row_vector(matmul(y, layer.ffn_w1), layer.ffn_b1)), layer.ffn_w2),
        layer.ffn_b2);
    return layer_norm_rows(add(y, ffn), layer.ln2_gamma, layer.ln2_beta);
}

/// Fixed sinusoidal positional encodings:
/// pe[pos, 2i] = sin(pos / 10000^(2i/d)), pe[pos, 2i+1] = cos(same).
inline Tensor positional_encoding(std::size_t len, std::size_t d) {
    std::vector<double> pe(len * d);
    for (std::size_t pos = 0; pos < len; ++pos) {
        for (std::size_t j = 0; j < d; ++j) {
            const double expo = static_cast<double>(2 * (j / 2)) / static_cast<double>(d);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
            pe[pos * d + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor::from({len, d}, std::move(pe));
}

/// Adds positional encodings once (unless disabled), then applies every
/// layer in order. An empty layer stack is allowed as a testing hook and
/// returns the (position-encoded) input unchanged.
inline Tensor transformer_encode(const Tensor& embedded, const TransformerParams& p,
                                 bool add_positional = true) {
    if (embedded.rank() != 2) {
        throw ShapeError("transformer input must be M x d, got " + shape_str(embedded.shape()));
    }
    if (embedded.extent(0) == 0) throw DataError("transformer over an empty sequence");
    Tensor x = embedded;
    if (add_positional) x = add(x, positional_encoding(x.extent(0), x.extent(1)));
    for (const TransformerLayerParams& layer : p.layers) x = transformer_layer(x, layer);
    return x;
}

}  // namespace smsdc
