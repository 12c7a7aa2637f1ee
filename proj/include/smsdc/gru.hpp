#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "smsdc/ops.hpp"
#include "smsdc/tensor.hpp"

namespace smsdc {

/// One direction of a GRU: three gate weight sets (input, recurrent, bias).
struct GruDirection {
    Tensor w_update, u_update, b_update;  // z gate
    Tensor w_reset, u_reset, b_reset;     // r gate
    Tensor w_cand, u_cand, b_cand;        // candidate state
};

struct GruParams {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    GruDirection fwd;
    GruDirection bwd;

    static GruParams init(std::size_t input_dim, std::size_t hidden_dim, std::mt19937_64& rng,
                          const std::string& path_prefix) {
        GruParams p;
        p.input_dim = input_dim;
        p.hidden_dim = hidden_dim;
        const char* dir_names[2] = {"fwd", "bwd"};
        GruDirection* dirs[2] = {&p.fwd, &p.bwd};
        for (int d = 0; d < 2; ++d) {
            const double wb = 1.0 / std::sqrt(static_cast<double>(input_dim));
            const double ub = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
            GruDirection& dir = *dirs[d];
            const std::string base = path_prefix + "." + dir_names[d];
            auto mk_w = [&](const char* gate) {
                Tensor t = Tensor::uniform({input_dim, hidden_dim}, -wb, wb, rng, true);
                t.set_name(base + ".w_" + gate);
                return t;
            };
            auto mk_u = [&](const char* gate) {
                Tensor t = Tensor::uniform({hidden_dim, hidden_dim}, -ub, ub, rng, true);
                t.set_name(base + ".u_" + gate);
                return t;
            };
            auto mk_b = [&](const char* gate) {
                Tensor t = Tensor::zeros({hidden_dim}, true);
                t.set_name(base + ".b_" + gate);
                return t;
            };
            dir.w_update = mk_w("update");
            dir.u_update = mk_u("update");
            dir.b_update = mk_b("update");
            dir.w_reset = mk_w("reset");
            dir.u_reset = mk_u("reset");
            dir.b_reset = mk_b("reset");
            dir.w_cand = mk_w("cand");
            dir.u_cand = mk_u("cand");
            dir.b_cand = mk_b("cand");
        }
        return p;
    }
};

/// Single GRU step (Cho-style cell):
///   z = sigmoid(x W_z + h U_z + b_z)
///   r = sigmoid(x W_r + h U_r + b_r)
///   hc = tanh(x W_h + (r .* h) U_h + b_h)
///   h' = (1 - z) .* h + z .* hc
/// Both h_prev and x are 1-row matrices.
inline Tensor gru_cell(const Tensor& h_prev, const Tensor& x, const GruDirection& p) {
    Tensor z = sigmoid(add_row_vector(add(matmul(x, p.w_update), matmul(h_prev, p.u_update)), p.b_update));
    Tensor r = sigmoid(add_row_vector(add(matmul(x, p.w_reset), matmul(h_prev, p.u_reset)), p.b_reset));
    Tensor hc = tanh(add_row_vector(add(matmul(x, p.w_cand), matmul(mul(r, h_prev), p.u_cand)), p.b_cand));
    return add(mul(sub(1.0, z), h_prev), mul(z, hc));
}

/// Bidirectional GRU over an N x d_in sequence. Initial states are zero.
/// Row i of the output concatenates the forward state after consuming
/// rows 0..i with the backward state after consuming rows N-1..i, so the
/// output is N x 2h.
inline Tensor bigru_encode(const Tensor& seq, const GruParams& p) {
    if (seq.rank() != 2 || seq.extent(1) != p.input_dim) {
        throw ShapeError("bigru input " + shape_str(seq.shape()) + " does not match input_dim " +
                         std::to_string(p.input_dim));
    }
    const std::size_t n = seq.extent(0);
    if (n == 0) throw DataError("bigru over an empty sequence");

    std::vector<Tensor> fw(n), bw(n);
    Tensor h = Tensor::zeros({1, p.hidden_dim});
    for (std::size_t i = 0; i < n; ++i) {
        h = gru_cell(h, row(seq, i), p.fwd);
        fw[i] = h;
    }
    h = Tensor::zeros({1, p.hidden_dim});
    for (std::size_t i = n; i-- > 0;) {
        h = gru_cell(h, row(seq, i), p.bwd);
        bw[i] = h;
    }
    return concat_cols(stack_rows(fw), stack_rows(bw));
}

}  // namespace smsdc
