#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <string_view>
#include <vector>

#include "smsdc/tensor.hpp"

namespace smsdc {

using detail::Node;

// ---------------------------------------------------------------------------
// Elementwise binaries. Supported broadcasts: equal shapes, or one operand a
// scalar (single element). Anything else is a shape error.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { add, sub, mul };

inline Tensor ewise_binary(BinOp op, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.size() == 1;
    const bool b_scalar = b.size() == 1;
    if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
        throw ShapeError("elementwise operands " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are neither equal-shape nor scalar");
    }
    const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        out[i] = op == BinOp::add ? x + y : op == BinOp::sub ? x - y : x * y;
    }
    return make_op(out_shape, std::move(out), {a, b}, [op, a_scalar, b_scalar, n](Node& self) {
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        for (std::size_t i = 0; i < n; ++i) {
            const double g = self.grad[i];
            switch (op) {
                case BinOp::add:
                    if (A.requires_grad) A.grad[a_scalar ? 0 : i] += g;
                    if (B.requires_grad) B.grad[b_scalar ? 0 : i] += g;
                    break;
                case BinOp::sub:
                    if (A.requires_grad) A.grad[a_scalar ? 0 : i] += g;
                    if (B.requires_grad) B.grad[b_scalar ? 0 : i] -= g;
                    break;
                case BinOp::mul:
                    if (A.requires_grad) A.grad[a_scalar ? 0 : i] += g * B.value[b_scalar ? 0 : i];
                    if (B.requires_grad) B.grad[b_scalar ? 0 : i] += g * A.value[a_scalar ? 0 : i];
                    break;
            }
        }
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(detail::BinOp::add, a, b);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(detail::BinOp::sub, a, b);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ewise_binary(detail::BinOp::mul, a, b);
}

inline Tensor add(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor sub(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor sub(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
inline Tensor mul(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }

// ---------------------------------------------------------------------------
// Elementwise unaries.
// ---------------------------------------------------------------------------

inline Tensor tanh(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(x.value()[i]);
    return make_op(x.shape(), std::move(out), {x}, [n](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double y = self.value[i];
            X.grad[i] += self.grad[i] * (1.0 - y * y);
        }
    });
}

inline Tensor sigmoid(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-x.value()[i]));
    return make_op(x.shape(), std::move(out), {x}, [n](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            const double y = self.value[i];
            X.grad[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

/// relu; the subgradient at exactly 0 is taken as 0.
inline Tensor relu(const Tensor& x) {
    const std::size_t n = x.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x.value()[i] > 0.0 ? x.value()[i] : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [n](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            if (X.value[i] > 0.0) X.grad[i] += self.grad[i];
        }
    });
}

/// Named activation dispatch ("relu", "tanh", "sigmoid", "identity").
inline Tensor apply_activation(std::string_view name, const Tensor& x) {
    if (name == "relu") return relu(x);
    if (name == "tanh") return tanh(x);
    if (name == "sigmoid") return sigmoid(x);
    if (name == "identity") return x;
    throw ConfigError("unknown activation '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Matrix ops.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul needs rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t p = a.extent(0), q = a.extent(1), q2 = b.extent(0), r = b.extent(1);
    if (q != q2) {
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(p * r, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < q; ++k) {
            const double aik = av[i * q + k];
            if (aik == 0.0) continue;
            const double* brow = &bv[k * r];
            double* crow = &out[i * r];
            for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
        }
    }
    return make_op({p, r}, std::move(out), {a, b}, [p, q, r](Node& self) {
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        // dA = dC * B^T
        if (A.requires_grad) {
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t k = 0; k < q; ++k) {
                    double acc = 0.0;
                    const double* grow = &self.grad[i * r];
                    const double* brow = &B.value[k * r];
                    for (std::size_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
                    A.grad[i * q + k] += acc;
                }
            }
        }
        // dB = A^T * dC
        if (B.requires_grad) {
            for (std::size_t i = 0; i < p; ++i) {
                const double* grow = &self.grad[i * r];
                for (std::size_t k = 0; k < q; ++k) {
                    const double aik = A.value[i * q + k];
                    if (aik == 0.0) continue;
                    double* brow = &B.grad[k * r];
                    for (std::size_t j = 0; j < r; ++j) brow[j] += aik * grow[j];
                }
            }
        }
    });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose needs rank-2, got " + shape_str(x.shape()));
    const std::size_t p = x.extent(0), q = x.extent(1);
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < q; ++j) out[j * p + i] = x.value()[i * q + j];
    return make_op({q, p}, std::move(out), {x}, [p, q](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < q; ++j) X.grad[i * q + j] += self.grad[j * p + i];
    });
}

/// Row-stable softmax: each row shifted by its max before exponentiation.
inline Tensor softmax_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows needs rank-2, got " + shape_str(x.shape()));
    const std::size_t p = x.extent(0), q = x.extent(1);
    std::vector<double> out(p * q);
    for (std::size_t i = 0; i < p; ++i) {
        const double* xr = &x.value()[i * q];
        double mx = xr[0];
        for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < q; ++j) {
            out[i * q + j] = std::exp(xr[j] - mx);
            sum += out[i * q + j];
        }
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] /= sum;
    }
    return make_op({p, q}, std::move(out), {x}, [p, q](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < p; ++i) {
            const double* y = &self.value[i * q];
            const double* g = &self.grad[i * q];
            double dot = 0.0;
            for (std::size_t j = 0; j < q; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < q; ++j) X.grad[i * q + j] += y[j] * (g[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Row/column structure ops.
// ---------------------------------------------------------------------------

/// Broadcast-add a length-d vector to every row of an L x d matrix.
inline Tensor add_row_vector(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.extent(1) != b.extent(0)) {
        throw ShapeError("add_row_vector mismatch: " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
    }
    const std::size_t rows = x.extent(0), d = x.extent(1);
    std::vector<double> out(rows * d);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] + b.value()[j];
    return make_op(x.shape(), std::move(out), {x, b}, [rows, d](Node& self) {
        Node& X = *self.parents[0];
        Node& B = *self.parents[1];
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const double g = self.grad[i * d + j];
                if (X.requires_grad) X.grad[i * d + j] += g;
                if (B.requires_grad) B.grad[j] += g;
            }
        }
    });
}

/// Arithmetic mean over rows: L x d -> d. Errors on an empty sequence.
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("mean_rows needs rank-2, got " + shape_str(x.shape()));
    const std::size_t rows = x.extent(0), d = x.extent(1);
    if (rows == 0) throw DataError("mean_rows over an empty sequence");
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[i * d + j];
    for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<double>(rows);
    return make_op({d}, std::move(out), {x}, [rows, d](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) X.grad[i * d + j] += self.grad[j] * inv;
    });
}

/// Per-column max over rows: L x d -> d. Gradient routes to the first
/// maximizing row of each column.
inline Tensor max_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("max_rows needs rank-2, got " + shape_str(x.shape()));
    const std::size_t rows = x.extent(0), d = x.extent(1);
    if (rows == 0) throw DataError("max_rows over an empty sequence");
    std::vector<double> out(d);
    std::vector<std::size_t> arg(d, 0);
    for (std::size_t j = 0; j < d; ++j) {
        double best = x.value()[j];
        for (std::size_t i = 1; i < rows; ++i) {
            const double v = x.value()[i * d + j];
            if (v > best) {
                best = v;
                arg[j] = i;
            }
        }
        out[j] = best;
    }
    return make_op({d}, std::move(out), {x}, [arg = std::move(arg), d](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t j = 0; j < d; ++j) X.grad[arg[j] * d + j] += self.grad[j];
    });
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    const std::size_t n = x.size();
    return make_op({1}, {s}, {x}, [n](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) X.grad[i] += self.grad[0];
    });
}

/// Extract row i of an L x d matrix as a 1 x d matrix.
inline Tensor row(const Tensor& x, std::size_t i) {
    if (x.rank() != 2) throw ShapeError("row() needs rank-2, got " + shape_str(x.shape()));
    const std::size_t rows = x.extent(0), d = x.extent(1);
    if (i >= rows) throw ShapeError("row index " + std::to_string(i) + " out of range");
    std::vector<double> out(x.value().begin() + i * d, x.value().begin() + (i + 1) * d);
    return make_op({1, d}, std::move(out), {x}, [i, d](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t j = 0; j < d; ++j) X.grad[i * d + j] += self.grad[j];
    });
}

/// Stack n width-d tensors (shape {d} or {1,d}) into an n x d matrix.
inline Tensor stack_rows(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("stack_rows of zero tensors");
    const std::size_t d = items[0].size();
    std::vector<double> out;
    out.reserve(items.size() * d);
    for (const Tensor& t : items) {
        if (t.rank() > 2 || t.size() != d || (t.rank() == 2 && t.extent(0) != 1)) {
            throw ShapeError("stack_rows item of shape " + shape_str(t.shape()) +
                             " is not a width-" + std::to_string(d) + " row");
        }
        out.insert(out.end(), t.value().begin(), t.value().end());
    }
    return make_op({items.size(), d}, std::move(out), items, [d](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            Node& P = *self.parents[i];
            if (!P.requires_grad) continue;
            for (std::size_t j = 0; j < d; ++j) P.grad[j] += self.grad[i * d + j];
        }
    });
}

/// Concatenate two matrices with equal row counts along the feature axis.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(0) != b.extent(0)) {
        throw ShapeError("concat_cols mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const std::size_t rows = a.extent(0), p = a.extent(1), q = b.extent(1);
    std::vector<double> out(rows * (p + q));
    for (std::size_t i = 0; i < rows; ++i) {
        std::copy_n(&a.value()[i * p], p, &out[i * (p + q)]);
        std::copy_n(&b.value()[i * q], q, &out[i * (p + q) + p]);
    }
    return make_op({rows, p + q}, std::move(out), {a, b}, [rows, p, q](Node& self) {
        Node& A = *self.parents[0];
        Node& B = *self.parents[1];
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < p; ++j)
                if (A.requires_grad) A.grad[i * p + j] += self.grad[i * (p + q) + j];
            for (std::size_t j = 0; j < q; ++j)
                if (B.requires_grad) B.grad[i * q + j] += self.grad[i * (p + q) + p + j];
        }
    });
}

/// Concatenate 1-D tensors into one long vector, in argument order.
inline Tensor concat_vec(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_vec of zero tensors");
    std::vector<double> out;
    std::vector<std::size_t> sizes;
    sizes.reserve(parts.size());
    for (const Tensor& t : parts) {
        if (t.rank() != 1) {
            throw ShapeError("concat_vec needs rank-1 parts, got " + shape_str(t.shape()));
        }
        sizes.push_back(t.size());
        out.insert(out.end(), t.value().begin(), t.value().end());
    }
    return make_op({out.size()}, std::move(out), parts, [sizes = std::move(sizes)](Node& self) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            Node& P = *self.parents[i];
            if (P.requires_grad) {
                for (std::size_t j = 0; j < sizes[i]; ++j) P.grad[j] += self.grad[off + j];
            }
            off += sizes[i];
        }
    });
}

/// Reinterpret the flat row-major buffer under a new shape of equal size.
inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    std::vector<double> out(x.value());
    const std::size_t n = x.size();
    return make_op(std::move(shape), std::move(out), {x}, [n](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) X.grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization ops.
// ---------------------------------------------------------------------------

/// Count of zero-norm rows encountered by normalization/cosine routines.
/// Degenerate rows map to zero output instead of NaN; this counter (plus a
/// stderr note) is how the policy surfaces.
inline std::atomic<std::uint64_t>& zero_norm_warning_count() {
    static std::atomic<std::uint64_t> count{0};
    return count;
}

inline void note_zero_norm(const char* where) {
    zero_norm_warning_count().fetch_add(1);
    std::cerr << "[smsdc] warning: zero-norm vector in " << where << "; similarity treated as 0\n";
}

/// Scale each row to unit L2 norm; zero rows stay zero (warning counted).
inline Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("l2_normalize_rows needs rank-2, got " + shape_str(x.shape()));
    }
    const std::size_t rows = x.extent(0), d = x.extent(1);
    std::vector<double> out(rows * d);
    std::vector<double> norms(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += x.value()[i * d + j] * x.value()[i * d + j];
        const double n = std::sqrt(sq);
        norms[i] = n;
        if (n == 0.0) {
            note_zero_norm("l2_normalize_rows");
            continue;  // row already zeroed by value-initialization
        }
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] / n;
    }
    return make_op(x.shape(), std::move(out), {x}, [norms = std::move(norms), d](Node& self) {
        Node& X = *self.parents[0];
        if (!X.requires_grad) return;
        for (std::size_t i = 0; i < norms.size(); ++i) {
            if (norms[i] == 0.0) continue;
            const double* y = &self.value[i * d];
            const double* g = &self.grad[i * d];
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < d; ++j) X.grad[i * d + j] += (g[j] - y[j] * dot) / norms[i];
        }
    });
}

/// LayerNorm over the feature axis of each row, with learnable scale/shift.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              double eps = 1e-5) {
    if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.extent(0) != x.extent(1) ||
        beta.extent(0) != x.extent(1)) {
        throw ShapeError("layer_norm_rows mismatch: x " + shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.extent(0), d = x.extent(1);
    std::vector<double> out(rows * d);
    std::vector<double> xhat(rows * d);
    std::vector<double> inv_s(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = &x.value()[i * d];
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_s[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (xr[j] - mu) * is;
            out[i * d + j] = gamma.value()[j] * xhat[i * d + j] + beta.value()[j];
        }
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), inv_s = std::move(inv_s), rows, d](Node& self) {
                       Node& X = *self.parents[0];
                       Node& G = *self.parents[1];
                       Node& B = *self.parents[2];
                       for (std::size_t i = 0; i < rows; ++i) {
                           const double* g = &self.grad[i * d];
                           const double* xh = &xhat[i * d];
                           if (X.requires_grad) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double t = G.value[j] * g[j];
                                   m1 += t;
                                   m2 += t * xh[j];
                               }
                               m1 /= static_cast<double>(d);
                               m2 /= static_cast<double>(d);
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double t = G.value[j] * g[j];
                                   X.grad[i * d + j] += (t - m1 - xh[j] * m2) * inv_s[i];
                               }
                           }
                           for (std::size_t j = 0; j < d; ++j) {
                               if (G.requires_grad) G.grad[j] += g[j] * xh[j];
                               if (B.requires_grad) B.grad[j] += g[j];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Batch normalization with running statistics.
// ---------------------------------------------------------------------------

enum class BnMode { train, infer };

/// Non-learnable per-feature running statistics of a batch-norm layer.
struct BnState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double eps = 1e-5;
    double momentum = 0.1;

    explicit BnState(std::size_t d = 0) { reset(d); }

    void reset(std::size_t d) {
        running_mean.assign(d, 0.0);
        running_var.assign(d, 1.0);
    }
    std::size_t width() const { return running_mean.size(); }
};

/// Batch normalization over the batch axis of a B x d matrix. Train mode
/// normalizes by batch statistics (biased variance) and folds them into the
/// running stats (unbiased variance, momentum update); infer mode uses the
/// running stats and never mutates state.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                         BnMode mode) {
    if (x.rank() != 2) throw ShapeError("batch_norm needs rank-2, got " + shape_str(x.shape()));
    const std::size_t batch = x.extent(0), d = x.extent(1);
    if (gamma.size() != d || beta.size() != d || state.width() != d) {
        throw ShapeError("batch_norm parameter width mismatch for " + shape_str(x.shape()));
    }
    if (mode == BnMode::train && batch < 2) {
        throw DataError("batch_norm train mode needs a batch of at least 2, got " +
                        std::to_string(batch));
    }

    std::vector<double> out(batch * d);
    if (mode == BnMode::infer) {
        std::vector<double> inv_s(d);
        for (std::size_t j = 0; j < d; ++j)
            inv_s[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const double xh = (x.value()[i * d + j] - state.running_mean[j]) * inv_s[j];
                out[i * d + j] = gamma.value()[j] * xh + beta.value()[j];
            }
        }
        return make_op(x.shape(), std::move(out), {x, gamma, beta},
                       [inv_s = std::move(inv_s), rm = state.running_mean, batch, d](Node& self) {
                           Node& X = *self.parents[0];
                           Node& G = *self.parents[1];
                           Node& B = *self.parents[2];
                           for (std::size_t i = 0; i < batch; ++i) {
                               for (std::size_t j = 0; j < d; ++j) {
                                   const double g = self.grad[i * d + j];
                                   if (X.requires_grad) X.grad[i * d + j] += g * G.value[j] * inv_s[j];
                                   if (G.requires_grad)
                                       G.grad[j] += g * (X.value[i * d + j] - rm[j]) * inv_s[j];
                                   if (B.requires_grad) B.grad[j] += g;
                               }
                           }
                       });
    }

    // Train mode: batch statistics.
    std::vector<double> mean(d, 0.0), var(d, 0.0), inv_s(d);
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += x.value()[i * d + j];
    for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double c = x.value()[i * d + j] - mean[j];
            var[j] += c * c;
        }
    }
    for (std::size_t j = 0; j < d; ++j) {
        var[j] /= static_cast<double>(batch);
        inv_s[j] = 1.0 / std::sqrt(var[j] + state.eps);
    }
    std::vector<double> xhat(batch * d);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x.value()[i * d + j] - mean[j]) * inv_s[j];
            out[i * d + j] = gamma.value()[j] * xhat[i * d + j] + beta.value()[j];
        }
    }
    const double unbias = static_cast<double>(batch) / static_cast<double>(batch - 1);
    for (std::size_t j = 0; j < d; ++j) {
        state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
        state.running_var[j] =
            (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j] * unbias;
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [xhat = std::move(xhat), inv_s = std::move(inv_s), batch, d](Node& self) {
                       Node& X = *self.parents[0];
                       Node& G = *self.parents[1];
                       Node& B = *self.parents[2];
                       const double invb = 1.0 / static_cast<double>(batch);
                       for (std::size_t j = 0; j < d; ++j) {
                           double m1 = 0.0, m2 = 0.0, dg = 0.0, db = 0.0;
                           for (std::size_t i = 0; i < batch; ++i) {
                               const double g = self.grad[i * d + j];
                               const double t = G.value[j] * g;
                               m1 += t;
                               m2 += t * xhat[i * d + j];
                               dg += g * xhat[i * d + j];
                               db += g;
                           }
                           m1 *= invb;
                           m2 *= invb;
                           if (X.requires_grad) {
                               for (std::size_t i = 0; i < batch; ++i) {
                                   const double t = G.value[j] * self.grad[i * d + j];
                                   X.grad[i * d + j] += (t - m1 - xhat[i * d + j] * m2) * inv_s[j];
                               }
                           }
                           if (G.requires_grad) G.grad[j] += dg;
                           if (B.requires_grad) B.grad[j] += db;
                       }
                   });
}

}  // namespace smsdc
