#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smsdc/ops.hpp"
#include "smsdc/rng.hpp"
#include "smsdc/tensor.hpp"

namespace smsdc {

/// A sequence feature map is an L x d tensor: one row per timestep
/// (frame or word), one column per channel.
using SequenceFeatureMap = Tensor;

/// Grid of dilated-convolution branches applied to one feature map.
/// Kernel sizes run over {2, ..., kernel_scales+1}, dilations over
/// {1, ..., dilation_count}; the branch count is their product.
struct SmsdcConfig {
    std::size_t kernel_scales = 4;   // n: kernel size set {2..n+1}
    std::size_t dilation_count = 2;  // m: dilation set {1..m}
    std::size_t width = 0;           // d: channel width, preserved per branch
    std::string activation = "relu";
    bool centered = false;  // opt-in centered taps; default is the forward-looking form

    std::size_t branch_count() const { return kernel_scales * dilation_count; }
    std::size_t out_width() const { return branch_count() * width; }

    void validate() const {
        if (kernel_scales < 1 || dilation_count < 1 || width < 1) {
            throw ConfigError("smsdc config needs n >= 1, m >= 1, d >= 1");
        }
    }
};

/// One dilated-convolution branch: `taps` weight matrices of size d x d
/// applied at source offsets dilation, 2*dilation, ..., taps*dilation.
struct DilatedKernel {
    std::size_t taps = 1;      // w
    std::size_t dilation = 1;  // r
    Tensor weights;            // {w, d, d}
    Tensor bias;               // {d}

    std::size_t width() const { return bias.extent(0); }
};

/// Inclusive span of forward offsets feeding one output position:
/// taps sit at offsets r, 2r, ..., w*r ahead of t.
inline std::pair<std::size_t, std::size_t> receptive_field(std::size_t w, std::size_t r) {
    if (w < 1 || r < 1) throw ConfigError("receptive_field needs w >= 1 and r >= 1");
    return {r, w * r};
}

/// Dilated temporal convolution over an L x d map, output length exactly L.
///
/// Default (forward) form: out(t) = sum_{i=1..w} F[t + r*i] * W_i + bias,
/// where out-of-range rows read as zero; position t itself is not a tap.
/// The centered variant shifts the tap window to offsets
/// r*(i-1-floor((w-1)/2)), which includes t and looks both ways.
inline SequenceFeatureMap dilated_conv1d(const SequenceFeatureMap& f, const DilatedKernel& k,
                                         bool centered = false) {
    if (f.rank() != 2) {
        throw ShapeError("dilated_conv1d input must be L x d, got " + shape_str(f.shape()));
    }
    const std::size_t len = f.extent(0), d = f.extent(1);
    const std::size_t w = k.taps, r = k.dilation;
    if (k.weights.rank() != 3 || k.weights.extent(0) != w || k.weights.extent(1) != d ||
        k.weights.extent(2) != d || k.bias.size() != d) {
        throw ShapeError("dilated kernel of shape " + shape_str(k.weights.shape()) +
                         " does not fit input " + shape_str(f.shape()));
    }

    // Source row for output position t (0-based) and tap i (1-based), or -1
    // when the tap falls in the zero padding.
    const auto source_row = [len, r, w, centered](std::size_t t, std::size_t i) -> std::ptrdiff_t {
        std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t);
        if (centered) {
            src += static_cast<std::ptrdiff_t>(r) *
                   (static_cast<std::ptrdiff_t>(i) - 1 - static_cast<std::ptrdiff_t>((w - 1) / 2));
        } else {
            src += static_cast<std::ptrdiff_t>(r * i);
        }
        return (src >= 0 && src < static_cast<std::ptrdiff_t>(len)) ? src : -1;
    };

    const auto& fv = f.value();
    const auto& wv = k.weights.value();
    std::vector<double> out(len * d);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t b = 0; b < d; ++b) out[t * d + b] = k.bias.value()[b];
        for (std::size_t i = 1; i <= w; ++i) {
            const std::ptrdiff_t src = source_row(t, i);
            if (src < 0) continue;
            const double* frow = &fv[static_cast<std::size_t>(src) * d];
            const double* wmat = &wv[(i - 1) * d * d];
            double* orow = &out[t * d];
            for (std::size_t a = 0; a < d; ++a) {
                const double x = frow[a];
                if (x == 0.0) continue;
                const double* wrow = &wmat[a * d];
                for (std::size_t b = 0; b < d; ++b) orow[b] += x * wrow[b];
            }
        }
    }

    return make_op({len, d}, std::move(out), {f, k.weights, k.bias},
                   [len, d, w, source_row](Node& self) {
                       Node& F = *self.parents[0];
                       Node& W = *self.parents[1];
                       Node& B = *self.parents[2];
                       for (std::size_t t = 0; t < len; ++t) {
                           const double* grow = &self.grad[t * d];
                           if (B.requires_grad) {
                               for (std::size_t b = 0; b < d; ++b) B.grad[b] += grow[b];
                           }
                           for (std::size_t i = 1; i <= w; ++i) {
                               const std::ptrdiff_t src = source_row(t, i);
                               if (src < 0) continue;
                               const std::size_t s = static_cast<std::size_t>(src);
                               const std::size_t wbase = (i - 1) * d * d;
                               if (F.requires_grad) {
                                   for (std::size_t a = 0; a < d; ++a) {
                                       double acc = 0.0;
                                       const double* wrow = &W.value[wbase + a * d];
                                       for (std::size_t b = 0; b < d; ++b) acc += grow[b] * wrow[b];
                                       F.grad[s * d + a] += acc;
                                   }
                               }
                               if (W.requires_grad) {
                                   for (std::size_t a = 0; a < d; ++a) {
                                       const double x = F.value[s * d + a];
                                       if (x == 0.0) continue;
                                       double* wgrow = &W.grad[wbase + a * d];
                                       for (std::size_t b = 0; b < d; ++b) wgrow[b] += x * grow[b];
                                   }
                               }
                           }
                       }
                   });
}

/// Fresh kernel bank covering the config's (r, w) grid in the fixed branch
/// order: dilation ascending outer, kernel size ascending inner. This order
/// is part of the output layout contract (branches concatenate by index).
inline std::vector<DilatedKernel> init_kernel_bank(const SmsdcConfig& cfg, std::mt19937_64& rng,
                                                   const std::string& path_prefix) {
    cfg.validate();
    std::vector<DilatedKernel> bank;
    bank.reserve(cfg.branch_count());
    for (std::size_t r = 1; r <= cfg.dilation_count; ++r) {
        for (std::size_t w = 2; w <= cfg.kernel_scales + 1; ++w) {
            DilatedKernel k;
            k.taps = w;
            k.dilation = r;
            const double bound = 1.0 / std::sqrt(static_cast<double>(w * cfg.width));
            k.weights = Tensor::uniform({w, cfg.width, cfg.width}, -bound, bound, rng, true);
            k.bias = Tensor::zeros({cfg.width}, true);
            const std::string tag = path_prefix + ".r" + std::to_string(r) + "w" + std::to_string(w);
            k.weights.set_name(tag + ".weight");
            k.bias.set_name(tag + ".bias");
            bank.push_back(std::move(k));
        }
    }
    return bank;
}

/// Multi-scale dilated convolution: one dilated_conv1d per (r, w) branch,
/// all on the same input map. The kernel bank must enumerate the config's
/// grid exactly, in bank order.
inline std::vector<SequenceFeatureMap> msdc(const SequenceFeatureMap& f, const SmsdcConfig& cfg,
                                            const std::vector<DilatedKernel>& kernels) {
    cfg.validate();
    if (kernels.size() != cfg.branch_count()) {
        throw ConfigError("kernel bank has " + std::to_string(kernels.size()) + " branches, config needs " +
                          std::to_string(cfg.branch_count()));
    }
    std::vector<SequenceFeatureMap> branches;
    branches.reserve(kernels.size());
    std::size_t idx = 0;
    for (std::size_t r = 1; r <= cfg.dilation_count; ++r) {
        for (std::size_t w = 2; w <= cfg.kernel_scales + 1; ++w, ++idx) {
            const DilatedKernel& k = kernels[idx];
            if (k.taps != w || k.dilation != r || k.width() != cfg.width) {
                throw ConfigError("kernel " + std::to_string(idx) + " is (w=" + std::to_string(k.taps) +
                                  ",r=" + std::to_string(k.dilation) + "), grid position wants (w=" +
                                  std::to_string(w) + ",r=" + std::to_string(r) + ")");
            }
            branches.push_back(dilated_conv1d(f, k, cfg.centered));
        }
    }
    return branches;
}

/// Eq-7-style reduction: activate every branch, then max-pool each channel
/// over time. nm branch maps of L x d collapse to one nm x d stack.
inline Tensor activate_and_pool(const std::vector<SequenceFeatureMap>& branches,
                                std::string_view activation) {
    if (branches.empty()) throw ConfigError("activate_and_pool on an empty branch stack");
    std::vector<Tensor> pooled;
    pooled.reserve(branches.size());
    for (const Tensor& b : branches) {
        pooled.push_back(max_rows(apply_activation(activation, b)));
    }
    return stack_rows(pooled);
}

/// Stacked MSDC local representation. The first stage's pooled nm x d stack
/// is itself a sequence feature map (length nm) that the second stage
/// convolves again; branch rows then concatenate in bank order to one
/// vector of width nm*d.
inline Tensor smsdc(const SequenceFeatureMap& f_g, const SmsdcConfig& cfg,
                    const std::vector<DilatedKernel>& stage1,
                    const std::vector<DilatedKernel>& stage2) {
    Tensor pooled1 = activate_and_pool(msdc(f_g, cfg, stage1), cfg.activation);
    Tensor pooled2 = activate_and_pool(msdc(pooled1, cfg, stage2), cfg.activation);
    // Row-major flatten of the nm x d stack == concatenation by branch index.
    return reshape(pooled2, {cfg.out_width()});
}

}  // namespace smsdc
