#pragma once

// Test-only reference implementations, kept independent of the tape path
// they verify: plain loops over plain arrays.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "pio/attention.hpp"
#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

namespace oracle {

inline pio::Parameter* param_by_suffix(const std::vector<pio::Parameter*>& params,
                                       const std::string& suffix) {
    for (pio::Parameter* p : params) {
        if (p->name.size() >= suffix.size() &&
            p->name.compare(p->name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            return p;
        }
    }
    throw std::runtime_error("no parameter ending in " + suffix);
}

// y = x * w + b with explicit loops.
inline pio::Tensor naive_linear(const pio::Tensor& x, const pio::Tensor& w, const pio::Tensor& b) {
    pio::Tensor out({x.rows(), w.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double acc = b[j];
            for (std::size_t k = 0; k < x.cols(); ++k) acc += x.at(i, k) * w.at(k, j);
            out.at(i, j) = acc;
        }
    }
    return out;
}

inline pio::Tensor naive_layer_norm(const pio::Tensor& x, const pio::Tensor& scale,
                                    const pio::Tensor& bias, double eps = 1e-6) {
    pio::Tensor out({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) mean += x.at(i, j);
        mean /= static_cast<double>(x.cols());
        double var = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
        }
        var /= static_cast<double>(x.cols());
        for (std::size_t j = 0; j < x.cols(); ++j) {
            out.at(i, j) = (x.at(i, j) - mean) / std::sqrt(var + eps) * scale[j] + bias[j];
        }
    }
    return out;
}

// Triple-loop per-head QKV attention straight from the weight matrices.
inline pio::Tensor naive_qkv_attention(const pio::Tensor& xq, const pio::Tensor& xkv,
                                       pio::AttentionModule& module,
                                       const pio::Tensor* mask = nullptr) {
    auto params = module.parameters();
    const pio::Tensor& wq = param_by_suffix(params, ".f_q.w")->value;
    const pio::Tensor& bq = param_by_suffix(params, ".f_q.b")->value;
    const pio::Tensor& wk = param_by_suffix(params, ".f_k.w")->value;
    const pio::Tensor& bk = param_by_suffix(params, ".f_k.b")->value;
    const pio::Tensor& wv = param_by_suffix(params, ".f_v.w")->value;
    const pio::Tensor& bv = param_by_suffix(params, ".f_v.b")->value;
    const pio::Tensor& wo = param_by_suffix(params, ".f_o.w")->value;
    const pio::Tensor& bo = param_by_suffix(params, ".f_o.b")->value;

    const pio::Tensor q = naive_linear(xq, wq, bq);
    const pio::Tensor k = naive_linear(xkv, wk, bk);
    const pio::Tensor v = naive_linear(xkv, wv, bv);
    const std::size_t heads = module.config().num_heads;
    const std::size_t fh = module.qk_channels() / heads;
    const std::size_t vh = module.v_channels() / heads;
    const std::size_t n = xq.rows(), m = xkv.rows();

    pio::Tensor merged({n, module.v_channels()});
    for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> scores(m);
            double mx = -1e300;
            for (std::size_t j = 0; j < m; ++j) {
                double dot = 0.0;
                for (std::size_t c = 0; c < fh; ++c) dot += q.at(i, h * fh + c) * k.at(j, h * fh + c);
                scores[j] = dot / std::sqrt(static_cast<double>(fh));
                if (mask) scores[j] += mask->at(i, j);
                mx = std::max(mx, scores[j]);
            }
            double denom = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                denom += scores[j];
            }
            for (std::size_t c = 0; c < vh; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < m; ++j) acc += scores[j] / denom * v.at(j, h * vh + c);
                merged.at(i, h * vh + c) = acc;
            }
        }
    }
    return naive_linear(merged, wo, bo);
}

inline double max_abs_diff(const pio::Tensor& a, const pio::Tensor& b) {
    if (!a.same_shape(b)) throw std::runtime_error("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline bool bit_identical(const pio::Tensor& a, const pio::Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

inline void zero_param(pio::Parameter* p) {
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.0;
}

// Zeroes every residual-branch output projection (f_o and the second MLP
// layer) of the module so the block reduces to its skip connections.
inline void zero_residual_branches(pio::AttentionModule& module) {
    auto params = module.parameters();
    zero_param(param_by_suffix(params, ".f_o.w"));
    zero_param(param_by_suffix(params, ".f_o.b"));
    zero_param(param_by_suffix(params, ".mlp.w2"));
    zero_param(param_by_suffix(params, ".mlp.b2"));
}

}  // namespace oracle
