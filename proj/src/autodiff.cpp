#include "pio/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace pio {

namespace {
constexpr double kMaskBlockedThreshold = -1e8;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double erf_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double erf_gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}
double tanh_gelu(double x) {
    const double c = 0.79788456080286535588;  // sqrt(2/pi)
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}
double tanh_gelu_grad(double x) {
    const double c = 0.79788456080286535588;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}
}  // namespace

Tape::Node& Tape::node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw std::invalid_argument("invalid tape handle");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw std::invalid_argument("invalid tape handle");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> rule) {
    Node n;
    n.value = std::move(value);  // grad buffers are allocated by backward()
    n.requires_grad = requires_grad;
    n.rule = std::move(rule);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, {});
}

Var Tape::param(Parameter& p) {
    Var v = push(p.value, true, {});
    node(v).source = &p;
    return v;
}

const Tensor& Tape::grad(Var v) const {
    if (!ran_backward_) throw std::logic_error("grad requested before backward()");
    return node(v).grad;
}

Var Tape::matmul(Var a, Var b) {
    Tensor out = mat_mul(value(a), value(b));
    const bool rg = needs_grad(a) || needs_grad(b);
    int ia = a.id, ib = b.id;
    return push(std::move(out), rg, [ia, ib](Tape& t) {
        const int self = t.current_;
        const Tensor& g = t.nodes_[self].grad;
        if (t.nodes_[ia].requires_grad) accumulate(t.nodes_[ia].grad, mat_mul_nt(g, t.nodes_[ib].value));
        if (t.nodes_[ib].requires_grad) accumulate(t.nodes_[ib].grad, mat_mul_tn(t.nodes_[ia].value, g));
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    Tensor out = mat_mul_nt(value(a), value(b));
    const bool rg = needs_grad(a) || needs_grad(b);
    int ia = a.id, ib = b.id;
    return push(std::move(out), rg, [ia, ib](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        if (t.nodes_[ia].requires_grad) accumulate(t.nodes_[ia].grad, mat_mul(g, t.nodes_[ib].value));
        if (t.nodes_[ib].requires_grad) accumulate(t.nodes_[ib].grad, mat_mul_tn(g, t.nodes_[ia].value));
    });
}

Var Tape::add(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) {
        throw std::invalid_argument("add shape mismatch: " + va.shape_str() + " + " + vb.shape_str());
    }
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    int ia = a.id, ib = b.id;
    return push(std::move(out), needs_grad(a) || needs_grad(b), [ia, ib](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        if (t.nodes_[ia].requires_grad) accumulate(t.nodes_[ia].grad, g);
        if (t.nodes_[ib].requires_grad) accumulate(t.nodes_[ib].grad, g);
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (!va.same_shape(vb)) {
        throw std::invalid_argument("sub shape mismatch: " + va.shape_str() + " - " + vb.shape_str());
    }
    Tensor out(va.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    int ia = a.id, ib = b.id;
    return push(std::move(out), needs_grad(a) || needs_grad(b), [ia, ib](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        if (t.nodes_[ia].requires_grad) accumulate(t.nodes_[ia].grad, g);
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.nodes_[ib].grad;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Var Tape::scale(Var a, double s) {
    Tensor out(value(a).shape());
    const Tensor& va = value(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * s;
    int ia = a.id;
    return push(std::move(out), needs_grad(a), [ia, s](Tape& t) {
        if (!t.nodes_[ia].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& ga = t.nodes_[ia].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

Var Tape::add_bias(Var x, Var bias) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(bias);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (vb.size() != c) {
        throw std::invalid_argument("add_bias: bias " + vb.shape_str() + " does not match " + vx.shape_str());
    }
    Tensor out({n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = vx.at(i, j) + vb[j];
    int ix = x.id, ib = bias.id;
    return push(std::move(out), needs_grad(x) || needs_grad(bias), [ix, ib, n, c](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        if (t.nodes_[ix].requires_grad) accumulate(t.nodes_[ix].grad, g);
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.nodes_[ib].grad;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g.at(i, j);
        }
    });
}

Var Tape::linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

Var Tape::softmax_rows(Var x, const Tensor* additive_mask) {
    const Tensor& vx = value(x);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (additive_mask && !(additive_mask->rows() == n && additive_mask->cols() == c)) {
        throw std::invalid_argument("softmax mask shape " + additive_mask->shape_str() +
                                    " does not match logits " + vx.shape_str());
    }
    Tensor out({n, c});
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any_open = false;
        for (std::size_t j = 0; j < c; ++j) {
            double v = vx.at(i, j);
            if (!std::isfinite(v)) throw std::invalid_argument("softmax: non-finite input at row " + std::to_string(i));
            if (additive_mask) {
                const double m = additive_mask->at(i, j);
                if (m > kMaskBlockedThreshold) any_open = true;
                v += m;
            } else {
                any_open = true;
            }
            mx = std::max(mx, v);
        }
        if (!any_open) {
            throw std::invalid_argument("softmax: row " + std::to_string(i) + " has no valid attention targets");
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double v = vx.at(i, j);
            if (additive_mask) v += additive_mask->at(i, j);
            const double e = std::exp(v - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= sum;
    }
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix, n, c](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& y = t.nodes_[t.current_].value;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < c; ++j) gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    });
}

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& vx = value(x);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (value(gamma).size() != c || value(beta).size() != c) {
        throw std::invalid_argument("layer_norm: scale/bias width does not match " + vx.shape_str());
    }
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    Tensor out({n, c});
    Tensor xhat({n, c});
    Tensor inv_std({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += vx.at(i, j);
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = vx.at(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std.at(i, 0) = inv;
        for (std::size_t j = 0; j < c; ++j) {
            const double xh = (vx.at(i, j) - mean) * inv;
            xhat.at(i, j) = xh;
            out.at(i, j) = xh * vg[j] + vb[j];
        }
    }
    int ix = x.id, ig = gamma.id, ib = beta.id;
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto istd = std::make_shared<Tensor>(std::move(inv_std));
    return push(std::move(out), needs_grad(x) || needs_grad(gamma) || needs_grad(beta),
                [ix, ig, ib, n, c, xh, istd](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        const Tensor& vg = t.nodes_[ig].value;
        if (t.nodes_[ig].requires_grad) {
            Tensor& gg = t.nodes_[ig].grad;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) gg[j] += g.at(i, j) * xh->at(i, j);
        }
        if (t.nodes_[ib].requires_grad) {
            Tensor& gb = t.nodes_[ib].grad;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) gb[j] += g.at(i, j);
        }
        if (t.nodes_[ix].requires_grad) {
            Tensor& gx = t.nodes_[ix].grad;
            for (std::size_t i = 0; i < n; ++i) {
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = g.at(i, j) * vg[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh->at(i, j);
                }
                mean_dxhat /= static_cast<double>(c);
                mean_dxhat_xhat /= static_cast<double>(c);
                const double inv = istd->at(i, 0);
                for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = g.at(i, j) * vg[j];
                    gx.at(i, j) += inv * (dxh - mean_dxhat - xh->at(i, j) * mean_dxhat_xhat);
                }
            }
        }
    });
}

Var Tape::gelu(Var x, GeluKind kind) {
    const Tensor& vx = value(x);
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = kind == GeluKind::Exact ? erf_gelu(vx[i]) : tanh_gelu(vx[i]);
    }
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix, kind](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        const Tensor& vx = t.nodes_[ix].value;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double d = kind == GeluKind::Exact ? erf_gelu_grad(vx[i]) : tanh_gelu_grad(vx[i]);
            gx[i] += g[i] * d;
        }
    });
}

Var Tape::tanh(Var x) {
    const Tensor& vx = value(x);
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(vx[i]);
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        const Tensor& y = t.nodes_[t.current_].value;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var Tape::dropout(Var x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout rate must be in [0, 1)");
    if (rate == 0.0) return x;
    const Tensor& vx = value(x);
    auto mask = std::make_shared<Tensor>(vx.shape());
    const double keep = 1.0 - rate;
    Tensor out(vx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        out[i] = vx[i] * m;
    }
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix, mask](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
}

Var Tape::concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t n = value(parts[0]).rows();
    std::size_t total = 0;
    bool rg = false;
    for (Var p : parts) {
        if (value(p).rows() != n) {
            throw std::invalid_argument("concat_cols: row mismatch " + value(p).shape_str());
        }
        total += value(p).cols();
        rg = rg || needs_grad(p);
    }
    Tensor out({n, total});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> widths;
    for (Var p : parts) {
        const Tensor& v = value(p);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < v.cols(); ++j) out.at(i, off + j) = v.at(i, j);
        ids.push_back(p.id);
        widths.push_back(v.cols());
        off += v.cols();
    }
    return push(std::move(out), rg, [ids, widths, n](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.nodes_[ids[k]].requires_grad) {
                Tensor& gp = t.nodes_[ids[k]].grad;
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp.at(i, j) += g.at(i, off + j);
            }
            off += widths[k];
        }
    });
}

Var Tape::concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const std::size_t c = value(parts[0]).cols();
    std::size_t total = 0;
    bool rg = false;
    for (Var p : parts) {
        if (value(p).cols() != c) {
            throw std::invalid_argument("concat_rows: column mismatch " + value(p).shape_str());
        }
        total += value(p).rows();
        rg = rg || needs_grad(p);
    }
    Tensor out({total, c});
    std::size_t off = 0;
    std::vector<int> ids;
    std::vector<std::size_t> heights;
    for (Var p : parts) {
        const Tensor& v = value(p);
        std::copy(v.data(), v.data() + v.size(), out.data() + off * c);
        ids.push_back(p.id);
        heights.push_back(v.rows());
        off += v.rows();
    }
    return push(std::move(out), rg, [ids, heights, c](Tape& t) {
        const Tensor& g = t.nodes_[t.current_].grad;
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.nodes_[ids[k]].requires_grad) {
                Tensor& gp = t.nodes_[ids[k]].grad;
                for (std::size_t i = 0; i < heights[k] * c; ++i) gp[i] += g[off * c + i];
            }
            off += heights[k];
        }
    });
}

Var Tape::slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Tensor& vx = value(x);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (count == 0 || begin + count > n) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") out of " + vx.shape_str());
    }
    Tensor out({count, c});
    std::copy(vx.data() + begin * c, vx.data() + (begin + count) * c, out.data());
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix, begin, count, c](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < count * c; ++i) gx[begin * c + i] += g[i];
    });
}

Var Tape::slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Tensor& vx = value(x);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (count == 0 || begin + count > c) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + count) + ") out of " + vx.shape_str());
    }
    Tensor out({n, count});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j) out.at(i, j) = vx.at(i, begin + j);
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix, begin, count, n](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < count; ++j) gx.at(i, begin + j) += g.at(i, j);
    });
}

Var Tape::gather_rows(Var x, std::vector<std::size_t> indices) {
    const Tensor& vx = value(x);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (indices.empty()) throw std::invalid_argument("gather_rows: empty index list");
    for (std::size_t idx : indices) {
        if (idx >= n) {
            throw std::out_of_range("gather_rows: index " + std::to_string(idx) + " out of " + vx.shape_str());
        }
    }
    Tensor out({indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = vx.at(indices[i], j);
    int ix = x.id;
    auto idxs = std::make_shared<std::vector<std::size_t>>(std::move(indices));
    return push(std::move(out), needs_grad(x), [ix, idxs, c](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < idxs->size(); ++i)
            for (std::size_t j = 0; j < c; ++j) gx.at((*idxs)[i], j) += g.at(i, j);
    });
}

Var Tape::tile_rows(Var row, std::size_t n) {
    const Tensor& vr = value(row);
    if (vr.rows() != 1) throw std::invalid_argument("tile_rows: expected a single row, got " + vr.shape_str());
    if (n == 0) throw std::invalid_argument("tile_rows: n must be >= 1");
    const std::size_t c = vr.cols();
    Tensor out({n, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = vr.at(0, j);
    int ir = row.id;
    return push(std::move(out), needs_grad(row), [ir, n, c](Tape& t) {
        if (!t.nodes_[ir].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gr = t.nodes_[ir].grad;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gr.at(0, j) += g.at(i, j);
    });
}

Var Tape::mean_rows(Var x) {
    const Tensor& vx = value(x);
    const std::size_t n = vx.rows(), c = vx.cols();
    Tensor out({1, c});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) out.at(0, j) += vx.at(i, j);
    for (std::size_t j = 0; j < c; ++j) out.at(0, j) /= static_cast<double>(n);
    int ix = x.id;
    return push(std::move(out), needs_grad(x), [ix, n, c](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const Tensor& g = t.nodes_[t.current_].grad;
        Tensor& gx = t.nodes_[ix].grad;
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gx.at(i, j) += g.at(0, j) * inv;
    });
}

Var Tape::sum_all(Var x) {
    const Tensor& vx = value(x);
    double s = 0.0;
    for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
    int ix = x.id;
    return push(Tensor::scalar(s), needs_grad(x), [ix](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const double g = t.nodes_[t.current_].grad[0];
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

Var Tape::add_scalars(std::span<const Var> scalars, std::span<const double> weights) {
    if (scalars.empty() || scalars.size() != weights.size()) {
        throw std::invalid_argument("add_scalars: need matching scalar/weight lists");
    }
    double s = 0.0;
    bool rg = false;
    std::vector<int> ids;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        if (value(scalars[i]).size() != 1) throw std::invalid_argument("add_scalars: inputs must be scalars");
        s += weights[i] * value(scalars[i])[0];
        rg = rg || needs_grad(scalars[i]);
        ids.push_back(scalars[i].id);
    }
    std::vector<double> ws(weights.begin(), weights.end());
    return push(Tensor::scalar(s), rg, [ids, ws](Tape& t) {
        const double g = t.nodes_[t.current_].grad[0];
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (t.nodes_[ids[i]].requires_grad) t.nodes_[ids[i]].grad[0] += g * ws[i];
        }
    });
}

Var Tape::softmax_cross_entropy(Var logits, const std::vector<std::size_t>& targets,
                                const std::vector<std::uint8_t>* valid) {
    const Tensor& vx = value(logits);
    const std::size_t n = vx.rows(), c = vx.cols();
    if (targets.size() != n) throw std::invalid_argument("cross_entropy: target count mismatch");
    if (valid && valid->size() != n) throw std::invalid_argument("cross_entropy: valid mask size mismatch");
    std::size_t n_valid = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (valid && !(*valid)[i]) continue;
        if (targets[i] >= c) {
            throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) +
                                    " out of range for " + std::to_string(c) + " classes");
        }
        ++n_valid;
        double mx = vx.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, vx.at(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < c; ++j) lse += std::exp(vx.at(i, j) - mx);
        lse = mx + std::log(lse);
        total += lse - vx.at(i, targets[i]);
    }
    if (n_valid == 0) throw std::invalid_argument("cross_entropy: no valid rows");
    const double loss = total / static_cast<double>(n_valid);
    int ix = logits.id;
    auto tg = std::make_shared<std::vector<std::size_t>>(targets);
    auto vd = valid ? std::make_shared<std::vector<std::uint8_t>>(*valid) : nullptr;
    return push(Tensor::scalar(loss), needs_grad(logits), [ix, tg, vd, n, c, n_valid](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const double g = t.nodes_[t.current_].grad[0] / static_cast<double>(n_valid);
        const Tensor& vx = t.nodes_[ix].value;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < n; ++i) {
            if (vd && !(*vd)[i]) continue;
            double mx = vx.at(i, 0);
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, vx.at(i, j));
            double sum = 0.0;
            for (std::size_t j = 0; j < c; ++j) sum += std::exp(vx.at(i, j) - mx);
            for (std::size_t j = 0; j < c; ++j) {
                const double p = std::exp(vx.at(i, j) - mx) / sum;
                gx.at(i, j) += g * (p - (j == (*tg)[i] ? 1.0 : 0.0));
            }
        }
    });
}

Var Tape::l1_loss(Var pred, const Tensor& target, const std::vector<std::uint8_t>* valid) {
    const Tensor& vp = value(pred);
    if (!vp.same_shape(target)) {
        throw std::invalid_argument("l1_loss shape mismatch: " + vp.shape_str() + " vs " + target.shape_str());
    }
    const std::size_t n = vp.rows(), c = vp.cols();
    if (valid && valid->size() != n) throw std::invalid_argument("l1_loss: valid mask size mismatch");
    std::size_t count = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (valid && !(*valid)[i]) continue;
        count += c;
        for (std::size_t j = 0; j < c; ++j) total += std::fabs(vp.at(i, j) - target.at(i, j));
    }
    if (count == 0) throw std::invalid_argument("l1_loss: no valid rows");
    int ip = pred.id;
    auto tgt = std::make_shared<Tensor>(target);
    auto vd = valid ? std::make_shared<std::vector<std::uint8_t>>(*valid) : nullptr;
    return push(Tensor::scalar(total / static_cast<double>(count)), needs_grad(pred),
                [ip, tgt, vd, n, c, count](Tape& t) {
        if (!t.nodes_[ip].requires_grad) return;
        const double g = t.nodes_[t.current_].grad[0] / static_cast<double>(count);
        const Tensor& vp = t.nodes_[ip].value;
        Tensor& gp = t.nodes_[ip].grad;
        for (std::size_t i = 0; i < n; ++i) {
            if (vd && !(*vd)[i]) continue;
            for (std::size_t j = 0; j < c; ++j) {
                const double d = vp.at(i, j) - tgt->at(i, j);
                gp.at(i, j) += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
            }
        }
    });
}

Var Tape::multi_hot_cross_entropy(Var logits, const Tensor& targets) {
    const Tensor& vx = value(logits);
    if (!vx.same_shape(targets)) {
        throw std::invalid_argument("multi_hot_cross_entropy shape mismatch: " + vx.shape_str() + " vs " +
                                    targets.shape_str());
    }
    const std::size_t n = vx.rows(), c = vx.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            const double x = vx.at(i, j), y = targets.at(i, j);
            // Stable binary cross-entropy on logits.
            total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
        }
    }
    int ix = logits.id;
    auto tgt = std::make_shared<Tensor>(targets);
    return push(Tensor::scalar(total / static_cast<double>(n)), needs_grad(logits), [ix, tgt, n, c](Tape& t) {
        if (!t.nodes_[ix].requires_grad) return;
        const double g = t.nodes_[t.current_].grad[0] / static_cast<double>(n);
        const Tensor& vx = t.nodes_[ix].value;
        Tensor& gx = t.nodes_[ix].grad;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                const double sig = 1.0 / (1.0 + std::exp(-vx.at(i, j)));
                gx.at(i, j) += g * (sig - tgt->at(i, j));
            }
        }
    });
}

void Tape::backward(Var scalar_loss) {
    const Tensor& loss = value(scalar_loss);
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
    }
    if (!std::isfinite(loss[0])) {
        throw std::runtime_error("backward: non-finite loss value");
    }
    for (Node& n : nodes_) {
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    }
    node(scalar_loss).grad[0] = 1.0;
    ran_backward_ = true;
    for (int i = scalar_loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || !n.rule) continue;
        current_ = i;
        n.rule(*this);
    }
    for (auto& n : nodes_) {
        if (n.source) accumulate(n.source->grad, n.grad);
    }
}

GradCheckResult grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                           const GradCheckOptions& opts) {
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        Var loss = f(tape);
        tape.backward(loss);
    }
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad);

    auto eval = [&]() {
        Tape tape;
        Var loss = f(tape);
        const double v = tape.value(loss)[0];
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss at probe point");
        return v;
    };

    Rng rng(opts.probe_seed);
    GradCheckResult result;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        std::vector<std::size_t> probe;
        if (opts.max_probes_per_param == 0 || p->value.size() <= opts.max_probes_per_param) {
            probe.resize(p->value.size());
            for (std::size_t i = 0; i < probe.size(); ++i) probe[i] = i;
        } else {
            probe = rng.sample_without_replacement(p->value.size(), opts.max_probes_per_param);
        }
        for (std::size_t i : probe) {
            const double saved = p->value[i];
            p->value[i] = saved + opts.h;
            const double up = eval();
            p->value[i] = saved - opts.h;
            const double down = eval();
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * opts.h);
            const double a = analytic[pi][i];
            const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            ++result.probes;
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_param = p->name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return result;
}

}  // namespace pio
