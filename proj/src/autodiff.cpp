#include "viewalign/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "viewalign/errors.hpp"

namespace viewalign {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// x[C,H,W] -> col[C*K*K, Ho*Wo]
void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* col) {
    const int64_t plane = static_cast<int64_t>(ho) * wo;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = col + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + wo, 0.0);
                        dst += wo;
                        continue;
                    }
                    const double* src = x + (static_cast<int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        *dst++ = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Accumulating inverse of im2col.
void col2im(const double* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo,
            double* x) {
    const int64_t plane = static_cast<int64_t>(ho) * wo;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = col + ((static_cast<int64_t>(ci) * k + ky) * k + kx) * plane;
                for (int oy = 0; oy < ho; ++oy, src += wo) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    double* dst = x + (static_cast<int64_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var Tape::push(Tensor value, bool tracked, std::function<void()> bw) {
    Node n;
    n.value = std::move(value);
    n.tracked = tracked && grad_enabled_;
    if (n.tracked) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) { return push(std::move(value), true, {}); }

Var Tape::constant(Tensor value) { return push(std::move(value), false, {}); }

Tensor& Tape::grad_buf(Var v) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
}

Tensor Tape::grad_of(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (n.grad.empty()) return Tensor::zeros(n.value.shape());
    return n.grad;
}

void Tape::backward(Var loss) {
    if (!grad_enabled_) throw Error("backward() on a grad-disabled tape");
    Node& l = nodes_[static_cast<size_t>(loss.id)];
    if (l.value.numel() != 1) throw Error("backward() expects a scalar loss");
    grad_buf(loss)[0] = 1.0;
    for (int32_t i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.backward && !n.grad.empty()) n.backward();
    }
}

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeMismatch("add: shape mismatch");
    Tensor out(va.shape());
    const int64_t n = va.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = va[i] + vb[i];
    return push(std::move(out), tracked(a) || tracked(b), [this, a, b, id = nodes_.size()]() {
        const Tensor& g = nodes_[id].grad;
        const int64_t m = g.numel();
        if (tracked(a)) {
            Tensor& ga = grad_buf(a);
            for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
        }
        if (tracked(b)) {
            Tensor& gb = grad_buf(b);
            for (int64_t i = 0; i < m; ++i) gb[i] += g[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeMismatch("sub: shape mismatch");
    Tensor out(va.shape());
    const int64_t n = va.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = va[i] - vb[i];
    return push(std::move(out), tracked(a) || tracked(b), [this, a, b, id = nodes_.size()]() {
        const Tensor& g = nodes_[id].grad;
        const int64_t m = g.numel();
        if (tracked(a)) {
            Tensor& ga = grad_buf(a);
            for (int64_t i = 0; i < m; ++i) ga[i] += g[i];
        }
        if (tracked(b)) {
            Tensor& gb = grad_buf(b);
            for (int64_t i = 0; i < m; ++i) gb[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (!va.same_shape(vb)) throw ShapeMismatch("mul: shape mismatch");
    Tensor out(va.shape());
    const int64_t n = va.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = va[i] * vb[i];
    return push(std::move(out), tracked(a) || tracked(b), [this, a, b, id = nodes_.size()]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& va2 = val(a);
        const Tensor& vb2 = val(b);
        const int64_t m = g.numel();
        if (tracked(a)) {
            Tensor& ga = grad_buf(a);
            for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * vb2[i];
        }
        if (tracked(b)) {
            Tensor& gb = grad_buf(b);
            for (int64_t i = 0; i < m; ++i) gb[i] += g[i] * va2[i];
        }
    });
}

Var Tape::scale(Var a, double c) {
    const Tensor& va = val(a);
    Tensor out(va.shape());
    const int64_t n = va.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = va[i] * c;
    return push(std::move(out), tracked(a), [this, a, c, id = nodes_.size()]() {
        if (!tracked(a)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_buf(a);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) ga[i] += g[i] * c;
    });
}

Var Tape::bias_add(Var x, Var b) {
    const Tensor& vx = val(x);
    const Tensor& vb = val(b);
    if (vx.rank() != 3 || vb.rank() != 1 || vb.dim(0) != vx.dim(0))
        throw ShapeMismatch("bias_add: expected [C,H,W] and [C]");
    const int64_t c = vx.dim(0), plane = vx.dim(1) * vx.dim(2);
    Tensor out(vx.shape());
    for (int64_t ci = 0; ci < c; ++ci) {
        const double bv = vb[ci];
        const double* src = vx.data() + ci * plane;
        double* dst = out.data() + ci * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + bv;
    }
    return push(std::move(out), tracked(x) || tracked(b),
                [this, x, b, c, plane, id = nodes_.size()]() {
                    const Tensor& g = nodes_[id].grad;
                    if (tracked(x)) {
                        Tensor& gx = grad_buf(x);
                        const int64_t m = g.numel();
                        for (int64_t i = 0; i < m; ++i) gx[i] += g[i];
                    }
                    if (tracked(b)) {
                        Tensor& gb = grad_buf(b);
                        for (int64_t ci = 0; ci < c; ++ci) {
                            const double* gp = g.data() + ci * plane;
                            double s = 0.0;
                            for (int64_t i = 0; i < plane; ++i) s += gp[i];
                            gb[ci] += s;
                        }
                    }
                });
}

Var Tape::channel_mul(Var x, Var g) {
    const Tensor& vx = val(x);
    const Tensor& vg = val(g);
    if (vx.rank() != 3 || vg.rank() != 1 || vg.dim(0) != vx.dim(0))
        throw ShapeMismatch("channel_mul: expected [C,H,W] and [C]");
    const int64_t c = vx.dim(0), plane = vx.dim(1) * vx.dim(2);
    Tensor out(vx.shape());
    for (int64_t ci = 0; ci < c; ++ci) {
        const double gv = vg[ci];
        const double* src = vx.data() + ci * plane;
        double* dst = out.data() + ci * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * gv;
    }
    return push(std::move(out), tracked(x) || tracked(g),
                [this, x, g, c, plane, id = nodes_.size()]() {
                    const Tensor& go = nodes_[id].grad;
                    const Tensor& vx2 = val(x);
                    const Tensor& vg2 = val(g);
                    if (tracked(x)) {
                        Tensor& gx = grad_buf(x);
                        for (int64_t ci = 0; ci < c; ++ci) {
                            const double gv = vg2[ci];
                            const double* gp = go.data() + ci * plane;
                            double* dst = gx.data() + ci * plane;
                            for (int64_t i = 0; i < plane; ++i) dst[i] += gp[i] * gv;
                        }
                    }
                    if (tracked(g)) {
                        Tensor& gg = grad_buf(g);
                        for (int64_t ci = 0; ci < c; ++ci) {
                            const double* gp = go.data() + ci * plane;
                            const double* xp = vx2.data() + ci * plane;
                            double s = 0.0;
                            for (int64_t i = 0; i < plane; ++i) s += gp[i] * xp[i];
                            gg[ci] += s;
                        }
                    }
                });
}

Var Tape::silu(Var x) {
    const Tensor& vx = val(x);
    Tensor out(vx.shape());
    const int64_t n = vx.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-vx[i]));
        out[i] = vx[i] * s;
    }
    return push(std::move(out), tracked(x), [this, x, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& vx2 = val(x);
        Tensor& gx = grad_buf(x);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-vx2[i]));
            gx[i] += g[i] * s * (1.0 + vx2[i] * (1.0 - s));
        }
    });
}

Var Tape::sigmoid(Var x) {
    const Tensor& vx = val(x);
    Tensor out(vx.shape());
    const int64_t n = vx.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-vx[i]));
    return push(std::move(out), tracked(x), [this, x, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        const Tensor& y = nodes_[id].value;
        Tensor& gx = grad_buf(x);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var Tape::linear(Var x, Var w, Var b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    if (vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1))
        throw DimensionMismatch("linear: x[m,k] and w[n,k] required");
    const int64_t m = vx.dim(0), k = vx.dim(1), n = vw.dim(0);
    Tensor out({m, n});
    {
        ConstMatMap xm(vx.data(), m, k);
        ConstMatMap wm(vw.data(), n, k);
        MatMap om(out.data(), m, n);
        om.noalias() = xm * wm.transpose();
    }
    if (b.valid()) {
        const Tensor& vb = val(b);
        if (vb.rank() != 1 || vb.dim(0) != n) throw DimensionMismatch("linear: bias must be [n]");
        for (int64_t i = 0; i < m; ++i) {
            double* row = out.data() + i * n;
            for (int64_t j = 0; j < n; ++j) row[j] += vb[j];
        }
    }
    const bool track = tracked(x) || tracked(w) || (b.valid() && tracked(b));
    return push(std::move(out), track, [this, x, w, b, m, k, n, id = nodes_.size()]() {
        const Tensor& g = nodes_[id].grad;
        ConstMatMap gm(g.data(), m, n);
        if (tracked(x)) {
            ConstMatMap wm(val(w).data(), n, k);
            MatMap gx(grad_buf(x).data(), m, k);
            gx.noalias() += gm * wm;
        }
        if (tracked(w)) {
            ConstMatMap xm(val(x).data(), m, k);
            MatMap gw(grad_buf(w).data(), n, k);
            gw.noalias() += gm.transpose() * xm;
        }
        if (b.valid() && tracked(b)) {
            Tensor& gb = grad_buf(b);
            for (int64_t i = 0; i < m; ++i) {
                const double* row = g.data() + i * n;
                for (int64_t j = 0; j < n; ++j) gb[j] += row[j];
            }
        }
    });
}

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(w);
    if (vx.rank() != 3 || vw.rank() != 4 || vw.dim(1) != vx.dim(0) || vw.dim(2) != vw.dim(3))
        throw ShapeMismatch("conv2d: x[Cin,H,W], w[Cout,Cin,K,K] required");
    const int cin = static_cast<int>(vx.dim(0));
    const int h = static_cast<int>(vx.dim(1));
    const int wdt = static_cast<int>(vx.dim(2));
    const int cout = static_cast<int>(vw.dim(0));
    const int k = static_cast<int>(vw.dim(2));
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wdt + 2 * pad - k) / stride + 1;
    if (ho < 1 || wo < 1) throw ShapeMismatch("conv2d: output would be empty");

    const int64_t ckk = static_cast<int64_t>(cin) * k * k;
    const int64_t plane = static_cast<int64_t>(ho) * wo;
    Tensor col({ckk, plane});
    im2col(vx.data(), cin, h, wdt, k, stride, pad, ho, wo, col.data());

    Tensor out({cout, static_cast<int64_t>(ho), static_cast<int64_t>(wo)});
    {
        ConstMatMap wm(vw.data(), cout, ckk);
        ConstMatMap cm(col.data(), ckk, plane);
        MatMap om(out.data(), cout, plane);
        om.noalias() = wm * cm;
    }
    if (b.valid()) {
        const Tensor& vb = val(b);
        if (vb.rank() != 1 || vb.dim(0) != cout) throw ShapeMismatch("conv2d: bias must be [Cout]");
        for (int c = 0; c < cout; ++c) {
            double* dst = out.data() + static_cast<int64_t>(c) * plane;
            const double bv = vb[c];
            for (int64_t i = 0; i < plane; ++i) dst[i] += bv;
        }
    }
    const bool track = tracked(x) || tracked(w) || (b.valid() && tracked(b));
    return push(std::move(out), track,
                [this, x, w, b, cin, h, wdt, cout, k, stride, pad, ho, wo, ckk, plane,
                 id = nodes_.size()]() {
                    const Tensor& g = nodes_[id].grad;
                    ConstMatMap gm(g.data(), cout, plane);
                    // Recompute the unfolded input instead of keeping it alive
                    // for the whole tape.
                    Tensor col2({ckk, plane});
                    im2col(val(x).data(), cin, h, wdt, k, stride, pad, ho, wo, col2.data());
                    if (tracked(w)) {
                        MatMap gw(grad_buf(w).data(), cout, ckk);
                        ConstMatMap cm(col2.data(), ckk, plane);
                        gw.noalias() += gm * cm.transpose();
                    }
                    if (tracked(x)) {
                        Tensor dcol({ckk, plane});
                        ConstMatMap wm(val(w).data(), cout, ckk);
                        MatMap dm(dcol.data(), ckk, plane);
                        dm.noalias() = wm.transpose() * gm;
                        col2im(dcol.data(), cin, h, wdt, k, stride, pad, ho, wo,
                               grad_buf(x).data());
                    }
                    if (b.valid() && tracked(b)) {
                        Tensor& gb = grad_buf(b);
                        for (int c = 0; c < cout; ++c) {
                            const double* row = g.data() + static_cast<int64_t>(c) * plane;
                            double s = 0.0;
                            for (int64_t i = 0; i < plane; ++i) s += row[i];
                            gb[c] += s;
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Var Tape::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
    const Tensor& vx = val(x);
    if (vx.rank() != 3) throw ShapeMismatch("group_norm: expected [C,H,W]");
    const int64_t c = vx.dim(0), plane = vx.dim(1) * vx.dim(2);
    if (c % groups != 0) throw ShapeMismatch("group_norm: C must be divisible by groups");
    const int64_t gs = c / groups;
    const int64_t gn = gs * plane;  // elements per group

    std::vector<double> mean(static_cast<size_t>(groups));
    std::vector<double> inv_std(static_cast<size_t>(groups));
    Tensor out(vx.shape());
    const Tensor& vgam = val(gamma);
    const Tensor& vbet = val(beta);
    for (int g = 0; g < groups; ++g) {
        const double* src = vx.data() + g * gn;
        double mu = 0.0;
        for (int64_t i = 0; i < gn; ++i) mu += src[i];
        mu /= static_cast<double>(gn);
        double var = 0.0;
        for (int64_t i = 0; i < gn; ++i) {
            const double d = src[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(gn);
        const double inv = 1.0 / std::sqrt(var + eps);
        mean[static_cast<size_t>(g)] = mu;
        inv_std[static_cast<size_t>(g)] = inv;
        for (int64_t ci = 0; ci < gs; ++ci) {
            const int64_t ch = g * gs + ci;
            const double ga = vgam[ch], be = vbet[ch];
            const double* sp = vx.data() + ch * plane;
            double* dp = out.data() + ch * plane;
            for (int64_t i = 0; i < plane; ++i) dp[i] = ga * (sp[i] - mu) * inv + be;
        }
    }
    const bool track = tracked(x) || tracked(gamma) || tracked(beta);
    return push(std::move(out), track,
                [this, x, gamma, beta, groups, c, plane, gs, gn, mean = std::move(mean),
                 inv_std = std::move(inv_std), id = nodes_.size()]() {
                    const Tensor& g = nodes_[id].grad;
                    const Tensor& vx2 = val(x);
                    const Tensor& vgam2 = val(gamma);
                    for (int gi = 0; gi < groups; ++gi) {
                        const double mu = mean[static_cast<size_t>(gi)];
                        const double inv = inv_std[static_cast<size_t>(gi)];
                        // dxhat plus the two per-group reductions
                        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                        for (int64_t ci = 0; ci < gs; ++ci) {
                            const int64_t ch = gi * gs + ci;
                            const double ga = vgam2[ch];
                            const double* gp = g.data() + ch * plane;
                            const double* xp = vx2.data() + ch * plane;
                            for (int64_t i = 0; i < plane; ++i) {
                                const double xh = (xp[i] - mu) * inv;
                                const double dxh = gp[i] * ga;
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        const double m_dxh = sum_dxh / static_cast<double>(gn);
                        const double m_dxh_xh = sum_dxh_xh / static_cast<double>(gn);
                        for (int64_t ci = 0; ci < gs; ++ci) {
                            const int64_t ch = gi * gs + ci;
                            const double ga = vgam2[ch];
                            const double* gp = g.data() + ch * plane;
                            const double* xp = vx2.data() + ch * plane;
                            if (tracked(gamma)) {
                                double s = 0.0;
                                for (int64_t i = 0; i < plane; ++i)
                                    s += gp[i] * (xp[i] - mu) * inv;
                                grad_buf(gamma)[ch] += s;
                            }
                            if (tracked(beta)) {
                                double s = 0.0;
                                for (int64_t i = 0; i < plane; ++i) s += gp[i];
                                grad_buf(beta)[ch] += s;
                            }
                            if (tracked(x)) {
                                double* dxp = grad_buf(x).data() + ch * plane;
                                for (int64_t i = 0; i < plane; ++i) {
                                    const double xh = (xp[i] - mu) * inv;
                                    const double dxh = gp[i] * ga;
                                    dxp[i] += inv * (dxh - m_dxh - xh * m_dxh_xh);
                                }
                            }
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// shape / spatial
// ---------------------------------------------------------------------------

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
    const Tensor& vx = val(x);
    Tensor out = vx.reshaped(shape);
    return push(std::move(out), tracked(x), [this, x, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_buf(x);
        const int64_t m = g.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += g[i];
    });
}

Var Tape::chw_to_rows(Var x) {
    const Tensor& vx = val(x);
    if (vx.rank() != 3) throw ShapeMismatch("chw_to_rows: expected [C,H,W]");
    const int64_t c = vx.dim(0), plane = vx.dim(1) * vx.dim(2);
    Tensor out({plane, c});
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* src = vx.data() + ci * plane;
        for (int64_t p = 0; p < plane; ++p) out[p * c + ci] = src[p];
    }
    return push(std::move(out), tracked(x), [this, x, c, plane, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_buf(x);
        for (int64_t ci = 0; ci < c; ++ci) {
            double* dst = gx.data() + ci * plane;
            for (int64_t p = 0; p < plane; ++p) dst[p] += g[p * c + ci];
        }
    });
}

Var Tape::rows_to_chw(Var x, int64_t c, int64_t h, int64_t w) {
    const Tensor& vx = val(x);
    if (vx.rank() != 2 || vx.dim(0) != h * w || vx.dim(1) != c)
        throw ShapeMismatch("rows_to_chw: expected [H*W, C]");
    const int64_t plane = h * w;
    Tensor out({c, h, w});
    for (int64_t ci = 0; ci < c; ++ci) {
        double* dst = out.data() + ci * plane;
        for (int64_t p = 0; p < plane; ++p) dst[p] = vx[p * c + ci];
    }
    return push(std::move(out), tracked(x), [this, x, c, plane, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_buf(x);
        for (int64_t ci = 0; ci < c; ++ci) {
            const double* src = g.data() + ci * plane;
            for (int64_t p = 0; p < plane; ++p) gx[p * c + ci] += src[p];
        }
    });
}

Var Tape::upsample_nearest2x(Var x) {
    const Tensor& vx = val(x);
    if (vx.rank() != 3) throw ShapeMismatch("upsample_nearest2x: expected [C,H,W]");
    const int64_t c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t y = 0; y < h; ++y) {
            const double* src = vx.data() + (ci * h + y) * w;
            double* d0 = out.data() + (ci * 2 * h + 2 * y) * 2 * w;
            double* d1 = d0 + 2 * w;
            for (int64_t xx = 0; xx < w; ++xx) {
                const double v = src[xx];
                d0[2 * xx] = v;
                d0[2 * xx + 1] = v;
                d1[2 * xx] = v;
                d1[2 * xx + 1] = v;
            }
        }
    return push(std::move(out), tracked(x), [this, x, c, h, w, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_buf(x);
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t y = 0; y < h; ++y) {
                double* dst = gx.data() + (ci * h + y) * w;
                const double* s0 = g.data() + (ci * 2 * h + 2 * y) * 2 * w;
                const double* s1 = s0 + 2 * w;
                for (int64_t xx = 0; xx < w; ++xx)
                    dst[xx] += s0[2 * xx] + s0[2 * xx + 1] + s1[2 * xx] + s1[2 * xx + 1];
            }
    });
}

Var Tape::global_avg_pool(Var x) {
    const Tensor& vx = val(x);
    if (vx.rank() != 3) throw ShapeMismatch("global_avg_pool: expected [C,H,W]");
    const int64_t c = vx.dim(0), plane = vx.dim(1) * vx.dim(2);
    Tensor out({c});
    for (int64_t ci = 0; ci < c; ++ci) {
        const double* src = vx.data() + ci * plane;
        double s = 0.0;
        for (int64_t i = 0; i < plane; ++i) s += src[i];
        out[ci] = s / static_cast<double>(plane);
    }
    return push(std::move(out), tracked(x), [this, x, c, plane, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_buf(x);
        for (int64_t ci = 0; ci < c; ++ci) {
            const double gv = g[ci] / static_cast<double>(plane);
            double* dst = gx.data() + ci * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] += gv;
        }
    });
}

Var Tape::concat_channels(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.rank() != 3 || vb.rank() != 3 || va.dim(1) != vb.dim(1) || va.dim(2) != vb.dim(2))
        throw ShapeMismatch("concat_channels: spatial dims must match");
    const int64_t ca = va.dim(0), cb = vb.dim(0), plane = va.dim(1) * va.dim(2);
    Tensor out({ca + cb, va.dim(1), va.dim(2)});
    std::copy(va.data(), va.data() + ca * plane, out.data());
    std::copy(vb.data(), vb.data() + cb * plane, out.data() + ca * plane);
    return push(std::move(out), tracked(a) || tracked(b),
                [this, a, b, ca, cb, plane, id = nodes_.size()]() {
                    const Tensor& g = nodes_[id].grad;
                    if (tracked(a)) {
                        Tensor& ga = grad_buf(a);
                        const int64_t n = ca * plane;
                        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
                    }
                    if (tracked(b)) {
                        Tensor& gb = grad_buf(b);
                        const int64_t n = cb * plane;
                        const double* src = g.data() + ca * plane;
                        for (int64_t i = 0; i < n; ++i) gb[i] += src[i];
                    }
                });
}

Var Tape::concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw Error("concat_rows: empty input list");
    const int64_t d = val(xs[0]).dim(1);
    int64_t rows = 0;
    bool track = false;
    for (Var v : xs) {
        const Tensor& t = val(v);
        if (t.rank() != 2 || t.dim(1) != d) throw ShapeMismatch("concat_rows: column mismatch");
        rows += t.dim(0);
        track = track || tracked(v);
    }
    Tensor out({rows, d});
    int64_t off = 0;
    std::vector<int64_t> offsets;
    offsets.reserve(xs.size());
    for (Var v : xs) {
        const Tensor& t = val(v);
        std::copy(t.data(), t.data() + t.numel(), out.data() + off * d);
        offsets.push_back(off);
        off += t.dim(0);
    }
    return push(std::move(out), track,
                [this, xs, offsets = std::move(offsets), d, id = nodes_.size()]() {
                    const Tensor& g = nodes_[id].grad;
                    for (size_t i = 0; i < xs.size(); ++i) {
                        if (!tracked(xs[i])) continue;
                        Tensor& gx = grad_buf(xs[i]);
                        const int64_t n = gx.numel();
                        const double* src = g.data() + offsets[i] * d;
                        for (int64_t j = 0; j < n; ++j) gx[j] += src[j];
                    }
                });
}

Var Tape::gather_rows(Var x, std::vector<int64_t> idx) {
    const Tensor& vx = val(x);
    if (vx.rank() != 2) throw ShapeMismatch("gather_rows: expected [n,d]");
    const int64_t d = vx.dim(1);
    Tensor out({static_cast<int64_t>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy(vx.data() + idx[i] * d, vx.data() + (idx[i] + 1) * d,
                  out.data() + static_cast<int64_t>(i) * d);
    return push(std::move(out), tracked(x),
                [this, x, idx = std::move(idx), d, id = nodes_.size()]() {
                    if (!tracked(x)) return;
                    const Tensor& g = nodes_[id].grad;
                    Tensor& gx = grad_buf(x);
                    for (size_t i = 0; i < idx.size(); ++i) {
                        const double* src = g.data() + static_cast<int64_t>(i) * d;
                        double* dst = gx.data() + idx[i] * d;
                        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
                });
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

Var Tape::patch_attention(Var q, Var k, Var v, std::vector<int64_t> seg, double scale) {
    const Tensor& vq = val(q);
    const Tensor& vk = val(k);
    const Tensor& vv = val(v);
    if (vq.rank() != 2 || vk.rank() != 2 || vv.rank() != 2)
        throw ShapeMismatch("patch_attention: rank-2 inputs required");
    const int64_t p = vq.dim(0), d = vq.dim(1), n = vk.dim(0);
    if (vk.dim(1) != d || vv.dim(0) != n || vv.dim(1) != d)
        throw ShapeMismatch("patch_attention: dim mismatch");
    if (static_cast<int64_t>(seg.size()) != p + 1 || seg.front() != 0 || seg.back() != n)
        throw ShapeMismatch("patch_attention: bad segment table");

    std::vector<double> alpha(static_cast<size_t>(n));
    Tensor out({p, d});
    for (int64_t pi = 0; pi < p; ++pi) {
        const int64_t s = seg[static_cast<size_t>(pi)], e = seg[static_cast<size_t>(pi) + 1];
        double* orow = out.data() + pi * d;
        if (s == e) {
            std::fill(orow, orow + d, 0.0);
            continue;
        }
        const double* qrow = vq.data() + pi * d;
        double mx = -1e300;
        for (int64_t c = s; c < e; ++c) {
            const double* krow = vk.data() + c * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += qrow[j] * krow[j];
            alpha[static_cast<size_t>(c)] = dot * scale;
            mx = std::max(mx, dot * scale);
        }
        double z = 0.0;
        for (int64_t c = s; c < e; ++c) {
            const double ex = std::exp(alpha[static_cast<size_t>(c)] - mx);
            alpha[static_cast<size_t>(c)] = ex;
            z += ex;
        }
        std::fill(orow, orow + d, 0.0);
        for (int64_t c = s; c < e; ++c) {
            const double a = alpha[static_cast<size_t>(c)] / z;
            alpha[static_cast<size_t>(c)] = a;
            const double* vrow = vv.data() + c * d;
            for (int64_t j = 0; j < d; ++j) orow[j] += a * vrow[j];
        }
    }
    const bool track = tracked(q) || tracked(k) || tracked(v);
    return push(std::move(out), track,
                [this, q, k, v, p, d, seg = std::move(seg), alpha = std::move(alpha), scale,
                 id = nodes_.size()]() {
                    const Tensor& g = nodes_[id].grad;
                    const Tensor& vq2 = val(q);
                    const Tensor& vk2 = val(k);
                    const Tensor& vv2 = val(v);
                    const bool tq = tracked(q), tk = tracked(k), tv = tracked(v);
                    for (int64_t pi = 0; pi < p; ++pi) {
                        const int64_t s = seg[static_cast<size_t>(pi)];
                        const int64_t e = seg[static_cast<size_t>(pi) + 1];
                        if (s == e) continue;
                        const double* grow = g.data() + pi * d;
                        const double* qrow = vq2.data() + pi * d;
                        // d_alpha_c = v_c . gout; softmax backward gives
                        // d_logit_c = a_c (d_alpha_c - sum_c' a_c' d_alpha_c')
                        double inner = 0.0;
                        for (int64_t c = s; c < e; ++c) {
                            const double* vrow = vv2.data() + c * d;
                            double da = 0.0;
                            for (int64_t j = 0; j < d; ++j) da += vrow[j] * grow[j];
                            inner += alpha[static_cast<size_t>(c)] * da;
                        }
                        for (int64_t c = s; c < e; ++c) {
                            const double a = alpha[static_cast<size_t>(c)];
                            const double* vrow = vv2.data() + c * d;
                            const double* krow = vk2.data() + c * d;
                            double da = 0.0;
                            for (int64_t j = 0; j < d; ++j) da += vrow[j] * grow[j];
                            const double dlogit = a * (da - inner);
                            if (tv) {
                                double* gv = grad_buf(v).data() + c * d;
                                for (int64_t j = 0; j < d; ++j) gv[j] += a * grow[j];
                            }
                            if (tq) {
                                double* gq = grad_buf(q).data() + pi * d;
                                for (int64_t j = 0; j < d; ++j)
                                    gq[j] += dlogit * scale * krow[j];
                            }
                            if (tk) {
                                double* gk = grad_buf(k).data() + c * d;
                                for (int64_t j = 0; j < d; ++j)
                                    gk[j] += dlogit * scale * qrow[j];
                            }
                        }
                    }
                });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var Tape::sum(Var x) {
    const Tensor& vx = val(x);
    double s = 0.0;
    const int64_t n = vx.numel();
    for (int64_t i = 0; i < n; ++i) s += vx[i];
    return push(Tensor::scalar(s), tracked(x), [this, x, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const double g = nodes_[id].grad[0];
        Tensor& gx = grad_buf(x);
        const int64_t m = gx.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += g;
    });
}

Var Tape::mean(Var x) {
    const Tensor& vx = val(x);
    const int64_t n = vx.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += vx[i];
    s /= static_cast<double>(n);
    return push(Tensor::scalar(s), tracked(x), [this, x, n, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const double g = nodes_[id].grad[0] / static_cast<double>(n);
        Tensor& gx = grad_buf(x);
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

Var Tape::sum_sq(Var x) {
    const Tensor& vx = val(x);
    double s = 0.0;
    const int64_t n = vx.numel();
    for (int64_t i = 0; i < n; ++i) s += vx[i] * vx[i];
    return push(Tensor::scalar(s), tracked(x), [this, x, id = nodes_.size()]() {
        if (!tracked(x)) return;
        const double g = nodes_[id].grad[0];
        const Tensor& vx2 = val(x);
        Tensor& gx = grad_buf(x);
        const int64_t m = gx.numel();
        for (int64_t i = 0; i < m; ++i) gx[i] += 2.0 * g * vx2[i];
    });
}

}  // namespace viewalign
