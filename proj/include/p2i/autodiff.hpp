#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <unordered_map>
#include <vector>

#include "p2i/error.hpp"
#include "p2i/tensor.hpp"

namespace p2i::ad {

// Trainable parameter. Gradients accumulate across tape runs until the
// optimizer consumes them.
struct Param {
    Tensor value;
    Tensor grad;

    explicit Param(Tensor v) : value(std::move(v)), grad(Tensor::zeros(value.shape())) {}
    Param() = default;

    void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), 0.0); }
};

// Reverse-mode tape. Nodes are created in topological order; backward()
// walks them in reverse and then flushes gradients into bound Params.
class Tape {
public:
    using Handle = int;

    Handle constant(Tensor v) { return push(std::move(v), false, {}); }

    Handle leaf(Tensor v) { return push(std::move(v), true, {}); }

    // Memoized param binding: one node per Param per tape.
    Handle param(Param& p) {
        auto it = param_handles_.find(&p);
        if (it != param_handles_.end()) return it->second;
        Handle h = leaf(p.value);
        param_handles_.emplace(&p, h);
        return h;
    }

    const Tensor& value(Handle h) const { return nodes_[h].value; }
    const Tensor& grad(Handle h) const { return nodes_[h].grad; }

    // --- elementwise ---

    Handle add(Handle a, Handle b) {
        check_same(a, b);
        Tensor out = nodes_[a].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += nodes_[b].value[i];
        return binary(std::move(out), a, b, [this](Node& n) {
            accumulate(n.a, n.grad.vec());
            accumulate(n.b, n.grad.vec());
        });
    }

    Handle sub(Handle a, Handle b) {
        check_same(a, b);
        Tensor out = nodes_[a].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= nodes_[b].value[i];
        return binary(std::move(out), a, b, [this](Node& n) {
            accumulate(n.a, n.grad.vec());
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (nodes_[n.b].needs_grad) nodes_[n.b].grad[i] -= n.grad[i];
        });
    }

    Handle mul(Handle a, Handle b) {
        check_same(a, b);
        Tensor out = nodes_[a].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= nodes_[b].value[i];
        return binary(std::move(out), a, b, [this](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (nodes_[n.a].needs_grad) nodes_[n.a].grad[i] += n.grad[i] * nodes_[n.b].value[i];
                if (nodes_[n.b].needs_grad) nodes_[n.b].grad[i] += n.grad[i] * nodes_[n.a].value[i];
            }
        });
    }

    Handle scale(Handle a, double c) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v *= c;
        return unary(std::move(out), a, [this, c](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                nodes_[n.a].grad[i] += c * n.grad[i];
        });
    }

    Handle add_const(Handle a, double c) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v += c;
        return unary(std::move(out), a,
                     [this](Node& n) { accumulate(n.a, n.grad.vec()); });
    }

    Handle relu(Handle a) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
        return unary(std::move(out), a, [this](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                if (nodes_[n.a].value[i] > 0.0) nodes_[n.a].grad[i] += n.grad[i];
        });
    }

    Handle leaky_relu(Handle a, double slope = 0.01) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v = v > 0.0 ? v : slope * v;
        return unary(std::move(out), a, [this, slope](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                nodes_[n.a].grad[i] += (nodes_[n.a].value[i] > 0.0 ? 1.0 : slope) * n.grad[i];
        });
    }

    Handle tanh_act(Handle a) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v = std::tanh(v);
        Handle h = unary(std::move(out), a, [this](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                nodes_[n.a].grad[i] += (1.0 - n.value[i] * n.value[i]) * n.grad[i];
        });
        return h;
    }

    Handle sigmoid(Handle a) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v = 1.0 / (1.0 + std::exp(-v));
        return unary(std::move(out), a, [this](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                nodes_[n.a].grad[i] += n.value[i] * (1.0 - n.value[i]) * n.grad[i];
        });
    }

    Handle softplus(Handle a) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v = v > 30.0 ? v : std::log1p(std::exp(v));
        return unary(std::move(out), a, [this](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                double x = nodes_[n.a].value[i];
                nodes_[n.a].grad[i] += n.grad[i] / (1.0 + std::exp(-x));
            }
        });
    }

    // Clamp to [lo, hi]; zero gradient outside the open interval.
    Handle clamp(Handle a, double lo, double hi) {
        Tensor out = nodes_[a].value;
        for (auto& v : out.vec()) v = std::min(hi, std::max(lo, v));
        return unary(std::move(out), a, [this, lo, hi](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                double x = nodes_[n.a].value[i];
                if (x > lo && x < hi) nodes_[n.a].grad[i] += n.grad[i];
            }
        });
    }

    // --- shape ---

    Handle reshape(Handle a, std::vector<std::size_t> shape) {
        Tensor out = nodes_[a].value.reshaped(std::move(shape));
        return unary(std::move(out), a,
                     [this](Node& n) { accumulate(n.a, n.grad.vec()); });
    }

    Handle slice(Handle a, std::size_t start, std::size_t len) {
        const Tensor& in = nodes_[a].value;
        require(start + len <= in.size(), "ShapeMismatch", "slice out of range");
        Tensor out({len});
        for (std::size_t i = 0; i < len; ++i) out[i] = in[start + i];
        return unary(std::move(out), a, [this, start](Node& n) {
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                nodes_[n.a].grad[start + i] += n.grad[i];
        });
    }

    Handle concat(const std::vector<Handle>& parts) {
        require(!parts.empty(), "ShapeMismatch", "concat of nothing");
        std::size_t total = 0;
        for (Handle h : parts) total += nodes_[h].value.size();
        Tensor out({total});
        std::size_t off = 0;
        bool ng = false;
        for (Handle h : parts) {
            const Tensor& v = nodes_[h].value;
            std::copy(v.vec().begin(), v.vec().end(), out.vec().begin() + off);
            off += v.size();
            ng = ng || nodes_[h].needs_grad;
        }
        Handle out_h = push(std::move(out), ng, parts);
        nodes_[out_h].backward = [this, parts](Node& n) {
            std::size_t o = 0;
            for (Handle h : parts) {
                Node& src = nodes_[h];
                if (src.needs_grad)
                    for (std::size_t i = 0; i < src.value.size(); ++i)
                        src.grad[i] += n.grad[o + i];
                o += src.value.size();
            }
        };
        return out_h;
    }

    // --- linear algebra ---

    // y = W x + b, W {out,in}, x {in}, b {out}.
    Handle linear(Handle w, Handle x, Handle b) {
        const Tensor& W = nodes_[w].value;
        const Tensor& X = nodes_[x].value;
        const Tensor& B = nodes_[b].value;
        require(W.shape().size() == 2, "ShapeMismatch", "weight must be 2-D");
        std::size_t out_dim = W.dim(0), in_dim = W.dim(1);
        require(X.size() == in_dim && B.size() == out_dim, "ShapeMismatch", "linear dims");
        Tensor out({out_dim});
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = B[o];
            const double* row = W.data() + o * in_dim;
            for (std::size_t i = 0; i < in_dim; ++i) s += row[i] * X[i];
            out[o] = s;
        }
        Handle h = push(std::move(out), any_grad({w, x, b}), {w, x, b});
        nodes_[h].backward = [this, w, x, b, out_dim, in_dim](Node& n) {
            const Tensor& W = nodes_[w].value;
            const Tensor& X = nodes_[x].value;
            for (std::size_t o = 0; o < out_dim; ++o) {
                double g = n.grad[o];
                if (g == 0.0) continue;
                if (nodes_[b].needs_grad) nodes_[b].grad[o] += g;
                if (nodes_[w].needs_grad) {
                    double* wrow = nodes_[w].grad.data() + o * in_dim;
                    for (std::size_t i = 0; i < in_dim; ++i) wrow[i] += g * X[i];
                }
                if (nodes_[x].needs_grad) {
                    const double* row = W.data() + o * in_dim;
                    for (std::size_t i = 0; i < in_dim; ++i) nodes_[x].grad[i] += g * row[i];
                }
            }
        };
        return h;
    }

    // x {Cin,H,W}, k {Cout,Cin,kh,kw}, b {Cout} -> {Cout,Ho,Wo}.
    Handle conv2d(Handle x, Handle k, Handle b, std::size_t stride, std::size_t pad) {
        const Tensor& X = nodes_[x].value;
        const Tensor& K = nodes_[k].value;
        std::size_t cin = X.dim(0), H = X.dim(1), W = X.dim(2);
        std::size_t cout = K.dim(0), kh = K.dim(2), kw = K.dim(3);
        require(K.dim(1) == cin, "ShapeMismatch", "conv2d channel mismatch");
        std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
        std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
        Tensor out({cout, Ho, Wo});
        for (std::size_t oc = 0; oc < cout; ++oc)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    double s = nodes_[b].value[oc];
                    for (std::size_t ic = 0; ic < cin; ++ic)
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) {
                                std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                if (ih < 0 || iw < 0 || ih >= (std::ptrdiff_t)H ||
                                    iw >= (std::ptrdiff_t)W)
                                    continue;
                                s += X.at(ic, ih, iw) *
                                     K[((oc * cin + ic) * kh + i) * kw + j];
                            }
                    out.at(oc, oh, ow) = s;
                }
        Handle h = push(std::move(out), any_grad({x, k, b}), {x, k, b});
        nodes_[h].backward = [this, x, k, b, stride, pad, cin, H, W, cout, kh, kw, Ho,
                              Wo](Node& n) {
            const Tensor& X = nodes_[x].value;
            const Tensor& K = nodes_[k].value;
            for (std::size_t oc = 0; oc < cout; ++oc)
                for (std::size_t oh = 0; oh < Ho; ++oh)
                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                        double g = n.grad.at(oc, oh, ow);
                        if (g == 0.0) continue;
                        if (nodes_[b].needs_grad) nodes_[b].grad[oc] += g;
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            for (std::size_t i = 0; i < kh; ++i)
                                for (std::size_t j = 0; j < kw; ++j) {
                                    std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(oh * stride + i) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    std::ptrdiff_t iw =
                                        static_cast<std::ptrdiff_t>(ow * stride + j) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (ih < 0 || iw < 0 || ih >= (std::ptrdiff_t)H ||
                                        iw >= (std::ptrdiff_t)W)
                                        continue;
                                    std::size_t kidx = ((oc * cin + ic) * kh + i) * kw + j;
                                    if (nodes_[k].needs_grad)
                                        nodes_[k].grad[kidx] += g * X.at(ic, ih, iw);
                                    if (nodes_[x].needs_grad)
                                        nodes_[x].grad.at(ic, ih, iw) += g * K[kidx];
                                }
                    }
        };
        return h;
    }

    // x {Cin,H,W}, k {Cin,Cout,kh,kw}, b {Cout} -> {Cout,Ho,Wo},
    // Ho = (H-1)*stride - 2*pad + kh.
    Handle conv_transpose2d(Handle x, Handle k, Handle b, std::size_t stride, std::size_t pad) {
        const Tensor& X = nodes_[x].value;
        const Tensor& K = nodes_[k].value;
        std::size_t cin = X.dim(0), H = X.dim(1), W = X.dim(2);
        require(K.dim(0) == cin, "ShapeMismatch", "deconv channel mismatch");
        std::size_t cout = K.dim(1), kh = K.dim(2), kw = K.dim(3);
        std::size_t Ho = (H - 1) * stride + kh - 2 * pad;
        std::size_t Wo = (W - 1) * stride + kw - 2 * pad;
        Tensor out({cout, Ho, Wo});
        for (std::size_t oc = 0; oc < cout; ++oc)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) out.at(oc, oh, ow) = nodes_[b].value[oc];
        for (std::size_t ic = 0; ic < cin; ++ic)
            for (std::size_t ih = 0; ih < H; ++ih)
                for (std::size_t iw = 0; iw < W; ++iw) {
                    double xv = X.at(ic, ih, iw);
                    for (std::size_t oc = 0; oc < cout; ++oc)
                        for (std::size_t i = 0; i < kh; ++i)
                            for (std::size_t j = 0; j < kw; ++j) {
                                std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih * stride + i) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(iw * stride + j) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                if (oh < 0 || ow < 0 || oh >= (std::ptrdiff_t)Ho ||
                                    ow >= (std::ptrdiff_t)Wo)
                                    continue;
                                out.at(oc, oh, ow) +=
                                    xv * K[((ic * cout + oc) * kh + i) * kw + j];
                            }
                }
        Handle h = push(std::move(out), any_grad({x, k, b}), {x, k, b});
        nodes_[h].backward = [this, x, k, b, stride, pad, cin, H, W, cout, kh, kw, Ho,
                              Wo](Node& n) {
            const Tensor& X = nodes_[x].value;
            const Tensor& K = nodes_[k].value;
            if (nodes_[b].needs_grad)
                for (std::size_t oc = 0; oc < cout; ++oc)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow)
                            nodes_[b].grad[oc] += n.grad.at(oc, oh, ow);
            for (std::size_t ic = 0; ic < cin; ++ic)
                for (std::size_t ih = 0; ih < H; ++ih)
                    for (std::size_t iw = 0; iw < W; ++iw) {
                        double xv = X.at(ic, ih, iw);
                        double xg = 0.0;
                        for (std::size_t oc = 0; oc < cout; ++oc)
                            for (std::size_t i = 0; i < kh; ++i)
                                for (std::size_t j = 0; j < kw; ++j) {
                                    std::ptrdiff_t oh =
                                        static_cast<std::ptrdiff_t>(ih * stride + i) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    std::ptrdiff_t ow =
                                        static_cast<std::ptrdiff_t>(iw * stride + j) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (oh < 0 || ow < 0 || oh >= (std::ptrdiff_t)Ho ||
                                        ow >= (std::ptrdiff_t)Wo)
                                        continue;
                                    std::size_t kidx = ((ic * cout + oc) * kh + i) * kw + j;
                                    double g = n.grad.at(oc, oh, ow);
                                    xg += g * K[kidx];
                                    if (nodes_[k].needs_grad) nodes_[k].grad[kidx] += g * xv;
                                }
                        if (nodes_[x].needs_grad) nodes_[x].grad.at(ic, ih, iw) += xg;
                    }
        };
        return h;
    }

    // {C,H,W} -> {C} mean over spatial dims.
    Handle global_avg_pool(Handle a) {
        const Tensor& X = nodes_[a].value;
        std::size_t C = X.dim(0), H = X.dim(1), W = X.dim(2);
        Tensor out({C});
        double inv = 1.0 / static_cast<double>(H * W);
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) s += X.at(c, h, w);
            out[c] = s * inv;
        }
        return unary(std::move(out), a, [this, C, H, W, inv](Node& n) {
            for (std::size_t c = 0; c < C; ++c) {
                double g = n.grad[c] * inv;
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t w = 0; w < W; ++w) nodes_[n.a].grad.at(c, h, w) += g;
            }
        });
    }

    // --- reductions ---

    // mean((a - b)^2) -> scalar
    Handle mean_sq_diff(Handle a, Handle b) {
        check_same(a, b);
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        double s = 0.0;
        for (std::size_t i = 0; i < A.size(); ++i) {
            double d = A[i] - B[i];
            s += d * d;
        }
        double inv = 1.0 / static_cast<double>(A.size());
        return binary(Tensor::scalar(s * inv), a, b, [this, inv](Node& n) {
            const Tensor& A = nodes_[n.a].value;
            const Tensor& B = nodes_[n.b].value;
            double g = 2.0 * inv * n.grad[0];
            for (std::size_t i = 0; i < A.size(); ++i) {
                double d = g * (A[i] - B[i]);
                if (nodes_[n.a].needs_grad) nodes_[n.a].grad[i] += d;
                if (nodes_[n.b].needs_grad) nodes_[n.b].grad[i] -= d;
            }
        });
    }

    // cosine similarity <a,b>/(|a||b|) -> scalar. Guards near-zero norms.
    Handle cosine(Handle a, Handle b) {
        check_same(a, b);
        const Tensor& A = nodes_[a].value;
        const Tensor& B = nodes_[b].value;
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::size_t i = 0; i < A.size(); ++i) {
            dot += A[i] * B[i];
            na2 += A[i] * A[i];
            nb2 += B[i] * B[i];
        }
        double na = std::sqrt(na2), nb = std::sqrt(nb2);
        require(na >= 1e-12 && nb >= 1e-12, "ZeroVectorAtTap",
                "cosine of a (near-)zero vector");
        double cosv = dot / (na * nb);
        return binary(Tensor::scalar(cosv), a, b, [this, dot, na, nb, cosv](Node& n) {
            const Tensor& A = nodes_[n.a].value;
            const Tensor& B = nodes_[n.b].value;
            double g = n.grad[0];
            (void)dot;
            for (std::size_t i = 0; i < A.size(); ++i) {
                if (nodes_[n.a].needs_grad)
                    nodes_[n.a].grad[i] += g * (B[i] / (na * nb) - cosv * A[i] / (na * na));
                if (nodes_[n.b].needs_grad)
                    nodes_[n.b].grad[i] += g * (A[i] / (na * nb) - cosv * B[i] / (nb * nb));
            }
        });
    }

    // Softmax cross-entropy of logits against an integer label -> scalar.
    Handle softmax_xent(Handle logits, std::size_t label) {
        const Tensor& Z = nodes_[logits].value;
        require(label < Z.size(), "ShapeMismatch", "label out of range");
        double zmax = Z[0];
        for (std::size_t i = 0; i < Z.size(); ++i) zmax = std::max(zmax, Z[i]);
        double denom = 0.0;
        for (std::size_t i = 0; i < Z.size(); ++i) denom += std::exp(Z[i] - zmax);
        double loss = std::log(denom) - (Z[label] - zmax);
        return unary(Tensor::scalar(loss), logits, [this, label, zmax, denom](Node& n) {
            const Tensor& Z = nodes_[n.a].value;
            double g = n.grad[0];
            for (std::size_t i = 0; i < Z.size(); ++i) {
                double p = std::exp(Z[i] - zmax) / denom;
                nodes_[n.a].grad[i] += g * (p - (i == label ? 1.0 : 0.0));
            }
        });
    }

    // Gaussian blob splat: amplitudes a {B}, centers x,y {B}, widths s {B}
    // -> image {1,H,W} with pixel(u,v) = -1 + 2*sum_b a_b exp(-r^2/(2 s_b^2)),
    // before clamping (compose with clamp()).
    Handle gauss_splat(Handle a, Handle x, Handle y, Handle s, std::size_t H, std::size_t W) {
        const Tensor& A = nodes_[a].value;
        const Tensor& X = nodes_[x].value;
        const Tensor& Y = nodes_[y].value;
        const Tensor& S = nodes_[s].value;
        std::size_t B = A.size();
        require(X.size() == B && Y.size() == B && S.size() == B, "ShapeMismatch",
                "blob parameter lengths differ");
        Tensor out({1, H, W});
        for (std::size_t v = 0; v < H; ++v)
            for (std::size_t u = 0; u < W; ++u) {
                double acc = -1.0;
                for (std::size_t bi = 0; bi < B; ++bi) {
                    double du = static_cast<double>(u) - X[bi];
                    double dv = static_cast<double>(v) - Y[bi];
                    double sig = S[bi];
                    acc += 2.0 * A[bi] * std::exp(-(du * du + dv * dv) / (2.0 * sig * sig));
                }
                out.at(0, v, u) = acc;
            }
        Handle h = push(std::move(out), any_grad({a, x, y, s}), {a, x, y, s});
        nodes_[h].backward = [this, a, x, y, s, H, W, B](Node& n) {
            const Tensor& A = nodes_[a].value;
            const Tensor& X = nodes_[x].value;
            const Tensor& Y = nodes_[y].value;
            const Tensor& S = nodes_[s].value;
            for (std::size_t v = 0; v < H; ++v)
                for (std::size_t u = 0; u < W; ++u) {
                    double g = n.grad.at(0, v, u);
                    if (g == 0.0) continue;
                    for (std::size_t bi = 0; bi < B; ++bi) {
                        double du = static_cast<double>(u) - X[bi];
                        double dv = static_cast<double>(v) - Y[bi];
                        double sig = S[bi];
                        double e = std::exp(-(du * du + dv * dv) / (2.0 * sig * sig));
                        if (nodes_[a].needs_grad) nodes_[a].grad[bi] += g * 2.0 * e;
                        double common = g * 2.0 * A[bi] * e;
                        if (nodes_[x].needs_grad)
                            nodes_[x].grad[bi] += common * du / (sig * sig);
                        if (nodes_[y].needs_grad)
                            nodes_[y].grad[bi] += common * dv / (sig * sig);
                        if (nodes_[s].needs_grad)
                            nodes_[s].grad[bi] +=
                                common * (du * du + dv * dv) / (sig * sig * sig);
                    }
                }
        };
        return h;
    }

    // Backprop from a scalar root, then flush gradients into bound Params.
    void backward(Handle root) {
        require(nodes_[root].value.size() == 1, "ShapeMismatch",
                "backward root must be scalar");
        for (auto& n : nodes_)
            if (n.needs_grad && n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape());
        nodes_[root].grad = Tensor::scalar(1.0);
        for (int i = root; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.backward && n.grad.size() > 0) n.backward(n);
        }
        for (auto& [p, h] : param_handles_) {
            const Tensor& g = nodes_[h].grad;
            if (g.size() == 0) continue;
            for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Handle a = -1, b = -1;
        std::function<void(Node&)> backward;
    };

    Handle push(Tensor v, bool needs_grad, const std::vector<Handle>& parents) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        if (needs_grad) n.grad = Tensor::zeros(n.value.shape());
        nodes_.push_back(std::move(n));
        (void)parents;
        return static_cast<Handle>(nodes_.size() - 1);
    }

    Handle unary(Tensor out, Handle a, std::function<void(Node&)> bw) {
        Handle h = push(std::move(out), nodes_[a].needs_grad, {a});
        nodes_[h].a = a;
        if (nodes_[h].needs_grad) nodes_[h].backward = std::move(bw);
        return h;
    }

    Handle binary(Tensor out, Handle a, Handle b, std::function<void(Node&)> bw) {
        Handle h = push(std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad, {a, b});
        nodes_[h].a = a;
        nodes_[h].b = b;
        if (nodes_[h].needs_grad) nodes_[h].backward = std::move(bw);
        return h;
    }

    bool any_grad(std::initializer_list<Handle> hs) const {
        for (Handle h : hs)
            if (nodes_[h].needs_grad) return true;
        return false;
    }

    void check_same(Handle a, Handle b) const {
        require(nodes_[a].value.same_shape(nodes_[b].value), "ShapeMismatch",
                "operand shapes differ");
    }

    void accumulate(Handle h, const std::vector<double>& g) {
        Node& n = nodes_[h];
        if (!n.needs_grad) return;
        for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    std::vector<Node> nodes_;
    std::unordered_map<Param*, Handle> param_handles_;
};

} // namespace p2i::ad
