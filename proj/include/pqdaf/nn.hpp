#pragma once

#include "pqdaf/error.hpp"
#include "pqdaf/rng.hpp"
#include "pqdaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace pqdaf {

// Handle to one trainable parameter vector. decay marks parameters subject
// to weight decay (weights yes, biases/norms/null embeddings no).
template <typename T>
struct ParamEntry {
    std::string name;
    std::vector<T>* data;
    std::vector<T>* grad;
    bool decay;
};

template <typename T>
class ParamRegistry {
public:
    void add(std::string name, std::vector<T>* data, std::vector<T>* grad, bool decay) {
        grad->assign(data->size(), T(0));
        entries.push_back({std::move(name), data, grad, decay});
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.data->size();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries) std::fill(e.grad->begin(), e.grad->end(), T(0));
    }

    std::vector<ParamEntry<T>> entries;
};

namespace nn_detail {

template <typename T>
void init_uniform(std::vector<T>& v, Rng& rng, double bound) {
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
}

} // namespace nn_detail

// Fully connected layer: y = W x + b, W stored row-major [out][in].
template <typename T>
struct Linear {
    int in = 0, out = 0;
    std::vector<T> w, b, gw, gb;

    void init(int in_, int out_, Rng& rng, bool zero = false) {
        in = in_;
        out = out_;
        w.assign(static_cast<std::size_t>(in) * out, T(0));
        b.assign(static_cast<std::size_t>(out), T(0));
        if (!zero) nn_detail::init_uniform(w, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        gw.assign(w.size(), T(0));
        gb.assign(b.size(), T(0));
    }

    void reg(ParamRegistry<T>& r, const std::string& name) {
        r.add(name + ".w", &w, &gw, true);
        r.add(name + ".b", &b, &gb, false);
    }

    std::vector<T> forward(const std::vector<T>& x, Tape<T>* tape) const {
        std::vector<T> y(static_cast<std::size_t>(out));
        for (int o = 0; o < out; ++o) {
            T acc = b[static_cast<std::size_t>(o)];
            const T* wr = &w[static_cast<std::size_t>(o) * in];
            for (int i = 0; i < in; ++i) acc += wr[i] * x[static_cast<std::size_t>(i)];
            y[static_cast<std::size_t>(o)] = acc;
        }
        if (tape) {
            std::vector<T> copy = x;
            tape->push(from_vector(std::move(copy)));
        }
        return y;
    }

    std::vector<T> backward(const std::vector<T>& dy, Tape<T>& tape) {
        Tensor<T> saved = tape.pop();
        const std::vector<T>& x = saved.v;
        std::vector<T> dx(static_cast<std::size_t>(in), T(0));
        for (int o = 0; o < out; ++o) {
            T g = dy[static_cast<std::size_t>(o)];
            gb[static_cast<std::size_t>(o)] += g;
            T* gwr = &gw[static_cast<std::size_t>(o) * in];
            const T* wr = &w[static_cast<std::size_t>(o) * in];
            for (int i = 0; i < in; ++i) {
                gwr[i] += g * x[static_cast<std::size_t>(i)];
                dx[static_cast<std::size_t>(i)] += g * wr[i];
            }
        }
        return dx;
    }
};

// 2D convolution with square kernel, zero padding. Weights are stored as
// w[((oc * in_c + ic) * k + ky) * k + kx].
template <typename T>
struct Conv2d {
    int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;
    std::vector<T> w, b, gw, gb;

    void init(int in_c_, int out_c_, int k_, int stride_, int pad_, Rng& rng, bool zero = false) {
        in_c = in_c_;
        out_c = out_c_;
        k = k_;
        stride = stride_;
        pad = pad_;
        w.assign(static_cast<std::size_t>(out_c) * in_c * k * k, T(0));
        b.assign(static_cast<std::size_t>(out_c), T(0));
        if (!zero)
            nn_detail::init_uniform(w, rng, 1.0 / std::sqrt(static_cast<double>(in_c) * k * k));
        gw.assign(w.size(), T(0));
        gb.assign(b.size(), T(0));
    }

    void reg(ParamRegistry<T>& r, const std::string& name) {
        r.add(name + ".w", &w, &gw, true);
        r.add(name + ".b", &b, &gb, false);
    }

    int out_h(int h) const { return (h + 2 * pad - k) / stride + 1; }
    int out_w(int wdt) const { return (wdt + 2 * pad - k) / stride + 1; }

    Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
        const int H = x.h, W = x.w, Ho = out_h(H), Wo = out_w(W);
        Tensor<T> y(out_c, Ho, Wo);
        for (int oc = 0; oc < out_c; ++oc) {
            T* ybase = &y.v[static_cast<std::size_t>(oc) * Ho * Wo];
            std::fill(ybase, ybase + static_cast<std::size_t>(Ho) * Wo,
                      b[static_cast<std::size_t>(oc)]);
        }
        for (int oc = 0; oc < out_c; ++oc)
            for (int ic = 0; ic < in_c; ++ic) {
                const T* xch = &x.v[static_cast<std::size_t>(ic) * H * W];
                T* ych = &y.v[static_cast<std::size_t>(oc) * Ho * Wo];
                const T* wch = &w[(static_cast<std::size_t>(oc) * in_c + ic) * k * k];
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wch[ky * k + kx];
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const T* xrow = xch + static_cast<std::size_t>(iy) * W;
                            T* yrow = ych + static_cast<std::size_t>(oy) * Wo;
                            if (stride == 1) {
                                const int lo = std::max(0, pad - kx);
                                const int hi = std::min(Wo, W + pad - kx);
                                const T* xp = xrow + (lo + kx - pad);
                                for (int ox = lo; ox < hi; ++ox) yrow[ox] += wv * xp[ox - lo];
                            } else {
                                for (int ox = 0; ox < Wo; ++ox) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix >= 0 && ix < W) yrow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
            }
        if (tape) tape->push(x);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) {
        Tensor<T> x = tape.pop();
        const int H = x.h, W = x.w, Ho = dy.h, Wo = dy.w;
        Tensor<T> dx(in_c, H, W);
        for (int oc = 0; oc < out_c; ++oc) {
            const T* dych = &dy.v[static_cast<std::size_t>(oc) * Ho * Wo];
            T acc = T(0);
            for (std::size_t i = 0; i < static_cast<std::size_t>(Ho) * Wo; ++i) acc += dych[i];
            gb[static_cast<std::size_t>(oc)] += acc;
        }
        for (int oc = 0; oc < out_c; ++oc)
            for (int ic = 0; ic < in_c; ++ic) {
                const T* xch = &x.v[static_cast<std::size_t>(ic) * H * W];
                T* dxch = &dx.v[static_cast<std::size_t>(ic) * H * W];
                const T* dych = &dy.v[static_cast<std::size_t>(oc) * Ho * Wo];
                const T* wch = &w[(static_cast<std::size_t>(oc) * in_c + ic) * k * k];
                T* gwch = &gw[(static_cast<std::size_t>(oc) * in_c + ic) * k * k];
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wch[ky * k + kx];
                        T wacc = T(0);
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            if (iy < 0 || iy >= H) continue;
                            const T* xrow = xch + static_cast<std::size_t>(iy) * W;
                            T* dxrow = dxch + static_cast<std::size_t>(iy) * W;
                            const T* dyrow = dych + static_cast<std::size_t>(oy) * Wo;
                            if (stride == 1) {
                                const int lo = std::max(0, pad - kx);
                                const int hi = std::min(Wo, W + pad - kx);
                                const int off = kx - pad;
                                for (int ox = lo; ox < hi; ++ox) wacc += dyrow[ox] * xrow[ox + off];
                                for (int ox = lo; ox < hi; ++ox) dxrow[ox + off] += wv * dyrow[ox];
                            } else {
                                for (int ox = 0; ox < Wo; ++ox) {
                                    const int ix = ox * stride + kx - pad;
                                    if (ix < 0 || ix >= W) continue;
                                    wacc += dyrow[ox] * xrow[ix];
                                    dxrow[ix] += wv * dyrow[ox];
                                }
                            }
                        }
                        gwch[ky * k + kx] += wacc;
                    }
            }
        return dx;
    }
};

// Group normalization with per-channel scale and shift. Statistics are
// recomputed in the backward pass from the saved input.
template <typename T>
struct GroupNorm {
    int channels = 0, groups = 1;
    T eps = T(1e-5);
    std::vector<T> gamma, beta, ggamma, gbeta;

    void init(int channels_, int groups_) {
        if (channels_ % groups_ != 0)
            throw validation_error("group norm: groups must divide channels");
        channels = channels_;
        groups = groups_;
        gamma.assign(static_cast<std::size_t>(channels), T(1));
        beta.assign(static_cast<std::size_t>(channels), T(0));
        ggamma.assign(gamma.size(), T(0));
        gbeta.assign(beta.size(), T(0));
    }

    void reg(ParamRegistry<T>& r, const std::string& name) {
        r.add(name + ".gamma", &gamma, &ggamma, false);
        r.add(name + ".beta", &beta, &gbeta, false);
    }

    Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
        const int per = channels / groups;
        const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
        Tensor<T> y(x.c, x.h, x.w);
        for (int g = 0; g < groups; ++g) {
            const std::size_t lo = static_cast<std::size_t>(g) * per * plane;
            const std::size_t n = static_cast<std::size_t>(per) * plane;
            T mean = T(0);
            for (std::size_t i = 0; i < n; ++i) mean += x.v[lo + i];
            mean /= static_cast<T>(n);
            T var = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                T d = x.v[lo + i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(n);
            const T inv = T(1) / std::sqrt(var + eps);
            for (int c = g * per; c < (g + 1) * per; ++c) {
                const T gc = gamma[static_cast<std::size_t>(c)];
                const T bc = beta[static_cast<std::size_t>(c)];
                const std::size_t base = static_cast<std::size_t>(c) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                    y.v[base + i] = (x.v[base + i] - mean) * inv * gc + bc;
            }
        }
        if (tape) tape->push(x);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) {
        Tensor<T> x = tape.pop();
        const int per = channels / groups;
        const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
        Tensor<T> dx(x.c, x.h, x.w);
        for (int g = 0; g < groups; ++g) {
            const std::size_t lo = static_cast<std::size_t>(g) * per * plane;
            const std::size_t n = static_cast<std::size_t>(per) * plane;
            T mean = T(0);
            for (std::size_t i = 0; i < n; ++i) mean += x.v[lo + i];
            mean /= static_cast<T>(n);
            T var = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                T d = x.v[lo + i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(n);
            const T inv = T(1) / std::sqrt(var + eps);

            // accumulate per-channel parameter grads and the two group sums
            // of dxhat and dxhat * xhat needed by the normalization backward
            T sum_dxh = T(0), sum_dxh_xh = T(0);
            for (int c = g * per; c < (g + 1) * per; ++c) {
                const T gc = gamma[static_cast<std::size_t>(c)];
                const std::size_t base = static_cast<std::size_t>(c) * plane;
                T sg = T(0), sb = T(0);
                for (std::size_t i = 0; i < plane; ++i) {
                    const T xh = (x.v[base + i] - mean) * inv;
                    const T d = dy.v[base + i];
                    sg += d * xh;
                    sb += d;
                    const T dxh = d * gc;
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                }
                ggamma[static_cast<std::size_t>(c)] += sg;
                gbeta[static_cast<std::size_t>(c)] += sb;
            }
            const T inv_n = T(1) / static_cast<T>(n);
            for (int c = g * per; c < (g + 1) * per; ++c) {
                const T gc = gamma[static_cast<std::size_t>(c)];
                const std::size_t base = static_cast<std::size_t>(c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const T xh = (x.v[base + i] - mean) * inv;
                    const T dxh = dy.v[base + i] * gc;
                    dx.v[base + i] = inv * (dxh - inv_n * (sum_dxh + xh * sum_dxh_xh));
                }
            }
        }
        return dx;
    }
};

// x * sigmoid(x), elementwise, stateless.
template <typename T>
struct SiLU {
    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

    Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) const {
        Tensor<T> y(x.c, x.h, x.w);
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            y.v[i] = x.v[i] * sigmoid(x.v[i]);
        }
        if (tape) tape->push(x);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) const {
        Tensor<T> x = tape.pop();
        Tensor<T> dx(x.c, x.h, x.w);
        for (std::size_t i = 0; i < x.v.size(); ++i) {
            const T s = sigmoid(x.v[i]);
            dx.v[i] = dy.v[i] * s * (T(1) + x.v[i] * (T(1) - s));
        }
        return dx;
    }

    std::vector<T> forward(const std::vector<T>& x, Tape<T>* tape) const {
        std::vector<T> copy = x;
        Tensor<T> t = from_vector(std::move(copy));
        return forward(t, tape).v;
    }

    std::vector<T> backward(const std::vector<T>& dy, Tape<T>& tape) const {
        std::vector<T> copy = dy;
        Tensor<T> t = from_vector(std::move(copy));
        return backward(t, tape).v;
    }
};

// Two-layer perceptron with SiLU between the layers.
template <typename T>
struct Mlp {
    Linear<T> l1, l2;
    SiLU<T> act;

    void init(int in, int hidden, int out, Rng& rng) {
        l1.init(in, hidden, rng);
        l2.init(hidden, out, rng);
    }

    void reg(ParamRegistry<T>& r, const std::string& name) {
        l1.reg(r, name + ".l1");
        l2.reg(r, name + ".l2");
    }

    std::vector<T> forward(const std::vector<T>& x, Tape<T>* tape) const {
        return l2.forward(act.forward(l1.forward(x, tape), tape), tape);
    }

    std::vector<T> backward(const std::vector<T>& dy, Tape<T>& tape) {
        return l1.backward(act.backward(l2.backward(dy, tape), tape), tape);
    }
};

// Single-head cross attention from feature-map pixels (queries) to a small
// token set (keys/values), with a residual connection. The output projection
// starts at zero so a fresh block is the identity map.
template <typename T>
struct CrossAttention {
    int dim = 0; // channel count of the map, token width, and attention width
    Linear<T> wq, wk, wv, wo;

    void init(int dim_, Rng& rng) {
        dim = dim_;
        wq.init(dim, dim, rng);
        wk.init(dim, dim, rng);
        wv.init(dim, dim, rng);
        wo.init(dim, dim, rng, /*zero=*/true);
    }

    void reg(ParamRegistry<T>& r, const std::string& name) {
        wq.reg(r, name + ".wq");
        wk.reg(r, name + ".wk");
        wv.reg(r, name + ".wv");
        wo.reg(r, name + ".wo");
    }

    Tensor<T> forward(const Tensor<T>& x, const std::vector<std::vector<T>>& tokens,
                      Tape<T>* tape) const {
        const int n = static_cast<int>(tokens.size());
        const std::size_t pixels = static_cast<std::size_t>(x.h) * x.w;
        const T scale = T(1) / std::sqrt(static_cast<T>(dim));

        std::vector<std::vector<T>> ks(static_cast<std::size_t>(n)), vs(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            ks[static_cast<std::size_t>(j)] = wk.forward(tokens[static_cast<std::size_t>(j)], nullptr);
            vs[static_cast<std::size_t>(j)] = wv.forward(tokens[static_cast<std::size_t>(j)], nullptr);
        }

        Tensor<T> y = x;
        std::vector<T> xp(static_cast<std::size_t>(dim)), q(static_cast<std::size_t>(dim));
        std::vector<T> scores(static_cast<std::size_t>(n)), o(static_cast<std::size_t>(dim));
        for (std::size_t p = 0; p < pixels; ++p) {
            for (int c = 0; c < dim; ++c)
                xp[static_cast<std::size_t>(c)] = x.v[static_cast<std::size_t>(c) * pixels + p];
            for (int d = 0; d < dim; ++d) {
                T acc = wq.b[static_cast<std::size_t>(d)];
                const T* wr = &wq.w[static_cast<std::size_t>(d) * dim];
                for (int c = 0; c < dim; ++c) acc += wr[c] * xp[static_cast<std::size_t>(c)];
                q[static_cast<std::size_t>(d)] = acc;
            }
            T mx = T(0);
            for (int j = 0; j < n; ++j) {
                T acc = T(0);
                for (int d = 0; d < dim; ++d)
                    acc += q[static_cast<std::size_t>(d)] * ks[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                scores[static_cast<std::size_t>(j)] = acc * scale;
                if (j == 0 || scores[static_cast<std::size_t>(j)] > mx)
                    mx = scores[static_cast<std::size_t>(j)];
            }
            T z = T(0);
            for (int j = 0; j < n; ++j) {
                scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                z += scores[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j < n; ++j) scores[static_cast<std::size_t>(j)] /= z;
            std::fill(o.begin(), o.end(), T(0));
            for (int j = 0; j < n; ++j) {
                const T a = scores[static_cast<std::size_t>(j)];
                for (int d = 0; d < dim; ++d)
                    o[static_cast<std::size_t>(d)] += a * vs[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
            }
            for (int c = 0; c < dim; ++c) {
                T acc = wo.b[static_cast<std::size_t>(c)];
                const T* wr = &wo.w[static_cast<std::size_t>(c) * dim];
                for (int d = 0; d < dim; ++d) acc += wr[d] * o[static_cast<std::size_t>(d)];
                y.v[static_cast<std::size_t>(c) * pixels + p] += acc;
            }
        }

        if (tape) {
            tape->push(x);
            Tensor<T> toks(n, dim, 1);
            for (int j = 0; j < n; ++j)
                for (int d = 0; d < dim; ++d)
                    toks.at(j, d, 0) = tokens[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
            tape->push(std::move(toks));
        }
        return y;
    }

    // dtokens must arrive sized [n][dim]; token gradients are accumulated.
    Tensor<T> backward(const Tensor<T>& dy, std::vector<std::vector<T>>& dtokens, Tape<T>& tape) {
        Tensor<T> toks = tape.pop();
        Tensor<T> x = tape.pop();
        const int n = toks.c;
        const std::size_t pixels = static_cast<std::size_t>(x.h) * x.w;
        const T scale = T(1) / std::sqrt(static_cast<T>(dim));

        std::vector<std::vector<T>> ks(static_cast<std::size_t>(n)), vs(static_cast<std::size_t>(n));
        std::vector<std::vector<T>> dks(static_cast<std::size_t>(n)), dvs(static_cast<std::size_t>(n));
        for (int j = 0; j < n; ++j) {
            std::vector<T> tok(static_cast<std::size_t>(dim));
            for (int d = 0; d < dim; ++d) tok[static_cast<std::size_t>(d)] = toks.at(j, d, 0);
            ks[static_cast<std::size_t>(j)] = wk.forward(tok, nullptr);
            vs[static_cast<std::size_t>(j)] = wv.forward(tok, nullptr);
            dks[static_cast<std::size_t>(j)].assign(static_cast<std::size_t>(dim), T(0));
            dvs[static_cast<std::size_t>(j)].assign(static_cast<std::size_t>(dim), T(0));
        }

        Tensor<T> dx = dy; // residual path
        std::vector<T> xp(static_cast<std::size_t>(dim)), q(static_cast<std::size_t>(dim));
        std::vector<T> scores(static_cast<std::size_t>(n)), o(static_cast<std::size_t>(dim));
        std::vector<T> dyp(static_cast<std::size_t>(dim)), dop(static_cast<std::size_t>(dim));
        std::vector<T> da(static_cast<std::size_t>(n)), ds(static_cast<std::size_t>(n));
        std::vector<T> dq(static_cast<std::size_t>(dim));
        for (std::size_t p = 0; p < pixels; ++p) {
            // recompute this pixel's attention
            for (int c = 0; c < dim; ++c)
                xp[static_cast<std::size_t>(c)] = x.v[static_cast<std::size_t>(c) * pixels + p];
            for (int d = 0; d < dim; ++d) {
                T acc = wq.b[static_cast<std::size_t>(d)];
                const T* wr = &wq.w[static_cast<std::size_t>(d) * dim];
                for (int c = 0; c < dim; ++c) acc += wr[c] * xp[static_cast<std::size_t>(c)];
                q[static_cast<std::size_t>(d)] = acc;
            }
            T mx = T(0);
            for (int j = 0; j < n; ++j) {
                T acc = T(0);
                for (int d = 0; d < dim; ++d)
                    acc += q[static_cast<std::size_t>(d)] * ks[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                scores[static_cast<std::size_t>(j)] = acc * scale;
                if (j == 0 || scores[static_cast<std::size_t>(j)] > mx)
                    mx = scores[static_cast<std::size_t>(j)];
            }
            T z = T(0);
            for (int j = 0; j < n; ++j) {
                scores[static_cast<std::size_t>(j)] = std::exp(scores[static_cast<std::size_t>(j)] - mx);
                z += scores[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j < n; ++j) scores[static_cast<std::size_t>(j)] /= z;
            std::fill(o.begin(), o.end(), T(0));
            for (int j = 0; j < n; ++j) {
                const T a = scores[static_cast<std::size_t>(j)];
                for (int d = 0; d < dim; ++d)
                    o[static_cast<std::size_t>(d)] += a * vs[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
            }

            for (int c = 0; c < dim; ++c)
                dyp[static_cast<std::size_t>(c)] = dy.v[static_cast<std::size_t>(c) * pixels + p];

            // through the output projection
            std::fill(dop.begin(), dop.end(), T(0));
            for (int c = 0; c < dim; ++c) {
                const T g = dyp[static_cast<std::size_t>(c)];
                wo.gb[static_cast<std::size_t>(c)] += g;
                T* gwr = &wo.gw[static_cast<std::size_t>(c) * dim];
                const T* wr = &wo.w[static_cast<std::size_t>(c) * dim];
                for (int d = 0; d < dim; ++d) {
                    gwr[d] += g * o[static_cast<std::size_t>(d)];
                    dop[static_cast<std::size_t>(d)] += g * wr[d];
                }
            }

            // through the value mix and the softmax
            for (int j = 0; j < n; ++j) {
                T acc = T(0);
                for (int d = 0; d < dim; ++d)
                    acc += dop[static_cast<std::size_t>(d)] * vs[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                da[static_cast<std::size_t>(j)] = acc;
                const T a = scores[static_cast<std::size_t>(j)];
                for (int d = 0; d < dim; ++d)
                    dvs[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)] += a * dop[static_cast<std::size_t>(d)];
            }
            T dot = T(0);
            for (int j = 0; j < n; ++j)
                dot += scores[static_cast<std::size_t>(j)] * da[static_cast<std::size_t>(j)];
            for (int j = 0; j < n; ++j)
                ds[static_cast<std::size_t>(j)] =
                    scores[static_cast<std::size_t>(j)] * (da[static_cast<std::size_t>(j)] - dot);

            // through the scores into q and k
            std::fill(dq.begin(), dq.end(), T(0));
            for (int j = 0; j < n; ++j) {
                const T g = ds[static_cast<std::size_t>(j)] * scale;
                for (int d = 0; d < dim; ++d) {
                    dq[static_cast<std::size_t>(d)] += g * ks[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                    dks[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)] += g * q[static_cast<std::size_t>(d)];
                }
            }

            // through the query projection into x
            for (int d = 0; d < dim; ++d) {
                const T g = dq[static_cast<std::size_t>(d)];
                wq.gb[static_cast<std::size_t>(d)] += g;
                T* gwr = &wq.gw[static_cast<std::size_t>(d) * dim];
                const T* wr = &wq.w[static_cast<std::size_t>(d) * dim];
                for (int c = 0; c < dim; ++c) {
                    gwr[c] += g * xp[static_cast<std::size_t>(c)];
                    dx.v[static_cast<std::size_t>(c) * pixels + p] += g * wr[c];
                }
            }
        }

        // token gradients through the key/value projections
        for (int j = 0; j < n; ++j) {
            std::vector<T> tok(static_cast<std::size_t>(dim));
            for (int d = 0; d < dim; ++d) tok[static_cast<std::size_t>(d)] = toks.at(j, d, 0);
            for (int d = 0; d < dim; ++d) {
                const T gk = dks[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                const T gv = dvs[static_cast<std::size_t>(j)][static_cast<std::size_t>(d)];
                wk.gb[static_cast<std::size_t>(d)] += gk;
                wv.gb[static_cast<std::size_t>(d)] += gv;
                T* gwk = &wk.gw[static_cast<std::size_t>(d) * dim];
                T* gwv = &wv.gw[static_cast<std::size_t>(d) * dim];
                const T* wkr = &wk.w[static_cast<std::size_t>(d) * dim];
                const T* wvr = &wv.w[static_cast<std::size_t>(d) * dim];
                for (int c = 0; c < dim; ++c) {
                    gwk[c] += gk * tok[static_cast<std::size_t>(c)];
                    gwv[c] += gv * tok[static_cast<std::size_t>(c)];
                    dtokens[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)] +=
                        gk * wkr[c] + gv * wvr[c];
                }
            }
        }
        return dx;
    }
};

// Adam with a switch between coupled L2 regularization and decoupled weight
// decay. Entries whose decay flag is false are never decayed.
template <typename T>
class Adam {
public:
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
        bool decoupled = true;
    };

    explicit Adam(Config cfg) : cfg_(cfg) {}

    const Config& config() const { return cfg_; }

    void step(ParamRegistry<T>& reg) {
        if (m_.empty()) {
            m_.resize(reg.entries.size());
            v_.resize(reg.entries.size());
            for (std::size_t e = 0; e < reg.entries.size(); ++e) {
                m_[e].assign(reg.entries[e].data->size(), T(0));
                v_[e].assign(reg.entries[e].data->size(), T(0));
            }
        }
        if (m_.size() != reg.entries.size())
            throw validation_error("optimizer bound to a different parameter set");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t e = 0; e < reg.entries.size(); ++e) {
            auto& entry = reg.entries[e];
            std::vector<T>& theta = *entry.data;
            const std::vector<T>& grad = *entry.grad;
            const bool decay = entry.decay && cfg_.weight_decay > 0.0;
            for (std::size_t i = 0; i < theta.size(); ++i) {
                double g = static_cast<double>(grad[i]);
                if (decay && !cfg_.decoupled) g += cfg_.weight_decay * static_cast<double>(theta[i]);
                double m = cfg_.beta1 * static_cast<double>(m_[e][i]) + (1.0 - cfg_.beta1) * g;
                double v = cfg_.beta2 * static_cast<double>(v_[e][i]) + (1.0 - cfg_.beta2) * g * g;
                m_[e][i] = static_cast<T>(m);
                v_[e][i] = static_cast<T>(v);
                double update = (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
                double x = static_cast<double>(theta[i]);
                if (decay && cfg_.decoupled) x -= cfg_.lr * cfg_.weight_decay * x;
                theta[i] = static_cast<T>(x - cfg_.lr * update);
            }
        }
    }

private:
    Config cfg_;
    long t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

} // namespace pqdaf
