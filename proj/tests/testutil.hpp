#pragma once

// Shared oracles and helpers for the test suites. Everything here is an
// independent route: brute-force loops, finite differences, two-pass
// statistics — never the library's own fast paths.

#include <cmath>
#include <functional>
#include <vector>

#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"

namespace testutil {

using downscale::Rng;
using downscale::Tensor;

inline bool rel_close(double a, double b, double tol, double floor_ = 1e-7) {
    const double m = std::max(std::fabs(a), std::fabs(b));
    if (m < floor_) return true;
    return std::fabs(a - b) <= tol * m;
}

// central finite difference of f with respect to one value slot
inline double central_diff(double& x, const std::function<double()>& f, double h = 1e-5) {
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    return (fp - fm) / (2.0 * h);
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// direct nested-loop cross-correlation (the conv2d oracle)
inline Tensor conv2d_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    Tensor out = Tensor::zeros({N, Cout, OH, OW});
    for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < Cout; ++oc)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = b.values()[static_cast<std::size_t>(oc)];
                    for (int ic = 0; ic < C; ++ic)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const int ih = oh * stride - pad + ki;
                                const int iw = ow * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.at4(n, ic, ih, iw) * w.at4(oc, ic, ki, kj);
                            }
                    out.at4(n, oc, oh, ow) = acc;
                }
    return out;
}

// two-pass per-channel mean/variance (biased) over N,H,W of an NCHW tensor
inline void channel_stats_oracle(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const double m = static_cast<double>(N) * H * W;
    mean.assign(static_cast<std::size_t>(C), 0.0);
    var.assign(static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) s += x.at4(n, c, h, w);
        mean[static_cast<std::size_t>(c)] = s / m;
        double sq = 0.0;
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double d = x.at4(n, c, h, w) - mean[static_cast<std::size_t>(c)];
                    sq += d * d;
                }
        var[static_cast<std::size_t>(c)] = sq / m;
    }
}

// Checks tape gradients of `leaves` against central finite differences of the
// forward-only evaluation `loss_value`. Samples up to `max_per_leaf` entries
// per leaf. Returns the worst relative error seen. Gradients below `floor_`
// are skipped: with an O(1) loss, a central difference at step h resolves no
// better than ~1e-16/h absolute, so tiny gradients are pure round-off.
inline double max_fd_error(std::vector<Tensor> leaves, const std::function<double()>& loss_value,
                           Rng& rng, int max_per_leaf = 64, double h = 1e-5, double floor_ = 1e-5) {
    double worst = 0.0;
    for (Tensor& leaf : leaves) {
        const std::size_t n = leaf.values().size();
        std::vector<std::size_t> idx;
        if (static_cast<int>(n) <= max_per_leaf) {
            for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
        } else {
            for (int i = 0; i < max_per_leaf; ++i) idx.push_back(static_cast<std::size_t>(rng.below(n)));
        }
        for (std::size_t i : idx) {
            const double fd = central_diff(leaf.values()[i], loss_value, h);
            const double an = leaf.grad()[i];
            const double m = std::max(std::fabs(fd), std::fabs(an));
            if (m < floor_) continue;
            worst = std::max(worst, std::fabs(fd - an) / m);
        }
    }
    return worst;
}

} // namespace testutil
