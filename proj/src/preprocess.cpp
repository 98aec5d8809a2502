#include "downscale/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace downscale {

namespace {

// channel geometry for rank-3 (C,H,W) / rank-4 (N,C,H,W) tensors
struct ChannelView {
    int batches;
    int channels;
    std::size_t plane; // H*W
};

ChannelView channel_view(const Tensor& x, const char* op) {
    if (x.rank() == 3)
        return {1, x.dim(0), static_cast<std::size_t>(x.dim(1)) * x.dim(2)};
    if (x.rank() == 4)
        return {x.dim(0), x.dim(1), static_cast<std::size_t>(x.dim(2)) * x.dim(3)};
    throw ShapeError(std::string(op) + ": expected rank 3 or 4, got " + shape_str(x.shape()));
}

void check_channels(const ChannelView& v, const std::vector<int>& channels, const char* op) {
    for (int c : channels)
        if (c < 0 || c >= v.channels)
            throw ShapeError(std::string(op) + ": channel " + std::to_string(c) + " out of range [0," +
                             std::to_string(v.channels) + ")");
}

double signed_pow_value(double x, double e) {
    return x == 0.0 ? 0.0 : std::copysign(std::pow(std::fabs(x), e), x);
}

// sign(x)*|x|^e on the selected channels, identity elsewhere; differentiable
// w.r.t. x and the scalar exponent (both partials 0 at x=0).
Tensor signed_pow_channels(const Tensor& x, const Tensor& exponent, const std::vector<int>& channels) {
    const ChannelView v = channel_view(x, "gamma_forward");
    check_channels(v, channels, "gamma_forward");
    const double e = exponent.value();
    if (e <= 0.0) throw DomainError("gamma_forward: exponent must be positive, got " + std::to_string(e));

    std::vector<char> selected(static_cast<std::size_t>(v.channels), 0);
    for (int c : channels) selected[static_cast<std::size_t>(c)] = 1;

    Tensor out = Tensor::from(x.shape(), x.values());
    for (int n = 0; n < v.batches; ++n)
        for (int c = 0; c < v.channels; ++c) {
            if (!selected[static_cast<std::size_t>(c)]) continue;
            double* p = out.data() + (static_cast<std::size_t>(n) * v.channels + c) * v.plane;
            for (std::size_t i = 0; i < v.plane; ++i) p[i] = signed_pow_value(p[i], e);
        }

    Tape* tape = Tape::active();
    if (tape && (x.requires_grad() || exponent.requires_grad())) {
        out.set_requires_grad(true);
        Tensor tx = x, te = exponent, y = out;
        tape->record({x, exponent}, out, [tx, te, y, e, v, selected]() mutable {
            const double* gy = y.grad().data();
            const double* xv = tx.data();
            const double* fv = y.data();
            double* gx = tx.requires_grad() ? tx.grad().data() : nullptr;
            double ge = 0.0;
            for (int n = 0; n < v.batches; ++n)
                for (int c = 0; c < v.channels; ++c) {
                    const std::size_t off = (static_cast<std::size_t>(n) * v.channels + c) * v.plane;
                    if (!selected[static_cast<std::size_t>(c)]) {
                        if (gx)
                            for (std::size_t i = 0; i < v.plane; ++i) gx[off + i] += gy[off + i];
                        continue;
                    }
                    for (std::size_t i = 0; i < v.plane; ++i) {
                        const double xi = xv[off + i];
                        if (xi == 0.0) continue;
                        if (gx) gx[off + i] += gy[off + i] * e * std::pow(std::fabs(xi), e - 1.0);
                        ge += gy[off + i] * fv[off + i] * std::log(std::fabs(xi));
                    }
                }
            if (te.requires_grad()) te.grad()[0] += ge;
        });
    }
    return out;
}

} // namespace

GammaTransform GammaTransform::none() { return GammaTransform{}; }

GammaTransform GammaTransform::fixed(double gamma, std::vector<int> applies_to) {
    if (gamma <= 0.0) throw DomainError("GammaTransform: gamma must be positive, got " + std::to_string(gamma));
    GammaTransform t;
    t.mode_ = GammaMode::Fixed;
    t.fixed_gamma_ = gamma;
    t.applies_to_ = std::move(applies_to);
    return t;
}

GammaTransform GammaTransform::learnable(std::vector<int> applies_to) {
    GammaTransform t;
    t.mode_ = GammaMode::Learnable;
    t.theta_ = Tensor::scalar(0.0, true); // gamma = exp(0) = 1, the identity start
    t.applies_to_ = std::move(applies_to);
    return t;
}

double GammaTransform::gamma() const {
    switch (mode_) {
        case GammaMode::None: return 1.0;
        case GammaMode::Fixed: return fixed_gamma_;
        case GammaMode::Learnable: return std::exp(theta_.value());
    }
    return 1.0;
}

Tensor GammaTransform::theta() const {
    if (mode_ != GammaMode::Learnable)
        throw ConfigError("GammaTransform: theta is only defined in learnable mode");
    return theta_;
}

Tensor gamma_forward(const Tensor& x, const GammaTransform& t) {
    if (t.mode() == GammaMode::None) return x;
    if (t.mode() == GammaMode::Fixed) {
        Tensor e = Tensor::scalar(1.0 / t.gamma());
        return signed_pow_channels(x, e, t.applies_to());
    }
    // learnable: exponent = exp(-theta), so d(exponent)/d(theta) = -exponent
    Tensor e = exp(scalar_mul(t.theta(), -1.0));
    return signed_pow_channels(x, e, t.applies_to());
}

Tensor gamma_inverse(const Tensor& y, const GammaTransform& t) {
    if (t.mode() == GammaMode::None) return y;
    const ChannelView v = channel_view(y, "gamma_inverse");
    check_channels(v, t.applies_to(), "gamma_inverse");
    const double g = t.gamma();
    Tensor out = Tensor::from(y.shape(), y.values());
    for (int c : t.applies_to())
        for (int n = 0; n < v.batches; ++n) {
            double* p = out.data() + (static_cast<std::size_t>(n) * v.channels + c) * v.plane;
            for (std::size_t i = 0; i < v.plane; ++i) p[i] = signed_pow_value(p[i], g);
        }
    return out;
}

LinearNormalizer fit_normalizer(const std::vector<Tensor>& training_fields) {
    if (training_fields.empty()) throw DataError("fit_normalizer: empty training set");
    const ChannelView v0 = channel_view(training_fields.front(), "fit_normalizer");
    const int C = v0.channels;

    std::vector<double> sum(static_cast<std::size_t>(C), 0.0);
    std::vector<double> count(static_cast<std::size_t>(C), 0.0);
    for (const Tensor& f : training_fields) {
        const ChannelView v = channel_view(f, "fit_normalizer");
        if (v.channels != C)
            throw ShapeError("fit_normalizer: inconsistent channel count " + std::to_string(v.channels) +
                             " vs " + std::to_string(C));
        for (int n = 0; n < v.batches; ++n)
            for (int c = 0; c < C; ++c) {
                const double* p = f.data() + (static_cast<std::size_t>(n) * C + c) * v.plane;
                for (std::size_t i = 0; i < v.plane; ++i) sum[static_cast<std::size_t>(c)] += p[i];
                count[static_cast<std::size_t>(c)] += static_cast<double>(v.plane);
            }
    }
    LinearNormalizer norm;
    norm.mean.resize(static_cast<std::size_t>(C));
    norm.std.resize(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) norm.mean[static_cast<std::size_t>(c)] = sum[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)];

    std::vector<double> sq(static_cast<std::size_t>(C), 0.0);
    for (const Tensor& f : training_fields) {
        const ChannelView v = channel_view(f, "fit_normalizer");
        for (int n = 0; n < v.batches; ++n)
            for (int c = 0; c < C; ++c) {
                const double* p = f.data() + (static_cast<std::size_t>(n) * C + c) * v.plane;
                const double m = norm.mean[static_cast<std::size_t>(c)];
                for (std::size_t i = 0; i < v.plane; ++i) {
                    const double d = p[i] - m;
                    sq[static_cast<std::size_t>(c)] += d * d;
                }
            }
    }
    for (int c = 0; c < C; ++c) {
        const double var = sq[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)];
        if (var <= 0.0)
            throw DataError("fit_normalizer: channel " + std::to_string(c) + " has zero variance");
        norm.std[static_cast<std::size_t>(c)] = std::sqrt(var);
    }
    return norm;
}

namespace {

Tensor channel_affine(const Tensor& x, const LinearNormalizer& n, bool inverse, const char* op) {
    const ChannelView v = channel_view(x, op);
    if (v.channels != n.channels())
        throw ShapeError(std::string(op) + ": tensor has " + std::to_string(v.channels) +
                         " channels, normalizer has " + std::to_string(n.channels()));
    for (double s : n.std)
        if (s <= 0.0) throw ConfigError(std::string(op) + ": normalizer std must be positive");

    Tensor out = Tensor::zeros(x.shape());
    for (int b = 0; b < v.batches; ++b)
        for (int c = 0; c < v.channels; ++c) {
            const std::size_t off = (static_cast<std::size_t>(b) * v.channels + c) * v.plane;
            const double m = n.mean[static_cast<std::size_t>(c)], s = n.std[static_cast<std::size_t>(c)];
            const double* p = x.data() + off;
            double* q = out.data() + off;
            if (inverse)
                for (std::size_t i = 0; i < v.plane; ++i) q[i] = p[i] * s + m;
            else
                for (std::size_t i = 0; i < v.plane; ++i) q[i] = (p[i] - m) / s;
        }

    Tape* tape = Tape::active();
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        Tensor tx = x, y = out;
        std::vector<double> stds = n.std;
        tape->record({x}, out, [tx, y, stds, v, inverse]() mutable {
            const double* gy = y.grad().data();
            double* gx = tx.grad().data();
            for (int b = 0; b < v.batches; ++b)
                for (int c = 0; c < v.channels; ++c) {
                    const std::size_t off = (static_cast<std::size_t>(b) * v.channels + c) * v.plane;
                    const double k = inverse ? stds[static_cast<std::size_t>(c)] : 1.0 / stds[static_cast<std::size_t>(c)];
                    for (std::size_t i = 0; i < v.plane; ++i) gx[off + i] += k * gy[off + i];
                }
        });
    }
    return out;
}

} // namespace

Tensor normalize(const Tensor& x, const LinearNormalizer& n) { return channel_affine(x, n, false, "normalize"); }

Tensor denormalize(const Tensor& y, const LinearNormalizer& n) { return channel_affine(y, n, true, "denormalize"); }

} // namespace downscale
