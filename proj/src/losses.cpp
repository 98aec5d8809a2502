#include "downscale/losses.hpp"

#include <cmath>

namespace downscale {

namespace {

void check_pair(const Tensor& pred, const Tensor& gt, const char* op) {
    if (pred.shape() != gt.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(gt.shape()));
}

} // namespace

Tensor l1_loss(const Tensor& pred, const Tensor& gt) {
    check_pair(pred, gt, "l1_loss");
    const std::size_t n = pred.values().size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += std::fabs(pred.values()[i] - gt.values()[i]);
    Tensor out = Tensor::scalar(s / static_cast<double>(n));

    Tape* tape = Tape::active();
    if (tape && (pred.requires_grad() || gt.requires_grad())) {
        out.set_requires_grad(true);
        Tensor p = pred, g = gt, y = out;
        tape->record({pred, gt}, out, [p, g, y]() mutable {
            const double gy = y.grad()[0];
            const std::size_t n = p.values().size();
            const double k = gy / static_cast<double>(n);
            double* gp = p.requires_grad() ? p.grad().data() : nullptr;
            double* gg = g.requires_grad() ? g.grad().data() : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = p.values()[i] - g.values()[i];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); // subgradient 0 at ties
                if (gp) gp[i] += k * s;
                if (gg) gg[i] -= k * s;
            }
        });
    }
    return out;
}

Tensor l2_loss(const Tensor& pred, const Tensor& gt) {
    check_pair(pred, gt, "l2_loss");
    const std::size_t n = pred.values().size();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pred.values()[i] - gt.values()[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(n));

    Tape* tape = Tape::active();
    if (tape && (pred.requires_grad() || gt.requires_grad())) {
        out.set_requires_grad(true);
        Tensor p = pred, g = gt, y = out;
        tape->record({pred, gt}, out, [p, g, y]() mutable {
            const double gy = y.grad()[0];
            const std::size_t n = p.values().size();
            const double k = 2.0 * gy / static_cast<double>(n);
            double* gp = p.requires_grad() ? p.grad().data() : nullptr;
            double* gg = g.requires_grad() ? g.grad().data() : nullptr;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = p.values()[i] - g.values()[i];
                if (gp) gp[i] += k * d;
                if (gg) gg[i] -= k * d;
            }
        });
    }
    return out;
}

void MetricsAccumulator::add(const Tensor& pred_physical, const Tensor& gt_physical,
                             const Tensor& pred_transformed, const Tensor& gt_transformed) {
    check_pair(pred_physical, gt_physical, "evaluate_metrics");
    check_pair(pred_transformed, gt_transformed, "evaluate_metrics");
    if (pred_physical.numel() != pred_transformed.numel())
        throw ShapeError("evaluate_metrics: physical and transformed sizes differ");
    const std::size_t n = pred_physical.values().size();
    for (std::size_t i = 0; i < n; ++i) {
        const double dp = pred_physical.values()[i] - gt_physical.values()[i];
        abs_phys_ += std::fabs(dp);
        sq_phys_ += dp * dp;
        const double dt = pred_transformed.values()[i] - gt_transformed.values()[i];
        abs_trans_ += std::fabs(dt);
        sq_trans_ += dt * dt;
    }
    n_ += static_cast<std::int64_t>(n);
}

MetricsReport MetricsAccumulator::report() const {
    if (n_ == 0) throw DataError("evaluate_metrics: empty test set");
    MetricsReport r;
    const double n = static_cast<double>(n_);
    r.avg_abs_diff = abs_phys_ / n;
    r.avg_mse = sq_phys_ / n;
    r.avg_abs_diff_transformed = abs_trans_ / n;
    r.avg_mse_transformed = sq_trans_ / n;
    r.n_pixels = n_;
    return r;
}

MetricsReport evaluate_metrics(const Tensor& pred_physical, const Tensor& gt_physical,
                               const Tensor& pred_transformed, const Tensor& gt_transformed) {
    MetricsAccumulator acc;
    acc.add(pred_physical, gt_physical, pred_transformed, gt_transformed);
    return acc.report();
}

} // namespace downscale
