#pragma once

#include <cstdint>

#include "downscale/tensor.hpp"

namespace downscale {

/// Mean absolute difference over all elements (subgradient 0 at ties).
Tensor l1_loss(const Tensor& pred, const Tensor& gt);

/// Mean squared difference over all elements.
Tensor l2_loss(const Tensor& pred, const Tensor& gt);

/// One results row: the two evaluation metrics in physical units plus the
/// same pair computed in the transformed (pre-inverse) space. Aggregation is
/// a flat mean over every pixel of every sample.
struct MetricsReport {
    double avg_abs_diff = 0.0;
    double avg_mse = 0.0;
    double avg_abs_diff_transformed = 0.0;
    double avg_mse_transformed = 0.0;
    std::int64_t n_pixels = 0;
};

class MetricsAccumulator {
public:
    void add(const Tensor& pred_physical, const Tensor& gt_physical, const Tensor& pred_transformed,
             const Tensor& gt_transformed);
    MetricsReport report() const; // throws DataError when nothing was added

private:
    double abs_phys_ = 0.0, sq_phys_ = 0.0, abs_trans_ = 0.0, sq_trans_ = 0.0;
    std::int64_t n_ = 0;
};

MetricsReport evaluate_metrics(const Tensor& pred_physical, const Tensor& gt_physical,
                               const Tensor& pred_transformed, const Tensor& gt_transformed);

} // namespace downscale
