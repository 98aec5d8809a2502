#pragma once

#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

enum class GammaMode { None, Fixed, Learnable };

/// Signed power-law preprocessor: forward maps x to sign(x)*|x|^(1/gamma) on
/// the channels it applies to. Learnable mode reparameterizes gamma = exp(theta)
/// with theta a tape leaf, so gamma stays positive and trains jointly with the
/// network. Mode None is the identity.
class GammaTransform {
public:
    static GammaTransform none();
    static GammaTransform fixed(double gamma, std::vector<int> applies_to);
    static GammaTransform learnable(std::vector<int> applies_to); // starts at gamma = 1

    GammaMode mode() const { return mode_; }
    double gamma() const;
    const std::vector<int>& applies_to() const { return applies_to_; }

    /// The unconstrained parameter theta (learnable mode only).
    Tensor theta() const;

private:
    GammaMode mode_ = GammaMode::None;
    double fixed_gamma_ = 1.0;
    Tensor theta_;
    std::vector<int> applies_to_;
};

/// Applies the transform to the selected channels; other channels pass
/// through. Differentiable: in learnable mode the output depends on theta
/// through the tape. Accepts rank-3 (C,H,W) or rank-4 (N,C,H,W) tensors;
/// channels refer to the channel axis.
Tensor gamma_forward(const Tensor& x, const GammaTransform& t);

/// Exact inverse, sign(y)*|y|^gamma, value-level (never recorded).
Tensor gamma_inverse(const Tensor& y, const GammaTransform& t);

/// Per-channel linear standardization: (x - mean) / std.
struct LinearNormalizer {
    std::vector<double> mean;
    std::vector<double> std;
    int channels() const { return static_cast<int>(mean.size()); }
};

/// Per-channel mean/std over every pixel of the given fields. All fields must
/// share the channel count; rank-3 (C,H,W) or rank-4 (N,C,H,W).
LinearNormalizer fit_normalizer(const std::vector<Tensor>& training_fields);

/// Differentiable per-channel affine (x - mean) / std.
Tensor normalize(const Tensor& x, const LinearNormalizer& n);

/// Differentiable inverse, y * std + mean.
Tensor denormalize(const Tensor& y, const LinearNormalizer& n);

} // namespace downscale
