#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

enum class Variable { PrecipitationLike, TemperatureLike };
enum class FieldKind { PrecipitationLike, TemperatureLike, Auxiliary };

std::string variable_name(Variable v);
Variable variable_from_name(const std::string& name);

/// One gridded field (1,1,H,W) with its meaning attached.
struct ClimateField {
    Tensor grid;
    FieldKind kind = FieldKind::Auxiliary;
    std::string units;
};

/// One training example. Input channels are fixed and documented:
///   precipitation: [predictand, elevation_fine, elevation_coarse, u_wind, v_wind, humidity]
///   temperature:   [predictand, elevation_fine, elevation_coarse]
/// where the predictand channel is the coarsened truth regridded back to the
/// fine grid. Target is the fine-grid truth, single channel.
struct SamplePair {
    Tensor input;  // (C,H,W)
    Tensor target; // (1,H,W)
};

/// Synthetic generator configuration. Distribution parameters are calibrated
/// to the two regimes: temperature-like fields are smooth, balanced, narrow
/// dynamic range; precipitation-like fields are zero-inflated and heavy
/// tailed (>= 40% exact zeros, p99.9 > 50x the nonzero mean).
struct DatasetSpec {
    Variable variable = Variable::PrecipitationLike;
    int n_train = 256;
    int n_val = 32;
    int n_test = 64;
    int fine_h = 64;
    int fine_w = 64;
    int coarsen_factor = 8;
    std::uint64_t seed = 0;

    // spectral synthesis: power-law spectrum k^spectral_exponent over
    // [k_min, k_max] cycles per domain, sampled with `modes` cosine modes
    int modes = 160;
    double spectral_exponent = -3.0;
    double k_min = 1.0;
    double k_max = 1.7;

    // temperature-like: mean/std of the rescaled field, plus the lapse
    // contribution per elevation unit applied to the fixed elevation field
    double temp_mean = 10.0;
    double temp_std = 8.0;
    double lapse_per_unit = -6.5 / 1000.0;
    double elevation_scale = 2000.0;

    // precipitation-like: y = max(0, exp(a*g + b) - 1) with b = -a*zero_z,
    // so the exact-zero fraction is Phi(zero_z)
    double precip_log_scale = 3.0;
    double precip_zero_z = -0.1;

    // optional linear remap of the predictand (train-split moments), used for
    // the low-dynamic-range temperature variant
    std::optional<double> rescale_mean;
    std::optional<double> rescale_std;

    int input_channels() const { return variable == Variable::PrecipitationLike ? 6 : 3; }
    void validate() const;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<SamplePair> train, val, test;
};

/// Smooth Gaussian random fields (zero mean, unit variance by construction).
std::vector<ClimateField> gen_smooth_fields(const DatasetSpec& spec, int count, std::uint64_t stream);

std::vector<ClimateField> gen_temperature_like(const DatasetSpec& spec, int count, std::uint64_t stream,
                                               const ClimateField& elevation);
std::vector<ClimateField> gen_precipitation_like(const DatasetSpec& spec, int count, std::uint64_t stream);

/// The dataset's fixed elevation field, in [0, elevation_scale] units.
ClimateField gen_elevation(const DatasetSpec& spec);

/// Non-overlapping block means; H and W must divide by the factor.
ClimateField coarsen(const ClimateField& field, int factor);

/// Edge-aligned bilinear interpolation onto the target grid (exact on
/// affine ramps). Source dims must be at least 2.
ClimateField regrid_bilinear(const ClimateField& field, int target_h, int target_w);

/// Builds the full dataset: truth fields, aux channels, coarsen + regrid
/// pipeline, split into train/val/test with disjoint derived seeds.
Dataset generate_dataset(const DatasetSpec& spec);

/// Summary statistics used for generator calibration checks and reporting.
struct FieldStats {
    double zero_fraction = 0.0;
    double tail_ratio = 0.0; // p99.9 / mean of nonzero pixels
    double mean = 0.0;
    double stddev = 0.0;
    double skewness = 0.0;
};
FieldStats predictand_stats(const std::vector<SamplePair>& pairs);

// ---- dataset container ----
// Versioned binary file; see docs/format.md for the byte layout.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

} // namespace downscale
