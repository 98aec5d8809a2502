#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

enum class SkipMode { Concat, Add };
enum class ScalePreset { Desk, Paper };

/// Architecture description for the encoder-decoder.
///
/// The encoder has three groups (stride-2 conv block followed by a stride-1
/// conv block, each block = conv + batch-norm + ReLU); the decoder mirrors
/// them (nearest 2x upsample + conv block, then a second conv block, with no
/// batch-norm/ReLU on the final block). Skip links take the activation
/// entering encoder group g (g in {1,2,3}; group 1's input is the network
/// input itself) and feed it into the decoder stage at the matching
/// resolution. The default {2,3} keeps the two deeper skip resolutions and
/// drops the full-resolution one.
struct UNetConfig {
    int in_channels = 6;
    int out_channels = 1;
    int base_width = 32;
    std::array<int, 3> width_multipliers{1, 2, 4};
    int kernel_size = 3;
    std::vector<int> skip_links{2, 3}; // encoder group indices, ascending
    SkipMode skip_mode = SkipMode::Concat;
    ScalePreset preset = ScalePreset::Desk;

    static UNetConfig desk(int in_channels);
    static UNetConfig paper(int in_channels);

    void validate() const; // throws ConfigError on violations

    std::array<int, 3> group_widths() const {
        return {base_width * width_multipliers[0], base_width * width_multipliers[1],
                base_width * width_multipliers[2]};
    }
    bool has_skip(int group) const;
};

/// One conv block: conv (+ optional batch-norm + ReLU).
struct ConvBlock {
    Tensor weight; // (Cout,Cin,K,K)
    Tensor bias;   // (Cout)
    int stride = 1;
    bool upsample_before = false; // nearest 2x before the conv
    bool has_bn = false;
    bool has_relu = false;
    Tensor bn_scale, bn_shift, bn_running_mean, bn_running_var;
};

/// Instantiated parameter set. Blocks run in order; skip sources/targets are
/// wired by block index.
struct Model {
    UNetConfig cfg;
    std::vector<ConvBlock> blocks;            // 6 encoder + 6 decoder
    std::vector<std::pair<int, int>> skips;   // (source activation index, concat before block index)

    /// Trainable parameters (conv weights/biases, BN scales/shifts), in a
    /// fixed documented order. Running stats excluded.
    std::vector<Tensor> parameters() const;

    /// Every tensor that must persist: parameters plus running statistics.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

/// Deterministic construction from config and seed (fan-in-scaled uniform
/// conv init, BN scale=1 shift=0).
Model build_unet(const UNetConfig& cfg, std::uint64_t seed);

/// Prediction at input resolution; input must be (N, in_channels, H, W) with
/// H and W divisible by 8.
Tensor unet_forward(Model& m, const Tensor& input, BatchNormMode mode);

/// Exact closed-form trainable-parameter count for a config (BN scale/shift
/// included, running stats excluded).
std::int64_t parameter_count(const UNetConfig& cfg);

/// Counting rule for one conv: out*in*k*k weights plus out biases.
std::int64_t conv_parameter_count(int in_c, int out_c, int kernel);

// ---- checkpoint container ----
// Versioned binary file: magic + version + config echo + extra named blobs
// (transform state etc.) + length-prefixed named parameter blobs, 64-bit
// little-endian reals. Round-trips bit-exactly.

struct Checkpoint {
    UNetConfig cfg;
    std::vector<std::pair<std::string, std::vector<double>>> blobs;
};

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::vector<std::pair<std::string, std::vector<double>>>& extra_blobs = {});
Checkpoint load_checkpoint_raw(const std::filesystem::path& path);

/// Rebuilds a model from a checkpoint (extra blobs returned alongside).
std::pair<Model, std::vector<std::pair<std::string, std::vector<double>>>>
load_checkpoint(const std::filesystem::path& path);

} // namespace downscale
