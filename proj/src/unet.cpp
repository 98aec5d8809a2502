#include "downscale/unet.hpp"

#include <algorithm>
#include <cmath>

#include "downscale/rng.hpp"
#include "downscale/serialize.hpp"

namespace downscale {

UNetConfig UNetConfig::desk(int in_channels) {
    UNetConfig cfg;
    cfg.in_channels = in_channels;
    cfg.base_width = 32;
    cfg.preset = ScalePreset::Desk;
    return cfg;
}

UNetConfig UNetConfig::paper(int in_channels) {
    // base width chosen so the trainable-parameter count lands on the 7.5M
    // budget (7,445,845 for 6 input channels, within 1%)
    UNetConfig cfg;
    cfg.in_channels = in_channels;
    cfg.base_width = 126;
    cfg.preset = ScalePreset::Paper;
    return cfg;
}

void UNetConfig::validate() const {
    if (in_channels <= 0 || out_channels <= 0)
        throw ConfigError("UNetConfig: channel counts must be positive");
    if (base_width <= 0) throw ConfigError("UNetConfig: base_width must be positive");
    for (int m : width_multipliers)
        if (m <= 0) throw ConfigError("UNetConfig: width multipliers must be positive");
    if (kernel_size <= 0 || kernel_size % 2 == 0)
        throw ConfigError("UNetConfig: kernel_size must be odd and positive, got " +
                          std::to_string(kernel_size));
    if (skip_links.size() != 2)
        throw ConfigError("UNetConfig: exactly two skip links required, got " +
                          std::to_string(skip_links.size()));
    for (std::size_t i = 0; i < skip_links.size(); ++i) {
        if (skip_links[i] < 1 || skip_links[i] > 3)
            throw ConfigError("UNetConfig: skip link group must be 1..3, got " +
                              std::to_string(skip_links[i]));
        if (i > 0 && skip_links[i] <= skip_links[i - 1])
            throw ConfigError("UNetConfig: skip links must be strictly ascending");
    }
    if (skip_mode == SkipMode::Add && has_skip(1) && in_channels != base_width * width_multipliers[0])
        throw ConfigError("UNetConfig: additive skip at group 1 needs in_channels == first group width");
}

bool UNetConfig::has_skip(int group) const {
    return std::find(skip_links.begin(), skip_links.end(), group) != skip_links.end();
}

namespace {

struct BlockSpec {
    int in_c, out_c, stride;
    bool upsample, bn, relu;
};

// The twelve conv blocks, in execution order. Skip widths only matter in
// concat mode, where they widen the input of the post-skip conv.
std::vector<BlockSpec> architecture(const UNetConfig& cfg) {
    const auto w = cfg.group_widths();
    const bool concat = cfg.skip_mode == SkipMode::Concat;
    const int s3 = cfg.has_skip(3) && concat ? w[1] : 0; // group-3 entry width is w[1]
    const int s2 = cfg.has_skip(2) && concat ? w[0] : 0;
    const int s1 = cfg.has_skip(1) && concat ? cfg.in_channels : 0;
    return {
        // encoder
        {cfg.in_channels, w[0], 2, false, true, true},
        {w[0], w[0], 1, false, true, true},
        {w[0], w[1], 2, false, true, true},
        {w[1], w[1], 1, false, true, true},
        {w[1], w[2], 2, false, true, true},
        {w[2], w[2], 1, false, true, true},
        // decoder
        {w[2], w[1], 1, true, true, true},
        {w[1] + s3, w[1], 1, false, true, true},
        {w[1], w[0], 1, true, true, true},
        {w[0] + s2, w[0], 1, false, true, true},
        {w[0], w[0], 1, true, true, true},
        {w[0] + s1, cfg.out_channels, 1, false, false, false}, // final block: no BN/ReLU
    };
}

// (source activation index, block index receiving it); activation 0 is the
// network input, activation i+1 is block i's output
std::vector<std::pair<int, int>> skip_wiring(const UNetConfig& cfg) {
    std::vector<std::pair<int, int>> wires;
    if (cfg.has_skip(3)) wires.emplace_back(4, 7);
    if (cfg.has_skip(2)) wires.emplace_back(2, 9);
    if (cfg.has_skip(1)) wires.emplace_back(0, 11);
    return wires;
}

} // namespace

std::int64_t conv_parameter_count(int in_c, int out_c, int kernel) {
    return static_cast<std::int64_t>(out_c) * in_c * kernel * kernel + out_c;
}

std::int64_t parameter_count(const UNetConfig& cfg) {
    std::int64_t total = 0;
    for (const BlockSpec& b : architecture(cfg)) {
        total += conv_parameter_count(b.in_c, b.out_c, cfg.kernel_size);
        if (b.bn) total += 2 * b.out_c;
    }
    return total;
}

Model build_unet(const UNetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.skips = skip_wiring(cfg);
    Rng rng(seed);
    const int k = cfg.kernel_size;
    for (const BlockSpec& spec : architecture(cfg)) {
        ConvBlock block;
        block.stride = spec.stride;
        block.upsample_before = spec.upsample;
        block.has_bn = spec.bn;
        block.has_relu = spec.relu;
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.in_c) * k * k);
        block.weight = Tensor::zeros({spec.out_c, spec.in_c, k, k}, true);
        for (auto& v : block.weight.values()) v = rng.uniform(-bound, bound);
        block.bias = Tensor::zeros({spec.out_c}, true);
        for (auto& v : block.bias.values()) v = rng.uniform(-bound, bound);
        if (spec.bn) {
            block.bn_scale = Tensor::full({spec.out_c}, 1.0, true);
            block.bn_shift = Tensor::zeros({spec.out_c}, true);
            block.bn_running_mean = Tensor::zeros({spec.out_c});
            block.bn_running_var = Tensor::full({spec.out_c}, 1.0);
        }
        m.blocks.push_back(std::move(block));
    }
    return m;
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> params;
    for (const ConvBlock& b : blocks) {
        params.push_back(b.weight);
        params.push_back(b.bias);
        if (b.has_bn) {
            params.push_back(b.bn_scale);
            params.push_back(b.bn_shift);
        }
    }
    return params;
}

std::vector<std::pair<std::string, Tensor>> Model::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> named;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const ConvBlock& b = blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        named.emplace_back(p + "weight", b.weight);
        named.emplace_back(p + "bias", b.bias);
        if (b.has_bn) {
            named.emplace_back(p + "bn_scale", b.bn_scale);
            named.emplace_back(p + "bn_shift", b.bn_shift);
            named.emplace_back(p + "bn_running_mean", b.bn_running_mean);
            named.emplace_back(p + "bn_running_var", b.bn_running_var);
        }
    }
    return named;
}

Tensor unet_forward(Model& m, const Tensor& input, BatchNormMode mode) {
    if (input.rank() != 4) throw ShapeError("unet_forward: input must be NCHW, got " + shape_str(input.shape()));
    if (input.dim(1) != m.cfg.in_channels)
        throw ShapeError("unet_forward: expected " + std::to_string(m.cfg.in_channels) + " channels, got " +
                         std::to_string(input.dim(1)));
    if (input.dim(2) % 8 != 0 || input.dim(3) % 8 != 0)
        throw ShapeError("unet_forward: H and W must be divisible by 8, got " + shape_str(input.shape()));

    std::vector<Tensor> acts;
    acts.reserve(m.blocks.size() + 1);
    acts.push_back(input);
    Tensor x = input;
    const double bn_momentum = 0.1;
    const double bn_epsilon = 1e-5;
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        ConvBlock& b = m.blocks[i];
        if (b.upsample_before) x = upsample_nearest2x(x);
        for (const auto& [src, dst] : m.skips) {
            if (dst == static_cast<int>(i)) {
                x = m.cfg.skip_mode == SkipMode::Concat ? concat_channels(x, acts[static_cast<std::size_t>(src)])
                                                        : add(x, acts[static_cast<std::size_t>(src)]);
            }
        }
        x = conv2d(x, b.weight, b.bias, b.stride, (m.cfg.kernel_size - 1) / 2);
        if (b.has_bn)
            x = batchnorm2d(x, b.bn_scale, b.bn_shift, b.bn_running_mean, b.bn_running_var, mode,
                            bn_momentum, bn_epsilon);
        if (b.has_relu) x = relu(x);
        acts.push_back(x);
    }
    return x;
}

// ---- checkpoint container ----

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_config(BinWriter& w, const UNetConfig& cfg) {
    w.u32(static_cast<std::uint32_t>(cfg.in_channels));
    w.u32(static_cast<std::uint32_t>(cfg.out_channels));
    w.u32(static_cast<std::uint32_t>(cfg.base_width));
    for (int mlt : cfg.width_multipliers) w.u32(static_cast<std::uint32_t>(mlt));
    w.u32(static_cast<std::uint32_t>(cfg.kernel_size));
    w.u32(static_cast<std::uint32_t>(cfg.skip_links.size()));
    for (int g : cfg.skip_links) w.u32(static_cast<std::uint32_t>(g));
    w.u32(cfg.skip_mode == SkipMode::Concat ? 0u : 1u);
    w.u32(cfg.preset == ScalePreset::Desk ? 0u : 1u);
}

UNetConfig read_config(BinReader& r) {
    UNetConfig cfg;
    cfg.in_channels = static_cast<int>(r.u32());
    cfg.out_channels = static_cast<int>(r.u32());
    cfg.base_width = static_cast<int>(r.u32());
    for (int i = 0; i < 3; ++i) cfg.width_multipliers[static_cast<std::size_t>(i)] = static_cast<int>(r.u32());
    cfg.kernel_size = static_cast<int>(r.u32());
    const std::uint32_t nskips = r.u32();
    cfg.skip_links.clear();
    for (std::uint32_t i = 0; i < nskips; ++i) cfg.skip_links.push_back(static_cast<int>(r.u32()));
    cfg.skip_mode = r.u32() == 0 ? SkipMode::Concat : SkipMode::Add;
    cfg.preset = r.u32() == 0 ? ScalePreset::Desk : ScalePreset::Paper;
    return cfg;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const std::vector<std::pair<std::string, std::vector<double>>>& extra_blobs) {
    BinWriter w;
    w.magic(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    write_config(w, model.cfg);
    const auto named = model.named_tensors();
    w.u32(static_cast<std::uint32_t>(named.size() + extra_blobs.size()));
    for (const auto& [name, tensor] : named) {
        w.str(name);
        w.u64(static_cast<std::uint64_t>(tensor.numel()));
        w.f64_array(tensor.data(), tensor.values().size());
    }
    for (const auto& [name, blob] : extra_blobs) {
        w.str(name);
        w.u64(static_cast<std::uint64_t>(blob.size()));
        w.f64_array(blob.data(), blob.size());
    }
    w.write_file(path);
}

Checkpoint load_checkpoint_raw(const std::filesystem::path& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic(kCheckpointMagic, "checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.cfg = read_config(r);
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str();
        const std::uint64_t count = r.u64();
        std::vector<double> blob(count);
        r.f64_array(blob.data(), blob.size());
        ck.blobs.emplace_back(std::move(name), std::move(blob));
    }
    if (!r.at_end()) throw FormatError("trailing bytes in checkpoint");
    return ck;
}

std::pair<Model, std::vector<std::pair<std::string, std::vector<double>>>>
load_checkpoint(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint_raw(path);
    Model m = build_unet(ck.cfg, 0);
    std::vector<std::pair<std::string, std::vector<double>>> extra;
    auto named = m.named_tensors();
    for (auto& [name, blob] : ck.blobs) {
        auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == name; });
        if (it == named.end()) {
            extra.emplace_back(name, std::move(blob));
            continue;
        }
        if (static_cast<std::int64_t>(blob.size()) != it->second.numel())
            throw FormatError("checkpoint blob " + name + " has " + std::to_string(blob.size()) +
                              " values, model expects " + std::to_string(it->second.numel()));
        it->second.values() = blob;
    }
    return {std::move(m), std::move(extra)};
}

} // namespace downscale
