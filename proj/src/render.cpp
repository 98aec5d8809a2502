#include "downscale/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace downscale {

void ColorMap::validate() const {
    if (stops.size() < 2) throw ConfigError("ColorMap: need at least two control points");
    for (std::size_t i = 0; i < stops.size(); ++i) {
        if (stops[i].fraction < 0.0 || stops[i].fraction > 1.0)
            throw ConfigError("ColorMap: control fraction outside [0,1]");
        if (i > 0 && stops[i].fraction <= stops[i - 1].fraction)
            throw ConfigError("ColorMap: control fractions must be strictly increasing");
    }
}

std::array<std::uint8_t, 3> ColorMap::sample(double fraction) const {
    if (!(fraction > stops.front().fraction)) return stops.front().rgb; // clamp (handles NaN too)
    if (fraction >= stops.back().fraction) return stops.back().rgb;
    std::size_t hi = 1;
    while (stops[hi].fraction < fraction) ++hi;
    const Stop& a = stops[hi - 1];
    const Stop& b = stops[hi];
    const double t = (fraction - a.fraction) / (b.fraction - a.fraction);
    std::array<std::uint8_t, 3> rgb;
    for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - t) * a.rgb[static_cast<std::size_t>(c)] + t * b.rgb[static_cast<std::size_t>(c)];
        rgb[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
    return rgb;
}

ColorMap ColorMap::sequential() {
    return {"sequential",
            {{0.0, {13, 8, 135}}, {0.35, {30, 120, 110}}, {0.7, {190, 200, 50}}, {1.0, {255, 255, 255}}}};
}

ColorMap ColorMap::diverging() {
    return {"diverging", {{0.0, {33, 102, 172}}, {0.5, {247, 247, 247}}, {1.0, {178, 24, 43}}}};
}

void Image::write_ppm(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("render: cannot open for writing: " + path.string());
    out << "P6\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw FormatError("render: write failed: " + path.string());
}

std::array<std::uint8_t, 3> Image::at(int x, int y) const {
    const std::size_t off = (static_cast<std::size_t>(y) * width + x) * 3;
    return {pixels[off], pixels[off + 1], pixels[off + 2]};
}

namespace {

// accept (H,W), (1,H,W) or (1,1,H,W)
std::pair<int, int> field_dims(const Tensor& field) {
    if (field.rank() == 2) return {field.dim(0), field.dim(1)};
    if (field.rank() == 3 && field.dim(0) == 1) return {field.dim(1), field.dim(2)};
    if (field.rank() == 4 && field.dim(0) == 1 && field.dim(1) == 1) return {field.dim(2), field.dim(3)};
    throw ShapeError("render: expected a single-channel field, got " + shape_str(field.shape()));
}

} // namespace

Image render_field(const Tensor& field, double lo, double hi, const ColorMap& cmap) {
    if (!(lo < hi)) throw ConfigError("render: need lo < hi");
    cmap.validate();
    const auto [H, W] = field_dims(field);
    Image img;
    img.width = W;
    img.height = H;
    img.pixels.resize(static_cast<std::size_t>(W) * H * 3);
    const double inv = 1.0 / (hi - lo);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double v = field.values()[static_cast<std::size_t>(y) * W + x];
            const auto rgb = cmap.sample((v - lo) * inv);
            const std::size_t off = (static_cast<std::size_t>(y) * W + x) * 3;
            img.pixels[off] = rgb[0];
            img.pixels[off + 1] = rgb[1];
            img.pixels[off + 2] = rgb[2];
        }
    return img;
}

void render_heatmap(const Tensor& field, double lo, double hi, const ColorMap& cmap,
                    const std::filesystem::path& path) {
    render_field(field, lo, hi, cmap).write_ppm(path);
}

Image render_panel_image(const std::vector<Panel>& panels, double lo, double hi, const ColorMap& cmap) {
    if (panels.empty()) throw ConfigError("render_panel: no panels");
    const auto [H, W] = field_dims(panels.front().field);
    for (const Panel& p : panels) {
        const auto [h, w] = field_dims(p.field);
        if (h != H || w != W)
            throw ShapeError("render_panel: field dims differ: " + std::to_string(h) + "x" +
                             std::to_string(w) + " vs " + std::to_string(H) + "x" + std::to_string(W));
    }
    const int k = static_cast<int>(panels.size());
    const int sep = 2;
    Image img;
    img.width = k * W + sep * (k - 1);
    img.height = H;
    img.pixels.assign(static_cast<std::size_t>(img.width) * H * 3, 0); // black separators
    for (int p = 0; p < k; ++p) {
        Image tile = render_field(panels[static_cast<std::size_t>(p)].field, lo, hi, cmap);
        const int x0 = p * (W + sep);
        for (int y = 0; y < H; ++y)
            std::copy_n(tile.pixels.data() + static_cast<std::size_t>(y) * W * 3, W * 3,
                        img.pixels.data() + (static_cast<std::size_t>(y) * img.width + x0) * 3);
    }
    return img;
}

void render_panel(const std::vector<Panel>& panels, double lo, double hi, const ColorMap& cmap,
                  const std::filesystem::path& path) {
    render_panel_image(panels, lo, hi, cmap).write_ppm(path);
}

std::pair<double, double> symmetric_range(const Tensor& field) {
    double r = 0.0;
    for (double v : field.values()) r = std::max(r, std::fabs(v));
    if (r == 0.0) r = 1.0;
    return {-r, r};
}

} // namespace downscale
