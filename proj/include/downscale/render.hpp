#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "downscale/tensor.hpp"

namespace downscale {

/// Piecewise-linear colormap: ordered control points mapping a value fraction
/// in [0,1] to an RGB triple. Out-of-range values clamp to the end colors.
struct ColorMap {
    struct Stop {
        double fraction;
        std::array<std::uint8_t, 3> rgb;
    };
    std::string name;
    std::vector<Stop> stops;

    void validate() const; // fractions strictly increasing within [0,1]
    std::array<std::uint8_t, 3> sample(double fraction) const;

    static ColorMap sequential(); // dark blue -> green -> yellow -> white
    static ColorMap diverging();  // blue -> white -> red, zero at the midpoint
};

/// In-memory RGB raster plus the P6 writer.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels; // rgb rgb ... row-major

    void write_ppm(const std::filesystem::path& path) const;
    std::array<std::uint8_t, 3> at(int x, int y) const;
};

/// One field (1,1,H,W), rank-3 (1,H,W) or rank-2 (H,W) to one pixel per grid
/// cell, linear value->color over [lo, hi].
Image render_field(const Tensor& field, double lo, double hi, const ColorMap& cmap);

void render_heatmap(const Tensor& field, double lo, double hi, const ColorMap& cmap,
                    const std::filesystem::path& path);

/// Horizontal strip of equally sized heatmaps with 2-pixel black separators.
struct Panel {
    std::string label;
    Tensor field;
};
Image render_panel_image(const std::vector<Panel>& panels, double lo, double hi, const ColorMap& cmap);
void render_panel(const std::vector<Panel>& panels, double lo, double hi, const ColorMap& cmap,
                  const std::filesystem::path& path);

/// Symmetric range (-r, +r) with r = max |value|, for difference maps.
std::pair<double, double> symmetric_range(const Tensor& field);

} // namespace downscale
