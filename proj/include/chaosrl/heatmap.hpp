// Heatmap rendering: matrix of values -> RGB buffer -> PNG file.
//
// The pixel buffer, colormap and PNG encoding are all pinned so that the
// same matrix yields byte-identical image files on every run and platform.
// Images are a convenience view; the CSV matrices remain the ground truth.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace chaosrl {

struct HeatmapImage {
    int width = 0;  // pixels
    int height = 0;
    std::vector<std::uint8_t> rgb;  // 3 bytes per pixel, rows top to bottom

    std::array<std::uint8_t, 3> pixel(int x, int y) const {
        const std::size_t o = 3 * (static_cast<std::size_t>(y) * width + x);
        return {rgb[o], rgb[o + 1], rgb[o + 2]};
    }
};

// Five-stop gradient (dark violet -> blue -> teal -> green -> yellow),
// piecewise-linear with rounding to nearest; t outside [0,1] is clamped.
std::array<std::uint8_t, 3> heat_color(double t);

// matrix[y][x] with row 0 rendered as the top row of cells; each cell is a
// cell_px x cell_px block.  Values map linearly from [vmin, vmax] onto the
// gradient; a degenerate range (vmax <= vmin) paints every cell
// heat_color(0).  Ragged or empty matrices raise ConfigError.
HeatmapImage render_heatmap(const std::vector<std::vector<double>>& matrix, double vmin,
                            double vmax, int cell_px = 24);

// Auto-scaled variant: vmin/vmax are the matrix extremes.
HeatmapImage render_heatmap(const std::vector<std::vector<double>>& matrix, int cell_px = 24);

// zlib CRC-32 of a byte range (also used for artifact checksums).
std::uint32_t crc32_bytes(const void* data, std::size_t n);

// Minimal RGB8 PNG encoder (single IDAT chunk, filter 0 scanlines, fixed
// zlib compression level) — deterministic bytes for fixed input.
std::vector<std::uint8_t> encode_png(const HeatmapImage& img);
void write_png(const std::string& path, const HeatmapImage& img);

}  // namespace chaosrl
