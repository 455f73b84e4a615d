#include "chaosrl/heatmap.hpp"

#include <cmath>
#include <fstream>

#include <zlib.h>

#include "chaosrl/common.hpp"

namespace chaosrl {

namespace {

// Gradient stops, evenly spaced over [0, 1].
constexpr std::array<std::array<int, 3>, 5> kStops = {{
    {{68, 1, 84}},     // dark violet
    {{59, 82, 139}},   // blue
    {{33, 145, 140}},  // teal
    {{94, 201, 98}},   // green
    {{253, 231, 37}},  // yellow
}};

std::uint8_t lerp_round(int a, int b, double u) {
    const double v = a + (b - a) * u;
    return static_cast<std::uint8_t>(std::lround(v < 0 ? 0 : (v > 255 ? 255 : v)));
}

void push_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void push_chunk(std::vector<std::uint8_t>& out, const char type[4],
                const std::vector<std::uint8_t>& data) {
    push_u32_be(out, static_cast<std::uint32_t>(data.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    out.insert(out.end(), body.begin(), body.end());
    push_u32_be(out, crc32_bytes(body.data(), body.size()));
}

}  // namespace

std::array<std::uint8_t, 3> heat_color(double t) {
    if (!(t > 0.0)) t = 0.0;  // also catches NaN
    if (t > 1.0) t = 1.0;
    const double x = t * (kStops.size() - 1);
    int i = static_cast<int>(x);
    if (i >= static_cast<int>(kStops.size()) - 1) i = static_cast<int>(kStops.size()) - 2;
    const double u = x - i;
    const auto& lo = kStops[static_cast<std::size_t>(i)];
    const auto& hi = kStops[static_cast<std::size_t>(i) + 1];
    return {lerp_round(lo[0], hi[0], u), lerp_round(lo[1], hi[1], u), lerp_round(lo[2], hi[2], u)};
}

HeatmapImage render_heatmap(const std::vector<std::vector<double>>& matrix, double vmin,
                            double vmax, int cell_px) {
    if (matrix.empty() || matrix[0].empty()) throw ConfigError("heatmap: empty matrix");
    if (cell_px < 1) throw ConfigError("heatmap: cell_px must be >= 1");
    const std::size_t ncols = matrix[0].size();
    for (const auto& row : matrix)
        if (row.size() != ncols) throw ConfigError("heatmap: ragged matrix (unequal row lengths)");

    const int rows = static_cast<int>(matrix.size());
    const int cols = static_cast<int>(ncols);
    HeatmapImage img;
    img.width = cols * cell_px;
    img.height = rows * cell_px;
    img.rgb.assign(3 * static_cast<std::size_t>(img.width) * img.height, 0);

    const double span = vmax - vmin;
    for (int cy = 0; cy < rows; ++cy) {
        for (int cx = 0; cx < cols; ++cx) {
            const double v = matrix[static_cast<std::size_t>(cy)][static_cast<std::size_t>(cx)];
            const auto rgb = heat_color(span > 0.0 ? (v - vmin) / span : 0.0);
            for (int py = 0; py < cell_px; ++py) {
                const std::size_t base =
                    3 * (static_cast<std::size_t>(cy * cell_px + py) * img.width + cx * cell_px);
                for (int px = 0; px < cell_px; ++px) {
                    img.rgb[base + 3 * px] = rgb[0];
                    img.rgb[base + 3 * px + 1] = rgb[1];
                    img.rgb[base + 3 * px + 2] = rgb[2];
                }
            }
        }
    }
    return img;
}

HeatmapImage render_heatmap(const std::vector<std::vector<double>>& matrix, int cell_px) {
    if (matrix.empty() || matrix[0].empty()) throw ConfigError("heatmap: empty matrix");
    double vmin = matrix[0][0], vmax = matrix[0][0];
    for (const auto& row : matrix)
        for (double v : row) {
            if (v < vmin) vmin = v;
            if (v > vmax) vmax = v;
        }
    return render_heatmap(matrix, vmin, vmax, cell_px);
}

std::uint32_t crc32_bytes(const void* data, std::size_t n) {
    return static_cast<std::uint32_t>(
        ::crc32(0UL, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

std::vector<std::uint8_t> encode_png(const HeatmapImage& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.rgb.size() != 3 * static_cast<std::size_t>(img.width) * img.height)
        throw ConfigError("png: inconsistent image dimensions");

    // Raw scanlines, each prefixed with filter byte 0.
    const std::size_t stride = 3 * static_cast<std::size_t>(img.width);
    std::vector<std::uint8_t> raw;
    raw.reserve((stride + 1) * static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const std::uint8_t* row = img.rgb.data() + stride * static_cast<std::size_t>(y);
        raw.insert(raw.end(), row, row + stride);
    }

    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> zdata(zlen);
    // Fixed level 6: the compressed stream is part of the determinism contract.
    if (compress2(zdata.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw NumericError("png: zlib compression failed");
    zdata.resize(zlen);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    push_u32_be(ihdr, static_cast<std::uint32_t>(img.width));
    push_u32_be(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor RGB
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    push_chunk(out, "IHDR", ihdr);
    push_chunk(out, "IDAT", zdata);
    push_chunk(out, "IEND", {});
    return out;
}

void write_png(const std::string& path, const HeatmapImage& img) {
    const std::vector<std::uint8_t> bytes = encode_png(img);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("png: cannot open '" + path + "' for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ConfigError("png: write failed for '" + path + "'");
}

}  // namespace chaosrl
