#pragma once

// Georeferenced multi-band grids and the DMR1 container.
//
// DMR1 layout (little-endian):
//   bytes 0-3   magic "DMR1"
//   bytes 4-7   header length L, uint32
//   bytes 8..8+L  UTF-8 `key=value` lines: width, height, bands, band_names,
//                 cell_size, origin_x, origin_y
//   payload     width*height*bands float32, band-sequential, row-major per band.
// NaN is written as the quiet NaN 0x7FC00000.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "urbanform/error.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

inline constexpr double kNoData = std::numeric_limits<double>::quiet_NaN();

/// North-up grid of float64 samples, band-sequential. NaN marks nodata. The origin is the
/// north-west corner; rows run south.
struct MultiBandRaster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t bands = 0;
    std::vector<std::string> band_names;
    double cell_size = 30.0;
    double origin_x = 0.0;
    double origin_y = 0.0;
    std::vector<double> data;

    MultiBandRaster() = default;

    MultiBandRaster(std::size_t w, std::size_t h, std::vector<std::string> names, double fill = 0.0)
        : width(w), height(h), bands(names.size()), band_names(std::move(names)), data(w * h * bands, fill) {}

    std::size_t cells() const noexcept { return width * height; }

    std::size_t index(std::size_t band, std::size_t row, std::size_t col) const noexcept {
        return (band * height + row) * width + col;
    }
    double& at(std::size_t band, std::size_t row, std::size_t col) noexcept { return data[index(band, row, col)]; }
    double at(std::size_t band, std::size_t row, std::size_t col) const noexcept { return data[index(band, row, col)]; }

    double* band_data(std::size_t band) noexcept { return data.data() + band * cells(); }
    const double* band_data(std::size_t band) const noexcept { return data.data() + band * cells(); }

    bool in_bounds(long long row, long long col) const noexcept {
        return row >= 0 && col >= 0 && row < static_cast<long long>(height) && col < static_cast<long long>(width);
    }

    /// Same width, height, cell size and origin.
    bool same_geometry(const MultiBandRaster& other) const noexcept {
        return width == other.width && height == other.height && cell_size == other.cell_size &&
               origin_x == other.origin_x && origin_y == other.origin_y;
    }

    /// Copy of the geometry with a different band list, filled with `fill`.
    MultiBandRaster like(std::vector<std::string> names, double fill = 0.0) const {
        MultiBandRaster out(width, height, std::move(names), fill);
        out.cell_size = cell_size;
        out.origin_x = origin_x;
        out.origin_y = origin_y;
        return out;
    }

    void validate() const {
        if (data.size() != width * height * bands)
            throw Error("raster data length " + std::to_string(data.size()) + " does not match " +
                        std::to_string(width) + "x" + std::to_string(height) + "x" + std::to_string(bands));
        if (band_names.size() != bands) throw Error("raster band_names count does not match band count");
        if (!(cell_size > 0.0)) throw Error("raster cell_size must be positive");
        for (const auto& n : band_names)
            if (n.find(',') != std::string::npos || n.find('\n') != std::string::npos)
                throw Error("band name '" + n + "' contains a reserved character");
    }
};

enum class EdgePolicy { truncate, reject };

struct RasterWindow {
    std::size_t center_row = 0;
    std::size_t center_col = 0;
    std::size_t half_extent = 0;
    EdgePolicy edge_policy = EdgePolicy::truncate;
};

struct WindowCell {
    std::size_t row;
    std::size_t col;
    std::vector<double> values;  // one per band
};

/// In-bounds row/col ranges [r0, r1) x [c0, c1) covered by a window.
struct WindowBounds {
    std::size_t r0, r1, c0, c1;
    std::size_t count() const noexcept { return (r1 - r0) * (c1 - c0); }
};

inline WindowBounds window_bounds(std::size_t height, std::size_t width, std::size_t row, std::size_t col,
                                  std::size_t half) {
    WindowBounds b;
    b.r0 = row >= half ? row - half : 0;
    b.c0 = col >= half ? col - half : 0;
    b.r1 = std::min(height, row + half + 1);
    b.c1 = std::min(width, col + half + 1);
    return b;
}

inline std::vector<WindowCell> window_view(const MultiBandRaster& raster, const RasterWindow& window) {
    if (window.center_row >= raster.height || window.center_col >= raster.width)
        throw Error("window center out of bounds");
    const auto h = window.half_extent;
    const auto b = window_bounds(raster.height, raster.width, window.center_row, window.center_col, h);
    if (window.edge_policy == EdgePolicy::reject && b.count() != (2 * h + 1) * (2 * h + 1))
        throw Error("window at (" + std::to_string(window.center_row) + "," + std::to_string(window.center_col) +
                    ") with half extent " + std::to_string(h) + " leaves the raster");
    std::vector<WindowCell> out;
    out.reserve(b.count());
    for (std::size_t r = b.r0; r < b.r1; ++r)
        for (std::size_t c = b.c0; c < b.c1; ++c) {
            WindowCell cell{r, c, std::vector<double>(raster.bands)};
            for (std::size_t k = 0; k < raster.bands; ++k) cell.values[k] = raster.at(k, r, c);
            out.push_back(std::move(cell));
        }
    return out;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint32_t float_bits(double v) {
    if (std::isnan(v)) return 0x7FC00000u;
    return std::bit_cast<std::uint32_t>(static_cast<float>(v));
}

}  // namespace detail

/// Serializes to DMR1 bytes. Identical rasters give identical bytes.
inline std::string encode_dmr1(const MultiBandRaster& raster) {
    raster.validate();
    std::string header;
    header += "width=" + std::to_string(raster.width) + "\n";
    header += "height=" + std::to_string(raster.height) + "\n";
    header += "bands=" + std::to_string(raster.bands) + "\n";
    header += "band_names=";
    for (std::size_t i = 0; i < raster.band_names.size(); ++i) {
        if (i) header += ",";
        header += raster.band_names[i];
    }
    header += "\n";
    header += "cell_size=" + text::format_double(raster.cell_size) + "\n";
    header += "origin_x=" + text::format_double(raster.origin_x) + "\n";
    header += "origin_y=" + text::format_double(raster.origin_y) + "\n";

    std::string out = "DMR1";
    detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
    out += header;
    out.reserve(out.size() + raster.data.size() * 4);
    for (double v : raster.data) detail::put_u32(out, detail::float_bits(v));
    return out;
}

inline MultiBandRaster decode_dmr1(std::string_view bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 4 || bytes.substr(0, 4) != "DMR1") throw FormatError("bad magic, expected 'DMR1'", 0);
    if (bytes.size() < 8) throw FormatError("truncated header length field", bytes.size());
    const std::size_t header_len = detail::get_u32(p + 4);
    if (bytes.size() < 8 + header_len) throw FormatError("truncated header text", bytes.size());

    MultiBandRaster r;
    bool seen[7] = {};
    std::size_t offset = 8;
    const auto header = bytes.substr(8, header_len);
    std::size_t line_start = 0;
    while (line_start < header.size()) {
        auto nl = header.find('\n', line_start);
        if (nl == std::string_view::npos) nl = header.size();
        const auto line = header.substr(line_start, nl - line_start);
        const std::size_t line_offset = offset + line_start;
        line_start = nl + 1;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw FormatError("header line without '='", line_offset);
        const auto key = line.substr(0, eq);
        const auto value = line.substr(eq + 1);
        auto need_size = [&](std::size_t& dst, int slot) {
            unsigned long long v = 0;
            if (!text::parse_int(value, v)) throw FormatError("bad integer for " + std::string(key), line_offset);
            dst = static_cast<std::size_t>(v);
            seen[slot] = true;
        };
        auto need_double = [&](double& dst, int slot) {
            if (!text::parse_double(value, dst) || !std::isfinite(dst))
                throw FormatError("bad number for " + std::string(key), line_offset);
            seen[slot] = true;
        };
        if (key == "width") need_size(r.width, 0);
        else if (key == "height") need_size(r.height, 1);
        else if (key == "bands") need_size(r.bands, 2);
        else if (key == "band_names") {
            r.band_names.clear();
            if (!value.empty())
                for (auto& n : text::split(value, ',')) r.band_names.push_back(n);
            seen[3] = true;
        } else if (key == "cell_size") need_double(r.cell_size, 4);
        else if (key == "origin_x") need_double(r.origin_x, 5);
        else if (key == "origin_y") need_double(r.origin_y, 6);
        else throw FormatError("unknown header key '" + std::string(key) + "'", line_offset);
    }
    static const char* names[] = {"width", "height", "bands", "band_names", "cell_size", "origin_x", "origin_y"};
    for (int i = 0; i < 7; ++i)
        if (!seen[i]) throw FormatError(std::string("missing header key '") + names[i] + "'", 8);
    if (r.band_names.size() != r.bands) throw FormatError("band_names count does not match bands", 8);
    if (!(r.cell_size > 0.0)) throw FormatError("cell_size must be positive", 8);

    const std::size_t payload_start = 8 + header_len;
    const std::size_t n = r.width * r.height * r.bands;
    const std::size_t available = bytes.size() - payload_start;
    if (available < n * 4) throw FormatError("truncated payload", bytes.size());
    if (available > n * 4) throw FormatError("payload longer than header declares", payload_start + n * 4);
    r.data.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        r.data[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(p + payload_start + 4 * i)));
    return r;
}

inline void write_raster(const MultiBandRaster& raster, const std::string& path) {
    text::write_file(path, encode_dmr1(raster));
}

inline MultiBandRaster read_raster(const std::string& path) { return decode_dmr1(text::read_file(path)); }

}  // namespace urbanform
