#pragma once

// Horizontal / vertical density labels from building-area-ratio and height grids.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "urbanform/error.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

enum class LabelKind { horizontal, vertical, growth };

/// Codes double as density ranks within their dimension.
enum class HorizontalClass : std::uint8_t { not_built = 0, sparse = 1, open = 2, compact = 3 };
enum class VerticalClass : std::uint8_t { not_built = 0, low = 1, high = 2 };
enum class GrowthClass : std::uint8_t { no_growth = 0, growth = 1 };

inline constexpr std::uint8_t kUnlabeled = 255;

inline std::size_t class_count(LabelKind kind) {
    switch (kind) {
        case LabelKind::horizontal: return 4;
        case LabelKind::vertical: return 3;
        case LabelKind::growth: return 2;
    }
    return 0;
}

inline std::vector<std::string> class_names(LabelKind kind) {
    switch (kind) {
        case LabelKind::horizontal: return {"not_built", "sparse", "open", "compact"};
        case LabelKind::vertical: return {"not_built", "low", "high"};
        case LabelKind::growth: return {"no_growth", "growth"};
    }
    return {};
}

inline std::string kind_name(LabelKind kind) {
    switch (kind) {
        case LabelKind::horizontal: return "horizontal";
        case LabelKind::vertical: return "vertical";
        case LabelKind::growth: return "growth";
    }
    return {};
}

inline LabelKind parse_kind(std::string_view s) {
    if (s == "horizontal") return LabelKind::horizontal;
    if (s == "vertical") return LabelKind::vertical;
    if (s == "growth") return LabelKind::growth;
    throw Error("unknown label kind '" + std::string(s) + "'");
}

struct DensityScheme {
    double compact_min = 0.30;
    double open_min = 0.15;
    double sparse_min = 0.02;   // also the built-up threshold of the vertical axis
    double high_min_height = 10.0;
    std::size_t block_half_extent = 2;

    void validate() const {
        if (!(compact_min > open_min && open_min > sparse_min && sparse_min > 0.0))
            throw Error("density thresholds must be strictly decreasing and positive");
        if (!(high_min_height > 0.0)) throw Error("height threshold must be positive");
    }
};

// Block means accumulate rounding error; a tie at a threshold still counts as reaching it.
inline constexpr double kThresholdSlack = 1e-12;

inline HorizontalClass classify_horizontal(double block_bar, const DensityScheme& scheme = {}) {
    if (block_bar >= scheme.compact_min - kThresholdSlack) return HorizontalClass::compact;
    if (block_bar >= scheme.open_min - kThresholdSlack) return HorizontalClass::open;
    if (block_bar >= scheme.sparse_min - kThresholdSlack) return HorizontalClass::sparse;
    return HorizontalClass::not_built;
}

inline VerticalClass classify_vertical(double block_bar, double block_mean_height, const DensityScheme& scheme = {}) {
    if (block_bar < scheme.sparse_min - kThresholdSlack) return VerticalClass::not_built;
    return block_mean_height >= scheme.high_min_height - kThresholdSlack ? VerticalClass::high : VerticalClass::low;
}

struct BlockAggregate {
    double bar = 0.0;          // mean building-area ratio over the block
    double mean_height = 0.0;  // footprint-weighted height over built cells
    std::size_t cells = 0;     // finite cells that entered the mean
};

/// Aggregates the edge-truncated block around (row, col). NaN cells are skipped.
inline BlockAggregate block_aggregate(const MultiBandRaster& bar_grid, const MultiBandRaster& height_grid,
                                      std::size_t row, std::size_t col, std::size_t half_extent = 2) {
    if (!bar_grid.same_geometry(height_grid)) throw Error("building-area-ratio and height grids differ in geometry");
    if (row >= bar_grid.height || col >= bar_grid.width) throw Error("block center out of bounds");
    const auto b = window_bounds(bar_grid.height, bar_grid.width, row, col, half_extent);
    double bar_sum = 0.0, weight = 0.0, weighted_height = 0.0;
    std::size_t n = 0;
    for (std::size_t r = b.r0; r < b.r1; ++r)
        for (std::size_t c = b.c0; c < b.c1; ++c) {
            const double ratio = bar_grid.at(0, r, c);
            if (!std::isfinite(ratio)) continue;
            bar_sum += ratio;
            ++n;
            const double h = height_grid.at(0, r, c);
            if (ratio > 0.0 && std::isfinite(h)) {
                weight += ratio;
                weighted_height += ratio * h;
            }
        }
    BlockAggregate out;
    out.cells = n;
    if (n > 0) out.bar = bar_sum / static_cast<double>(n);
    if (weight > 0.0) out.mean_height = weighted_height / weight;
    return out;
}

/// Per-cell class codes for one dimension, with the thresholds that produced them.
struct LabelGrid {
    LabelKind kind = LabelKind::horizontal;
    int epoch = 0;
    std::size_t width = 0;
    std::size_t height = 0;
    double cell_size = 30.0;
    double origin_x = 0.0;
    double origin_y = 0.0;
    std::vector<std::uint8_t> codes;  // kUnlabeled where no label exists
    DensityScheme scheme;

    std::size_t cells() const noexcept { return width * height; }
    std::uint8_t at(std::size_t row, std::size_t col) const noexcept { return codes[row * width + col]; }
    std::uint8_t& at(std::size_t row, std::size_t col) noexcept { return codes[row * width + col]; }

    static LabelGrid like(const MultiBandRaster& geometry, LabelKind kind, int epoch) {
        LabelGrid g;
        g.kind = kind;
        g.epoch = epoch;
        g.width = geometry.width;
        g.height = geometry.height;
        g.cell_size = geometry.cell_size;
        g.origin_x = geometry.origin_x;
        g.origin_y = geometry.origin_y;
        g.codes.assign(geometry.cells(), kUnlabeled);
        return g;
    }

    bool same_geometry(const LabelGrid& o) const noexcept {
        return width == o.width && height == o.height && cell_size == o.cell_size && origin_x == o.origin_x &&
               origin_y == o.origin_y;
    }
    bool same_geometry(const MultiBandRaster& r) const noexcept {
        return width == r.width && height == r.height && cell_size == r.cell_size && origin_x == r.origin_x &&
               origin_y == r.origin_y;
    }
};

/// Classifier output over a whole map.
struct MapPrediction {
    LabelGrid labels;
    MultiBandRaster probabilities;  // one band per class, NaN where unlabeled
};

struct DensityLabels {
    LabelGrid horizontal;
    LabelGrid vertical;
};

/// Labels every cell from its truncated block. Cells whose block holds no finite ratio stay unlabeled.
inline DensityLabels label_density(const MultiBandRaster& bar_grid, const MultiBandRaster& height_grid, int epoch,
                                   const DensityScheme& scheme = {}) {
    scheme.validate();
    if (!bar_grid.same_geometry(height_grid)) throw Error("building-area-ratio and height grids differ in geometry");
    if (bar_grid.bands < 1 || height_grid.bands < 1) throw Error("label inputs need at least one band");
    DensityLabels out{LabelGrid::like(bar_grid, LabelKind::horizontal, epoch),
                      LabelGrid::like(bar_grid, LabelKind::vertical, epoch)};
    out.horizontal.scheme = out.vertical.scheme = scheme;
    for (std::size_t r = 0; r < bar_grid.height; ++r)
        for (std::size_t c = 0; c < bar_grid.width; ++c) {
            const auto agg = block_aggregate(bar_grid, height_grid, r, c, scheme.block_half_extent);
            if (agg.cells == 0) continue;
            out.horizontal.at(r, c) = static_cast<std::uint8_t>(classify_horizontal(agg.bar, scheme));
            out.vertical.at(r, c) = static_cast<std::uint8_t>(classify_vertical(agg.bar, agg.mean_height, scheme));
        }
    return out;
}

/// Growth where the later label ranks strictly denser / higher than the earlier one.
inline LabelGrid derive_growth_labels(const LabelGrid& earlier, const LabelGrid& later) {
    if (earlier.kind != later.kind || earlier.kind == LabelKind::growth)
        throw Error("growth labels need two grids of the same density dimension");
    if (!earlier.same_geometry(later)) throw Error("label grids differ in geometry");
    if (!(earlier.epoch < later.epoch)) throw Error("earlier grid must precede the later grid");
    LabelGrid g = earlier;
    g.kind = LabelKind::growth;
    g.epoch = later.epoch;
    for (std::size_t i = 0; i < g.codes.size(); ++i) {
        const auto a = earlier.codes[i], b = later.codes[i];
        if (a == kUnlabeled || b == kUnlabeled) {
            g.codes[i] = kUnlabeled;
            continue;
        }
        g.codes[i] = static_cast<std::uint8_t>(b > a ? GrowthClass::growth : GrowthClass::no_growth);
    }
    return g;
}

/// Band name carrying kind, epoch and the code table, e.g. `horizontal@2014;0:not_built;1:sparse;...`.
inline std::string label_band_name(LabelKind kind, int epoch) {
    std::string name = kind_name(kind) + "@" + std::to_string(epoch);
    const auto names = class_names(kind);
    for (std::size_t i = 0; i < names.size(); ++i) name += ";" + std::to_string(i) + ":" + names[i];
    return name;
}

inline MultiBandRaster label_grid_to_raster(const LabelGrid& g) {
    MultiBandRaster r(g.width, g.height, {label_band_name(g.kind, g.epoch)});
    r.cell_size = g.cell_size;
    r.origin_x = g.origin_x;
    r.origin_y = g.origin_y;
    for (std::size_t i = 0; i < g.codes.size(); ++i)
        r.data[i] = g.codes[i] == kUnlabeled ? kNoData : static_cast<double>(g.codes[i]);
    return r;
}

inline LabelGrid label_grid_from_raster(const MultiBandRaster& r) {
    if (r.bands != 1) throw Error("label raster must have exactly one band");
    const auto& name = r.band_names.front();
    const auto head = text::split(name, ';').front();
    const auto at = head.find('@');
    if (at == std::string::npos) throw Error("label raster band name '" + name + "' lacks kind@epoch");
    LabelGrid g;
    g.kind = parse_kind(head.substr(0, at));
    g.epoch = static_cast<int>(text::to_int(head.substr(at + 1), "label epoch"));
    g.width = r.width;
    g.height = r.height;
    g.cell_size = r.cell_size;
    g.origin_x = r.origin_x;
    g.origin_y = r.origin_y;
    g.codes.resize(r.cells());
    const auto n = class_count(g.kind);
    for (std::size_t i = 0; i < r.cells(); ++i) {
        const double v = r.data[i];
        if (std::isnan(v)) {
            g.codes[i] = kUnlabeled;
            continue;
        }
        if (v < 0 || v >= static_cast<double>(n) || v != std::floor(v))
            throw Error("label raster holds invalid class code " + text::format_double(v));
        g.codes[i] = static_cast<std::uint8_t>(v);
    }
    return g;
}

inline void write_label_grid(const LabelGrid& g, const std::string& path) { write_raster(label_grid_to_raster(g), path); }
inline LabelGrid read_label_grid(const std::string& path) { return label_grid_from_raster(read_raster(path)); }

}  // namespace urbanform
