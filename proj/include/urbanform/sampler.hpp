#pragma once

// Training-site thinning, class balancing, patch extraction and the spatially disjoint split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "urbanform/error.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

struct SampleSite {
    std::size_t row = 0;
    std::size_t col = 0;
    std::uint8_t label = 0;
    int epoch = 0;
    bool operator==(const SampleSite&) const = default;
};

/// Every labeled cell of a grid, optionally restricted to rows [r0, r1) x cols [c0, c1).
struct CellRegion {
    std::size_t r0 = 0, c0 = 0;
    std::size_t r1 = static_cast<std::size_t>(-1), c1 = static_cast<std::size_t>(-1);
    bool contains(std::size_t r, std::size_t c) const noexcept { return r >= r0 && r < r1 && c >= c0 && c < c1; }
};

inline CellRegion clamp_region(const CellRegion& region, std::size_t height, std::size_t width) {
    CellRegion r{std::min(region.r0, height), std::min(region.c0, width), std::min(region.r1, height), std::min(region.c1, width)};
    if (r.r0 >= r.r1 || r.c0 >= r.c1) throw Error("cell region is empty inside the grid");
    return r;
}

/// Sub-grid over `region`; the origin moves so cells keep their map coordinates.
inline MultiBandRaster crop(const MultiBandRaster& raster, const CellRegion& region) {
    const auto g = clamp_region(region, raster.height, raster.width);
    MultiBandRaster out(g.c1 - g.c0, g.r1 - g.r0, raster.band_names);
    out.cell_size = raster.cell_size;
    out.origin_x = raster.origin_x + static_cast<double>(g.c0) * raster.cell_size;
    out.origin_y = raster.origin_y - static_cast<double>(g.r0) * raster.cell_size;
    for (std::size_t b = 0; b < raster.bands; ++b)
        for (std::size_t r = g.r0; r < g.r1; ++r)
            for (std::size_t c = g.c0; c < g.c1; ++c) out.at(b, r - g.r0, c - g.c0) = raster.at(b, r, c);
    return out;
}

inline LabelGrid crop(const LabelGrid& labels, const CellRegion& region) {
    const auto g = clamp_region(region, labels.height, labels.width);
    LabelGrid out = labels;
    out.width = g.c1 - g.c0;
    out.height = g.r1 - g.r0;
    out.origin_x = labels.origin_x + static_cast<double>(g.c0) * labels.cell_size;
    out.origin_y = labels.origin_y - static_cast<double>(g.r0) * labels.cell_size;
    out.codes.assign(out.width * out.height, kUnlabeled);
    for (std::size_t r = g.r0; r < g.r1; ++r)
        for (std::size_t c = g.c0; c < g.c1; ++c) out.at(r - g.r0, c - g.c0) = labels.at(r, c);
    return out;
}

inline std::vector<SampleSite> labeled_sites(const LabelGrid& labels, const CellRegion& region = {}) {
    std::vector<SampleSite> out;
    for (std::size_t r = 0; r < labels.height; ++r)
        for (std::size_t c = 0; c < labels.width; ++c)
            if (region.contains(r, c) && labels.at(r, c) != kUnlabeled)
                out.push_back({r, c, labels.at(r, c), labels.epoch});
    return out;
}

/// Greedy pass in seeded random order; a site survives iff it is at least `min_distance`
/// meters (center to center) from every site already kept.
inline std::vector<SampleSite> thin_by_distance(const std::vector<SampleSite>& sites, double min_distance,
                                                double cell_size, std::uint64_t seed) {
    if (!(cell_size > 0.0)) throw Error("cell_size must be positive");
    if (sites.empty() || min_distance <= 0.0) return sites;
    std::vector<std::size_t> order(sites.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    // Buckets at least min_distance wide: conflicts can only sit in the 3x3 neighbourhood.
    const double bucket_cells = std::max(1.0, std::ceil(min_distance / cell_size));
    const double min_sq = min_distance * min_distance;
    auto key = [](long long br, long long bc) { return (static_cast<std::uint64_t>(br) << 32) ^ static_cast<std::uint64_t>(bc); };
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    std::vector<std::size_t> kept;
    for (std::size_t idx : order) {
        const auto& s = sites[idx];
        const auto br = static_cast<long long>(static_cast<double>(s.row) / bucket_cells);
        const auto bc = static_cast<long long>(static_cast<double>(s.col) / bucket_cells);
        bool ok = true;
        for (long long dr = -1; dr <= 1 && ok; ++dr)
            for (long long dc = -1; dc <= 1 && ok; ++dc) {
                if (br + dr < 0 || bc + dc < 0) continue;
                auto it = buckets.find(key(br + dr, bc + dc));
                if (it == buckets.end()) continue;
                for (std::size_t k : it->second) {
                    const double drow = (static_cast<double>(sites[k].row) - static_cast<double>(s.row)) * cell_size;
                    const double dcol = (static_cast<double>(sites[k].col) - static_cast<double>(s.col)) * cell_size;
                    if (drow * drow + dcol * dcol < min_sq) {
                        ok = false;
                        break;
                    }
                }
            }
        if (!ok) continue;
        buckets[key(br, bc)].push_back(idx);
        kept.push_back(idx);
    }
    std::sort(kept.begin(), kept.end());
    std::vector<SampleSite> out;
    out.reserve(kept.size());
    for (auto i : kept) out.push_back(sites[i]);
    return out;
}

/// Downsamples the most frequent class to at most cap_ratio times the runner-up. Order is preserved.
inline std::vector<SampleSite> balance_classes(const std::vector<SampleSite>& sites, double cap_ratio,
                                               std::uint64_t seed) {
    std::map<std::uint8_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < sites.size(); ++i) by_class[sites[i].label].push_back(i);
    if (by_class.size() < 2) throw Error("class balancing needs at least two classes");
    std::vector<std::pair<std::size_t, std::uint8_t>> counts;  // (count, label)
    for (const auto& [label, idx] : by_class) counts.emplace_back(idx.size(), label);
    // Largest count first; ties resolved toward the lower code.
    std::sort(counts.begin(), counts.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    const auto cap = static_cast<std::size_t>(std::floor(cap_ratio * static_cast<double>(counts[1].first)));
    if (counts[0].first <= cap) return sites;

    auto members = by_class[counts[0].second];
    std::mt19937_64 rng(seed);
    std::shuffle(members.begin(), members.end(), rng);
    std::vector<std::uint8_t> drop(sites.size(), 0);
    for (std::size_t k = cap; k < members.size(); ++k) drop[members[k]] = 1;
    std::vector<SampleSite> out;
    out.reserve(sites.size());
    for (std::size_t i = 0; i < sites.size(); ++i)
        if (!drop[i]) out.push_back(sites[i]);
    return out;
}

struct Patch {
    std::vector<double> input;          // bands x size x size, channel-major
    std::vector<std::uint8_t> labels;   // size x size, kUnlabeled where unsupervised
    std::vector<std::uint8_t> mask;     // size x size, 1 where the loss applies
    std::size_t origin_row = 0;
    std::size_t origin_col = 0;
    int epoch = 0;

    std::size_t labeled_cells() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

struct PatchDataset {
    std::size_t patch_size = 48;
    std::size_t step = 24;
    std::size_t bands = 6;
    LabelKind kind = LabelKind::horizontal;
    std::vector<Patch> patches;

    std::size_t size() const noexcept { return patches.size(); }
    bool empty() const noexcept { return patches.empty(); }
};

/// Tile origins along one axis covering [lo, hi] with the last tile clamped to the border.
inline std::vector<std::size_t> tile_origins(std::size_t lo, std::size_t hi, std::size_t extent, std::size_t patch,
                                             std::size_t step) {
    std::vector<std::size_t> out;
    if (patch > extent) return out;
    const std::size_t last_valid = extent - patch;
    std::size_t o = std::min(lo, last_valid);
    while (true) {
        out.push_back(o);
        if (o + patch > hi || o == last_valid) break;
        o = std::min(o + step, last_valid);
    }
    return out;
}

/// Cuts patches over the bounding box of `sites`. The loss mask covers the site cells; patches
/// with no labeled cell, or only not-built labels, are dropped. NaN inputs become 0 and lose their mask.
inline PatchDataset extract_patches(const MultiBandRaster& composite, const LabelGrid& labels,
                                    const std::vector<SampleSite>& sites, std::size_t patch_size = 48,
                                    std::size_t step = 24) {
    if (!labels.same_geometry(composite)) throw Error("composite and label grid differ in geometry");
    if (patch_size == 0 || step == 0 || step > patch_size) throw Error("step must be in [1, patch_size]");
    if (patch_size > composite.width || patch_size > composite.height)
        throw Error("patch size " + std::to_string(patch_size) + " exceeds the raster");
    PatchDataset ds;
    ds.patch_size = patch_size;
    ds.step = step;
    ds.bands = composite.bands;
    ds.kind = labels.kind;
    if (sites.empty()) return ds;

    std::vector<std::uint8_t> site_mask(composite.cells(), 0);
    std::size_t rmin = composite.height, rmax = 0, cmin = composite.width, cmax = 0;
    for (const auto& s : sites) {
        if (s.row >= composite.height || s.col >= composite.width) throw Error("sample site out of bounds");
        site_mask[s.row * composite.width + s.col] = 1;
        rmin = std::min(rmin, s.row);
        rmax = std::max(rmax, s.row);
        cmin = std::min(cmin, s.col);
        cmax = std::max(cmax, s.col);
    }
    const auto rows = tile_origins(rmin, rmax, composite.height, patch_size, step);
    const auto cols = tile_origins(cmin, cmax, composite.width, patch_size, step);
    const std::size_t area = patch_size * patch_size;
    for (auto r0 : rows)
        for (auto c0 : cols) {
            Patch p;
            p.origin_row = r0;
            p.origin_col = c0;
            p.epoch = labels.epoch;
            p.input.resize(composite.bands * area);
            p.labels.assign(area, kUnlabeled);
            p.mask.assign(area, 0);
            bool any_built = false, any_label = false;
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x) {
                    const std::size_t gr = r0 + y, gc = c0 + x;
                    bool finite = true;
                    for (std::size_t b = 0; b < composite.bands; ++b) {
                        double v = composite.at(b, gr, gc);
                        if (!std::isfinite(v)) {
                            finite = false;
                            v = 0.0;
                        }
                        p.input[(b * patch_size + y) * patch_size + x] = v;
                    }
                    const auto code = labels.at(gr, gc);
                    if (site_mask[gr * composite.width + gc] && finite && code != kUnlabeled) {
                        p.labels[y * patch_size + x] = code;
                        p.mask[y * patch_size + x] = 1;
                        any_label = true;
                        any_built = any_built || code != 0;
                    }
                }
            if (any_label && any_built) ds.patches.push_back(std::move(p));
        }
    return ds;
}

struct DatasetSplit {
    PatchDataset train;
    PatchDataset validation;
};

/// Spatially disjoint split. Patches are grouped into origin blocks of patch_size cells; blocks are
/// taken in seeded random order into validation until it holds round(fraction * N) patches. Training
/// patches overlapping a validation footprint lose their loss mask over the overlap, so no supervised
/// cell appears on both sides; those left without a built label are dropped.
inline DatasetSplit split_train_validation(const PatchDataset& dataset, double validation_fraction, std::uint64_t seed) {
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw Error("validation fraction must be in (0, 1)");
    const auto n = dataset.size();
    const auto target = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(n)));
    if (target == 0 || target >= n)
        throw Error("validation fraction " + text::format_double(validation_fraction) + " leaves an empty side for " +
                    std::to_string(n) + " patches");

    const auto P = dataset.patch_size;
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> blocks;
    for (std::size_t i = 0; i < n; ++i)
        blocks[{dataset.patches[i].origin_row / P, dataset.patches[i].origin_col / P}].push_back(i);
    std::vector<const std::vector<std::size_t>*> order;
    for (const auto& [k, v] : blocks) order.push_back(&v);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<std::uint8_t> is_val(n, 0);
    std::size_t taken = 0;
    for (const auto* blk : order) {
        if (taken >= target) break;
        for (auto i : *blk) is_val[i] = 1;
        taken += blk->size();
    }
    if (taken >= n) throw Error("validation split consumed every patch; lower the validation fraction");

    DatasetSplit out;
    out.train = out.validation = dataset;
    out.train.patches.clear();
    out.validation.patches.clear();
    for (std::size_t i = 0; i < n; ++i)
        (is_val[i] ? out.validation : out.train).patches.push_back(dataset.patches[i]);

    for (auto& tp : out.train.patches)
        for (const auto& vp : out.validation.patches) {
            const auto r0 = std::max(tp.origin_row, vp.origin_row), r1 = std::min(tp.origin_row, vp.origin_row) + P;
            const auto c0 = std::max(tp.origin_col, vp.origin_col), c1 = std::min(tp.origin_col, vp.origin_col) + P;
            if (r0 >= r1 || c0 >= c1) continue;
            for (auto r = r0; r < r1; ++r)
                for (auto c = c0; c < c1; ++c) {
                    const auto local = (r - tp.origin_row) * P + (c - tp.origin_col);
                    tp.mask[local] = 0;
                    tp.labels[local] = kUnlabeled;
                }
        }
    // Clearing may leave a training patch unsupervised or supervised on not-built cells only.
    std::erase_if(out.train.patches, [](const Patch& p) {
        for (std::size_t i = 0; i < p.mask.size(); ++i)
            if (p.mask[i] && p.labels[i] != 0 && p.labels[i] != kUnlabeled) return false;
        return true;
    });
    if (out.train.empty()) throw Error("validation split left no usable training patch");
    return out;
}

/// Supervised cells of every patch in raster coordinates, each reported once.
inline std::vector<SampleSite> patch_sites(const PatchDataset& ds) {
    std::vector<SampleSite> out;
    std::set<std::pair<std::size_t, std::size_t>> seen;
    const auto P = ds.patch_size;
    for (const auto& p : ds.patches)
        for (std::size_t i = 0; i < P * P; ++i) {
            if (!p.mask[i] || p.labels[i] == kUnlabeled) continue;
            const auto r = p.origin_row + i / P, c = p.origin_col + i % P;
            if (seen.insert({r, c}).second) out.push_back({r, c, p.labels[i], p.epoch});
        }
    return out;
}

// --- persistence -------------------------------------------------------------------------------

inline std::vector<SampleSite> read_sites_csv(const std::string& path) {
    auto rows = text::parse_csv(text::read_file(path));
    if (rows.empty() || rows.front() != std::vector<std::string>{"row", "col", "label", "epoch"})
        throw Error("'" + path + "' is not a sites CSV (expected header row,col,label,epoch)");
    std::vector<SampleSite> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 4) throw Error("sites CSV row " + std::to_string(i) + " has the wrong field count");
        out.push_back({static_cast<std::size_t>(text::to_int(rows[i][0], "row")),
                       static_cast<std::size_t>(text::to_int(rows[i][1], "col")),
                       static_cast<std::uint8_t>(text::to_int(rows[i][2], "label")),
                       static_cast<int>(text::to_int(rows[i][3], "epoch"))});
    }
    return out;
}

inline void write_sites_csv(const std::vector<SampleSite>& sites, const std::string& path) {
    std::string out = "row,col,label,epoch\n";
    for (const auto& s : sites)
        out += std::to_string(s.row) + "," + std::to_string(s.col) + "," + std::to_string(s.label) + "," +
               std::to_string(s.epoch) + "\n";
    text::write_file(path, out);
}

inline std::string patch_file_stem(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "patch_%05zu", index);
    return buf;
}

/// Directory layout: manifest.csv plus <stem>_input.dmr, <stem>_labels.dmr, <stem>_mask.dmr per patch.
inline void write_patch_dataset(const PatchDataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto P = ds.patch_size;
    std::string manifest =
        "index,origin_row,origin_col,epoch,labeled_cells,built_cells,patch_size,step,bands,kind\n";
    std::vector<std::string> band_names;
    for (std::size_t b = 0; b < ds.bands; ++b) band_names.push_back("b" + std::to_string(b));
    for (std::size_t i = 0; i < ds.patches.size(); ++i) {
        const auto& p = ds.patches[i];
        std::size_t built = 0;
        for (std::size_t k = 0; k < p.mask.size(); ++k) built += p.mask[k] && p.labels[k] != 0;
        manifest += std::to_string(i) + "," + std::to_string(p.origin_row) + "," + std::to_string(p.origin_col) + "," +
                    std::to_string(p.epoch) + "," + std::to_string(p.labeled_cells()) + "," + std::to_string(built) +
                    "," + std::to_string(P) + "," + std::to_string(ds.step) + "," + std::to_string(ds.bands) + "," +
                    kind_name(ds.kind) + "\n";
        const auto stem = (fs::path(dir) / patch_file_stem(i)).string();
        MultiBandRaster input(P, P, band_names);
        input.data = p.input;
        write_raster(input, stem + "_input.dmr");
        MultiBandRaster lab(P, P, {label_band_name(ds.kind, p.epoch)});
        MultiBandRaster mask(P, P, {"loss_mask"});
        for (std::size_t k = 0; k < P * P; ++k) {
            lab.data[k] = p.labels[k] == kUnlabeled ? kNoData : p.labels[k];
            mask.data[k] = p.mask[k];
        }
        write_raster(lab, stem + "_labels.dmr");
        write_raster(mask, stem + "_mask.dmr");
    }
    text::write_file((fs::path(dir) / "manifest.csv").string(), manifest);
}

inline PatchDataset read_patch_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const auto rows = text::parse_csv(text::read_file((fs::path(dir) / "manifest.csv").string()));
    if (rows.empty() || rows.front().size() != 10 || rows.front()[0] != "index")
        throw Error("'" + dir + "' has no valid manifest.csv");
    PatchDataset ds;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& f = rows[i];
        if (f.size() != 10) throw Error("manifest row " + std::to_string(i) + " has the wrong field count");
        ds.patch_size = static_cast<std::size_t>(text::to_int(f[6], "patch_size"));
        ds.step = static_cast<std::size_t>(text::to_int(f[7], "step"));
        ds.bands = static_cast<std::size_t>(text::to_int(f[8], "bands"));
        ds.kind = parse_kind(f[9]);
        Patch p;
        p.origin_row = static_cast<std::size_t>(text::to_int(f[1], "origin_row"));
        p.origin_col = static_cast<std::size_t>(text::to_int(f[2], "origin_col"));
        p.epoch = static_cast<int>(text::to_int(f[3], "epoch"));
        const auto stem = (fs::path(dir) / patch_file_stem(static_cast<std::size_t>(text::to_int(f[0], "index")))).string();
        const auto input = read_raster(stem + "_input.dmr");
        const auto lab = read_raster(stem + "_labels.dmr");
        const auto mask = read_raster(stem + "_mask.dmr");
        const auto P = ds.patch_size;
        if (input.width != P || input.height != P || input.bands != ds.bands || lab.cells() != P * P ||
            mask.cells() != P * P)
            throw Error("patch files for '" + stem + "' do not match the manifest");
        p.input = input.data;
        p.labels.resize(P * P);
        p.mask.resize(P * P);
        for (std::size_t k = 0; k < P * P; ++k) {
            p.labels[k] = std::isnan(lab.data[k]) ? kUnlabeled : static_cast<std::uint8_t>(lab.data[k]);
            p.mask[k] = mask.data[k] != 0.0 && p.labels[k] != kUnlabeled;
        }
        ds.patches.push_back(std::move(p));
    }
    return ds;
}

}  // namespace urbanform
