#pragma once

// Synthetic towns: annual building-area-ratio / height grids driven by a growth script, and
// 6-band reflectance rendered from them by linear two-endmember mixing.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "urbanform/composite.hpp"
#include "urbanform/error.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

inline const std::vector<std::string>& landsat_band_names() {
    static const std::vector<std::string> names{"blue", "green", "red", "nir", "swir1", "swir2"};
    return names;
}

using Spectrum = std::array<double, 6>;

inline constexpr Spectrum kVegetationSpectrum{0.03, 0.06, 0.04, 0.35, 0.17, 0.08};
inline constexpr Spectrum kBuiltSpectrum{0.10, 0.12, 0.14, 0.20, 0.24, 0.21};
inline constexpr double kCloudReflectance = 0.6;

enum class GrowthActionKind { infill, highrise, sprawl, demolish };

inline std::string action_name(GrowthActionKind a) {
    switch (a) {
        case GrowthActionKind::infill: return "infill";
        case GrowthActionKind::highrise: return "highrise";
        case GrowthActionKind::sprawl: return "sprawl";
        case GrowthActionKind::demolish: return "demolish";
    }
    return {};
}

inline GrowthActionKind parse_action(std::string_view s) {
    if (s == "infill") return GrowthActionKind::infill;
    if (s == "highrise") return GrowthActionKind::highrise;
    if (s == "sprawl") return GrowthActionKind::sprawl;
    if (s == "demolish") return GrowthActionKind::demolish;
    throw Error("unknown growth action '" + std::string(s) + "'");
}

/// Half-open cell rectangle [row0, row1) x [col0, col1).
struct CellRect {
    std::size_t row0 = 0, col0 = 0, row1 = 0, col1 = 0;
    bool contains(std::size_t r, std::size_t c) const noexcept { return r >= row0 && r < row1 && c >= col0 && c < col1; }
    std::size_t cells() const noexcept { return (row1 - row0) * (col1 - col0); }
};

/// infill: built cells gain `magnitude` ratio (cap 0.9). highrise: heights rise by `magnitude` m.
/// sprawl: unbuilt cells become built at ratio `magnitude`, 5 m tall. demolish: ratio and height go to 0.
struct GrowthAction {
    int year = 0;
    GrowthActionKind kind = GrowthActionKind::infill;
    CellRect region;
    double magnitude = 0.0;
};

struct YearGrids {
    int year = 0;
    MultiBandRaster bar;     // building-area ratio, one band
    MultiBandRaster height;  // mean building height in metres, one band
};

struct CityScenario {
    std::uint64_t seed = 0;
    std::size_t size = 0;
    double cell_size = 30.0;
    std::vector<YearGrids> timeline;        // contiguous years
    std::vector<GrowthAction> script;
    std::map<int, Spectrum> drift;          // multiplicative per-band bias per year
    int reference_year = 0;                 // year whose drift is exactly 1
    MultiBandRaster vigor;                  // vegetation brightness factor, constant over time

    const YearGrids& at_year(int year) const {
        for (const auto& y : timeline)
            if (y.year == year) return y;
        throw Error("scenario has no year " + std::to_string(year));
    }
    int first_year() const { return timeline.front().year; }
    int last_year() const { return timeline.back().year; }
};

struct ScenarioOptions {
    std::size_t towns = 0;            // 0 = 1 + size / 96
    double actions_per_year = 1.5;
    double drift_amplitude = 0.10;    // drift factors drawn from 1 +- amplitude
    int reference_year = 0;           // 0 = last year
    const std::vector<GrowthAction>* script = nullptr;  // replaces the random script when set
};

inline void apply_growth_action(YearGrids& g, const GrowthAction& a) {
    const auto W = g.bar.width;
    if (a.region.row1 > g.bar.height || a.region.col1 > W || a.region.row0 >= a.region.row1 || a.region.col0 >= a.region.col1)
        throw Error("growth action region lies outside the grid or is empty");
    for (std::size_t r = a.region.row0; r < a.region.row1; ++r)
        for (std::size_t c = a.region.col0; c < a.region.col1; ++c) {
            double& b = g.bar.data[r * W + c];
            double& h = g.height.data[r * W + c];
            switch (a.kind) {
                case GrowthActionKind::infill:
                    if (b >= 0.02) b = std::min(0.9, b + a.magnitude);
                    break;
                case GrowthActionKind::highrise:
                    h += a.magnitude;
                    break;
                case GrowthActionKind::sprawl:
                    if (b < 0.02) {
                        b = a.magnitude;
                        h = 5.0;
                    }
                    break;
                case GrowthActionKind::demolish:
                    b = 0.0;
                    h = 0.0;
                    break;
            }
        }
}

namespace detail {

struct Town {
    double row, col, core;  // core radius in cells; suburbs reach 2.5x, fringe 4x
};

inline MultiBandRaster grid_like(std::size_t size, double cell_size, const std::string& band) {
    MultiBandRaster r(size, size, {band}, 0.0);
    r.cell_size = cell_size;
    return r;
}

}  // namespace detail

/// Seeded towns with a tall dense core, open suburbs and a sparse fringe on 4-cell street blocks.
inline CityScenario generate_city_timeline(std::uint64_t seed, int first_year, int last_year, std::size_t size,
                                           const ScenarioOptions& opt = {}) {
    if (size < 96) throw Error("scenario size must be at least 96 cells");
    if (last_year < first_year) throw Error("scenario last year precedes the first year");
    if (opt.drift_amplitude < 0 || opt.drift_amplitude >= 1) throw Error("drift amplitude must be in [0, 1)");
    std::mt19937_64 rng(seed);
    auto uni = [&rng](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };

    CityScenario sc;
    sc.seed = seed;
    sc.size = size;
    sc.reference_year = opt.reference_year ? opt.reference_year : last_year;
    if (sc.reference_year < first_year || sc.reference_year > last_year) throw Error("reference year outside the timeline");

    const std::size_t n_towns = opt.towns ? opt.towns : 1 + size / 96;
    std::vector<detail::Town> towns;
    for (std::size_t t = 0; t < n_towns; ++t) {
        const double margin = 0.15 * static_cast<double>(size);
        towns.push_back({uni(margin, static_cast<double>(size) - margin), uni(margin, static_cast<double>(size) - margin),
                         uni(5.0, 10.0) * std::sqrt(static_cast<double>(size) / 256.0) * 1.2});
    }

    YearGrids base{first_year, detail::grid_like(size, sc.cell_size, "bar"), detail::grid_like(size, sc.cell_size, "height")};
    sc.vigor = detail::grid_like(size, sc.cell_size, "vigor");
    constexpr std::size_t block = 4;
    const std::size_t nb = (size + block - 1) / block;
    for (std::size_t br = 0; br < nb; ++br)
        for (std::size_t bc = 0; bc < nb; ++bc) {
            const double cr = (static_cast<double>(br) + 0.5) * block, cc = (static_cast<double>(bc) + 0.5) * block;
            double zone = 1e9;  // distance in core radii to the nearest town
            for (const auto& t : towns) zone = std::min(zone, std::hypot(cr - t.row, cc - t.col) / t.core);
            zone *= uni(0.85, 1.15);
            double bar = 0.0, height = 0.0;
            if (zone < 1.0) {
                bar = uni(0.35, 0.65);
                height = uni(14.0, 45.0);
            } else if (zone < 2.5) {
                bar = uni(0.16, 0.30);
                height = uni(0.0, 1.0) < 0.2 ? uni(11.0, 18.0) : uni(4.0, 8.0);
            } else if (zone < 4.0) {
                bar = uni(0.03, 0.13);
                height = uni(3.0, 7.0);
            } else if (uni(0.0, 1.0) < 0.02) {
                bar = uni(0.04, 0.10);
                height = uni(3.0, 6.0);
            }
            const double vig = uni(0.8, 1.2);
            for (std::size_t r = br * block; r < std::min(size, (br + 1) * block); ++r)
                for (std::size_t c = bc * block; c < std::min(size, (bc + 1) * block); ++c) {
                    const bool street = (r % block == 0) || (c % block == 0);
                    const double jitter = uni(0.85, 1.15);
                    base.bar.data[r * size + c] = bar > 0 ? std::clamp(bar * jitter * (street ? 0.6 : 1.0), 0.0, 1.0) : 0.0;
                    base.height.data[r * size + c] = bar > 0 ? height * uni(0.9, 1.1) : 0.0;
                    sc.vigor.data[r * size + c] = vig * uni(0.95, 1.05);
                }
        }

    if (opt.script) {
        sc.script = *opt.script;
    } else {
        std::poisson_distribution<int> n_actions(opt.actions_per_year);
        for (int y = first_year + 1; y <= last_year; ++y) {
            const int n = n_actions(rng);
            for (int k = 0; k < n; ++k) {
                const auto& t = towns[std::uniform_int_distribution<std::size_t>(0, towns.size() - 1)(rng)];
                const double pick = uni(0.0, 1.0);
                GrowthAction a;
                a.year = y;
                double reach;
                if (pick < 0.35) {
                    a.kind = GrowthActionKind::sprawl;
                    a.magnitude = uni(0.08, 0.28);
                    reach = uni(2.5, 4.5);
                } else if (pick < 0.65) {
                    a.kind = GrowthActionKind::infill;
                    a.magnitude = uni(0.08, 0.2);
                    reach = uni(1.0, 3.5);
                } else if (pick < 0.9) {
                    a.kind = GrowthActionKind::highrise;
                    a.magnitude = uni(8.0, 20.0);
                    reach = uni(0.5, 2.5);
                } else {
                    a.kind = GrowthActionKind::demolish;
                    reach = uni(1.0, 4.0);
                }
                const double ang = uni(0.0, 6.283185307179586);
                const double rr = t.row + std::sin(ang) * reach * t.core, cc = t.col + std::cos(ang) * reach * t.core;
                const auto h = static_cast<std::size_t>(uni(4.0, 12.0)), w = static_cast<std::size_t>(uni(4.0, 12.0));
                auto clampi = [size](double v, std::size_t extent) {
                    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(size - extent)));
                };
                a.region.row0 = clampi(rr - static_cast<double>(h) / 2, h);
                a.region.col0 = clampi(cc - static_cast<double>(w) / 2, w);
                a.region.row1 = a.region.row0 + h;
                a.region.col1 = a.region.col0 + w;
                sc.script.push_back(a);
            }
        }
    }

    sc.timeline.push_back(base);
    for (int y = first_year + 1; y <= last_year; ++y) {
        YearGrids g = sc.timeline.back();
        g.year = y;
        for (const auto& a : sc.script)
            if (a.year == y) apply_growth_action(g, a);
        sc.timeline.push_back(std::move(g));
    }
    for (const auto& a : sc.script)
        if (a.year <= first_year || a.year > last_year) throw Error("growth action year " + std::to_string(a.year) + " outside the timeline");

    for (int y = first_year; y <= last_year; ++y) {
        Spectrum d;
        for (auto& v : d) v = 1.0 + uni(-opt.drift_amplitude, opt.drift_amplitude);
        if (y == sc.reference_year) d.fill(1.0);
        sc.drift[y] = d;
    }
    return sc;
}

/// Noise-free reflectance of one cell. Building shadow darkens the built fraction with height.
inline double mixed_reflectance(std::size_t band, double bar, double height, double vigor, double drift) {
    const double shadow = 1.0 - 0.5 * height / (height + 15.0);
    return (bar * kBuiltSpectrum[band] * shadow + (1.0 - bar) * kVegetationSpectrum[band] * vigor) * drift;
}

struct RenderOptions {
    std::size_t observations = 6;  // in-season acquisitions per year
    double noise_std = 0.005;
    double qa_dropout = 0.2;       // per-cell probability of a cloudy sample
    std::uint64_t seed = 1;
};

/// Acquisitions spread evenly over May-August of `year`.
inline ObservationStack render_reflectance(const CityScenario& sc, int year, const RenderOptions& opt = {}) {
    if (opt.noise_std < 0) throw Error("noise_std must be non-negative");
    if (opt.qa_dropout < 0 || opt.qa_dropout >= 1) throw Error("qa_dropout must be in [0, 1)");
    if (opt.observations == 0) throw Error("at least one observation per year is required");
    const auto& g = sc.at_year(year);
    const auto& drift = sc.drift.at(year);
    std::mt19937_64 rng(opt.seed * 1000003ULL + static_cast<std::uint64_t>(year) * 7919ULL + sc.seed);
    std::normal_distribution<double> noise(0.0, opt.noise_std);
    std::bernoulli_distribution cloudy(opt.qa_dropout);
    ObservationStack stack;
    const auto cells = g.bar.cells();
    for (std::size_t k = 0; k < opt.observations; ++k) {
        const auto offset = static_cast<int>((118 * (2 * k + 1)) / (2 * opt.observations));  // days after May 1
        const auto ymd = std::chrono::year_month_day(std::chrono::sys_days(std::chrono::year{year} / std::chrono::May / 1) +
                                                     std::chrono::days{offset});
        Observation o;
        o.date = {year, static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day())};
        o.raster = g.bar.like(landsat_band_names(), 0.0);
        o.qa.assign(cells, 1);
        for (std::size_t i = 0; i < cells; ++i) {
            const bool cloud = opt.qa_dropout > 0 && cloudy(rng);
            o.qa[i] = cloud ? 0 : 1;
            for (std::size_t b = 0; b < 6; ++b) {
                const double clean = cloud ? kCloudReflectance
                                           : mixed_reflectance(b, g.bar.data[i], g.height.data[i], sc.vigor.data[i], drift[b]);
                o.raster.data[b * cells + i] = clean + (opt.noise_std > 0 ? noise(rng) : 0.0);
            }
        }
        stack.observations.push_back(std::move(o));
    }
    return stack;
}

// --- persistence -------------------------------------------------------------------------------

/// Writes bar_<year>.dmr, height_<year>.dmr, vigor.dmr, script.csv, drift.csv and scenario.txt.
inline void write_scenario(const CityScenario& sc, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& y : sc.timeline) {
        write_raster(y.bar, dir + "/bar_" + std::to_string(y.year) + ".dmr");
        write_raster(y.height, dir + "/height_" + std::to_string(y.year) + ".dmr");
    }
    write_raster(sc.vigor, dir + "/vigor.dmr");
    std::string script = "year,action,row0,col0,row1,col1,magnitude\n";
    for (const auto& a : sc.script)
        script += std::to_string(a.year) + "," + action_name(a.kind) + "," + std::to_string(a.region.row0) + "," +
                  std::to_string(a.region.col0) + "," + std::to_string(a.region.row1) + "," + std::to_string(a.region.col1) +
                  "," + text::format_double(a.magnitude) + "\n";
    text::write_file(dir + "/script.csv", script);
    std::string drift = "year";
    for (const auto& b : landsat_band_names()) drift += "," + b;
    drift += "\n";
    for (const auto& [y, d] : sc.drift) {
        drift += std::to_string(y);
        for (double v : d) drift += "," + text::format_double(v);
        drift += "\n";
    }
    text::write_file(dir + "/drift.csv", drift);
    text::write_file(dir + "/scenario.txt", "seed=" + std::to_string(sc.seed) + "\nsize=" + std::to_string(sc.size) +
                                                "\nfirst_year=" + std::to_string(sc.first_year()) + "\nlast_year=" +
                                                std::to_string(sc.last_year()) + "\nreference_year=" +
                                                std::to_string(sc.reference_year) + "\n");
}

inline std::vector<GrowthAction> parse_script_csv(std::string_view content) {
    const auto rows = text::parse_csv(content);
    if (rows.empty() || rows.front() != std::vector<std::string>{"year", "action", "row0", "col0", "row1", "col1", "magnitude"})
        throw Error("growth script needs header year,action,row0,col0,row1,col1,magnitude");
    std::vector<GrowthAction> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (r.size() != 7) throw Error("growth script row " + std::to_string(i) + " needs 7 fields");
        auto idx = [](const std::string& s) {
            const auto v = text::to_int(s, "script cell index");
            if (v < 0) throw Error("script cell index must be non-negative");
            return static_cast<std::size_t>(v);
        };
        out.push_back({static_cast<int>(text::to_int(r[0], "script year")), parse_action(r[1]),
                       {idx(r[2]), idx(r[3]), idx(r[4]), idx(r[5])}, text::to_double(r[6], "script magnitude")});
    }
    return out;
}

inline CityScenario read_scenario(const std::string& dir) {
    CityScenario sc;
    int first = 0, last = -1;
    for (const auto& [k, v] : text::parse_key_values(text::read_file(dir + "/scenario.txt"))) {
        if (k == "seed") sc.seed = static_cast<std::uint64_t>(text::to_int(v, "seed"));
        else if (k == "size") sc.size = static_cast<std::size_t>(text::to_int(v, "size"));
        else if (k == "first_year") first = static_cast<int>(text::to_int(v, "first_year"));
        else if (k == "last_year") last = static_cast<int>(text::to_int(v, "last_year"));
        else if (k == "reference_year") sc.reference_year = static_cast<int>(text::to_int(v, "reference_year"));
        else throw Error("unknown scenario key '" + k + "'");
    }
    if (last < first) throw Error("scenario.txt lacks a valid year range");
    for (int y = first; y <= last; ++y)
        sc.timeline.push_back({y, read_raster(dir + "/bar_" + std::to_string(y) + ".dmr"),
                               read_raster(dir + "/height_" + std::to_string(y) + ".dmr")});
    sc.vigor = read_raster(dir + "/vigor.dmr");
    sc.cell_size = sc.vigor.cell_size;
    sc.script = parse_script_csv(text::read_file(dir + "/script.csv"));
    const auto rows = text::parse_csv(text::read_file(dir + "/drift.csv"));
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 7) throw Error("drift row " + std::to_string(i) + " needs 7 fields");
        Spectrum d;
        for (std::size_t b = 0; b < 6; ++b) d[b] = text::to_double(rows[i][b + 1], "drift factor");
        sc.drift[static_cast<int>(text::to_int(rows[i][0], "drift year"))] = d;
    }
    return sc;
}

}  // namespace urbanform
