#pragma once

// Season filtering, rolling-median annual composites and band standardization.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "urbanform/error.hpp"
#include "urbanform/raster.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

struct CivilDate {
    int year = 0;
    unsigned month = 1;
    unsigned day = 1;

    bool valid() const {
        return std::chrono::year_month_day{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}}
            .ok();
    }
    auto operator<=>(const CivilDate&) const = default;

    /// Parses YYYY-MM-DD.
    static CivilDate parse(std::string_view s) {
        auto parts = text::split(text::trim(s), '-');
        if (parts.size() != 3) throw Error("bad date '" + std::string(s) + "', expected YYYY-MM-DD");
        CivilDate d{static_cast<int>(text::to_int(parts[0], "year")), static_cast<unsigned>(text::to_int(parts[1], "month")),
                    static_cast<unsigned>(text::to_int(parts[2], "day"))};
        if (!d.valid()) throw Error("invalid calendar date '" + std::string(s) + "'");
        return d;
    }

    std::string str() const {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", year, month, day);
        return buf;
    }
};

struct MonthDay {
    unsigned month = 1;
    unsigned day = 1;
    auto operator<=>(const MonthDay&) const = default;
};

/// Inclusive month-day window. A start after the end wraps across the new year.
struct Season {
    MonthDay start{5, 1};
    MonthDay end{8, 31};

    bool contains(const CivilDate& d) const {
        MonthDay md{d.month, d.day};
        if (start <= end) return start <= md && md <= end;
        return md >= start || md <= end;
    }
};

struct Observation {
    CivilDate date;
    MultiBandRaster raster;
    std::vector<std::uint8_t> qa;  // 1 = good, per cell
};

struct ObservationStack {
    std::vector<Observation> observations;

    void validate() const {
        if (observations.empty()) return;
        const auto& ref = observations.front().raster;
        for (const auto& o : observations) {
            if (!o.date.valid()) throw Error("observation has an invalid date");
            o.raster.validate();
            if (!o.raster.same_geometry(ref) || o.raster.band_names != ref.band_names)
                throw Error("observation " + o.date.str() + " does not share the stack geometry");
            if (o.qa.size() != o.raster.cells())
                throw Error("observation " + o.date.str() + " QA grid does not match raster dimensions");
        }
    }
};

inline ObservationStack filter_observations(const ObservationStack& stack, const Season& season = {}) {
    ObservationStack out;
    for (const auto& o : stack.observations) {
        if (!o.date.valid()) throw Error("observation has an invalid date");
        if (season.contains(o.date)) out.observations.push_back(o);
    }
    return out;
}

/// Median of a scratch buffer; even counts average the middle pair. Reorders `v`.
inline double median_inplace(std::vector<double>& v) {
    if (v.empty()) return kNoData;
    const auto mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

/// Per-cell, per-band median of good, finite samples dated in [target - w/2, target + w/2].
inline MultiBandRaster rolling_median_composite(const ObservationStack& stack, int target_year, int window_years = 3) {
    if (window_years < 1 || window_years % 2 == 0) throw Error("window_years must be odd and positive");
    if (stack.observations.empty()) throw Error("cannot composite an empty observation stack");
    stack.validate();
    const int half = window_years / 2;
    std::vector<const Observation*> members;
    for (const auto& o : stack.observations)
        if (o.date.year >= target_year - half && o.date.year <= target_year + half) members.push_back(&o);

    const auto& ref = stack.observations.front().raster;
    MultiBandRaster out = ref.like(ref.band_names, kNoData);
    std::vector<double> scratch;
    scratch.reserve(members.size());
    for (std::size_t b = 0; b < ref.bands; ++b)
        for (std::size_t i = 0; i < ref.cells(); ++i) {
            scratch.clear();
            for (const auto* o : members) {
                const double v = o->raster.data[b * ref.cells() + i];
                if (o->qa[i] && std::isfinite(v)) scratch.push_back(v);
            }
            out.data[b * ref.cells() + i] = median_inplace(scratch);
        }
    return out;
}

struct BandScales {
    std::vector<std::string> band_names;
    std::vector<double> divisors;
    int source_year = 0;
    double percentile = 0.995;

    void validate() const {
        if (band_names.size() != divisors.size()) throw Error("band scale names and divisors differ in length");
        for (std::size_t i = 0; i < divisors.size(); ++i)
            if (!(divisors[i] > 0.0) || !std::isfinite(divisors[i]))
                throw Error("band scale for '" + band_names[i] + "' must be positive and finite");
    }

    /// 99.5th-percentile divisors of the 2014 Danish Landsat training composite.
    static BandScales landsat_denmark_2014() {
        return {{"blue", "green", "red", "nir", "swir1", "swir2"},
                {0.1024, 0.1374, 0.1532, 0.4679, 0.2872, 0.2207},
                2014,
                0.995};
    }
};

/// Nearest-rank percentile of the finite values: the ceil(p*n)-th smallest.
inline double nearest_rank_percentile(std::vector<double> values, double p) {
    std::erase_if(values, [](double v) { return !std::isfinite(v); });
    if (values.empty()) throw Error("percentile of zero finite samples");
    if (!(p > 0.0 && p <= 1.0)) throw Error("percentile must be in (0, 1]");
    auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(values.size())));
    rank = std::clamp<std::size_t>(rank, 1, values.size());
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
    return values[rank - 1];
}

inline BandScales compute_band_scales(const MultiBandRaster& composite, double percentile = 0.995, int source_year = 0) {
    composite.validate();
    BandScales s;
    s.band_names = composite.band_names;
    s.percentile = percentile;
    s.source_year = source_year;
    for (std::size_t b = 0; b < composite.bands; ++b) {
        std::vector<double> v(composite.band_data(b), composite.band_data(b) + composite.cells());
        if (std::none_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }))
            throw Error("band '" + composite.band_names[b] + "' has no finite samples");
        s.divisors.push_back(nearest_rank_percentile(std::move(v), percentile));
    }
    return s;
}

/// Divides each band by its scale. No clipping; NaN passes through.
inline MultiBandRaster standardize(const MultiBandRaster& composite, const BandScales& scales) {
    scales.validate();
    if (scales.divisors.size() != composite.bands) throw Error("band scale count does not match raster band count");
    MultiBandRaster out = composite;
    for (std::size_t b = 0; b < out.bands; ++b) {
        double* p = out.band_data(b);
        for (std::size_t i = 0; i < out.cells(); ++i) p[i] /= scales.divisors[b];
    }
    return out;
}

inline MultiBandRaster destandardize(const MultiBandRaster& standardized, const BandScales& scales) {
    scales.validate();
    if (scales.divisors.size() != standardized.bands) throw Error("band scale count does not match raster band count");
    MultiBandRaster out = standardized;
    for (std::size_t b = 0; b < out.bands; ++b) {
        double* p = out.band_data(b);
        for (std::size_t i = 0; i < out.cells(); ++i) p[i] *= scales.divisors[b];
    }
    return out;
}

inline std::string encode_band_scales(const BandScales& s) {
    s.validate();
    std::string out;
    out += "source_year=" + std::to_string(s.source_year) + "\n";
    out += "percentile=" + text::format_double(s.percentile) + "\n";
    for (std::size_t i = 0; i < s.band_names.size(); ++i)
        out += s.band_names[i] + "=" + text::format_double(s.divisors[i]) + "\n";
    return out;
}

inline BandScales decode_band_scales(std::string_view content) {
    BandScales s;
    bool have_year = false, have_pct = false;
    for (const auto& [key, value] : text::parse_key_values(content)) {
        if (key == "source_year") {
            s.source_year = static_cast<int>(text::to_int(value, "source_year"));
            have_year = true;
        } else if (key == "percentile") {
            s.percentile = text::to_double(value, "percentile");
            have_pct = true;
        } else {
            if (std::find(s.band_names.begin(), s.band_names.end(), key) != s.band_names.end())
                throw Error("duplicate band '" + key + "' in band scales");
            s.band_names.push_back(key);
            s.divisors.push_back(text::to_double(value, "band scale"));
        }
    }
    if (!have_year || !have_pct) throw Error("band scales file lacks source_year or percentile");
    s.validate();
    return s;
}

inline void write_band_scales(const BandScales& s, const std::string& path) {
    text::write_file(path, encode_band_scales(s));
}
inline BandScales read_band_scales(const std::string& path) { return decode_band_scales(text::read_file(path)); }

/// Observation stack on disk: an index CSV (date,raster,qa) with paths relative to the index, one
/// DMR1 reflectance raster and one single-band DMR1 QA grid (1 good, 0 bad) per observation.
inline void write_observation_stack(const ObservationStack& stack, const std::string& dir) {
    stack.validate();
    std::filesystem::create_directories(dir);
    std::string index = "date,raster,qa\n";
    std::map<std::string, int> used;
    for (const auto& o : stack.observations) {
        auto stem = o.date.str();
        if (const int k = used[stem]++; k > 0) stem += "_" + std::to_string(k);
        MultiBandRaster qa = o.raster.like({"qa"}, 0.0);
        for (std::size_t i = 0; i < o.qa.size(); ++i) qa.data[i] = o.qa[i] ? 1.0 : 0.0;
        write_raster(o.raster, dir + "/" + stem + ".dmr");
        write_raster(qa, dir + "/" + stem + "_qa.dmr");
        index += o.date.str() + "," + stem + ".dmr," + stem + "_qa.dmr\n";
    }
    text::write_file(dir + "/observations.csv", index);
}

inline ObservationStack read_observation_stack(const std::string& index_path) {
    const auto base = std::filesystem::path(index_path).parent_path();
    const auto rows = text::parse_csv(text::read_file(index_path));
    if (rows.empty() || rows.front() != std::vector<std::string>{"date", "raster", "qa"})
        throw Error("observation index '" + index_path + "' needs header date,raster,qa");
    ObservationStack stack;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 3) throw Error("observation index row " + std::to_string(i) + " needs 3 fields");
        Observation o;
        o.date = CivilDate::parse(rows[i][0]);
        o.raster = read_raster((base / rows[i][1]).string());
        const auto qa = read_raster((base / rows[i][2]).string());
        if (qa.bands != 1 || !qa.same_geometry(o.raster)) throw Error("QA grid of " + rows[i][0] + " does not match its raster");
        o.qa.resize(qa.cells());
        for (std::size_t k = 0; k < qa.cells(); ++k) o.qa[k] = qa.data[k] > 0.5 ? 1 : 0;
        stack.observations.push_back(std::move(o));
    }
    stack.validate();
    return stack;
}

}  // namespace urbanform
