#pragma once

// Accuracy assessment, paired significance testing, growth scoring and area accounting.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "urbanform/error.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/text.hpp"

namespace urbanform {

/// Rows are the map (prediction), columns the reference.
struct ConfusionMatrix {
    std::vector<std::string> class_names;
    std::vector<std::uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::vector<std::string> names)
        : class_names(std::move(names)), counts(class_names.size() * class_names.size(), 0) {}

    std::size_t size() const noexcept { return class_names.size(); }
    std::uint64_t& at(std::size_t pred, std::size_t ref) { return counts[pred * size() + ref]; }
    std::uint64_t at(std::size_t pred, std::size_t ref) const { return counts[pred * size() + ref]; }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
    std::uint64_t row_sum(std::size_t p) const {
        std::uint64_t t = 0;
        for (std::size_t r = 0; r < size(); ++r) t += at(p, r);
        return t;
    }
    std::uint64_t col_sum(std::size_t r) const {
        std::uint64_t t = 0;
        for (std::size_t p = 0; p < size(); ++p) t += at(p, r);
        return t;
    }
};

inline std::vector<std::string> default_class_names(std::size_t n) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
    return names;
}

/// Pairs with kUnlabeled on either side are skipped.
inline ConfusionMatrix confusion_matrix(const std::vector<std::uint8_t>& predictions,
                                        const std::vector<std::uint8_t>& references,
                                        std::vector<std::string> class_names) {
    if (predictions.size() != references.size()) throw Error("prediction and reference lengths differ");
    if (class_names.empty()) throw Error("confusion matrix needs at least one class");
    ConfusionMatrix m(std::move(class_names));
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto p = predictions[i], r = references[i];
        if (p == kUnlabeled || r == kUnlabeled) continue;
        if (p >= m.size() || r >= m.size())
            throw Error("label " + std::to_string(std::max(p, r)) + " outside the " + std::to_string(m.size()) + "-class set");
        ++m.at(p, r);
    }
    if (m.total() == 0) throw Error("predictions and references share no labeled cells");
    return m;
}

inline ConfusionMatrix confusion_matrix(const LabelGrid& predicted, const LabelGrid& reference) {
    if (predicted.kind != reference.kind) throw Error("cannot compare label grids of different kinds");
    if (!predicted.same_geometry(reference)) throw Error("label grids differ in geometry");
    return confusion_matrix(predicted.codes, reference.codes, class_names(reference.kind));
}

/// Normal-approximation 95% half-width.
inline double wald_half_width(double p, double n) { return n > 0 ? 1.96 * std::sqrt(p * (1 - p) / n) : 0.0; }

struct ClassMetrics {
    std::string name;
    std::optional<double> users_accuracy;
    std::optional<double> producers_accuracy;
    std::optional<double> f1;
    double ua_ci = 0.0;
    double pa_ci = 0.0;
    std::uint64_t mapped = 0;     // row total
    std::uint64_t reference = 0;  // column total
};

struct MetricsReport {
    double overall_accuracy = 0.0;
    double overall_accuracy_ci = 0.0;
    double kappa = 0.0;
    std::uint64_t total = 0;
    std::vector<ClassMetrics> classes;
    double average_f1 = 0.0;
    std::size_t f1_classes = 0;  // classes entering the average
    std::vector<std::string> warnings;
};

inline MetricsReport summary_metrics(const ConfusionMatrix& m) {
    const auto total = m.total();
    if (total == 0) throw Error("metrics of an empty confusion matrix");
    const double n = static_cast<double>(total);
    MetricsReport rep;
    rep.total = total;
    // Count form of kappa: (n * diag - sum row*col) / (n^2 - sum row*col) stays in exact integers.
    double diag = 0.0, chance = 0.0;
    for (std::size_t c = 0; c < m.size(); ++c) {
        diag += static_cast<double>(m.at(c, c));
        chance += static_cast<double>(m.row_sum(c)) * static_cast<double>(m.col_sum(c));
    }
    rep.overall_accuracy = diag / n;
    rep.overall_accuracy_ci = wald_half_width(rep.overall_accuracy, n);
    rep.kappa = chance < n * n ? (n * diag - chance) / (n * n - chance) : (rep.overall_accuracy == 1.0 ? 1.0 : 0.0);

    double f1_sum = 0.0;
    for (std::size_t c = 0; c < m.size(); ++c) {
        ClassMetrics cm;
        cm.name = m.class_names[c];
        cm.mapped = m.row_sum(c);
        cm.reference = m.col_sum(c);
        const double tp = static_cast<double>(m.at(c, c));
        if (cm.mapped > 0) {
            cm.users_accuracy = tp / static_cast<double>(cm.mapped);
            cm.ua_ci = wald_half_width(*cm.users_accuracy, static_cast<double>(cm.mapped));
        } else {
            rep.warnings.push_back("class '" + cm.name + "' never mapped: user's accuracy undefined");
        }
        if (cm.reference > 0) {
            cm.producers_accuracy = tp / static_cast<double>(cm.reference);
            cm.pa_ci = wald_half_width(*cm.producers_accuracy, static_cast<double>(cm.reference));
        } else {
            rep.warnings.push_back("class '" + cm.name + "' absent from reference: producer's accuracy undefined");
        }
        if (cm.users_accuracy && cm.producers_accuracy) {
            const double s = *cm.users_accuracy + *cm.producers_accuracy;
            cm.f1 = s > 0 ? 2.0 * *cm.users_accuracy * *cm.producers_accuracy / s : 0.0;
            f1_sum += *cm.f1;
            ++rep.f1_classes;
        } else {
            rep.warnings.push_back("class '" + cm.name + "' excluded from average F1");
        }
        rep.classes.push_back(std::move(cm));
    }
    rep.average_f1 = rep.f1_classes > 0 ? f1_sum / static_cast<double>(rep.f1_classes) : 0.0;
    return rep;
}

// --- chi-square tail ---------------------------------------------------------------------------

namespace detail {

// Regularized lower incomplete gamma P(a, x) by its power series (x < a + 1).
inline double gamma_p_series(double a, double x) {
    double sum = 1.0 / a, term = sum, ap = a;
    for (int i = 0; i < 1000; ++i) {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by modified Lentz continued fraction (x >= a + 1).
inline double gamma_q_fraction(double a, double x) {
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i < 1000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < 1e-16) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Upper tail of the chi-square distribution.
inline double chi_square_sf(double x, double dof = 1.0) {
    if (!(dof > 0)) throw Error("chi-square degrees of freedom must be positive");
    if (x <= 0) return 1.0;
    const double a = dof / 2, hx = x / 2;
    return hx < a + 1 ? 1.0 - detail::gamma_p_series(a, hx) : detail::gamma_q_fraction(a, hx);
}

struct McNemarResult {
    std::uint64_t b = 0;  // first classifier right, second wrong
    std::uint64_t c = 0;  // first wrong, second right
    double chi2_corrected = 0.0;
    double p_corrected = 1.0;
    double chi2_uncorrected = 0.0;
    double p_uncorrected = 1.0;
};

inline McNemarResult mcnemar_test(std::uint64_t b, std::uint64_t c) {
    if (b + c == 0) throw Error("McNemar's test needs at least one discordant pair");
    McNemarResult r{b, c};
    const double bd = static_cast<double>(b), cd = static_cast<double>(c);
    const double diff = std::fabs(bd - cd);
    r.chi2_corrected = std::max(diff - 1.0, 0.0) * std::max(diff - 1.0, 0.0) / (bd + cd);
    r.chi2_uncorrected = diff * diff / (bd + cd);
    r.p_corrected = chi_square_sf(r.chi2_corrected);
    r.p_uncorrected = chi_square_sf(r.chi2_uncorrected);
    return r;
}

/// Pairs per-cell correctness of two maps against one reference. With `one_vs_rest`, correctness
/// is judged on the binary question "is this cell class k".
inline McNemarResult mcnemar_from_maps(const std::vector<std::uint8_t>& first, const std::vector<std::uint8_t>& second,
                                       const std::vector<std::uint8_t>& reference,
                                       std::optional<std::uint8_t> one_vs_rest = std::nullopt) {
    if (first.size() != reference.size() || second.size() != reference.size())
        throw Error("McNemar inputs differ in length");
    std::uint64_t b = 0, c = 0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (first[i] == kUnlabeled || second[i] == kUnlabeled || reference[i] == kUnlabeled) continue;
        bool a_ok, b_ok;
        if (one_vs_rest) {
            const bool ref_k = reference[i] == *one_vs_rest;
            a_ok = (first[i] == *one_vs_rest) == ref_k;
            b_ok = (second[i] == *one_vs_rest) == ref_k;
        } else {
            a_ok = first[i] == reference[i];
            b_ok = second[i] == reference[i];
        }
        if (a_ok && !b_ok) ++b;
        if (!a_ok && b_ok) ++c;
    }
    return mcnemar_test(b, c);
}

// --- growth ------------------------------------------------------------------------------------

struct GrowthAccuracy {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::optional<double> users_accuracy;  // undefined when nothing is mapped as growth
    double producers_accuracy = 0.0;
    std::optional<double> f1;
};

inline GrowthAccuracy evaluate_growth(const std::vector<std::uint8_t>& predicted, const std::vector<std::uint8_t>& reference) {
    if (predicted.size() != reference.size()) throw Error("growth maps differ in length");
    GrowthAccuracy g;
    const auto pos = static_cast<std::uint8_t>(GrowthClass::growth);
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const auto p = predicted[i], r = reference[i];
        if (p == kUnlabeled || r == kUnlabeled) continue;
        if (p > 1 || r > 1) throw Error("growth labels must be 0 or 1");
        if (p == pos && r == pos) ++g.tp;
        else if (p == pos) ++g.fp;
        else if (r == pos) ++g.fn;
        else ++g.tn;
    }
    if (g.tp + g.fn == 0) throw Error("reference holds no growth cells");
    g.producers_accuracy = static_cast<double>(g.tp) / static_cast<double>(g.tp + g.fn);
    if (g.tp + g.fp > 0) {
        g.users_accuracy = static_cast<double>(g.tp) / static_cast<double>(g.tp + g.fp);
        const double s = *g.users_accuracy + g.producers_accuracy;
        g.f1 = s > 0 ? 2 * *g.users_accuracy * g.producers_accuracy / s : 0.0;
    }
    return g;
}

inline GrowthAccuracy evaluate_growth(const LabelGrid& predicted, const LabelGrid& reference) {
    if (predicted.kind != LabelKind::growth || reference.kind != LabelKind::growth)
        throw Error("growth evaluation needs growth label grids");
    if (!predicted.same_geometry(reference)) throw Error("growth grids differ in geometry");
    return evaluate_growth(predicted.codes, reference.codes);
}

// --- combined urban form and area accounting ---------------------------------------------------

inline const std::vector<std::string>& combined_class_names() {
    static const std::vector<std::string> names{"compact_high", "compact_low", "open_high", "open_low",
                                                "sparse_high", "sparse_low", "not_built"};
    return names;
}

/// Horizontal code decides built vs not built; vertical only splits built cells into high / low.
inline std::uint8_t combine_urban_form(std::uint8_t horizontal, std::uint8_t vertical) {
    if (horizontal == kUnlabeled || vertical == kUnlabeled) return kUnlabeled;
    const auto h = static_cast<HorizontalClass>(horizontal);
    if (h == HorizontalClass::not_built) return 6;
    const bool high = static_cast<VerticalClass>(vertical) == VerticalClass::high;
    const std::uint8_t base = h == HorizontalClass::compact ? 0 : h == HorizontalClass::open ? 2 : 4;
    return static_cast<std::uint8_t>(base + (high ? 0 : 1));
}

struct RegionSet {
    std::vector<std::string> keys;
    std::vector<std::int32_t> membership;  // region index per cell, -1 outside all regions

    /// Masks must be disjoint and keys unique.
    static RegionSet from_masks(const std::vector<std::string>& keys, const std::vector<std::vector<std::uint8_t>>& masks) {
        if (keys.size() != masks.size()) throw Error("region keys and masks differ in count");
        if (keys.empty()) throw Error("no regions given");
        std::set<std::string> seen;
        for (const auto& k : keys)
            if (!seen.insert(k).second) throw Error("duplicate region key '" + k + "'");
        RegionSet rs;
        rs.keys = keys;
        rs.membership.assign(masks.front().size(), -1);
        for (std::size_t r = 0; r < masks.size(); ++r) {
            if (masks[r].size() != rs.membership.size()) throw Error("region masks differ in size");
            for (std::size_t i = 0; i < masks[r].size(); ++i) {
                if (!masks[r][i]) continue;
                if (rs.membership[i] >= 0) throw Error("regions '" + keys[rs.membership[i]] + "' and '" + keys[r] + "' overlap");
                rs.membership[i] = static_cast<std::int32_t>(r);
            }
        }
        return rs;
    }

    /// Region raster: integer ids per cell, NaN outside. Keys are the decimal ids.
    static RegionSet from_raster(const MultiBandRaster& ids) {
        if (ids.bands != 1) throw Error("region raster must have one band");
        std::map<long long, std::size_t> index;
        for (std::size_t i = 0; i < ids.cells(); ++i) {
            const double v = ids.data[i];
            if (std::isnan(v)) continue;
            if (v != std::floor(v)) throw Error("region raster holds a non-integer id");
            index.emplace(static_cast<long long>(v), 0);
        }
        if (index.empty()) throw Error("region raster holds no regions");
        RegionSet rs;
        for (auto& [id, slot] : index) {
            slot = rs.keys.size();
            rs.keys.push_back(std::to_string(id));
        }
        rs.membership.assign(ids.cells(), -1);
        for (std::size_t i = 0; i < ids.cells(); ++i)
            if (!std::isnan(ids.data[i])) rs.membership[i] = static_cast<std::int32_t>(index.at(static_cast<long long>(ids.data[i])));
        return rs;
    }
};

struct AnnualLabels {
    int year = 0;
    LabelGrid horizontal;
    LabelGrid vertical;
};

struct TrendRow {
    std::string region;
    int year = 0;
    std::string dimension;  // horizontal | vertical | combined
    std::string class_name;
    double hectares = 0.0;
    std::optional<double> population;
};

struct TrendTable {
    std::vector<TrendRow> rows;
    std::vector<std::string> warnings;
};

using PopulationTable = std::map<std::pair<std::string, int>, double>;

/// CSV with header region,year,population.
inline PopulationTable parse_population_csv(std::string_view content) {
    const auto rows = text::parse_csv(content);
    if (rows.empty() || rows.front() != std::vector<std::string>{"region", "year", "population"})
        throw Error("population table needs header region,year,population");
    PopulationTable t;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 3) throw Error("population row " + std::to_string(i) + " needs 3 fields");
        const auto key = std::make_pair(rows[i][0], static_cast<int>(text::to_int(rows[i][1], "population year")));
        if (!t.emplace(key, text::to_double(rows[i][2], "population")).second)
            throw Error("duplicate population entry for region '" + key.first + "' year " + rows[i][1]);
    }
    return t;
}

inline TrendTable area_trends(const std::vector<AnnualLabels>& years, const RegionSet& regions,
                              const PopulationTable* population = nullptr) {
    if (years.empty()) throw Error("no annual label grids given");
    const auto& ref = years.front().horizontal;
    if (regions.membership.size() != ref.cells()) throw Error("region grid does not match label geometry");
    const double ha_per_cell = ref.cell_size * ref.cell_size / 10000.0;
    TrendTable out;
    std::vector<std::size_t> region_cells(regions.keys.size(), 0);
    for (auto m : regions.membership)
        if (m >= 0) ++region_cells[static_cast<std::size_t>(m)];
    for (std::size_t r = 0; r < regions.keys.size(); ++r)
        if (region_cells[r] == 0) out.warnings.push_back("region '" + regions.keys[r] + "' covers no cells");

    std::set<int> seen_years;
    for (const auto& y : years) {
        if (!seen_years.insert(y.year).second) throw Error("duplicate year " + std::to_string(y.year));
        if (y.horizontal.kind != LabelKind::horizontal || y.vertical.kind != LabelKind::vertical)
            throw Error("year " + std::to_string(y.year) + " needs a horizontal and a vertical grid");
        if (!y.horizontal.same_geometry(ref) || !y.vertical.same_geometry(ref))
            throw Error("label grids of year " + std::to_string(y.year) + " differ in geometry");
        const std::size_t R = regions.keys.size();
        std::vector<std::vector<std::size_t>> hc(R, std::vector<std::size_t>(4)), vc(R, std::vector<std::size_t>(3)),
            cc(R, std::vector<std::size_t>(7));
        for (std::size_t i = 0; i < ref.cells(); ++i) {
            const auto m = regions.membership[i];
            if (m < 0) continue;
            const auto h = y.horizontal.codes[i], v = y.vertical.codes[i];
            if (h != kUnlabeled) ++hc[m][h];
            if (v != kUnlabeled) ++vc[m][v];
            const auto c = combine_urban_form(h, v);
            if (c != kUnlabeled) ++cc[m][c];
        }
        for (std::size_t r = 0; r < R; ++r) {
            std::optional<double> pop;
            if (population) {
                auto it = population->find({regions.keys[r], y.year});
                if (it != population->end()) pop = it->second;
            }
            auto emit = [&](const std::string& dim, const std::vector<std::string>& names, const std::vector<std::size_t>& counts) {
                for (std::size_t k = 0; k < names.size(); ++k)
                    out.rows.push_back({regions.keys[r], y.year, dim, names[k], static_cast<double>(counts[k]) * ha_per_cell, pop});
            };
            emit("horizontal", class_names(LabelKind::horizontal), hc[r]);
            emit("vertical", class_names(LabelKind::vertical), vc[r]);
            emit("combined", combined_class_names(), cc[r]);
        }
    }
    return out;
}

inline std::string encode_trends_csv(const TrendTable& t) {
    std::string out = "region,year,dimension,class,hectares,population\n";
    for (const auto& r : t.rows)
        out += r.region + "," + std::to_string(r.year) + "," + r.dimension + "," + r.class_name + "," +
               text::format_double(r.hectares) + "," + (r.population ? text::format_double(*r.population) : "") + "\n";
    return out;
}

// --- reports -----------------------------------------------------------------------------------

/// One row per metric: metric,class,value,ci_half_width. Undefined values are left empty.
inline std::string encode_metrics_csv(const MetricsReport& rep) {
    std::string out = "metric,class,value,ci_half_width\n";
    auto opt = [](const std::optional<double>& v) { return v ? text::format_double(*v) : std::string(); };
    out += "overall_accuracy,," + text::format_double(rep.overall_accuracy) + "," + text::format_double(rep.overall_accuracy_ci) + "\n";
    out += "kappa,," + text::format_double(rep.kappa) + ",\n";
    out += "average_f1,," + text::format_double(rep.average_f1) + ",\n";
    for (const auto& c : rep.classes) {
        out += "users_accuracy," + c.name + "," + opt(c.users_accuracy) + "," + (c.users_accuracy ? text::format_double(c.ua_ci) : "") + "\n";
        out += "producers_accuracy," + c.name + "," + opt(c.producers_accuracy) + "," +
               (c.producers_accuracy ? text::format_double(c.pa_ci) : "") + "\n";
        out += "f1," + c.name + "," + opt(c.f1) + ",\n";
    }
    return out;
}

inline std::string encode_confusion_csv(const ConfusionMatrix& m) {
    std::string out = "map\\reference";
    for (const auto& n : m.class_names) out += "," + n;
    out += "\n";
    for (std::size_t p = 0; p < m.size(); ++p) {
        out += m.class_names[p];
        for (std::size_t r = 0; r < m.size(); ++r) out += "," + std::to_string(m.at(p, r));
        out += "\n";
    }
    return out;
}

inline std::string format_metrics_summary(const MetricsReport& rep) {
    auto pct = [](double v) { return text::format_fixed(100.0 * v, 1); };
    std::string out;
    out += "cells: " + std::to_string(rep.total) + "\n";
    out += "overall accuracy: " + pct(rep.overall_accuracy) + "% +/- " + pct(rep.overall_accuracy_ci) + "\n";
    out += "kappa: " + text::format_fixed(rep.kappa, 3) + "\n";
    out += "average F1: " + text::format_fixed(rep.average_f1, 3) + " over " + std::to_string(rep.f1_classes) + " classes\n";
    for (const auto& c : rep.classes) {
        out += "  " + c.name + ": UA " + (c.users_accuracy ? pct(*c.users_accuracy) + "%" : std::string("n/a")) + ", PA " +
               (c.producers_accuracy ? pct(*c.producers_accuracy) + "%" : std::string("n/a")) + ", F1 " +
               (c.f1 ? text::format_fixed(*c.f1, 3) : std::string("n/a")) + "\n";
    }
    for (const auto& w : rep.warnings) out += "warning: " + w + "\n";
    return out;
}

}  // namespace urbanform
