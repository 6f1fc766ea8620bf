#pragma once

// Savitzky-Golay smoothing of annual class-probability series.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "urbanform/error.hpp"
#include "urbanform/labeler.hpp"
#include "urbanform/raster.hpp"

namespace urbanform {

/// Weights of the least-squares polynomial fit evaluated at the window center.
inline std::vector<double> savgol_coefficients(std::size_t window, std::size_t polyorder) {
    if (window == 0 || window % 2 == 0) throw Error("Savitzky-Golay window must be odd and positive");
    if (polyorder >= window) throw Error("Savitzky-Golay polyorder must be below the window length");
    const auto half = static_cast<double>(window / 2);
    Eigen::MatrixXd A(window, polyorder + 1);
    for (std::size_t i = 0; i < window; ++i)
        for (std::size_t j = 0; j <= polyorder; ++j) A(i, j) = std::pow(static_cast<double>(i) - half, static_cast<double>(j));
    // Row 0 of the pseudo-inverse: the fitted constant term, i.e. the fit's value at offset 0.
    Eigen::MatrixXd pinv = A.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(window, window));
    std::vector<double> c(window);
    for (std::size_t i = 0; i < window; ++i) c[i] = pinv(0, i);
    return c;
}

struct ClassSeries {
    std::vector<int> years;
    std::vector<std::vector<double>> probabilities;  // [year][class]

    void validate() const {
        if (years.size() != probabilities.size()) throw Error("series years and probabilities differ in length");
        for (std::size_t i = 1; i < years.size(); ++i)
            if (years[i] != years[i - 1] + 1) throw Error("series years must be contiguous and increasing");
        for (const auto& p : probabilities) {
            if (p.size() != probabilities.front().size()) throw Error("series class counts differ between years");
            double s = 0.0;
            for (double v : p) {
                if (!(v >= 0.0)) throw Error("series probability is negative or NaN");
                s += v;
            }
            if (std::fabs(s - 1.0) > 1e-6) throw Error("series probabilities of a year do not sum to 1");
        }
    }
};

struct SmoothedSeries {
    std::vector<int> years;                         // interior years only
    std::vector<std::vector<double>> filtered;      // convolution output before clamping
    std::vector<std::vector<double>> probabilities; // clamped at 0 and renormalized
    std::vector<std::uint8_t> labels;
};

/// The first and last window/2 years get no output.
inline SmoothedSeries smooth_class_series(const ClassSeries& series, std::size_t window = 5, std::size_t polyorder = 2) {
    series.validate();
    const auto coef = savgol_coefficients(window, polyorder);
    const auto T = series.years.size();
    if (T < window) throw Error("series of " + std::to_string(T) + " years is shorter than the window " + std::to_string(window));
    const auto half = window / 2;
    const auto C = series.probabilities.front().size();
    SmoothedSeries out;
    for (std::size_t t = half; t + half < T; ++t) {
        std::vector<double> f(C, 0.0);
        for (std::size_t k = 0; k < C; ++k)
            for (std::size_t j = 0; j < window; ++j) f[k] += coef[j] * series.probabilities[t - half + j][k];
        std::vector<double> p(C);
        double s = 0.0;
        for (std::size_t k = 0; k < C; ++k) s += p[k] = std::max(f[k], 0.0);
        for (auto& v : p) v = s > 0 ? v / s : 1.0 / static_cast<double>(C);
        out.years.push_back(series.years[t]);
        out.labels.push_back(static_cast<std::uint8_t>(std::max_element(p.begin(), p.end()) - p.begin()));
        out.filtered.push_back(std::move(f));
        out.probabilities.push_back(std::move(p));
    }
    return out;
}

struct AnnualProbabilities {
    int year = 0;
    MultiBandRaster probabilities;  // one band per class, NaN where unlabeled
};

struct SmoothedYear {
    LabelGrid labels;
    MultiBandRaster probabilities;
};

/// Per-cell smoothing over a stack of annual probability rasters. A cell with NaN in any year of
/// a window stays unlabeled for that output year.
inline std::vector<SmoothedYear> smooth_probability_rasters(const std::vector<AnnualProbabilities>& series, LabelKind kind,
                                                            std::size_t window = 5, std::size_t polyorder = 2) {
    if (series.empty()) throw Error("no annual probability rasters given");
    const auto coef = savgol_coefficients(window, polyorder);
    const auto T = series.size();
    if (T < window) throw Error("series of " + std::to_string(T) + " years is shorter than the window " + std::to_string(window));
    const auto& ref = series.front().probabilities;
    const auto C = class_count(kind);
    for (std::size_t t = 0; t < T; ++t) {
        if (!series[t].probabilities.same_geometry(ref) || series[t].probabilities.bands != C)
            throw Error("probability raster of year " + std::to_string(series[t].year) + " does not match the series");
        if (t > 0 && series[t].year != series[t - 1].year + 1) throw Error("series years must be contiguous and increasing");
    }
    const auto half = window / 2;
    const auto cells = ref.cells();
    std::vector<SmoothedYear> out;
    for (std::size_t t = half; t + half < T; ++t) {
        SmoothedYear y{LabelGrid::like(ref, kind, series[t].year), ref.like(class_names(kind), kNoData)};
        std::vector<double> p(C);
        for (std::size_t cell = 0; cell < cells; ++cell) {
            bool valid = true;
            double s = 0.0;
            for (std::size_t k = 0; k < C && valid; ++k) {
                double f = 0.0;
                for (std::size_t j = 0; j < window; ++j) {
                    const double v = series[t - half + j].probabilities.data[k * cells + cell];
                    if (std::isnan(v)) valid = false;
                    f += coef[j] * v;
                }
                s += p[k] = std::max(f, 0.0);
            }
            if (!valid) continue;
            std::size_t best = 0;
            for (std::size_t k = 0; k < C; ++k) {
                const double v = s > 0 ? p[k] / s : 1.0 / static_cast<double>(C);
                y.probabilities.data[k * cells + cell] = v;
                if (v > y.probabilities.data[best * cells + cell]) best = k;
            }
            y.labels.codes[cell] = static_cast<std::uint8_t>(best);
        }
        out.push_back(std::move(y));
    }
    return out;
}

}  // namespace urbanform
