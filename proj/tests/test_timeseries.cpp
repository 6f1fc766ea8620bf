#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "urbanform/timeseries.hpp"

using namespace urbanform;

namespace {

ClassSeries random_series(std::uint64_t seed, std::size_t years, std::size_t classes) {
    ClassSeries s;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (std::size_t t = 0; t < years; ++t) {
        s.years.push_back(1985 + static_cast<int>(t));
        std::vector<double> p(classes);
        double z = 0.0;
        for (auto& v : p) z += v = u(rng);
        for (auto& v : p) v /= z;
        s.probabilities.push_back(p);
    }
    return s;
}

}  // namespace

TEST(SavGol, KnownCoefficients) {
    const auto c52 = savgol_coefficients(5, 2);
    const double want[] = {-3, 12, 17, 12, -3};
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(c52[i], want[i] / 35.0, 1e-12);
    for (double v : savgol_coefficients(3, 1)) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(SavGol, MatchesNormalEquationOracle) {
    for (auto [w, o] : {std::pair<std::size_t, std::size_t>{5, 2}, {7, 2}, {7, 3}, {9, 4}, {11, 2}}) {
        const auto got = savgol_coefficients(w, o), want = oracle::savgol(w, o);
        for (std::size_t i = 0; i < w; ++i) EXPECT_NEAR(got[i], want[i], 1e-9);
    }
}

TEST(SavGol, RejectsBadWindow) {
    EXPECT_THROW(savgol_coefficients(4, 2), Error);
    EXPECT_THROW(savgol_coefficients(3, 3), Error);
}

TEST(Series, ImpulseResponseIsCenterWeight) {
    ClassSeries s;
    for (int t = 0; t < 5; ++t) {
        s.years.push_back(2000 + t);
        s.probabilities.push_back(t == 2 ? std::vector<double>{0.0, 1.0} : std::vector<double>{1.0, 0.0});
    }
    const auto out = smooth_class_series(s);
    ASSERT_EQ(out.years, std::vector<int>{2002});
    EXPECT_NEAR(out.filtered[0][1], 17.0 / 35.0, 1e-12);
    EXPECT_NEAR(out.filtered[0][0], 18.0 / 35.0, 1e-12);
    EXPECT_EQ(out.labels[0], 0);
}

TEST(Series, ThirtyFourYearsGiveThirtyInteriorOutputs) {
    const auto s = random_series(3, 34, 4);
    const auto out = smooth_class_series(s);
    ASSERT_EQ(out.years.size(), 30u);
    EXPECT_EQ(out.years.front(), 1987);
    EXPECT_EQ(out.years.back(), 2016);
    const auto w = oracle::savgol(5, 2);
    for (std::size_t t = 0; t < 30; ++t) {
        double sum = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            double f = 0.0;
            for (std::size_t j = 0; j < 5; ++j) f += w[j] * s.probabilities[t + j][k];
            EXPECT_NEAR(out.filtered[t][k], f, 1e-12);
            EXPECT_GE(out.probabilities[t][k], 0.0);
            sum += out.probabilities[t][k];
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(Series, RejectsGapsAndShortSeries) {
    auto s = random_series(1, 6, 2);
    s.years[3] += 1;
    EXPECT_THROW(smooth_class_series(s), Error);
    EXPECT_THROW(smooth_class_series(random_series(1, 4, 2)), Error);
}

TEST(Rasters, CellwiseSmoothingMatchesSeriesAndSkipsNan) {
    std::vector<AnnualProbabilities> stack;
    const auto a = random_series(7, 6, 3), b = random_series(8, 6, 3);
    for (std::size_t t = 0; t < 6; ++t) {
        MultiBandRaster r(2, 1, {"not_built", "low", "high"});
        for (std::size_t k = 0; k < 3; ++k) {
            r.at(k, 0, 0) = a.probabilities[t][k];
            r.at(k, 0, 1) = b.probabilities[t][k];
        }
        stack.push_back({2000 + static_cast<int>(t), r});
    }
    stack[4].probabilities.at(1, 0, 1) = kNoData;
    const auto out = smooth_probability_rasters(stack, LabelKind::vertical);
    ASSERT_EQ(out.size(), 2u);
    const auto ref = smooth_class_series(a);
    for (std::size_t t = 0; t < 2; ++t) {
        EXPECT_EQ(out[t].labels.at(0, 0), ref.labels[t]);
        for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(out[t].probabilities.at(k, 0, 0), ref.probabilities[t][k], 1e-12);
        EXPECT_EQ(out[t].labels.at(0, 1), kUnlabeled);
    }
}
