#include <gtest/gtest.h>

#include <cmath>

#include "urbanform/eval.hpp"

using namespace urbanform;

namespace {

ConfusionMatrix two_class(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t d) {
    ConfusionMatrix m({"x", "y"});
    m.at(0, 0) = a;
    m.at(0, 1) = b;
    m.at(1, 0) = c;
    m.at(1, 1) = d;
    return m;
}

LabelGrid grid(LabelKind kind, int year, std::vector<std::uint8_t> codes, std::size_t w) {
    MultiBandRaster g(w, codes.size() / w, {"x"});
    auto l = LabelGrid::like(g, kind, year);
    l.codes = std::move(codes);
    return l;
}

}  // namespace

TEST(Metrics, KappaAndOverallAccuracy) {
    const auto rep = summary_metrics(two_class(40, 10, 10, 40));
    EXPECT_EQ(rep.overall_accuracy, 0.8);
    EXPECT_EQ(rep.kappa, 0.6);
    EXPECT_NEAR(*rep.classes[0].users_accuracy, 0.8, 1e-12);
    EXPECT_NEAR(rep.average_f1, 0.8, 1e-12);
}

TEST(Metrics, UserAndProducerAccuracyFollowRowsAndColumns) {
    const auto rep = summary_metrics(two_class(30, 10, 0, 60));
    EXPECT_NEAR(*rep.classes[0].users_accuracy, 0.75, 1e-12);
    EXPECT_NEAR(*rep.classes[0].producers_accuracy, 1.0, 1e-12);
    EXPECT_NEAR(*rep.classes[1].producers_accuracy, 60.0 / 70.0, 1e-12);
}

TEST(Metrics, WaldIntervalAtReportedAccuracy) {
    EXPECT_NEAR(wald_half_width(0.877, 9900), 0.0065, 5e-5);
}

TEST(Metrics, UndefinedClassesAreExcludedWithWarning) {
    ConfusionMatrix m({"a", "b", "c"});
    m.at(0, 0) = 5;
    m.at(1, 1) = 5;
    const auto rep = summary_metrics(m);
    EXPECT_FALSE(rep.classes[2].users_accuracy.has_value());
    EXPECT_EQ(rep.f1_classes, 2u);
    EXPECT_FALSE(rep.warnings.empty());
    EXPECT_DOUBLE_EQ(rep.average_f1, 1.0);
}

TEST(Metrics, ConfusionSkipsUnlabeledAndRejectsOutOfRange) {
    const auto m = confusion_matrix({0, 1, kUnlabeled, 1}, {0, 0, 1, kUnlabeled}, {"a", "b"});
    EXPECT_EQ(m.total(), 2u);
    EXPECT_EQ(m.at(1, 0), 1u);
    EXPECT_THROW(confusion_matrix({3}, {0}, {"a", "b"}), Error);
    EXPECT_THROW(confusion_matrix({kUnlabeled}, {0}, {"a", "b"}), Error);
}

TEST(McNemar, ContinuityCorrectedStatistic) {
    const auto r = mcnemar_test(30, 10);
    EXPECT_NEAR(r.chi2_corrected, 9.025, 1e-12);
    EXPECT_NEAR(r.chi2_uncorrected, 10.0, 1e-12);
    EXPECT_LT(r.p_corrected, 0.01);
    EXPECT_THROW(mcnemar_test(0, 0), Error);
}

TEST(McNemar, ChiSquareTail) {
    EXPECT_NEAR(chi_square_sf(3.841458820694124), 0.05, 1e-9);
    EXPECT_NEAR(chi_square_sf(6.634896601021214), 0.01, 1e-9);
    EXPECT_NEAR(chi_square_sf(0.0), 1.0, 1e-15);
    EXPECT_NEAR(chi_square_sf(5.991464547107979, 2.0), 0.05, 1e-9);
}

TEST(McNemar, FromMapsCountsDiscordantPairs) {
    const std::vector<std::uint8_t> ref{0, 1, 2, 0, 1, kUnlabeled};
    const std::vector<std::uint8_t> a{0, 1, 0, 1, 1, 0};
    const std::vector<std::uint8_t> b{0, 0, 2, 0, 1, 2};
    const auto r = mcnemar_from_maps(a, b, ref);
    EXPECT_EQ(r.b, 1u);
    EXPECT_EQ(r.c, 2u);
    const auto k2 = mcnemar_from_maps(a, b, ref, 2);
    EXPECT_EQ(k2.b, 0u);
    EXPECT_EQ(k2.c, 1u);
}

TEST(Growth, AccuracyOfGrowthClass) {
    std::vector<std::uint8_t> pred, ref;
    auto push = [&](int p, int r, int n) {
        for (int i = 0; i < n; ++i) {
            pred.push_back(static_cast<std::uint8_t>(p));
            ref.push_back(static_cast<std::uint8_t>(r));
        }
    };
    push(1, 1, 12);
    push(1, 0, 8);
    push(0, 1, 5);
    push(0, 0, 75);
    const auto g = evaluate_growth(pred, ref);
    EXPECT_NEAR(*g.users_accuracy, 0.6, 1e-12);
    EXPECT_NEAR(g.producers_accuracy, 12.0 / 17.0, 1e-12);
    EXPECT_NEAR(*g.f1, 0.6486, 1e-4);
    EXPECT_THROW(evaluate_growth({0, 0}, {0, 0}), Error);
    const auto none = evaluate_growth({0, 0}, {1, 0});
    EXPECT_FALSE(none.users_accuracy.has_value());
}

TEST(Combine, HorizontalDecidesBuiltStatus) {
    EXPECT_EQ(combine_urban_form(3, 2), 0);
    EXPECT_EQ(combine_urban_form(3, 1), 1);
    EXPECT_EQ(combine_urban_form(2, 2), 2);
    EXPECT_EQ(combine_urban_form(1, 1), 5);
    EXPECT_EQ(combine_urban_form(0, 2), 6);
    EXPECT_EQ(combine_urban_form(1, 0), 5);
    EXPECT_EQ(combine_urban_form(kUnlabeled, 1), kUnlabeled);
}

TEST(Trends, HundredCellsAreNineHectares) {
    std::vector<std::uint8_t> h(200, 0), v(200, 0);
    for (std::size_t i = 0; i < 100; ++i) {
        h[i] = 3;
        v[i] = 2;
    }
    const AnnualLabels y{2014, grid(LabelKind::horizontal, 2014, h, 20), grid(LabelKind::vertical, 2014, v, 20)};
    std::vector<std::uint8_t> all(200, 1);
    const auto rs = RegionSet::from_masks({"city"}, {all});
    PopulationTable pop{{{"city", 2014}, 5000.0}};
    const auto t = area_trends({y}, rs, &pop);
    bool found = false;
    for (const auto& r : t.rows)
        if (r.dimension == "combined" && r.class_name == "compact_high") {
            EXPECT_NEAR(r.hectares, 9.0, 1e-12);
            EXPECT_EQ(r.population.value(), 5000.0);
            found = true;
        }
    EXPECT_TRUE(found);
    EXPECT_THROW(area_trends({y, y}, rs), Error);
}

TEST(Regions, MasksMustBeDisjointAndRasterIdsInteger) {
    EXPECT_THROW(RegionSet::from_masks({"a", "b"}, {{1, 1}, {0, 1}}), Error);
    EXPECT_THROW(RegionSet::from_masks({"a", "a"}, {{1, 0}, {0, 1}}), Error);
    MultiBandRaster ids(3, 1, {"id"});
    ids.data = {7, kNoData, 2};
    const auto rs = RegionSet::from_raster(ids);
    EXPECT_EQ(rs.keys, (std::vector<std::string>{"2", "7"}));
    EXPECT_EQ(rs.membership, (std::vector<std::int32_t>{1, -1, 0}));
    ids.data[0] = 1.5;
    EXPECT_THROW(RegionSet::from_raster(ids), Error);
}

TEST(Population, ParsesAndRejectsDuplicates) {
    const auto t = parse_population_csv("region,year,population\nx,2014,10\n");
    EXPECT_EQ(t.at({"x", 2014}), 10.0);
    EXPECT_THROW(parse_population_csv("region,year,population\nx,2014,10\nx,2014,11\n"), Error);
}

TEST(Reports, CsvEncodings) {
    const auto m = two_class(1, 2, 3, 4);
    const auto csv = encode_confusion_csv(m);
    EXPECT_EQ(csv, "map\\reference,x,y\nx,1,2\ny,3,4\n");
    EXPECT_NE(encode_metrics_csv(summary_metrics(m)).find("kappa,,"), std::string::npos);
}
