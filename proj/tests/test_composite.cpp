#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "urbanform/composite.hpp"
#include "urbanform/synthcity.hpp"

using namespace urbanform;

namespace {

bool same_or_both_nan(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

TEST(Median, OddAndEvenCounts) {
    std::vector<double> odd{5, 1, 3};
    EXPECT_EQ(median_inplace(odd), 3.0);
    std::vector<double> even{4, 1, 3, 2};
    EXPECT_EQ(median_inplace(even), 2.5);
    std::vector<double> none;
    EXPECT_TRUE(std::isnan(median_inplace(none)));
}

TEST(Composite, MatchesBruteForceMedianExactly) {
    const auto stack = oracle::random_stack(11, 9, 7, 3, {2013, 2014, 2015, 2016}, 5);
    for (int year : {2014, 2015}) {
        for (int window : {1, 3}) {
            const auto got = rolling_median_composite(stack, year, window);
            const auto want = oracle::median_composite(stack, year, window);
            ASSERT_EQ(got.data.size(), want.data.size());
            for (std::size_t i = 0; i < got.data.size(); ++i) ASSERT_TRUE(same_or_both_nan(got.data[i], want.data[i])) << i;
        }
    }
}

TEST(Composite, CellWithoutGoodSamplesIsNoData) {
    auto stack = oracle::random_stack(3, 2, 2, 1, {2014}, 3);
    for (auto& o : stack.observations) o.qa[0] = 0;
    const auto c = rolling_median_composite(stack, 2014, 1);
    EXPECT_TRUE(std::isnan(c.data[0]));
}

TEST(Composite, RejectsEvenWindowAndEmptyStack) {
    const auto stack = oracle::random_stack(3, 2, 2, 1, {2014}, 3);
    EXPECT_THROW(rolling_median_composite(stack, 2014, 2), Error);
    EXPECT_THROW(rolling_median_composite(ObservationStack{}, 2014, 3), Error);
}

TEST(Composite, RejectsMismatchedQa) {
    auto stack = oracle::random_stack(3, 2, 2, 1, {2014}, 2);
    stack.observations[1].qa.pop_back();
    EXPECT_THROW(rolling_median_composite(stack, 2014, 1), Error);
}

TEST(Season, FilterKeepsInclusiveWindow) {
    auto stack = oracle::random_stack(5, 2, 2, 1, {2014}, 1);
    auto make = [&](unsigned m, unsigned d) {
        auto o = stack.observations.front();
        o.date = {2014, m, d};
        return o;
    };
    ObservationStack s;
    s.observations = {make(4, 30), make(5, 1), make(8, 31), make(9, 1)};
    const auto kept = filter_observations(s, Season{});
    ASSERT_EQ(kept.observations.size(), 2u);
    EXPECT_EQ(kept.observations[0].date.str(), "2014-05-01");
    EXPECT_EQ(kept.observations[1].date.str(), "2014-08-31");
    const auto winter = filter_observations(s, Season{{9, 1}, {4, 30}});
    EXPECT_EQ(winter.observations.size(), 2u);
}

TEST(Dates, ParseValidatesCalendar) {
    EXPECT_EQ(CivilDate::parse("2016-02-29").str(), "2016-02-29");
    EXPECT_THROW(CivilDate::parse("2015-02-29"), Error);
    EXPECT_THROW(CivilDate::parse("2015/02/01"), Error);
}

TEST(Scales, NearestRankPercentile) {
    std::vector<double> v;
    for (int i = 1; i <= 200; ++i) v.push_back(i);
    EXPECT_EQ(nearest_rank_percentile(v, 0.995), 199.0);
    EXPECT_EQ(nearest_rank_percentile(v, 1.0), 200.0);
    EXPECT_EQ(nearest_rank_percentile({3.0, kNoData, 1.0}, 0.5), 1.0);
}

TEST(Scales, StandardizeRoundTripsAndSerializes) {
    MultiBandRaster r(4, 1, {"a", "b"});
    r.data = {0.1, 0.2, 0.3, 0.4, 1, 2, 3, kNoData};
    const auto s = compute_band_scales(r, 0.75, 2014);
    EXPECT_DOUBLE_EQ(s.divisors[0], 0.3);
    EXPECT_DOUBLE_EQ(s.divisors[1], 3.0);
    const auto z = standardize(r, s);
    EXPECT_DOUBLE_EQ(z.at(0, 0, 2), 1.0);
    EXPECT_TRUE(std::isnan(z.at(1, 0, 3)));
    const auto back = destandardize(z, s);
    for (std::size_t i = 0; i + 1 < r.data.size(); ++i) EXPECT_NEAR(back.data[i], r.data[i], 1e-15);
    const auto parsed = decode_band_scales(encode_band_scales(s));
    EXPECT_EQ(parsed.divisors, s.divisors);
    EXPECT_EQ(parsed.source_year, 2014);
}

TEST(Scales, PresetHasSixLandsatBands) {
    const auto s = BandScales::landsat_denmark_2014();
    EXPECT_EQ(s.band_names.size(), 6u);
    EXPECT_NO_THROW(s.validate());
}

TEST(ObservationStack, DiskRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "urbanform_stack_test";
    std::filesystem::remove_all(dir);
    const auto stack = oracle::random_stack(9, 3, 2, 2, {2014, 2015}, 2);
    write_observation_stack(stack, dir.string());
    const auto back = read_observation_stack((dir / "observations.csv").string());
    ASSERT_EQ(back.observations.size(), stack.observations.size());
    for (std::size_t k = 0; k < stack.observations.size(); ++k) {
        EXPECT_EQ(back.observations[k].date, stack.observations[k].date);
        EXPECT_EQ(back.observations[k].qa, stack.observations[k].qa);
        EXPECT_EQ(encode_dmr1(back.observations[k].raster), encode_dmr1(stack.observations[k].raster));
    }
    std::filesystem::remove_all(dir);
}

TEST(QaDropout, ThirtyPercentOfSixLeavesAboutFourGoodSamples) {
    const auto sc = generate_city_timeline(4, 2014, 2014, 96);
    const auto stack = render_reflectance(sc, 2014, {6, 0.005, 0.3, 4});
    const auto cells = stack.observations.front().qa.size();
    double good = 0;
    for (const auto& o : stack.observations)
        for (auto q : o.qa) good += q;
    EXPECT_NEAR(good / static_cast<double>(cells), 4.2, 0.05);
}
