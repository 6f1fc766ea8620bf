#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "oracles.hpp"
#include "urbanform/experiments.hpp"
#include "urbanform/sampler.hpp"

using namespace urbanform;

namespace {

std::vector<SampleSite> grid_sites(std::size_t h, std::size_t w) {
    std::vector<SampleSite> out;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) out.push_back({r, c, static_cast<std::uint8_t>((r * 7 + c * 3) % 4), 2014});
    return out;
}

const SyntheticStudy& small_study() {
    static const SyntheticStudy st = [] {
        StudyOptions o;
        o.size = 128;
        o.first_year = 2013;
        o.last_year = 2015;
        return build_synthetic_study(o, {2015});
    }();
    return st;
}

}  // namespace

TEST(Thinning, KeepsMinimumDistanceAgainstBruteForce) {
    const auto sites = grid_sites(40, 40);
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto kept = thin_by_distance(sites, 150.0, 30.0, seed);
        EXPECT_GT(kept.size(), 10u);
        EXPECT_GE(oracle::min_pair_distance(kept, 30.0), 150.0);
    }
}

TEST(Thinning, IsMaximalGivenItsOrder) {
    const auto sites = grid_sites(20, 20);
    const auto kept = thin_by_distance(sites, 100.0, 30.0, 9);
    std::set<std::pair<std::size_t, std::size_t>> in;
    for (const auto& s : kept) in.insert({s.row, s.col});
    // Every dropped site conflicts with some kept site.
    for (const auto& s : sites) {
        if (in.count({s.row, s.col})) continue;
        bool conflict = false;
        for (const auto& k : kept) {
            const double dr = (double(s.row) - double(k.row)) * 30.0, dc = (double(s.col) - double(k.col)) * 30.0;
            conflict = conflict || dr * dr + dc * dc < 100.0 * 100.0;
        }
        EXPECT_TRUE(conflict);
    }
}

TEST(Thinning, DeterministicPerSeed) {
    const auto sites = grid_sites(30, 30);
    EXPECT_EQ(thin_by_distance(sites, 150.0, 30.0, 4), thin_by_distance(sites, 150.0, 30.0, 4));
    EXPECT_THROW(thin_by_distance(sites, 150.0, 0.0, 4), Error);
}

TEST(Balance, CapsDominantClassAtRatioTimesRunnerUp) {
    std::vector<SampleSite> sites;
    for (std::size_t i = 0; i < 100; ++i) sites.push_back({i, 0, 0, 2014});
    for (std::size_t i = 0; i < 7; ++i) sites.push_back({i, 1, 2, 2014});
    for (std::size_t i = 0; i < 3; ++i) sites.push_back({i, 2, 3, 2014});
    const auto out = balance_classes(sites, 5.0, 1);
    std::map<int, std::size_t> n;
    for (const auto& s : out) ++n[s.label];
    EXPECT_EQ(n[0], 35u);
    EXPECT_EQ(n[2], 7u);
    EXPECT_EQ(n[3], 3u);
    EXPECT_THROW(balance_classes({sites.front()}, 5.0, 1), Error);
}

TEST(Tiles, CoverRangeAndClampToBorder) {
    EXPECT_EQ(tile_origins(0, 99, 100, 48, 24), (std::vector<std::size_t>{0, 24, 48, 52}));
    EXPECT_EQ(tile_origins(70, 80, 100, 48, 24), (std::vector<std::size_t>{52}));
    EXPECT_TRUE(tile_origins(0, 10, 20, 48, 24).empty());
}

TEST(Patches, NeverAllNotBuiltAndMaskOnlyOnSites) {
    const auto& e = small_study().at(2015);
    const auto sites = thin_by_distance(labeled_sites(e.labels.horizontal), 150.0, 30.0, 1);
    const auto ds = extract_patches(e.composite, e.labels.horizontal, sites, 48, 24);
    ASSERT_FALSE(ds.empty());
    std::set<std::pair<std::size_t, std::size_t>> site_set;
    for (const auto& s : sites) site_set.insert({s.row, s.col});
    for (const auto& p : ds.patches) {
        bool built = false;
        for (std::size_t i = 0; i < p.mask.size(); ++i) {
            if (!p.mask[i]) continue;
            EXPECT_TRUE(site_set.count({p.origin_row + i / 48, p.origin_col + i % 48}));
            built = built || p.labels[i] != 0;
        }
        EXPECT_TRUE(built);
    }
}

TEST(Split, DisjointSupervisionAndNoAllNotBuiltTrainingPatch) {
    const auto& e = small_study().at(2015);
    auto sites = thin_by_distance(labeled_sites(e.labels.horizontal), 60.0, 30.0, 1);
    sites = balance_classes(sites, 5.0, 2);
    const auto ds = extract_patches(e.composite, e.labels.horizontal, sites, 32, 16);
    const auto split = split_train_validation(ds, 0.2, 3);
    ASSERT_FALSE(split.train.empty());
    ASSERT_FALSE(split.validation.empty());
    std::set<std::pair<std::size_t, std::size_t>> val;
    for (const auto& s : patch_sites(split.validation)) val.insert({s.row, s.col});
    for (const auto& s : patch_sites(split.train)) EXPECT_FALSE(val.count({s.row, s.col}));
    for (const auto* part : {&split.train, &split.validation})
        for (const auto& p : part->patches) {
            bool built = false;
            for (std::size_t i = 0; i < p.mask.size(); ++i) built = built || (p.mask[i] && p.labels[i] != 0);
            EXPECT_TRUE(built);
        }
    EXPECT_THROW(split_train_validation(ds, 0.0, 3), Error);
}

TEST(Persistence, DatasetAndSitesRoundTrip) {
    const auto& e = small_study().at(2015);
    const auto sites = thin_by_distance(labeled_sites(e.labels.vertical), 150.0, 30.0, 5);
    const auto ds = extract_patches(e.composite, e.labels.vertical, sites, 48, 24);
    const auto dir = std::filesystem::temp_directory_path() / "urbanform_patch_test";
    std::filesystem::remove_all(dir);
    write_patch_dataset(ds, dir.string());
    const auto back = read_patch_dataset(dir.string());
    ASSERT_EQ(back.size(), ds.size());
    EXPECT_EQ(back.kind, LabelKind::vertical);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        EXPECT_EQ(back.patches[i].labels, ds.patches[i].labels);
        EXPECT_EQ(back.patches[i].mask, ds.patches[i].mask);
        EXPECT_EQ(back.patches[i].origin_col, ds.patches[i].origin_col);
        for (std::size_t k = 0; k < ds.patches[i].input.size(); ++k)
            ASSERT_EQ(back.patches[i].input[k], static_cast<double>(static_cast<float>(ds.patches[i].input[k])));
    }
    write_sites_csv(sites, (dir / "sites.csv").string());
    EXPECT_EQ(read_sites_csv((dir / "sites.csv").string()), sites);
    std::filesystem::remove_all(dir);
}

TEST(Region, SamplesStayInsideRegion) {
    const auto& e = small_study().at(2015);
    SamplingOptions o;
    o.patch_size = 32;
    o.step = 16;
    o.min_distance = 90.0;
    const CellRegion region{0, 64, 128, 128};
    const auto rs = sample_region(e.composite, e.labels.horizontal, region, o);
    for (const auto& s : rs.sites) EXPECT_TRUE(region.contains(s.row, s.col));
    for (const auto& p : rs.split.train.patches) EXPECT_LE(p.origin_col + 32, 64u);
    EXPECT_GE(oracle::min_pair_distance(rs.sites, 30.0), 90.0);
}
