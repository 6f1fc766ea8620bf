#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "urbanform/raster.hpp"
#include "urbanform/sampler.hpp"

using namespace urbanform;

namespace {

MultiBandRaster sample_raster() {
    MultiBandRaster r(3, 2, {"red", "nir"});
    r.cell_size = 30.0;
    r.origin_x = 500000.0;
    r.origin_y = 6200000.0;
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = 0.25 * static_cast<double>(i);
    r.at(1, 1, 2) = kNoData;
    return r;
}

}  // namespace

TEST(Dmr1, RoundTripPreservesGeometryAndFloat32Values) {
    const auto r = sample_raster();
    const auto back = decode_dmr1(encode_dmr1(r));
    EXPECT_EQ(back.width, 3u);
    EXPECT_EQ(back.height, 2u);
    EXPECT_EQ(back.band_names, r.band_names);
    EXPECT_TRUE(back.same_geometry(r));
    for (std::size_t i = 0; i + 1 < r.data.size(); ++i) EXPECT_EQ(back.data[i], static_cast<double>(static_cast<float>(r.data[i])));
    EXPECT_TRUE(std::isnan(back.at(1, 1, 2)));
}

TEST(Dmr1, EncodingIsByteStable) {
    const auto r = sample_raster();
    EXPECT_EQ(encode_dmr1(r), encode_dmr1(decode_dmr1(encode_dmr1(r))));
    const auto bytes = encode_dmr1(r);
    EXPECT_EQ(bytes.substr(0, 4), "DMR1");
}

TEST(Dmr1, NanIsWrittenAsCanonicalQuietNan) {
    MultiBandRaster r(1, 1, {"b"}, kNoData);
    const auto bytes = encode_dmr1(r);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + bytes.size() - 4);
    EXPECT_EQ(detail::get_u32(p), 0x7FC00000u);
}

TEST(Dmr1, BadMagicRaisesFormatErrorAtOffsetZero) {
    auto bytes = encode_dmr1(sample_raster());
    bytes[0] = 'X';
    try {
        decode_dmr1(bytes);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
}

TEST(Dmr1, TruncatedPayloadIsRejected) {
    auto bytes = encode_dmr1(sample_raster());
    bytes.pop_back();
    EXPECT_THROW(decode_dmr1(bytes), FormatError);
    bytes += "xx";
    EXPECT_THROW(decode_dmr1(bytes), FormatError);
}

TEST(Dmr1, UnknownHeaderKeyIsRejected) {
    std::string header = "width=1\nheight=1\nbands=1\nband_names=a\ncell_size=30\norigin_x=0\norigin_y=0\ncolor=red\n";
    std::string bytes = "DMR1";
    detail::put_u32(bytes, static_cast<std::uint32_t>(header.size()));
    bytes += header + std::string(4, '\0');
    EXPECT_THROW(decode_dmr1(bytes), FormatError);
}

TEST(Dmr1, FileRoundTrip) {
    const auto path = (std::filesystem::temp_directory_path() / "urbanform_raster_test.dmr").string();
    write_raster(sample_raster(), path);
    EXPECT_EQ(encode_dmr1(read_raster(path)), encode_dmr1(sample_raster()));
    std::filesystem::remove(path);
}

TEST(Window, TruncatesAtEdgesAndRejectsOnRequest) {
    const auto r = sample_raster();
    EXPECT_EQ(window_view(r, {0, 0, 1, EdgePolicy::truncate}).size(), 4u);
    EXPECT_EQ(window_view(r, {0, 1, 1, EdgePolicy::truncate}).size(), 6u);
    EXPECT_THROW(window_view(r, {0, 0, 1, EdgePolicy::reject}), Error);
    EXPECT_THROW(window_view(r, {5, 0, 1, EdgePolicy::truncate}), Error);
    const auto cells = window_view(r, {1, 2, 0, EdgePolicy::reject});
    ASSERT_EQ(cells.size(), 1u);
    EXPECT_EQ(cells[0].values[0], r.at(0, 1, 2));
}

TEST(Crop, KeepsMapCoordinates) {
    const auto r = sample_raster();
    const auto c = crop(r, CellRegion{1, 1, 2, 3});
    EXPECT_EQ(c.width, 2u);
    EXPECT_EQ(c.height, 1u);
    EXPECT_DOUBLE_EQ(c.origin_x, r.origin_x + 30.0);
    EXPECT_DOUBLE_EQ(c.origin_y, r.origin_y - 30.0);
    EXPECT_EQ(c.at(0, 0, 0), r.at(0, 1, 1));
    EXPECT_THROW(crop(r, CellRegion{2, 0, 4, 1}), Error);
}

TEST(Raster, ValidateCatchesInconsistentSizes) {
    auto r = sample_raster();
    r.data.pop_back();
    EXPECT_THROW(r.validate(), Error);
}
