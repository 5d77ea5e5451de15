#include "voxelforge/error.hpp"
#include "voxelforge/volio.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <random>

using namespace voxelforge;

namespace {

constexpr std::size_t kHeader = 4 + 2 + 1 + 1 + 16 + 12;

Volume4D random_volume(int c, Dims3 d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 3.0f);
    Volume4D v(c, d, {1.0f, 0.5f, 2.0f});
    for (float& x : v.data()) x = n(rng);
    return v;
}

LabelMap random_labels(Dims3 d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::uint8_t labels[4] = {0, 1, 2, 4};
    LabelMap lm(d);
    for (auto& x : lm.labels()) x = labels[rng() % 4];
    return lm;
}

}  // namespace

TEST_CASE("segv round trip is bit exact") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Volume4D v = random_volume(4, {3, 5, 7}, seed);
        const auto bytes = encode_segvol(v);
        CHECK(bytes.size() == kHeader + 4 * 3 * 5 * 7 * 4);
        const auto back = std::get<Volume4D>(decode_segvol(bytes));
        CHECK(back == v);
        CHECK(std::memcmp(back.data().data(), v.data().data(), v.data().size_bytes()) == 0);

        const LabelMap lm = random_labels({4, 3, 2}, seed);
        CHECK(std::get<LabelMap>(decode_segvol(encode_segvol(lm))) == lm);
    }
}

TEST_CASE("segv files round trip through disk") {
    const auto dir = std::filesystem::temp_directory_path() / "voxelforge_test_volio";
    std::filesystem::create_directories(dir);
    const Volume4D v = random_volume(2, {2, 3, 4}, 9);
    write_segvol(v, dir / "v.segv");
    CHECK(read_volume(dir / "v.segv") == v);
    const LabelMap lm = random_labels({3, 3, 3}, 9);
    write_segvol(lm, dir / "l.segv");
    CHECK(read_labelmap(dir / "l.segv") == lm);
    CHECK(std::holds_alternative<LabelMap>(read_segvol(dir / "l.segv")));
    CHECK_THROWS_AS(read_volume(dir / "l.segv"), FormatError);
    CHECK_THROWS_AS(read_segvol(dir / "missing.segv"), IoError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("segv byte layout") {
    SUBCASE("minimal volume") {
        Volume4D v(1, {1, 1, 1});
        v.at(0, 0, 0, 0) = 0.5f;
        const auto b = encode_segvol(v);
        REQUIRE(b.size() == kHeader + 4);
        CHECK(std::memcmp(b.data(), "SEGV", 4) == 0);
        CHECK(b[4] == 1);
        CHECK(b[5] == 0);
        CHECK(b[6] == 0);  // F32
        CHECK(b[7] == 0);  // reserved
        float payload;
        std::memcpy(&payload, b.data() + kHeader, 4);
        CHECK(payload == 0.5f);
        const auto back = std::get<Volume4D>(decode_segvol(b));
        CHECK(back.header().dims == std::array<std::uint32_t, 4>{1, 1, 1, 1});
        CHECK(back.at(0, 0, 0, 0) == 0.5f);
    }
    SUBCASE("zero labelmap 2x2x2") {
        const auto b = encode_segvol(LabelMap({2, 2, 2}));
        REQUIRE(b.size() == kHeader + 8);
        CHECK(b[6] == 1);  // U8
        for (std::size_t i = kHeader; i < b.size(); ++i) CHECK(b[i] == 0);
    }
    SUBCASE("payload length for 4x8x8x8 F32") {
        CHECK(encode_segvol(Volume4D(4, {8, 8, 8})).size() - kHeader == 8192);
    }
    SUBCASE("dims are little endian c, z, y, x") {
        const auto b = encode_segvol(Volume4D(2, {3, 4, 5}));
        std::uint32_t dims[4];
        std::memcpy(dims, b.data() + 8, 16);
        CHECK(dims[0] == 2);
        CHECK(dims[1] == 3);
        CHECK(dims[2] == 4);
        CHECK(dims[3] == 5);
    }
}

TEST_CASE("segv decode errors name the field") {
    auto b = encode_segvol(LabelMap({2, 2, 2}));
    auto expect = [](std::vector<std::uint8_t> bytes, const char* field) {
        try {
            decode_segvol(bytes);
            FAIL("expected a FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find(field) != std::string::npos);
        }
    };
    {
        auto c = b;
        c[0] = 'X';
        expect(c, "magic");
    }
    {
        auto c = b;
        c[kHeader + 3] = 3;
        expect(c, "label");
    }
    {
        auto c = b;
        c.pop_back();
        expect(c, "truncated");
    }
    {
        auto c = b;
        c[6] = 7;
        expect(c, "dtype");
    }
    {
        auto c = b;
        c[7] = 1;
        expect(c, "reserved");
    }
    {
        auto c = b;
        c.push_back(0);
        expect(c, "trailing");
    }
    expect(std::vector<std::uint8_t>(b.begin(), b.begin() + 10), "truncated");
}

TEST_CASE("label to region mapping") {
    LabelMap lm({1, 1, 4});
    lm.at(0, 0, 0) = 0;
    lm.at(0, 0, 1) = 1;
    lm.at(0, 0, 2) = 2;
    lm.at(0, 0, 3) = 4;
    const RegionMasks m = labelmap_to_regions(lm);
    CHECK(m.et.values == std::vector<std::uint8_t>{0, 0, 0, 1});
    CHECK(m.tc.values == std::vector<std::uint8_t>{0, 1, 0, 1});
    CHECK(m.wt.values == std::vector<std::uint8_t>{0, 1, 1, 1});

    const RegionMasks empty = labelmap_to_regions(LabelMap({2, 2, 2}));
    for (const Mask* k : {&empty.et, &empty.tc, &empty.wt}) {
        for (auto v : k->values) CHECK(v == 0);
    }
}

TEST_CASE("regions to labelmap truth table") {
    // Every one of the 8 mask combinations in one volume.
    Mask et({1, 1, 8}), tc({1, 1, 8}), wt({1, 1, 8});
    for (int i = 0; i < 8; ++i) {
        et.values[i] = (i >> 2) & 1;
        tc.values[i] = (i >> 1) & 1;
        wt.values[i] = i & 1;
    }
    const LabelMap lm = regions_to_labelmap({et, tc, wt});
    for (int i = 0; i < 8; ++i) {
        const bool e = (i >> 2) & 1, t = (i >> 1) & 1, w = i & 1;
        const std::uint8_t expected = e ? 4 : t ? 1 : w ? 2 : 0;
        CHECK(lm.labels()[i] == expected);
        CHECK(is_valid_label(lm.labels()[i]));
    }
    CHECK_THROWS_AS(regions_to_labelmap({Mask({1, 1, 2}), tc, wt}), ShapeError);
}

TEST_CASE("regions round trip is the identity on valid labelmaps") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const LabelMap lm = random_labels({5, 4, 3}, seed);
        CHECK(regions_to_labelmap(labelmap_to_regions(lm)) == lm);
    }
}

TEST_CASE("phantom") {
    const auto [v1, l1] = generate_phantom(1, {32, 32, 32});
    const auto [v2, l2] = generate_phantom(1, {32, 32, 32});
    CHECK(v1 == v2);
    CHECK(l1 == l2);
    CHECK(v1.channels() == 4);

    const RegionMasks m = labelmap_to_regions(l1);
    std::size_t et = 0, tc = 0, wt = 0;
    for (std::size_t i = 0; i < m.et.size(); ++i) {
        CHECK((!m.et.values[i] || m.tc.values[i]));
        CHECK((!m.tc.values[i] || m.wt.values[i]));
        et += m.et.values[i];
        tc += m.tc.values[i];
        wt += m.wt.values[i];
    }
    CHECK(et > 0);
    CHECK(tc > et);
    CHECK(wt > tc);

    // Background (outside the brain) is exactly zero in every channel, and
    // every labelled voxel lies inside the brain.
    std::size_t zero = 0;
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                bool all_zero = true;
                for (int c = 0; c < 4; ++c) all_zero = all_zero && v1.at(c, z, y, x) == 0.0f;
                if (all_zero) {
                    ++zero;
                    CHECK(l1.at(z, y, x) == 0);
                }
            }
    CHECK(zero > 0);
    CHECK(v1.at(0, 0, 0, 0) == 0.0f);

    const auto [v3, l3] = generate_phantom(2, {32, 32, 32});
    CHECK_FALSE(v3 == v1);
    CHECK_THROWS_AS(generate_phantom(1, {15, 32, 32}), RangeError);
}
