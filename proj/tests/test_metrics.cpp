#include "oracles.hpp"
#include "voxelforge/error.hpp"
#include "voxelforge/metrics.hpp"

#include <doctest.h>

#include <random>

using namespace voxelforge;

namespace {

bool same_counts(const ConfusionCounts& c, const oracle::Counts& o) {
    return c.tp == o.tp && c.fp == o.fp && c.fn == o.fn && c.tn == o.tn;
}

Mask shifted(const Mask& m, int dz, int dy, int dx) {
    Mask out(m.dims);
    for (int z = 0; z < m.dims.z; ++z)
        for (int y = 0; y < m.dims.y; ++y)
            for (int x = 0; x < m.dims.x; ++x) {
                const int a = z - dz, b = y - dy, c = x - dx;
                if (a >= 0 && b >= 0 && c >= 0 && a < m.dims.z && b < m.dims.y && c < m.dims.x)
                    out.at(z, y, x) = m.at(a, b, c);
            }
    return out;
}

}  // namespace

TEST_CASE("confusion counts and ratios") {
    Mask a({1, 1, 6}), b({1, 1, 6});
    a.values = {1, 1, 1, 0, 0, 0};
    CHECK(confusion(a, a) == ConfusionCounts{3, 0, 0, 3});
    b.values = {0, 0, 0, 1, 1, 0};
    CHECK(confusion(a, b) == ConfusionCounts{0, 3, 2, 1});
    CHECK(std::abs(dice(ConfusionCounts{3, 1, 2, 0}) - 6.0 / 9.0) < 1e-15);
    CHECK(dice(confusion(a, a)) == 1.0);
    CHECK(dice(confusion(Mask({1, 1, 6}), a)) == 0.0);
    CHECK(dice(confusion(Mask({1, 1, 6}), Mask({1, 1, 6}))) == 1.0);
    CHECK(sensitivity(confusion(a, a)) == 1.0);
    CHECK(specificity(confusion(a, a)) == 1.0);
    const Mask all({1, 1, 6}, 1);
    CHECK(sensitivity(confusion(all, a)) == 1.0);
    CHECK(specificity(confusion(all, a)) == 0.0);
    CHECK(sensitivity(confusion(a, Mask({1, 1, 6}))) == 1.0);
    CHECK(specificity(confusion(a, all)) == 1.0);
    CHECK_THROWS_AS(confusion(a, Mask({1, 1, 5})), ShapeError);
}

TEST_CASE("surface voxels") {
    Mask one({5, 5, 5});
    one.at(2, 2, 2) = 1;
    CHECK(surface_voxels(one) == std::vector<Coord>{{2, 2, 2}});
    Mask cube({5, 5, 5});
    for (int z = 1; z < 4; ++z)
        for (int y = 1; y < 4; ++y)
            for (int x = 1; x < 4; ++x) cube.at(z, y, x) = 1;
    const auto s = surface_voxels(cube);
    CHECK(s.size() == 26);
    CHECK(std::find(s.begin(), s.end(), Coord{2, 2, 2}) == s.end());
    CHECK(surface_voxels(Mask({3, 3, 3})).empty());
    // The volume edge counts as outside.
    CHECK(surface_voxels(Mask({3, 3, 3}, 1)).size() == 26);
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        const Mask m = oracle::random_mask({5, 6, 4}, 0.6, rng);
        CHECK(surface_voxels(m) == oracle::surface(m));
    }
}

TEST_CASE("hd95 hand cases") {
    Mask a({5, 5, 8}), b({5, 5, 8});
    a.at(2, 2, 1) = 1;
    b.at(2, 2, 4) = 1;
    CHECK(hd95(a, b) == 3.0);
    CHECK(hd95(a, a) == 0.0);
    CHECK(hd95(Mask({5, 5, 8}), Mask({5, 5, 8})) == 0.0);
    const double diag = std::sqrt(25.0 + 25.0 + 64.0);
    CHECK(volume_diagonal({5, 5, 8}, {1, 1, 1}) == diag);
    CHECK(hd95(Mask({5, 5, 8}), b) == diag);
    CHECK(hd95(a, Mask({5, 5, 8})) == diag);
    CHECK(hd95(a, b, {1.0, 1.0, 0.5}) == 1.5);
    CHECK(hd95(Mask({5, 5, 8}), b, {2, 1, 1}) == std::sqrt(100.0 + 25.0 + 64.0));
    CHECK_THROWS_AS(hd95(a, b, {0.0, 1.0, 1.0}), RangeError);
}

TEST_CASE("metrics equal brute force on 100 random 5^3 pairs") {
    std::mt19937_64 rng(2026);
    std::uniform_real_distribution<double> density(0.05, 0.8);
    for (int t = 0; t < 100; ++t) {
        const Mask p = oracle::random_mask({5, 5, 5}, density(rng), rng);
        const Mask r = oracle::random_mask({5, 5, 5}, density(rng), rng);
        const auto c = confusion(p, r);
        const auto o = oracle::confusion(p, r);
        REQUIRE(same_counts(c, o));
        CHECK(dice(c) == oracle::dice(o));
        CHECK(sensitivity(c) == oracle::sensitivity(o));
        CHECK(specificity(c) == oracle::specificity(o));
        CHECK(hd95(p, r) == oracle::surface_percentile(p, r, {1, 1, 1}, 95));
        CHECK(hd95(p, r, {1.5, 0.7, 2.0}) == oracle::surface_percentile(p, r, {1.5, 0.7, 2.0}, 95));
        CHECK(surface_distance_percentile(p, r, {1, 1, 1}, 100) == oracle::surface_percentile(p, r, {1, 1, 1}, 100));
    }
}

TEST_CASE("metric properties") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 50; ++t) {
        const Mask p = oracle::random_mask({6, 6, 6}, 0.2, rng);
        const Mask r = oracle::random_mask({6, 6, 6}, 0.3, rng);
        CHECK(dice(confusion(p, r)) == dice(confusion(r, p)));
        CHECK(hd95(p, r) == hd95(r, p));
        CHECK(hd95(p, r) <= surface_distance_percentile(p, r, {1, 1, 1}, 100));
        CHECK(hd95(p, r, {2, 2, 2}) == 2.0 * hd95(p, r));
        CHECK(hd95(p, r, {0.5, 1.5, 3.0}) * 2.0 == hd95(p, r, {1.0, 3.0, 6.0}));
        CHECK(hd95(p, r) == oracle::surface_percentile(p, r, {1, 1, 1}, 95));
        const auto c = confusion(p, r);
        CHECK(c.total() == 216);
        for (double m : {dice(c), sensitivity(c), specificity(c)}) CHECK((m >= 0.0 && m <= 1.0));
    }
}

TEST_CASE("evaluate case") {
    const auto [v, lm] = generate_phantom(2, {32, 32, 32});
    const auto same = evaluate_case(lm, lm, {1, 1, 1}, "x");
    CHECK(same.id == "x");
    for (Region r : kRegions) {
        CHECK(same[r].dice == 1.0);
        CHECK(same[r].hd95_mm == 0.0);
        CHECK(same[r].sensitivity == 1.0);
        CHECK(same[r].specificity == 1.0);
    }

    // Reference without ET, prediction with ET.
    LabelMap ref = lm;
    for (auto& x : ref.labels())
        if (x == 4) x = 1;
    const auto pen = evaluate_case(lm, ref, {1, 1, 1});
    CHECK(pen[Region::ET].dice == 0.0);
    CHECK(pen[Region::ET].hd95_mm == volume_diagonal({32, 32, 32}, {1, 1, 1}));
    CHECK(pen[Region::TC].dice == 1.0);

    // Phantom against a shifted copy, region by region through the oracles.
    LabelMap moved(lm.dims());
    const auto rm = labelmap_to_regions(lm);
    const RegionMasks sm{shifted(rm.et, 1, 0, 2), shifted(rm.tc, 1, 0, 2), shifted(rm.wt, 1, 0, 2)};
    moved = regions_to_labelmap(sm);
    const std::array<double, 3> spacing{1.0, 1.2, 0.8};
    const auto e = evaluate_case(moved, lm, spacing);
    const Mask* pm[3] = {&sm.et, &sm.tc, &sm.wt};
    const Mask* rr[3] = {&rm.et, &rm.tc, &rm.wt};
    for (int k = 0; k < 3; ++k) {
        const auto o = oracle::confusion(*pm[k], *rr[k]);
        CHECK(e.regions[k].dice == oracle::dice(o));
        CHECK(e.regions[k].sensitivity == oracle::sensitivity(o));
        CHECK(e.regions[k].specificity == oracle::specificity(o));
        CHECK(e.regions[k].hd95_mm == oracle::surface_percentile(*pm[k], *rr[k], spacing, 95));
    }
    CHECK_THROWS_AS(evaluate_case(lm, LabelMap({32, 32, 16}), {1, 1, 1}), ShapeError);
}

TEST_CASE("aggregate and report") {
    CaseMetrics a{"a", {}}, b{"b", {}};
    for (int k = 0; k < 3; ++k) {
        a.regions[k] = {0.8, 0.9, 0.99, 2.0 + k};
        b.regions[k] = {0.6, 0.7, 0.97, 4.0 + k};
    }
    const auto single = aggregate({a});
    CHECK(single.mean[0].dice == 0.8);
    CHECK(single.std[0].dice == 0.0);
    const auto two = aggregate({a, b});
    CHECK(std::abs(two.mean[1].dice - 0.7) < 1e-15);
    CHECK(std::abs(two.std[1].dice - 0.1) < 1e-15);
    CHECK(std::abs(two.mean[2].hd95_mm - 5.0) < 1e-15);
    CHECK(std::abs(two.std[2].hd95_mm - 1.0) < 1e-15);
    const auto swapped = aggregate({b, a});
    CHECK(swapped.mean[0].dice == two.mean[0].dice);
    CHECK(swapped.std[0].hd95_mm == two.std[0].hd95_mm);

    const auto j = report_to_json(two);
    const auto back = report_from_json(j);
    CHECK(back.cases.size() == 2);
    CHECK(back.cases[1].id == "b");
    CHECK(back.mean[2].hd95_mm == two.mean[2].hd95_mm);
    CHECK(back.std[1].dice == two.std[1].dice);
    CHECK_THROWS_AS(report_from_json(nlohmann::json::parse(R"({"cases": 3})")), FormatError);

    const std::string table = report_table(two);
    for (const char* row : {"Dice", "Sensitivity", "Specificity", "Hausdorff (95%)"})
        CHECK(table.find(row) != std::string::npos);
    CHECK(table.find("ET") < table.find("WT"));
    CHECK(table.find("WT") < table.find("TC"));
}
