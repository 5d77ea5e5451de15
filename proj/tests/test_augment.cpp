#include "oracles.hpp"
#include "voxelforge/augment.hpp"
#include "voxelforge/error.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace voxelforge;

namespace {

Volume4D ramp(int channels, Dims3 d) {
    Volume4D v(channels, d);
    float k = 1.0f;
    for (float& x : v.data()) x = (k += 0.25f);
    return v;
}

}  // namespace

TEST_CASE("policy presets") {
    const auto a = AugmentPolicy::pipeline_a();
    CHECK(a.p_rescale == 0.8);
    CHECK(a.p_shift == 0.0);
    CHECK(a.p_noise == 0.2);
    CHECK(a.p_drop == 0.16);
    CHECK(a.p_flip == 0.8);
    const auto b = AugmentPolicy::pipeline_b();
    CHECK(b.p_rescale == 0.2);
    CHECK(b.p_shift == 0.2);
    CHECK(b.p_drop == 0.0);
    CHECK(b.p_flip == 0.5);
    CHECK(a.noise_sigma == 0.1);
    AugmentPolicy bad;
    bad.p_flip = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("channel rescale ratio is constant per channel and within bounds") {
    std::mt19937_64 rng(1);
    const auto v = ramp(4, {2, 3, 4});
    for (int draw = 0; draw < 1000; ++draw) {
        const auto out = channel_rescale(v, rng);
        for (int c = 0; c < 4; ++c) {
            const double r0 = out.channel(c)[0] / v.channel(c)[0];
            CHECK(r0 >= 0.9);
            CHECK(r0 <= 1.1);
            for (std::size_t i = 0; i < v.channel(c).size(); ++i)
                REQUIRE(std::abs(out.channel(c)[i] / v.channel(c)[i] - r0) < 1e-5);
        }
    }
    Volume4D zero(2, {2, 2, 2});
    CHECK(channel_rescale(zero, rng) == zero);
}

TEST_CASE("channel shift offsets are uniform on [-0.1, 0.1]") {
    std::mt19937_64 rng(2);
    const auto v = ramp(4, {2, 2, 2});
    std::vector<double> offsets;
    for (int draw = 0; draw < 1000; ++draw) {
        const auto out = channel_shift(v, rng);
        CHECK(out.dims() == v.dims());
        for (int c = 0; c < 4; ++c) {
            const double d0 = static_cast<double>(out.channel(c)[0]) - v.channel(c)[0];
            for (std::size_t i = 0; i < v.channel(c).size(); ++i)
                REQUIRE(std::abs((static_cast<double>(out.channel(c)[i]) - v.channel(c)[i]) - d0) < 1e-5);
            offsets.push_back(d0);
        }
    }
    // Kolmogorov-Smirnov at alpha = 0.01; offsets recovered from float data
    // carry ~1e-6 error, far below the critical value.
    const double critical = 1.628 / std::sqrt(static_cast<double>(offsets.size()));
    CHECK(oracle::ks_uniform(offsets, -0.1, 0.1) < critical);
}

TEST_CASE("gaussian noise moments") {
    std::mt19937_64 rng(3);
    Volume4D v(1, {100, 100, 100});
    const auto out = gaussian_noise(v, rng, 0.1);
    std::vector<double> n(out.data().begin(), out.data().end());
    const auto m = oracle::two_pass(n);
    CHECK(std::abs(m.mean) < 3 * 0.1 / std::sqrt(1e6));
    CHECK(std::abs(m.stddev - 0.1) < 0.005);
    CHECK(gaussian_noise(ramp(2, {2, 2, 2}), rng, 0.0) == ramp(2, {2, 2, 2}));
}

TEST_CASE("channel drop") {
    std::mt19937_64 rng(4);
    const auto v = ramp(4, {2, 2, 2});
    std::vector<long> counts(4, 0);
    for (int draw = 0; draw < 10000; ++draw) {
        const auto out = channel_drop(v, rng);
        int dropped = -1, zeroed = 0;
        for (int c = 0; c < 4; ++c) {
            bool all_zero = true, same = true;
            for (std::size_t i = 0; i < v.channel(c).size(); ++i) {
                all_zero = all_zero && out.channel(c)[i] == 0.0f;
                same = same && out.channel(c)[i] == v.channel(c)[i];
            }
            if (all_zero) {
                dropped = c;
                ++zeroed;
            } else {
                REQUIRE(same);
            }
        }
        REQUIRE(zeroed == 1);
        ++counts[dropped];
    }
    // chi-square with 3 degrees of freedom, alpha = 0.01
    CHECK(oracle::chi_square_uniform(counts) < 11.34);

    const auto twice = channel_drop(channel_drop(v, rng), rng);
    int zeroed = 0;
    for (int c = 0; c < 4; ++c) {
        bool all_zero = true;
        for (float x : twice.channel(c)) all_zero = all_zero && x == 0.0f;
        zeroed += all_zero;
    }
    CHECK(zeroed >= 1);
    CHECK(zeroed <= 2);
    CHECK_THROWS_AS(channel_drop(ramp(1, {2, 2, 2}), rng), ShapeError);
}

TEST_CASE("flips") {
    const auto v = ramp(2, {3, 4, 5});
    LabelMap lm({3, 4, 5});
    lm.at(0, 1, 2) = 4;
    lm.at(2, 3, 4) = 1;
    for (int mask = 0; mask < 8; ++mask) {
        const std::array<bool, 3> axes{(mask & 4) != 0, (mask & 2) != 0, (mask & 1) != 0};
        CHECK(flip_axes(flip_axes(v, axes), axes) == v);
        const auto f = flip_axes(lm, axes);
        CHECK(f.at(axes[0] ? 2 : 0, axes[1] ? 2 : 1, axes[2] ? 2 : 2) == 4);
        std::array<int, 5> hist{};
        for (auto x : f.labels()) ++hist[x == 4 ? 3 : x];
        CHECK(hist[3] == 1);
        CHECK(hist[1] == 1);
    }
    CHECK(flip_axes(v, {false, false, false}) == v);
    CHECK(flip_axes(v, {false, false, true}).at(1, 1, 2, 0) == v.at(1, 1, 2, 4));

    std::mt19937_64 rng(6);
    std::array<long, 3> fired{};
    for (int i = 0; i < 4000; ++i) {
        std::array<bool, 3> axes{};
        const auto [fv, fl] = random_flip(v, lm, rng, &axes);
        REQUIRE(fv == flip_axes(v, axes));
        REQUIRE(*fl == flip_axes(lm, axes));
        for (int a = 0; a < 3; ++a) fired[a] += axes[a];
    }
    for (long f : fired) CHECK(std::abs(f / 4000.0 - 0.5) < 0.03);
    CHECK_THROWS_AS(random_flip(v, LabelMap({3, 4, 4}), rng), ShapeError);
}

TEST_CASE("apply policy fire rates, invariants and determinism") {
    const auto [v, lm] = generate_phantom(3, {16, 16, 16});
    const AugmentPolicy policy = AugmentPolicy::pipeline_a(0.3);
    std::mt19937_64 rng(7);
    std::array<long, 5> fired{};
    const int n = 2000;
    for (int i = 0; i < n; ++i) {
        AugmentRecord r;
        const auto [av, al] = apply_policy(v, lm, policy, rng, &r);
        fired[0] += r.rescale;
        fired[1] += r.shift;
        fired[2] += r.noise;
        fired[3] += r.drop;
        fired[4] += r.flip;
        if (i < 50) {
            CHECK(av.dims() == v.dims());
            CHECK(av.spacing() == v.spacing());
            for (auto x : al.labels()) REQUIRE(is_valid_label(x));
            if (!r.flip) CHECK(al == lm);
        }
    }
    const double expected[5] = {0.8, 0.0, 0.3, 0.16, 0.8};
    for (int k = 0; k < 5; ++k) {
        const double p = expected[k];
        const double tol = 4.0 * std::sqrt(p * (1 - p) / n) + 1e-12;
        CHECK(std::abs(fired[k] / static_cast<double>(n) - p) <= tol);
    }

    std::mt19937_64 a(42), b(42);
    const auto ra = apply_policy(v, lm, AugmentPolicy::pipeline_b(), a);
    const auto rb = apply_policy(v, lm, AugmentPolicy::pipeline_b(), b);
    CHECK(ra.first == rb.first);
    CHECK(ra.second == rb.second);

    std::mt19937_64 c(1);
    CHECK(apply_policy(v, lm, AugmentPolicy{}, c).first == v);
}
