#include "voxelforge/augment.hpp"

#include "voxelforge/error.hpp"

#include <algorithm>

namespace voxelforge {

void AugmentPolicy::validate() const {
    const std::pair<const char*, double> probs[] = {
        {"p_rescale", p_rescale}, {"p_shift", p_shift}, {"p_noise", p_noise}, {"p_drop", p_drop}, {"p_flip", p_flip}};
    for (auto [name, p] : probs) {
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string("augment.") + name + ": must lie in [0, 1]");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("augment.noise_sigma: must be >= 0");
}

AugmentPolicy AugmentPolicy::pipeline_a(double p_noise) {
    AugmentPolicy p;
    p.p_rescale = 0.8;
    p.p_shift = 0.0;
    p.p_noise = p_noise;
    p.p_drop = 0.16;
    p.p_flip = 0.8;
    return p;
}

AugmentPolicy AugmentPolicy::pipeline_b(double p_noise) {
    AugmentPolicy p;
    p.p_rescale = 0.2;
    p.p_shift = 0.2;
    p.p_noise = p_noise;
    p.p_drop = 0.0;
    p.p_flip = 0.5;
    return p;
}

Volume4D channel_rescale(const Volume4D& v, std::mt19937_64& rng) {
    Volume4D out = v;
    std::uniform_real_distribution<float> factor(0.9f, 1.1f);
    for (int c = 0; c < v.channels(); ++c) {
        const float f = factor(rng);
        for (float& x : out.channel(c)) x *= f;
    }
    return out;
}

Volume4D channel_shift(const Volume4D& v, std::mt19937_64& rng) {
    Volume4D out = v;
    std::uniform_real_distribution<float> offset(-0.1f, 0.1f);
    for (int c = 0; c < v.channels(); ++c) {
        const float s = offset(rng);
        for (float& x : out.channel(c)) x += s;
    }
    return out;
}

Volume4D gaussian_noise(const Volume4D& v, std::mt19937_64& rng, double sigma) {
    Volume4D out = v;
    if (sigma == 0.0) return out;
    std::normal_distribution<float> noise(0.0f, static_cast<float>(sigma));
    for (float& x : out.data()) x += noise(rng);
    return out;
}

Volume4D channel_drop(const Volume4D& v, std::mt19937_64& rng) {
    if (v.channels() < 2) throw ShapeError("channel_drop: needs at least 2 channels");
    Volume4D out = v;
    const int c = std::uniform_int_distribution<int>(0, v.channels() - 1)(rng);
    std::fill(out.channel(c).begin(), out.channel(c).end(), 0.0f);
    return out;
}

namespace {

template <class T>
void flip_grid(std::span<T> data, Dims3 d, std::array<bool, 3> axes) {
    std::vector<T> src(data.begin(), data.end());
    for (int z = 0; z < d.z; ++z) {
        const int sz = axes[0] ? d.z - 1 - z : z;
        for (int y = 0; y < d.y; ++y) {
            const int sy = axes[1] ? d.y - 1 - y : y;
            for (int x = 0; x < d.x; ++x) {
                const int sx = axes[2] ? d.x - 1 - x : x;
                data[d.index(z, y, x)] = src[d.index(sz, sy, sx)];
            }
        }
    }
}

}  // namespace

Volume4D flip_axes(const Volume4D& v, std::array<bool, 3> axes) {
    Volume4D out = v;
    for (int c = 0; c < v.channels(); ++c) flip_grid(out.channel(c), v.dims(), axes);
    return out;
}

LabelMap flip_axes(const LabelMap& lm, std::array<bool, 3> axes) {
    LabelMap out = lm;
    flip_grid(out.labels(), lm.dims(), axes);
    return out;
}

std::pair<Volume4D, std::optional<LabelMap>> random_flip(const Volume4D& v, const std::optional<LabelMap>& lm,
                                                         std::mt19937_64& rng, std::array<bool, 3>* axes_out) {
    if (lm && !(lm->dims() == v.dims())) throw ShapeError("random_flip: image and labelmap dims differ");
    std::bernoulli_distribution coin(0.5);
    std::array<bool, 3> axes{};
    for (auto& a : axes) a = coin(rng);
    if (axes_out) *axes_out = axes;
    std::optional<LabelMap> flipped_lm;
    if (lm) flipped_lm = flip_axes(*lm, axes);
    return {flip_axes(v, axes), std::move(flipped_lm)};
}

std::pair<Volume4D, LabelMap> apply_policy(const Volume4D& v, const LabelMap& lm, const AugmentPolicy& policy,
                                           std::mt19937_64& rng, AugmentRecord* record) {
    policy.validate();
    if (!(lm.dims() == v.dims())) throw ShapeError("apply_policy: image and labelmap dims differ");
    AugmentRecord rec;
    Volume4D img = v;
    LabelMap labels = lm;
    // Every trial draws a uniform so the stream position does not depend on
    // which augmentations are enabled.
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto fires = [&](double p) { return u(rng) < p; };

    if ((rec.rescale = fires(policy.p_rescale))) img = channel_rescale(img, rng);
    if ((rec.shift = fires(policy.p_shift))) img = channel_shift(img, rng);
    if ((rec.noise = fires(policy.p_noise))) img = gaussian_noise(img, rng, policy.noise_sigma);
    if ((rec.drop = fires(policy.p_drop)) && img.channels() >= 2) img = channel_drop(img, rng);
    if ((rec.flip = fires(policy.p_flip))) {
        auto [fv, flm] = random_flip(img, labels, rng, &rec.flipped_axes);
        img = std::move(fv);
        labels = std::move(*flm);
    }
    if (record) *record = rec;
    return {std::move(img), std::move(labels)};
}

}  // namespace voxelforge
