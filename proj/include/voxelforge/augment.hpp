#pragma once

#include "voxelforge/volio.hpp"

#include <array>
#include <optional>
#include <random>

namespace voxelforge {

struct AugmentPolicy {
    double p_rescale = 0.0;
    double p_shift = 0.0;
    double p_noise = 0.0;
    double p_drop = 0.0;
    double p_flip = 0.0;
    double noise_sigma = 0.1;

    void validate() const;

    // Pipeline presets. The noise probability is not given for either
    // pipeline and defaults to 0.2.
    static AugmentPolicy pipeline_a(double p_noise = 0.2);
    static AugmentPolicy pipeline_b(double p_noise = 0.2);
};

/// Which augmentations fired in one apply_policy call, and with what draw.
struct AugmentRecord {
    bool rescale = false;
    bool shift = false;
    bool noise = false;
    bool drop = false;
    bool flip = false;
    std::array<bool, 3> flipped_axes{false, false, false};
};

Volume4D channel_rescale(const Volume4D& v, std::mt19937_64& rng);
Volume4D channel_shift(const Volume4D& v, std::mt19937_64& rng);
Volume4D gaussian_noise(const Volume4D& v, std::mt19937_64& rng, double sigma = 0.1);
Volume4D channel_drop(const Volume4D& v, std::mt19937_64& rng);

/// Flips each spatial axis independently with probability 1/2.
std::pair<Volume4D, std::optional<LabelMap>> random_flip(const Volume4D& v, const std::optional<LabelMap>& lm,
                                                         std::mt19937_64& rng,
                                                         std::array<bool, 3>* axes_out = nullptr);

Volume4D flip_axes(const Volume4D& v, std::array<bool, 3> axes);
LabelMap flip_axes(const LabelMap& lm, std::array<bool, 3> axes);

/// Fires rescale, shift, noise, drop and flip in that order, each with its
/// own probability.
std::pair<Volume4D, LabelMap> apply_policy(const Volume4D& v, const LabelMap& lm, const AugmentPolicy& policy,
                                           std::mt19937_64& rng, AugmentRecord* record = nullptr);

}  // namespace voxelforge
