#pragma once

#include "voxelforge/tensor.hpp"
#include "voxelforge/unet3d.hpp"
#include "voxelforge/volio.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace voxelforge {

// ---- test-time augmentation ------------------------------------------------------

/// Flips along the chosen axes followed by `rotation` quarter-turns in the
/// axial (y, x) plane. flip_y is redundant (flip_y = rot180 . flip_x) and is
/// folded away by canonical().
struct TTATransform {
    int rotation = 0;
    bool flip_y = false;
    bool flip_x = false;
    bool flip_z = false;

    TTATransform canonical() const;
    std::string name() const;
    bool operator==(const TTATransform&) const = default;
};

/// The 16 canonical transforms, identity first.
std::vector<TTATransform> enumerate_tta();

/// Transform composed of applying `first`, then `second`.
TTATransform compose(const TTATransform& first, const TTATransform& second);
TTATransform inverse(const TTATransform& t);

// Throw ShapeError for an odd rotation when y and x extents differ.
Volume4D apply_tta(const TTATransform& t, const Volume4D& v);
Volume4D invert_tta(const TTATransform& t, const Volume4D& v);
LabelMap apply_tta(const TTATransform& t, const LabelMap& lm);
LabelMap invert_tta(const TTATransform& t, const LabelMap& lm);
template <class T>
Grid<T> apply_tta(const TTATransform& t, const Grid<T>& g);
template <class T>
Grid<T> invert_tta(const TTATransform& t, const Grid<T>& g);
// Acts on every (batch, channel) plane of a 5-axis tensor.
tn::Tensor apply_tta(const TTATransform& t, const tn::Tensor& x);
tn::Tensor invert_tta(const TTATransform& t, const tn::Tensor& x);

/// True when the transform can act on volumes with these dims.
bool tta_applicable(const TTATransform& t, Dims3 dims);

// ---- ensembling --------------------------------------------------------------------

struct EnsembleSpec {
    std::vector<ModelParams> checkpoints;
    bool tta = true;
    double threshold = 0.5;

    void validate() const;
};

struct PredictionStats {
    int passes = 0;
    std::vector<TTATransform> transforms;  // transforms actually used
};

/// Pads to a multiple of 8, averages the sigmoid outputs over every checkpoint
/// and transform (checkpoint-major order), and removes the padding.
RegionProbs predict_regions(const EnsembleSpec& spec, const Volume4D& v, PredictionStats* stats = nullptr);

/// mask = p >= threshold
RegionMasks binarize(const RegionProbs& p, double threshold = 0.5);

LabelMap reconstruct(const RegionMasks& m, std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f});

// ---- merging -----------------------------------------------------------------------

/// Resolution table indexed [label B][label A] over labels (0, 1, 2, 4).
inline constexpr std::array<std::array<std::uint8_t, 4>, 4> kMergeTable{{
    {0, 1, 0, 4},
    {0, 1, 2, 4},
    {2, 1, 2, 4},
    {0, 1, 2, 4},
}};

/// Merged label for one voxel, A's label from pipeline A and B's from B.
std::uint8_t merge_label(std::uint8_t a, std::uint8_t b);

LabelMap merge_labelmaps(const LabelMap& a, const LabelMap& b);

}  // namespace voxelforge
