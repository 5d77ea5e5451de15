#pragma once

#include "voxelforge/volio.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace voxelforge {

enum class NormMode {
    MinMaxClip,     // pipeline A: clip to [p1, p99] of non-zero voxels, then min-max to [0, 1]
    ZScoreNonzero,  // pipeline B: z-score of non-zero voxels, zeros untouched
};

/// Axis-aligned box, inclusive min and exclusive max, ordered (z, y, x).
struct BBox {
    std::array<int, 3> min{0, 0, 0};
    std::array<int, 3> max{0, 0, 0};

    Dims3 extent() const { return {max[0] - min[0], max[1] - min[1], max[2] - min[2]}; }
    bool operator==(const BBox&) const = default;
};

struct PreprocConfig {
    NormMode mode = NormMode::MinMaxClip;
    Dims3 patch{128, 128, 128};
    int pad_multiple = 8;

    void validate() const;
};

/// Low/high padding applied to each spatial axis, so the original grid can be
/// recovered exactly.
struct Padding {
    Dims3 original;
    std::array<int, 3> before{0, 0, 0};
    std::array<int, 3> after{0, 0, 0};

    BBox interior() const;
};

/// Nearest-rank percentile of an ascending-sorted sample: element at index
/// ceil(percent / 100 * n) - 1, clamped to the first element.
double nearest_rank(std::span<const double> sorted, double percent);

std::vector<float> clip_percentile_minmax(std::span<const float> channel);
std::vector<float> zscore_nonzero(std::span<const float> channel);

/// Normalizes every channel independently with the given mode.
Volume4D normalize(const Volume4D& v, NormMode mode);

BBox brain_bounding_box(const Volume4D& v);

Volume4D crop_to_bbox(const Volume4D& v, const BBox& b);
LabelMap crop_to_bbox(const LabelMap& lm, const BBox& b);
template <class T>
Grid<T> crop_to_bbox(const Grid<T>& g, const BBox& b);

/// Writes `part` back into a zero volume of `full` dims at the box position.
Volume4D embed(const Volume4D& part, const BBox& b, Dims3 full);
LabelMap embed(const LabelMap& part, const BBox& b, Dims3 full);

/// Zero-pads symmetrically (extra voxel on the high side) up to `target` per axis.
std::pair<Volume4D, Padding> pad_to_size(const Volume4D& v, Dims3 target);
LabelMap pad_to_size(const LabelMap& lm, const Padding& p);

/// Pads each spatial dim up to the next multiple of m on the high side.
std::pair<Volume4D, Padding> pad_to_multiple(const Volume4D& v, int m);
Volume4D unpad(const Volume4D& v, const Padding& p);
template <class T>
Grid<T> unpad(const Grid<T>& g, const Padding& p);

/// Crops a patch at a uniform random valid offset, padding first when the
/// input is smaller than the patch along any axis.
std::pair<Volume4D, LabelMap> random_crop_patch(const Volume4D& v, const LabelMap& lm, Dims3 patch,
                                                std::mt19937_64& rng);

/// Offset that random_crop_patch would draw for an input of `dims` (after padding).
std::array<int, 3> draw_crop_offset(Dims3 dims, Dims3 patch, std::mt19937_64& rng);

}  // namespace voxelforge
