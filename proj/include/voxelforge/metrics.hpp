#pragma once

#include "voxelforge/volio.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace voxelforge {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    bool operator==(const ConfusionCounts&) const = default;
};

ConfusionCounts confusion(const Mask& pred, const Mask& ref);

// Empty-denominator conventions: dice of two empty masks is 1, sensitivity
// with an empty reference is 1, specificity with an all-positive reference is 1.
double dice(const ConfusionCounts& c);
double sensitivity(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);

using Coord = std::array<int, 3>;  // z, y, x

/// Mask voxels with at least one of the six face neighbours outside the mask
/// (outside the volume counts as outside). Row-major order.
std::vector<Coord> surface_voxels(const Mask& mask);

/// Length of the volume diagonal in mm; the distance assigned when exactly
/// one of the two masks is empty.
double volume_diagonal(Dims3 dims, std::array<double, 3> spacing_mm);

/// Symmetric surface distance at the given nearest-rank percentile: the max of
/// the two directed percentiles. percent = 95 gives HD95, 100 the Hausdorff
/// distance. Both empty gives 0.
double surface_distance_percentile(const Mask& pred, const Mask& ref, std::array<double, 3> spacing_mm,
                                   double percent);
double hd95(const Mask& pred, const Mask& ref, std::array<double, 3> spacing_mm = {1.0, 1.0, 1.0});

enum class Region { ET = 0, TC = 1, WT = 2 };
inline constexpr std::array<Region, 3> kRegions{Region::ET, Region::TC, Region::WT};
const char* region_name(Region r);

struct RegionMetrics {
    double dice = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    double hd95_mm = 0.0;
};

struct CaseMetrics {
    std::string id;
    std::array<RegionMetrics, 3> regions;  // indexed by Region

    const RegionMetrics& operator[](Region r) const { return regions[static_cast<int>(r)]; }
};

CaseMetrics evaluate_case(const LabelMap& pred, const LabelMap& ref, std::array<double, 3> spacing_mm,
                          std::string id = {});

struct MetricReport {
    std::vector<CaseMetrics> cases;
    std::array<RegionMetrics, 3> mean;
    std::array<RegionMetrics, 3> std;  // population
};

/// Per-region mean and population std over cases, in the given order.
MetricReport aggregate(std::vector<CaseMetrics> cases);

nlohmann::json report_to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);

/// Rows Dice, Sensitivity, Specificity, Hausdorff (95%); columns ET, WT, TC.
std::string report_table(const MetricReport& r);

}  // namespace voxelforge
