#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <variant>
#include <vector>

namespace voxelforge {

/// Spatial extent of a 3D grid, ordered (z, y, x). x varies fastest in memory.
struct Dims3 {
    int z = 0;
    int y = 0;
    int x = 0;

    std::size_t size() const { return static_cast<std::size_t>(z) * y * x; }
    std::size_t index(int iz, int iy, int ix) const {
        return (static_cast<std::size_t>(iz) * y + iy) * x + ix;
    }
    int operator[](int axis) const { return axis == 0 ? z : (axis == 1 ? y : x); }
    int& operator[](int axis) { return axis == 0 ? z : (axis == 1 ? y : x); }
    bool operator==(const Dims3&) const = default;
};

/// Dense scalar 3D array.
template <class T>
struct Grid {
    Dims3 dims;
    std::vector<T> values;

    Grid() = default;
    explicit Grid(Dims3 d, T fill = T{}) : dims(d), values(d.size(), fill) {}

    T& at(int z, int y, int x) { return values[dims.index(z, y, x)]; }
    const T& at(int z, int y, int x) const { return values[dims.index(z, y, x)]; }
    std::size_t size() const { return values.size(); }
    bool operator==(const Grid&) const = default;
};

using Mask = Grid<std::uint8_t>;
using Field = Grid<double>;

enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

struct VolumeHeader {
    std::array<std::uint32_t, 4> dims{1, 1, 1, 1};  // channels, z, y, x
    std::array<float, 3> spacing_mm{1.0f, 1.0f, 1.0f};  // z, y, x
    DType dtype = DType::F32;

    Dims3 spatial() const {
        return {static_cast<int>(dims[1]), static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    }
    int channels() const { return static_cast<int>(dims[0]); }
    std::size_t voxel_count() const { return spatial().size(); }
    std::size_t element_count() const { return voxel_count() * dims[0]; }
    bool operator==(const VolumeHeader&) const = default;

    /// Throws FormatError naming the first invalid field.
    void validate() const;
};

/// Multi-channel intensity volume (T1, T1Gd, T2, FLAIR for brain MRI).
class Volume4D {
public:
    Volume4D() = default;
    Volume4D(int channels, Dims3 dims, std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f});
    Volume4D(VolumeHeader header, std::vector<float> data);

    const VolumeHeader& header() const { return header_; }
    Dims3 dims() const { return header_.spatial(); }
    int channels() const { return header_.channels(); }
    std::array<float, 3> spacing() const { return header_.spacing_mm; }

    std::span<float> channel(int c);
    std::span<const float> channel(int c) const;
    float& at(int c, int z, int y, int x) { return data_[offset(c, z, y, x)]; }
    float at(int c, int z, int y, int x) const { return data_[offset(c, z, y, x)]; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    Grid<float> channel_grid(int c) const;
    void set_channel(int c, const Grid<float>& g);

    bool operator==(const Volume4D&) const = default;

private:
    std::size_t offset(int c, int z, int y, int x) const {
        return static_cast<std::size_t>(c) * header_.voxel_count() + header_.spatial().index(z, y, x);
    }

    VolumeHeader header_;
    std::vector<float> data_;
};

/// Integer labelmap with BraTS labels {0, 1, 2, 4}.
class LabelMap {
public:
    LabelMap() = default;
    explicit LabelMap(Dims3 dims, std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f});
    LabelMap(VolumeHeader header, std::vector<std::uint8_t> labels);

    const VolumeHeader& header() const { return header_; }
    Dims3 dims() const { return header_.spatial(); }
    std::array<float, 3> spacing() const { return header_.spacing_mm; }

    std::uint8_t& at(int z, int y, int x) { return labels_[header_.spatial().index(z, y, x)]; }
    std::uint8_t at(int z, int y, int x) const { return labels_[header_.spatial().index(z, y, x)]; }
    std::span<std::uint8_t> labels() { return labels_; }
    std::span<const std::uint8_t> labels() const { return labels_; }

    bool operator==(const LabelMap&) const = default;

private:
    VolumeHeader header_;
    std::vector<std::uint8_t> labels_;
};

bool is_valid_label(std::uint8_t v);

/// Binary masks for enhancing tumor, tumor core and whole tumor.
struct RegionMasks {
    Mask et, tc, wt;
};

/// Per-region probabilities in [0, 1].
struct RegionProbs {
    Field et, tc, wt;
};

using SegvolObject = std::variant<Volume4D, LabelMap>;

SegvolObject read_segvol(const std::filesystem::path& path);
Volume4D read_volume(const std::filesystem::path& path);
LabelMap read_labelmap(const std::filesystem::path& path);

void write_segvol(const Volume4D& v, const std::filesystem::path& path);
void write_segvol(const LabelMap& lm, const std::filesystem::path& path);

// In-memory encode/decode of the same byte layout the file functions use.
std::vector<std::uint8_t> encode_segvol(const Volume4D& v);
std::vector<std::uint8_t> encode_segvol(const LabelMap& lm);
SegvolObject decode_segvol(std::span<const std::uint8_t> bytes);

RegionMasks labelmap_to_regions(const LabelMap& lm);

/// ET is kept as is; NET = TC - ET, edema = WT - TC. A voxel with ET set is
/// labelled 4 regardless of the other two masks.
LabelMap regions_to_labelmap(const RegionMasks& m, std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f});

/// Synthetic brain with a nested tumor: edema shell around an enhancing ring
/// around a non-enhancing core. Deterministic per seed; background is 0.
std::pair<Volume4D, LabelMap> generate_phantom(std::uint64_t seed, Dims3 dims);

}  // namespace voxelforge
