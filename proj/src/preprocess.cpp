#include "voxelforge/preprocess.hpp"

#include "voxelforge/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace voxelforge {

void PreprocConfig::validate() const {
    if (patch.z < 8 || patch.y < 8 || patch.x < 8) throw ConfigError("preprocess.patch: every component must be >= 8");
    if (pad_multiple < 1) throw ConfigError("preprocess.pad_multiple: must be >= 1");
}

BBox Padding::interior() const {
    BBox b;
    for (int a = 0; a < 3; ++a) {
        b.min[a] = before[a];
        b.max[a] = before[a] + original[a];
    }
    return b;
}

double nearest_rank(std::span<const double> sorted, double percent) {
    if (sorted.empty()) throw DegenerateInputError("nearest_rank: empty sample");
    const auto n = static_cast<double>(sorted.size());
    // The 1e-9 slack keeps exact products such as 0.9 * 10 from rounding up.
    auto rank = static_cast<long long>(std::ceil(percent / 100.0 * n - 1e-9));
    rank = std::clamp<long long>(rank, 1, static_cast<long long>(sorted.size()));
    return sorted[static_cast<std::size_t>(rank - 1)];
}

std::vector<float> clip_percentile_minmax(std::span<const float> channel) {
    std::vector<double> nonzero;
    for (float v : channel) {
        if (v != 0.0f) nonzero.push_back(v);
    }
    if (nonzero.empty()) throw DegenerateInputError("clip_percentile_minmax: channel has no non-zero voxel");
    std::sort(nonzero.begin(), nonzero.end());
    const double lo = nearest_rank(nonzero, 1.0);
    const double hi = nearest_rank(nonzero, 99.0);

    // The affine map comes from the clipped values of every voxel, zeros included.
    double vmin = hi, vmax = lo;
    for (float v : channel) {
        const double c = std::clamp<double>(v, lo, hi);
        vmin = std::min(vmin, c);
        vmax = std::max(vmax, c);
    }
    std::vector<float> out(channel.size(), 0.0f);
    const double range = vmax - vmin;
    if (range <= 0.0) return out;
    for (std::size_t i = 0; i < channel.size(); ++i) {
        const double c = std::clamp<double>(channel[i], lo, hi);
        out[i] = static_cast<float>((c - vmin) / range);
    }
    return out;
}

std::vector<float> zscore_nonzero(std::span<const float> channel) {
    double sum = 0.0;
    std::size_t n = 0;
    for (float v : channel) {
        if (v != 0.0f) {
            sum += v;
            ++n;
        }
    }
    if (n == 0) throw DegenerateInputError("zscore_nonzero: channel has no non-zero voxel");
    const double mean = sum / static_cast<double>(n);
    double ss = 0.0;
    for (float v : channel) {
        if (v != 0.0f) ss += (v - mean) * (v - mean);
    }
    const double sigma = std::sqrt(ss / static_cast<double>(n));
    if (!(sigma > 0.0)) throw DegenerateInputError("zscore_nonzero: non-zero voxels have zero standard deviation");

    std::vector<float> out(channel.size(), 0.0f);
    for (std::size_t i = 0; i < channel.size(); ++i) {
        if (channel[i] != 0.0f) out[i] = static_cast<float>((channel[i] - mean) / sigma);
    }
    return out;
}

Volume4D normalize(const Volume4D& v, NormMode mode) {
    Volume4D out = v;
    for (int c = 0; c < v.channels(); ++c) {
        auto res = mode == NormMode::MinMaxClip ? clip_percentile_minmax(v.channel(c)) : zscore_nonzero(v.channel(c));
        std::copy(res.begin(), res.end(), out.channel(c).begin());
    }
    return out;
}

BBox brain_bounding_box(const Volume4D& v) {
    const Dims3 d = v.dims();
    BBox b{{d.z, d.y, d.x}, {0, 0, 0}};
    bool any = false;
    for (int c = 0; c < v.channels(); ++c) {
        for (int z = 0; z < d.z; ++z) {
            for (int y = 0; y < d.y; ++y) {
                for (int x = 0; x < d.x; ++x) {
                    if (v.at(c, z, y, x) == 0.0f) continue;
                    any = true;
                    const int p[3] = {z, y, x};
                    for (int a = 0; a < 3; ++a) {
                        b.min[a] = std::min(b.min[a], p[a]);
                        b.max[a] = std::max(b.max[a], p[a] + 1);
                    }
                }
            }
        }
    }
    if (!any) throw DegenerateInputError("brain_bounding_box: volume has no non-zero voxel");
    return b;
}

namespace {

void check_box(const BBox& b, Dims3 d) {
    for (int a = 0; a < 3; ++a) {
        if (b.min[a] < 0 || b.max[a] > d[a] || b.min[a] >= b.max[a]) {
            throw RangeError("bounding box out of bounds on axis " + std::to_string(a));
        }
    }
}

// Copies the src box region into dst at dst_origin, for every (z, y) row.
template <class T>
void copy_block(std::span<const T> src, Dims3 sd, std::array<int, 3> src_origin, std::span<T> dst, Dims3 dd,
                std::array<int, 3> dst_origin, Dims3 extent) {
    for (int z = 0; z < extent.z; ++z) {
        for (int y = 0; y < extent.y; ++y) {
            const auto s = sd.index(src_origin[0] + z, src_origin[1] + y, src_origin[2]);
            const auto t = dd.index(dst_origin[0] + z, dst_origin[1] + y, dst_origin[2]);
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(s), extent.x,
                        dst.begin() + static_cast<std::ptrdiff_t>(t));
        }
    }
}

Volume4D with_dims(const Volume4D& like, Dims3 d) { return Volume4D(like.channels(), d, like.spacing()); }

}  // namespace

Volume4D crop_to_bbox(const Volume4D& v, const BBox& b) {
    check_box(b, v.dims());
    Volume4D out = with_dims(v, b.extent());
    for (int c = 0; c < v.channels(); ++c) {
        copy_block<float>(v.channel(c), v.dims(), b.min, out.channel(c), out.dims(), {0, 0, 0}, b.extent());
    }
    return out;
}

LabelMap crop_to_bbox(const LabelMap& lm, const BBox& b) {
    check_box(b, lm.dims());
    LabelMap out(b.extent(), lm.spacing());
    copy_block<std::uint8_t>(lm.labels(), lm.dims(), b.min, out.labels(), out.dims(), {0, 0, 0}, b.extent());
    return out;
}

template <class T>
Grid<T> crop_to_bbox(const Grid<T>& g, const BBox& b) {
    check_box(b, g.dims);
    Grid<T> out(b.extent());
    copy_block<T>(g.values, g.dims, b.min, out.values, out.dims, {0, 0, 0}, b.extent());
    return out;
}

template Grid<float> crop_to_bbox(const Grid<float>&, const BBox&);
template Grid<double> crop_to_bbox(const Grid<double>&, const BBox&);
template Grid<std::uint8_t> crop_to_bbox(const Grid<std::uint8_t>&, const BBox&);

Volume4D embed(const Volume4D& part, const BBox& b, Dims3 full) {
    check_box(b, full);
    if (!(b.extent() == part.dims())) throw ShapeError("embed: part dims differ from box extent");
    Volume4D out = with_dims(part, full);
    for (int c = 0; c < part.channels(); ++c) {
        copy_block<float>(part.channel(c), part.dims(), {0, 0, 0}, out.channel(c), full, b.min, b.extent());
    }
    return out;
}

LabelMap embed(const LabelMap& part, const BBox& b, Dims3 full) {
    check_box(b, full);
    if (!(b.extent() == part.dims())) throw ShapeError("embed: part dims differ from box extent");
    LabelMap out(full, part.spacing());
    copy_block<std::uint8_t>(part.labels(), part.dims(), {0, 0, 0}, out.labels(), full, b.min, b.extent());
    return out;
}

namespace {

std::pair<Volume4D, Padding> pad_with(const Volume4D& v, const Padding& p) {
    Dims3 padded;
    for (int a = 0; a < 3; ++a) padded[a] = p.original[a] + p.before[a] + p.after[a];
    Volume4D out = with_dims(v, padded);
    for (int c = 0; c < v.channels(); ++c) {
        copy_block<float>(v.channel(c), v.dims(), {0, 0, 0}, out.channel(c), padded, p.before, v.dims());
    }
    return {std::move(out), p};
}

}  // namespace

std::pair<Volume4D, Padding> pad_to_size(const Volume4D& v, Dims3 target) {
    Padding p;
    p.original = v.dims();
    for (int a = 0; a < 3; ++a) {
        const int extra = std::max(0, target[a] - p.original[a]);
        p.before[a] = extra / 2;
        p.after[a] = extra - extra / 2;
    }
    return pad_with(v, p);
}

LabelMap pad_to_size(const LabelMap& lm, const Padding& p) {
    if (!(lm.dims() == p.original)) throw ShapeError("pad_to_size: labelmap dims differ from padding record");
    Dims3 padded;
    for (int a = 0; a < 3; ++a) padded[a] = p.original[a] + p.before[a] + p.after[a];
    LabelMap out(padded, lm.spacing());
    copy_block<std::uint8_t>(lm.labels(), lm.dims(), {0, 0, 0}, out.labels(), padded, p.before, lm.dims());
    return out;
}

std::pair<Volume4D, Padding> pad_to_multiple(const Volume4D& v, int m) {
    if (m < 1) throw RangeError("pad_to_multiple: multiple must be >= 1");
    Padding p;
    p.original = v.dims();
    for (int a = 0; a < 3; ++a) {
        const int rounded = (p.original[a] + m - 1) / m * m;
        p.after[a] = rounded - p.original[a];
    }
    return pad_with(v, p);
}

Volume4D unpad(const Volume4D& v, const Padding& p) { return crop_to_bbox(v, p.interior()); }

template <class T>
Grid<T> unpad(const Grid<T>& g, const Padding& p) {
    return crop_to_bbox(g, p.interior());
}

template Grid<float> unpad(const Grid<float>&, const Padding&);
template Grid<double> unpad(const Grid<double>&, const Padding&);
template Grid<std::uint8_t> unpad(const Grid<std::uint8_t>&, const Padding&);

std::array<int, 3> draw_crop_offset(Dims3 dims, Dims3 patch, std::mt19937_64& rng) {
    std::array<int, 3> off{};
    for (int a = 0; a < 3; ++a) {
        const int span = std::max(0, dims[a] - patch[a]);
        off[a] = std::uniform_int_distribution<int>(0, span)(rng);
    }
    return off;
}

std::pair<Volume4D, LabelMap> random_crop_patch(const Volume4D& v, const LabelMap& lm, Dims3 patch,
                                                std::mt19937_64& rng) {
    if (!(v.dims() == lm.dims())) throw ShapeError("random_crop_patch: image and labelmap dims differ");
    auto [padded, record] = pad_to_size(v, patch);
    LabelMap padded_lm = pad_to_size(lm, record);
    const auto off = draw_crop_offset(padded.dims(), patch, rng);
    BBox box{off, {off[0] + patch.z, off[1] + patch.y, off[2] + patch.x}};
    return {crop_to_bbox(padded, box), crop_to_bbox(padded_lm, box)};
}

}  // namespace voxelforge
