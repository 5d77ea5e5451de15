#include "voxelforge/infer.hpp"

#include "voxelforge/error.hpp"
#include "voxelforge/preprocess.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace voxelforge {

namespace {

int mod4(int k) { return ((k % 4) + 4) % 4; }

// src[p] is the flat input index that lands on output position p.
std::vector<std::size_t> source_map(const TTATransform& t, Dims3 d) {
    const TTATransform c = t.canonical();
    if ((c.rotation % 2) && d.y != d.x) {
        throw ShapeError("tta: odd quarter-turn needs a square axial slice, got " + std::to_string(d.y) + "x" +
                         std::to_string(d.x));
    }
    std::vector<std::size_t> src(d.size());
    for (int z = 0; z < d.z; ++z) {
        for (int y = 0; y < d.y; ++y) {
            for (int x = 0; x < d.x; ++x) {
                // Undo the rotation: one quarter-turn sends a(z, x, n-1-y) to (z, y, x).
                int sy = y, sx = x;
                if (c.rotation == 2) {
                    sy = d.y - 1 - y;
                    sx = d.x - 1 - x;
                } else {
                    for (int r = 0; r < c.rotation; ++r) {
                        const int ny = sx;
                        const int nx = d.x - 1 - sy;
                        sy = ny;
                        sx = nx;
                    }
                }
                const int sz = c.flip_z ? d.z - 1 - z : z;
                if (c.flip_x) sx = d.x - 1 - sx;
                src[d.index(z, y, x)] = d.index(sz, sy, sx);
            }
        }
    }
    return src;
}

template <class T>
void permute_planes(const T* in, T* out, std::size_t planes, const std::vector<std::size_t>& src, bool inverse) {
    const std::size_t n = src.size();
    for (std::size_t p = 0; p < planes; ++p) {
        const T* a = in + p * n;
        T* b = out + p * n;
        if (inverse) {
            for (std::size_t i = 0; i < n; ++i) b[src[i]] = a[i];
        } else {
            for (std::size_t i = 0; i < n; ++i) b[i] = a[src[i]];
        }
    }
}

Volume4D transform(const TTATransform& t, const Volume4D& v, bool inverse) {
    const auto src = source_map(t, v.dims());
    Volume4D out(v.channels(), v.dims(), v.spacing());
    permute_planes(v.data().data(), out.data().data(), static_cast<std::size_t>(v.channels()), src, inverse);
    return out;
}

LabelMap transform(const TTATransform& t, const LabelMap& lm, bool inverse) {
    const auto src = source_map(t, lm.dims());
    LabelMap out(lm.dims(), lm.spacing());
    permute_planes(lm.labels().data(), out.labels().data(), 1, src, inverse);
    return out;
}

template <class T>
Grid<T> transform(const TTATransform& t, const Grid<T>& g, bool inverse) {
    const auto src = source_map(t, g.dims);
    Grid<T> out(g.dims);
    permute_planes(g.values.data(), out.values.data(), 1, src, inverse);
    return out;
}

tn::Tensor transform(const TTATransform& t, const tn::Tensor& x, bool inverse) {
    tn::require_rank5(x, "tta");
    const auto src = source_map(t, x.spatial());
    tn::Tensor out(x.shape());
    permute_planes(x.values().data(), out.values().data(), static_cast<std::size_t>(x.batch()) * x.channels(), src,
                   inverse);
    return out;
}

}  // namespace

TTATransform TTATransform::canonical() const {
    TTATransform c = *this;
    c.rotation = mod4(rotation);
    if (c.flip_y) {
        c.flip_y = false;
        c.flip_x = !c.flip_x;
        c.rotation = mod4(c.rotation + 2);
    }
    return c;
}

std::string TTATransform::name() const {
    const TTATransform c = canonical();
    std::string s = "rot" + std::to_string(90 * c.rotation);
    if (c.flip_x) s += "+flipx";
    if (c.flip_z) s += "+flipz";
    return s;
}

std::vector<TTATransform> enumerate_tta() {
    std::vector<TTATransform> out;
    for (bool fz : {false, true}) {
        for (bool fx : {false, true}) {
            for (int k = 0; k < 4; ++k) out.push_back({k, false, fx, fz});
        }
    }
    return out;
}

// With F the x flip and R a quarter-turn, F R F = R^-1, so
// (R^b F^g)(R^a F^f) = R^(b + (g ? -a : a)) F^(f xor g).
TTATransform compose(const TTATransform& first, const TTATransform& second) {
    const TTATransform a = first.canonical();
    const TTATransform b = second.canonical();
    return {mod4(b.rotation + (b.flip_x ? -a.rotation : a.rotation)), false, a.flip_x != b.flip_x,
            a.flip_z != b.flip_z};
}

TTATransform inverse(const TTATransform& t) {
    const TTATransform c = t.canonical();
    return {c.flip_x ? c.rotation : mod4(-c.rotation), false, c.flip_x, c.flip_z};
}

bool tta_applicable(const TTATransform& t, Dims3 dims) {
    return t.canonical().rotation % 2 == 0 || dims.y == dims.x;
}

Volume4D apply_tta(const TTATransform& t, const Volume4D& v) { return transform(t, v, false); }
Volume4D invert_tta(const TTATransform& t, const Volume4D& v) { return transform(t, v, true); }
LabelMap apply_tta(const TTATransform& t, const LabelMap& lm) { return transform(t, lm, false); }
LabelMap invert_tta(const TTATransform& t, const LabelMap& lm) { return transform(t, lm, true); }
tn::Tensor apply_tta(const TTATransform& t, const tn::Tensor& x) { return transform(t, x, false); }
tn::Tensor invert_tta(const TTATransform& t, const tn::Tensor& x) { return transform(t, x, true); }

template <class T>
Grid<T> apply_tta(const TTATransform& t, const Grid<T>& g) {
    return transform(t, g, false);
}
template <class T>
Grid<T> invert_tta(const TTATransform& t, const Grid<T>& g) {
    return transform(t, g, true);
}

template Grid<double> apply_tta(const TTATransform&, const Grid<double>&);
template Grid<double> invert_tta(const TTATransform&, const Grid<double>&);
template Grid<float> apply_tta(const TTATransform&, const Grid<float>&);
template Grid<float> invert_tta(const TTATransform&, const Grid<float>&);
template Grid<std::uint8_t> apply_tta(const TTATransform&, const Grid<std::uint8_t>&);
template Grid<std::uint8_t> invert_tta(const TTATransform&, const Grid<std::uint8_t>&);

void EnsembleSpec::validate() const {
    if (checkpoints.empty()) throw ConfigError("infer.checkpoints: at least one checkpoint is required");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("infer.threshold: must lie in (0, 1)");
}

RegionProbs predict_regions(const EnsembleSpec& spec, const Volume4D& v, PredictionStats* stats) {
    spec.validate();
    auto [padded, pad] = pad_to_multiple(v, 8);
    const tn::Tensor x = volume_to_tensor(padded);

    std::vector<TTATransform> transforms;
    for (const auto& t : spec.tta ? enumerate_tta() : std::vector<TTATransform>{TTATransform{}}) {
        if (tta_applicable(t, padded.dims())) {
            transforms.push_back(t);
        } else {
            spdlog::warn("skipping {}: axial slice {}x{} is not square", t.name(), padded.dims().y, padded.dims().x);
        }
    }

    tn::Tensor sum;
    int passes = 0;
    for (std::size_t c = 0; c < spec.checkpoints.size(); ++c) {
        const ModelParams& params = spec.checkpoints[c];
        if (params.arch.input_channels != v.channels()) {
            throw ShapeError("predict_regions: checkpoint " + std::to_string(c) + " expects " +
                             std::to_string(params.arch.input_channels) + " channels, volume has " +
                             std::to_string(v.channels()));
        }
        for (const auto& t : transforms) {
            tn::Tensor out = invert_tta(t, predict(params, apply_tta(t, x)));
            if (passes == 0) {
                sum = std::move(out);
            } else {
                auto s = sum.values();
                auto o = out.values();
                for (std::size_t i = 0; i < s.size(); ++i) s[i] += o[i];
            }
            ++passes;
        }
    }
    for (double& s : sum.values()) s /= passes;
    spdlog::info("averaged {} predictions ({} checkpoints x {} transforms)", passes, spec.checkpoints.size(),
                 transforms.size());
    if (stats) {
        stats->passes = passes;
        stats->transforms = transforms;
    }

    RegionProbs p = tensor_to_probs(sum);
    return {unpad(p.et, pad), unpad(p.tc, pad), unpad(p.wt, pad)};
}

RegionMasks binarize(const RegionProbs& p, double threshold) {
    auto bin = [threshold](const Field& f) {
        Mask m(f.dims);
        for (std::size_t i = 0; i < f.values.size(); ++i) m.values[i] = f.values[i] >= threshold ? 1 : 0;
        return m;
    };
    return {bin(p.et), bin(p.tc), bin(p.wt)};
}

LabelMap reconstruct(const RegionMasks& m, std::array<float, 3> spacing) { return regions_to_labelmap(m, spacing); }

namespace {

int label_slot(std::uint8_t v) {
    switch (v) {
        case 0: return 0;
        case 1: return 1;
        case 2: return 2;
        case 4: return 3;
    }
    throw FormatError("merge: invalid label " + std::to_string(v));
}

}  // namespace

std::uint8_t merge_label(std::uint8_t a, std::uint8_t b) {
    return kMergeTable[static_cast<std::size_t>(label_slot(b))][static_cast<std::size_t>(label_slot(a))];
}

LabelMap merge_labelmaps(const LabelMap& a, const LabelMap& b) {
    if (!(a.dims() == b.dims())) throw ShapeError("merge_labelmaps: labelmap dims differ");
    LabelMap out(a.dims(), a.spacing());
    auto la = a.labels();
    auto lb = b.labels();
    auto lo = out.labels();
    for (std::size_t i = 0; i < lo.size(); ++i) lo[i] = merge_label(la[i], lb[i]);
    return out;
}

}  // namespace voxelforge
