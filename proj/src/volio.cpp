#include "voxelforge/volio.hpp"

#include "voxelforge/error.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

namespace voxelforge {

namespace {

static_assert(std::endian::native == std::endian::little, "SEGV I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'E', 'G', 'V'};
constexpr std::uint16_t kVersion = 1;

class ByteWriter {
public:
    template <class T>
    void put(const T& v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_raw(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

    template <class T>
    T get(const char* field) {
        T v;
        take(&v, sizeof(T), field);
        return v;
    }
    void take(void* out, std::size_t n, const char* field) {
        if (pos_ + n > bytes_.size()) {
            throw FormatError(std::string("truncated SEGV data while reading ") + field);
        }
        std::memcpy(out, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

void encode_header(ByteWriter& w, const VolumeHeader& h) {
    w.put_raw(kMagic, 4);
    w.put(kVersion);
    w.put(static_cast<std::uint8_t>(h.dtype));
    w.put(std::uint8_t{0});
    for (auto d : h.dims) w.put(d);
    for (auto s : h.spacing_mm) w.put(s);
}

void write_bytes(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

bool is_valid_label(std::uint8_t v) { return v == 0 || v == 1 || v == 2 || v == 4; }

void VolumeHeader::validate() const {
    static const char* names[4] = {"dims.channels", "dims.z", "dims.y", "dims.x"};
    for (int i = 0; i < 4; ++i) {
        if (dims[i] < 1) throw FormatError(std::string(names[i]) + " must be >= 1");
    }
    static const char* snames[3] = {"spacing.z", "spacing.y", "spacing.x"};
    for (int i = 0; i < 3; ++i) {
        if (!(spacing_mm[i] > 0.0f) || !std::isfinite(spacing_mm[i])) {
            throw FormatError(std::string(snames[i]) + " must be a positive finite value");
        }
    }
    if (dtype != DType::F32 && dtype != DType::U8) throw FormatError("dtype_code must be 0 (F32) or 1 (U8)");
}

Volume4D::Volume4D(int channels, Dims3 dims, std::array<float, 3> spacing) {
    header_.dims = {static_cast<std::uint32_t>(channels), static_cast<std::uint32_t>(dims.z),
                    static_cast<std::uint32_t>(dims.y), static_cast<std::uint32_t>(dims.x)};
    header_.spacing_mm = spacing;
    header_.dtype = DType::F32;
    header_.validate();
    data_.assign(header_.element_count(), 0.0f);
}

Volume4D::Volume4D(VolumeHeader header, std::vector<float> data) : header_(header), data_(std::move(data)) {
    header_.validate();
    if (header_.dtype != DType::F32) throw FormatError("dtype_code: Volume4D requires F32");
    if (data_.size() != header_.element_count()) throw FormatError("payload: length does not match dims");
    for (float v : data_) {
        if (!std::isfinite(v)) throw FormatError("payload: non-finite intensity value");
    }
}

std::span<float> Volume4D::channel(int c) {
    return std::span<float>(data_).subspan(static_cast<std::size_t>(c) * header_.voxel_count(), header_.voxel_count());
}

std::span<const float> Volume4D::channel(int c) const {
    return std::span<const float>(data_).subspan(static_cast<std::size_t>(c) * header_.voxel_count(),
                                                 header_.voxel_count());
}

Grid<float> Volume4D::channel_grid(int c) const {
    Grid<float> g(dims());
    auto src = channel(c);
    std::copy(src.begin(), src.end(), g.values.begin());
    return g;
}

void Volume4D::set_channel(int c, const Grid<float>& g) {
    if (!(g.dims == dims())) throw ShapeError("set_channel: grid dims differ from volume dims");
    std::copy(g.values.begin(), g.values.end(), channel(c).begin());
}

LabelMap::LabelMap(Dims3 dims, std::array<float, 3> spacing) {
    header_.dims = {1u, static_cast<std::uint32_t>(dims.z), static_cast<std::uint32_t>(dims.y),
                    static_cast<std::uint32_t>(dims.x)};
    header_.spacing_mm = spacing;
    header_.dtype = DType::U8;
    header_.validate();
    labels_.assign(header_.voxel_count(), 0);
}

LabelMap::LabelMap(VolumeHeader header, std::vector<std::uint8_t> labels)
    : header_(header), labels_(std::move(labels)) {
    header_.validate();
    if (header_.dtype != DType::U8) throw FormatError("dtype_code: LabelMap requires U8");
    if (header_.dims[0] != 1) throw FormatError("dims.channels: LabelMap must have exactly one channel");
    if (labels_.size() != header_.voxel_count()) throw FormatError("payload: length does not match dims");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        if (!is_valid_label(labels_[i])) {
            throw FormatError("payload: label value " + std::to_string(labels_[i]) + " at voxel " +
                              std::to_string(i) + " is not in {0,1,2,4}");
        }
    }
}

std::vector<std::uint8_t> encode_segvol(const Volume4D& v) {
    ByteWriter w;
    encode_header(w, v.header());
    w.put_raw(v.data().data(), v.data().size() * sizeof(float));
    return std::move(w.bytes);
}

std::vector<std::uint8_t> encode_segvol(const LabelMap& lm) {
    ByteWriter w;
    encode_header(w, lm.header());
    w.put_raw(lm.labels().data(), lm.labels().size());
    return std::move(w.bytes);
}

SegvolObject decode_segvol(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    char magic[4];
    r.take(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("magic: expected \"SEGV\"");
    auto version = r.get<std::uint16_t>("version");
    if (version != kVersion) throw FormatError("version: unsupported value " + std::to_string(version));
    auto dtype = r.get<std::uint8_t>("dtype_code");
    if (dtype > 1) throw FormatError("dtype_code: unknown value " + std::to_string(dtype));
    auto reserved = r.get<std::uint8_t>("reserved");
    if (reserved != 0) throw FormatError("reserved: must be 0");

    VolumeHeader h;
    h.dtype = static_cast<DType>(dtype);
    for (auto& d : h.dims) d = r.get<std::uint32_t>("dims");
    for (auto& s : h.spacing_mm) s = r.get<float>("spacing");
    h.validate();

    const std::size_t elem = h.dtype == DType::F32 ? sizeof(float) : 1;
    const std::size_t expected = h.element_count() * elem;
    if (r.remaining() < expected) {
        throw FormatError("payload: truncated, expected " + std::to_string(expected) + " bytes, found " +
                          std::to_string(r.remaining()));
    }
    if (r.remaining() > expected) throw FormatError("payload: trailing bytes after payload");

    if (h.dtype == DType::F32) {
        std::vector<float> data(h.element_count());
        r.take(data.data(), expected, "payload");
        return Volume4D(h, std::move(data));
    }
    std::vector<std::uint8_t> labels(h.element_count());
    r.take(labels.data(), expected, "payload");
    return LabelMap(h, std::move(labels));
}

SegvolObject read_segvol(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_segvol(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

Volume4D read_volume(const std::filesystem::path& path) {
    auto obj = read_segvol(path);
    if (auto* v = std::get_if<Volume4D>(&obj)) return std::move(*v);
    throw FormatError(path.string() + ": dtype_code: expected an F32 volume, found a labelmap");
}

LabelMap read_labelmap(const std::filesystem::path& path) {
    auto obj = read_segvol(path);
    if (auto* lm = std::get_if<LabelMap>(&obj)) return std::move(*lm);
    throw FormatError(path.string() + ": dtype_code: expected a U8 labelmap, found a volume");
}

void write_segvol(const Volume4D& v, const std::filesystem::path& path) { write_bytes(encode_segvol(v), path); }

void write_segvol(const LabelMap& lm, const std::filesystem::path& path) { write_bytes(encode_segvol(lm), path); }

RegionMasks labelmap_to_regions(const LabelMap& lm) {
    RegionMasks m{Mask(lm.dims()), Mask(lm.dims()), Mask(lm.dims())};
    auto labels = lm.labels();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto l = labels[i];
        m.et.values[i] = l == 4;
        m.tc.values[i] = l == 1 || l == 4;
        m.wt.values[i] = l != 0;
    }
    return m;
}

LabelMap regions_to_labelmap(const RegionMasks& m, std::array<float, 3> spacing) {
    if (!(m.et.dims == m.tc.dims) || !(m.et.dims == m.wt.dims)) {
        throw ShapeError("regions_to_labelmap: et/tc/wt dimensions differ");
    }
    LabelMap lm(m.et.dims, spacing);
    auto out = lm.labels();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (m.et.values[i]) {
            out[i] = 4;
        } else if (m.tc.values[i]) {
            out[i] = 1;
        } else if (m.wt.values[i]) {
            out[i] = 2;
        } else {
            out[i] = 0;
        }
    }
    return lm;
}

namespace {

// Mean intensity per channel (T1, T1Gd, T2, FLAIR) for healthy brain, edema,
// non-enhancing core and enhancing tumor.
constexpr float kBrainMeans[4] = {0.50f, 0.45f, 0.50f, 0.45f};
constexpr float kEdemaMeans[4] = {0.42f, 0.45f, 0.85f, 0.90f};
constexpr float kCoreMeans[4] = {0.30f, 0.25f, 0.70f, 0.60f};
constexpr float kEnhancingMeans[4] = {0.50f, 0.95f, 0.60f, 0.70f};
constexpr float kNoiseSigma = 0.05f;

}  // namespace

std::pair<Volume4D, LabelMap> generate_phantom(std::uint64_t seed, Dims3 dims) {
    if (dims.z < 16 || dims.y < 16 || dims.x < 16) {
        throw RangeError("generate_phantom: every spatial dim must be >= 16");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    std::array<double, 3> brain_center, brain_radius, tumor_center, axis_scale;
    for (int a = 0; a < 3; ++a) {
        brain_center[a] = (dims[a] - 1) / 2.0;
        brain_radius[a] = dims[a] * uniform(0.40, 0.46);
        axis_scale[a] = uniform(0.85, 1.15);
        tumor_center[a] = brain_center[a] + dims[a] * uniform(-0.08, 0.08);
    }
    const int min_dim = std::min({dims.z, dims.y, dims.x});
    const double wt_radius = min_dim * uniform(0.24, 0.28);
    const double tc_radius = wt_radius * uniform(0.58, 0.64);
    const double core_radius = wt_radius * uniform(0.28, 0.32);

    Volume4D vol(4, dims);
    LabelMap lm(dims);
    std::normal_distribution<float> noise(0.0f, kNoiseSigma);

    for (int z = 0; z < dims.z; ++z) {
        for (int y = 0; y < dims.y; ++y) {
            for (int x = 0; x < dims.x; ++x) {
                const double p[3] = {double(z), double(y), double(x)};
                double brain_r2 = 0.0, tumor_r2 = 0.0;
                for (int a = 0; a < 3; ++a) {
                    brain_r2 += std::pow((p[a] - brain_center[a]) / brain_radius[a], 2);
                    tumor_r2 += std::pow((p[a] - tumor_center[a]) / axis_scale[a], 2);
                }
                const double tumor_r = std::sqrt(tumor_r2);
                std::uint8_t label = 0;
                if (tumor_r <= core_radius) {
                    label = 1;
                } else if (tumor_r <= tc_radius) {
                    label = 4;
                } else if (tumor_r <= wt_radius) {
                    label = 2;
                }
                const bool inside = brain_r2 <= 1.0 || label != 0;
                if (!inside) continue;  // background stays exactly 0
                lm.at(z, y, x) = label;
                const float* means = label == 1   ? kCoreMeans
                                     : label == 4 ? kEnhancingMeans
                                     : label == 2 ? kEdemaMeans
                                                  : kBrainMeans;
                for (int c = 0; c < 4; ++c) {
                    vol.at(c, z, y, x) = std::max(0.01f, means[c] + noise(rng));
                }
            }
        }
    }
    return {std::move(vol), std::move(lm)};
}

}  // namespace voxelforge
