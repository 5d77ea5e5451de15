#include "voxelforge/error.hpp"
#include "voxelforge/tensor.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace voxelforge::tn {

namespace {

static_assert(std::endian::native == std::endian::little, "TNPK I/O assumes a little-endian host");

constexpr char kMagic[4] = {'T', 'N', 'P', 'K'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(std::span<const std::uint8_t> bytes, std::size_t& pos, const char* field) {
    if (pos + sizeof(T) > bytes.size()) throw FormatError(std::string("truncated TNPK data while reading ") + field);
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& set) {
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(set.size()));
    for (const auto& [name, tensor] : set) {
        if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("parameter name too long");
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
        for (int d : tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : tensor.values()) put<float>(out, static_cast<float>(v));
    }
    return out;
}

NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("magic: expected \"TNPK\"");
    std::size_t pos = 4;
    const auto count = get<std::uint32_t>(bytes, pos, "count");
    NamedTensors set;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get<std::uint16_t>(bytes, pos, "name length");
        if (pos + len > bytes.size()) throw FormatError("truncated TNPK data while reading name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
        const auto rank = get<std::uint8_t>(bytes, pos, "dims count");
        Shape shape;
        std::size_t n = 1;
        for (int r = 0; r < rank; ++r) {
            shape.push_back(static_cast<int>(get<std::uint32_t>(bytes, pos, "dims")));
            n *= static_cast<std::size_t>(shape.back());
        }
        std::vector<double> values(n);
        for (auto& v : values) v = get<float>(bytes, pos, "payload");
        set.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
    }
    if (pos != bytes.size()) throw FormatError("trailing bytes after TNPK payload");
    return set;
}

void save_checkpoint(const NamedTensors& set, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(set);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace voxelforge::tn
