#include "voxelforge/metrics.hpp"

#include "voxelforge/error.hpp"
#include "voxelforge/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace voxelforge {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_dims(const Mask& a, const Mask& b, const char* what) {
    if (!(a.dims == b.dims) || a.values.size() != b.values.size()) {
        throw ShapeError(std::string(what) + ": masks have different dims");
    }
}

// Exact 1D squared distance transform (lower envelope of parabolas) over
// `n` samples spaced `step` mm apart. Samples with f = inf are not sites.
void edt_1d(const double* f, double* out, int n, double step, std::vector<int>& v, std::vector<double>& z) {
    v.assign(static_cast<std::size_t>(n), 0);
    z.assign(static_cast<std::size_t>(n) + 1, 0.0);
    auto pos = [step](int q) { return q * step; };
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        const double fq = f[q] + pos(q) * pos(q);
        while (k >= 0) {
            const int p = v[k];
            const double s = (fq - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if (s <= z[k]) {
                --k;
            } else {
                ++k;
                v[k] = q;
                z[k] = s;
                z[k + 1] = kInf;
                break;
            }
        }
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
        }
    }
    if (k < 0) {
        std::fill(out, out + n, kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < pos(q)) ++j;
        const double d = (q - v[j]) * step;
        out[q] = d * d + f[v[j]];
    }
}

// Squared distance (mm^2) from every voxel to the nearest site.
std::vector<double> squared_edt(Dims3 dims, const std::vector<Coord>& sites, std::array<double, 3> spacing) {
    std::vector<double> g(dims.size(), kInf);
    for (const auto& c : sites) g[dims.index(c[0], c[1], c[2])] = 0.0;

    std::vector<double> line, res;
    std::vector<int> v;
    std::vector<double> z;
    // Passes along z, then y, then x.
    for (int axis = 0; axis < 3; ++axis) {
        const int n = dims[axis];
        line.resize(static_cast<std::size_t>(n));
        res.resize(static_cast<std::size_t>(n));
        const std::size_t stride = axis == 0 ? static_cast<std::size_t>(dims.y) * dims.x
                                   : axis == 1 ? static_cast<std::size_t>(dims.x)
                                               : 1;
        for (int a = 0; a < dims[axis == 0 ? 1 : 0]; ++a) {
            for (int b = 0; b < dims[axis == 2 ? 1 : 2]; ++b) {
                std::size_t base = 0;
                if (axis == 0) base = dims.index(0, a, b);
                if (axis == 1) base = dims.index(a, 0, b);
                if (axis == 2) base = dims.index(a, b, 0);
                for (int i = 0; i < n; ++i) line[i] = g[base + i * stride];
                edt_1d(line.data(), res.data(), n, spacing[axis], v, z);
                for (int i = 0; i < n; ++i) g[base + i * stride] = res[i];
            }
        }
    }
    return g;
}

double directed_percentile(const std::vector<Coord>& from, const std::vector<double>& sq_dist_to, Dims3 dims,
                           double percent) {
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& c : from) d.push_back(std::sqrt(sq_dist_to[dims.index(c[0], c[1], c[2])]));
    std::sort(d.begin(), d.end());
    return nearest_rank(d, percent);
}

bool any(const Mask& m) {
    return std::any_of(m.values.begin(), m.values.end(), [](std::uint8_t v) { return v != 0; });
}

}  // namespace

ConfusionCounts confusion(const Mask& pred, const Mask& ref) {
    require_same_dims(pred, ref, "confusion");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        const bool p = pred.values[i] != 0;
        const bool r = ref.values[i] != 0;
        if (p && r) {
            ++c.tp;
        } else if (p) {
            ++c.fp;
        } else if (r) {
            ++c.fn;
        } else {
            ++c.tn;
        }
    }
    return c;
}

double dice(const ConfusionCounts& c) {
    const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double sensitivity(const ConfusionCounts& c) {
    const std::uint64_t denom = c.tp + c.fn;
    return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double specificity(const ConfusionCounts& c) {
    const std::uint64_t denom = c.tn + c.fp;
    return denom == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(denom);
}

std::vector<Coord> surface_voxels(const Mask& mask) {
    const Dims3 d = mask.dims;
    auto inside = [&](int z, int y, int x) {
        return z >= 0 && y >= 0 && x >= 0 && z < d.z && y < d.y && x < d.x && mask.at(z, y, x) != 0;
    };
    std::vector<Coord> out;
    for (int z = 0; z < d.z; ++z) {
        for (int y = 0; y < d.y; ++y) {
            for (int x = 0; x < d.x; ++x) {
                if (!inside(z, y, x)) continue;
                if (!inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
                    !inside(z, y, x - 1) || !inside(z, y, x + 1)) {
                    out.push_back({z, y, x});
                }
            }
        }
    }
    return out;
}

double volume_diagonal(Dims3 dims, std::array<double, 3> s) {
    const double a = dims.z * s[0];
    const double b = dims.y * s[1];
    const double c = dims.x * s[2];
    return std::sqrt(a * a + b * b + c * c);
}

double surface_distance_percentile(const Mask& pred, const Mask& ref, std::array<double, 3> spacing_mm,
                                   double percent) {
    require_same_dims(pred, ref, "hd95");
    for (double s : spacing_mm) {
        if (!(s > 0.0)) throw RangeError("hd95: spacing must be positive");
    }
    const bool p = any(pred);
    const bool r = any(ref);
    if (!p && !r) return 0.0;
    if (!p || !r) return volume_diagonal(pred.dims, spacing_mm);

    const auto sp = surface_voxels(pred);
    const auto sr = surface_voxels(ref);
    const auto to_ref = squared_edt(ref.dims, sr, spacing_mm);
    const auto to_pred = squared_edt(pred.dims, sp, spacing_mm);
    return std::max(directed_percentile(sp, to_ref, pred.dims, percent),
                    directed_percentile(sr, to_pred, ref.dims, percent));
}

double hd95(const Mask& pred, const Mask& ref, std::array<double, 3> spacing_mm) {
    return surface_distance_percentile(pred, ref, spacing_mm, 95.0);
}

const char* region_name(Region r) {
    switch (r) {
        case Region::ET: return "ET";
        case Region::TC: return "TC";
        case Region::WT: return "WT";
    }
    return "?";
}

CaseMetrics evaluate_case(const LabelMap& pred, const LabelMap& ref, std::array<double, 3> spacing_mm,
                          std::string id) {
    if (!(pred.dims() == ref.dims())) throw ShapeError("evaluate_case: prediction and reference dims differ");
    const RegionMasks p = labelmap_to_regions(pred);
    const RegionMasks r = labelmap_to_regions(ref);
    const std::array<const Mask*, 3> pm{&p.et, &p.tc, &p.wt};
    const std::array<const Mask*, 3> rm{&r.et, &r.tc, &r.wt};
    CaseMetrics out;
    out.id = std::move(id);
    for (int i = 0; i < 3; ++i) {
        const ConfusionCounts c = confusion(*pm[i], *rm[i]);
        out.regions[i] = {dice(c), sensitivity(c), specificity(c), hd95(*pm[i], *rm[i], spacing_mm)};
    }
    return out;
}

MetricReport aggregate(std::vector<CaseMetrics> cases) {
    MetricReport rep;
    rep.cases = std::move(cases);
    const double n = static_cast<double>(rep.cases.size());
    if (rep.cases.empty()) return rep;
    using Field = double RegionMetrics::*;
    const std::array<Field, 4> fields{&RegionMetrics::dice, &RegionMetrics::sensitivity, &RegionMetrics::specificity,
                                      &RegionMetrics::hd95_mm};
    for (int r = 0; r < 3; ++r) {
        for (Field f : fields) {
            double sum = 0.0;
            for (const auto& c : rep.cases) sum += c.regions[r].*f;
            const double mean = sum / n;
            double ss = 0.0;
            for (const auto& c : rep.cases) ss += (c.regions[r].*f - mean) * (c.regions[r].*f - mean);
            rep.mean[r].*f = mean;
            rep.std[r].*f = std::sqrt(ss / n);
        }
    }
    return rep;
}

namespace {

nlohmann::json region_json(const RegionMetrics& m) {
    return {{"dice", m.dice}, {"sensitivity", m.sensitivity}, {"specificity", m.specificity}, {"hd95_mm", m.hd95_mm}};
}

RegionMetrics region_from_json(const nlohmann::json& j) {
    return {j.at("dice").get<double>(), j.at("sensitivity").get<double>(), j.at("specificity").get<double>(),
            j.at("hd95_mm").get<double>()};
}

nlohmann::json regions_json(const std::array<RegionMetrics, 3>& rs) {
    nlohmann::json j = nlohmann::json::object();
    for (Region r : kRegions) j[region_name(r)] = region_json(rs[static_cast<int>(r)]);
    return j;
}

std::array<RegionMetrics, 3> regions_from_json(const nlohmann::json& j) {
    std::array<RegionMetrics, 3> out;
    for (Region r : kRegions) out[static_cast<int>(r)] = region_from_json(j.at(region_name(r)));
    return out;
}

}  // namespace

nlohmann::json report_to_json(const MetricReport& r) {
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : r.cases) cases.push_back({{"id", c.id}, {"regions", regions_json(c.regions)}});
    return {{"cases", cases}, {"mean", regions_json(r.mean)}, {"std", regions_json(r.std)}};
}

MetricReport report_from_json(const nlohmann::json& j) {
    try {
        MetricReport r;
        for (const auto& c : j.at("cases")) {
            r.cases.push_back({c.at("id").get<std::string>(), regions_from_json(c.at("regions"))});
        }
        r.mean = regions_from_json(j.at("mean"));
        r.std = regions_from_json(j.at("std"));
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("metric report: ") + e.what());
    }
}

std::string report_table(const MetricReport& r) {
    const std::array<Region, 3> columns{Region::ET, Region::WT, Region::TC};
    const std::array<std::pair<const char*, double RegionMetrics::*>, 4> rows{{
        {"Dice", &RegionMetrics::dice},
        {"Sensitivity", &RegionMetrics::sensitivity},
        {"Specificity", &RegionMetrics::specificity},
        {"Hausdorff (95%)", &RegionMetrics::hd95_mm},
    }};
    std::ostringstream os;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-17s", "Metric (mean)");
    os << buf;
    for (Region c : columns) {
        std::snprintf(buf, sizeof buf, " %20s", region_name(c));
        os << buf;
    }
    os << '\n';
    for (const auto& [label, field] : rows) {
        std::snprintf(buf, sizeof buf, "%-17s", label);
        os << buf;
        for (Region c : columns) {
            const int i = static_cast<int>(c);
            std::snprintf(buf, sizeof buf, " %11.5f (%6.4f)", r.mean[i].*field, r.std[i].*field);
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace voxelforge
