#include "voxelforge/error.hpp"
#include "voxelforge/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <string>

namespace voxelforge::tn {

// The input is copied once into a zero halo of width `pad`. In that padded
// layout, every kernel tap reads the input at a constant flat offset from the
// output position, so each tap is a plain GEMM over a contiguous column range.
// Columns that fall on halo positions produce values that are discarded (and
// receive zero gradient).

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstMatrixMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

constexpr Eigen::Index kChunk = 2048;

struct Geometry {
    int cin = 0;
    int cout = 0;
    int k = 1;
    int dil = 1;
    int pad = 0;
    Dims3 d;
    Dims3 p;  // padded dims

    Geometry(const ConvSpec& s, Dims3 dims)
        : cin(s.in_channels), cout(s.out_channels), k(s.kernel), dil(s.dilation), pad(s.padding()), d(dims) {
        p = {d.z + 2 * pad, d.y + 2 * pad, d.x + 2 * pad};
    }

    int taps() const { return k * k * k; }
    Eigen::Index padded_size() const { return static_cast<Eigen::Index>(p.size()); }
    Eigen::Index flat(int z, int y, int x) const {
        return (static_cast<Eigen::Index>(z) * p.y + y) * p.x + x;
    }
    Eigen::Index first() const { return flat(pad, pad, pad); }
    Eigen::Index last() const { return flat(d.z + pad - 1, d.y + pad - 1, d.x + pad - 1) + 1; }
    Eigen::Index tap_offset(int kz, int ky, int kx) const {
        return flat(kz * dil - pad, ky * dil - pad, kx * dil - pad) + 0;
    }
};

// Copies channels of a (C, Z, Y, X) block into a zero-initialized padded block.
void to_padded(const double* src, int channels, const Geometry& g, double* dst) {
    const std::size_t src_plane = g.d.size();
    const std::size_t dst_plane = g.p.size();
    std::fill(dst, dst + dst_plane * channels, 0.0);
    for (int c = 0; c < channels; ++c) {
        for (int z = 0; z < g.d.z; ++z) {
            for (int y = 0; y < g.d.y; ++y) {
                const double* s = src + c * src_plane + g.d.index(z, y, 0);
                double* t = dst + c * dst_plane + g.flat(z + g.pad, y + g.pad, g.pad);
                std::copy(s, s + g.d.x, t);
            }
        }
    }
}

// Adds the interior of a padded block into a (C, Z, Y, X) block.
void add_from_padded(const double* src, int channels, const Geometry& g, double* dst) {
    const std::size_t dst_plane = g.d.size();
    const std::size_t src_plane = g.p.size();
    for (int c = 0; c < channels; ++c) {
        for (int z = 0; z < g.d.z; ++z) {
            for (int y = 0; y < g.d.y; ++y) {
                const double* s = src + c * src_plane + g.flat(z + g.pad, y + g.pad, g.pad);
                double* t = dst + c * dst_plane + g.d.index(z, y, 0);
                for (int x = 0; x < g.d.x; ++x) t[x] += s[x];
            }
        }
    }
}

// Per-tap weight matrices (cout x cin), contiguous.
std::vector<RowMatrix> tap_weights(const Tensor& w, const Geometry& g) {
    std::vector<RowMatrix> taps(static_cast<std::size_t>(g.taps()), RowMatrix(g.cout, g.cin));
    for (int co = 0; co < g.cout; ++co) {
        for (int ci = 0; ci < g.cin; ++ci) {
            for (int t = 0; t < g.taps(); ++t) {
                taps[static_cast<std::size_t>(t)](co, ci) =
                    w[(static_cast<std::size_t>(co) * g.cin + ci) * g.taps() + t];
            }
        }
    }
    return taps;
}

std::vector<Eigen::Index> tap_offsets(const Geometry& g) {
    std::vector<Eigen::Index> off;
    for (int kz = 0; kz < g.k; ++kz) {
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) off.push_back(g.tap_offset(kz, ky, kx));
        }
    }
    return off;
}

}  // namespace

void ConvSpec::validate() const {
    if (kernel != 1 && kernel != 3) throw ShapeError("conv3d: kernel must be 1 or 3");
    if (dilation != 1 && dilation != 2) throw ShapeError("conv3d: dilation must be 1 or 2");
    if (in_channels < 1 || out_channels < 1) throw ShapeError("conv3d: channel counts must be positive");
}

Var conv3d(Var x, Var weight, Var bias, const ConvSpec& spec) {
    spec.validate();
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    require_rank5(xv, "conv3d");
    if (xv.channels() != spec.in_channels) {
        throw ShapeError("conv3d: input has " + std::to_string(xv.channels()) + " channels, spec expects " +
                         std::to_string(spec.in_channels));
    }
    if (weight.shape() != spec.weight_shape()) {
        throw ShapeError("conv3d: weight shape " + to_string(weight.shape()) + " differs from " +
                         to_string(spec.weight_shape()));
    }
    if (bias.value().size() != static_cast<std::size_t>(spec.out_channels)) {
        throw ShapeError("conv3d: bias must have one entry per output channel");
    }

    const Geometry g(spec, xv.spatial());
    const Eigen::Index P = g.padded_size();
    const auto taps = tap_weights(weight.value(), g);
    const auto offsets = tap_offsets(g);
    const Tensor& bv = bias.value();

    Tensor out(shape5(xv.batch(), g.cout, g.d));
    std::vector<double> in_pad(static_cast<std::size_t>(g.cin * P));
    std::vector<double> out_pad(static_cast<std::size_t>(g.cout * P));

    for (int n = 0; n < xv.batch(); ++n) {
        to_padded(xv.plane(n, 0), g.cin, g, in_pad.data());
        std::fill(out_pad.begin(), out_pad.end(), 0.0);
        for (Eigen::Index c0 = g.first(); c0 < g.last(); c0 += kChunk) {
            const Eigen::Index cols = std::min(kChunk, g.last() - c0);
            MatrixMap om(out_pad.data() + c0, g.cout, cols, Eigen::OuterStride<>(P));
            for (int t = 0; t < g.taps(); ++t) {
                ConstMatrixMap im(in_pad.data() + c0 + offsets[t], g.cin, cols, Eigen::OuterStride<>(P));
                om.noalias() += taps[t] * im;
            }
        }
        double* o = out.plane(n, 0);
        for (int c = 0; c < g.cout; ++c) {
            for (int z = 0; z < g.d.z; ++z) {
                for (int y = 0; y < g.d.y; ++y) {
                    const double* s = out_pad.data() + c * P + g.flat(z + g.pad, y + g.pad, g.pad);
                    double* dst = o + c * g.d.size() + g.d.index(z, y, 0);
                    for (int xx = 0; xx < g.d.x; ++xx) dst[xx] = s[xx] + bv[c];
                }
            }
        }
    }

    const Var inputs[] = {x, weight, bias};
    return tape.record(std::move(out), inputs, [x, weight, bias, spec](Tape& t, const Tensor& gout) {
        const Tensor& xv = t.value(x);
        const Geometry g(spec, xv.spatial());
        const Eigen::Index P = g.padded_size();
        const std::size_t S = g.d.size();
        const bool need_x = t.requires_grad(x);
        const bool need_w = t.requires_grad(weight);

        if (t.requires_grad(bias)) {
            Tensor& gb = t.grad_buffer(bias);
            for (int n = 0; n < gout.batch(); ++n) {
                for (int c = 0; c < g.cout; ++c) {
                    const double* p = gout.plane(n, c);
                    double s = 0.0;
                    for (std::size_t i = 0; i < S; ++i) s += p[i];
                    gb[c] += s;
                }
            }
        }
        if (!need_x && !need_w) return;

        const auto taps = tap_weights(t.value(weight), g);
        const auto offsets = tap_offsets(g);
        std::vector<RowMatrix> gtaps(need_w ? static_cast<std::size_t>(g.taps()) : 0,
                                     RowMatrix::Zero(g.cout, g.cin));
        std::vector<double> in_pad(need_w ? static_cast<std::size_t>(g.cin * P) : 0);
        std::vector<double> gout_pad(static_cast<std::size_t>(g.cout * P));
        std::vector<double> gin_pad(need_x ? static_cast<std::size_t>(g.cin * P) : 0);

        for (int n = 0; n < gout.batch(); ++n) {
            to_padded(gout.plane(n, 0), g.cout, g, gout_pad.data());
            if (need_w) to_padded(xv.plane(n, 0), g.cin, g, in_pad.data());
            if (need_x) std::fill(gin_pad.begin(), gin_pad.end(), 0.0);
            for (Eigen::Index c0 = g.first(); c0 < g.last(); c0 += kChunk) {
                const Eigen::Index cols = std::min(kChunk, g.last() - c0);
                ConstMatrixMap gm(gout_pad.data() + c0, g.cout, cols, Eigen::OuterStride<>(P));
                for (int tp = 0; tp < g.taps(); ++tp) {
                    if (need_w) {
                        ConstMatrixMap im(in_pad.data() + c0 + offsets[tp], g.cin, cols, Eigen::OuterStride<>(P));
                        gtaps[tp].noalias() += gm * im.transpose();
                    }
                    if (need_x) {
                        MatrixMap gi(gin_pad.data() + c0 + offsets[tp], g.cin, cols, Eigen::OuterStride<>(P));
                        gi.noalias() += taps[tp].transpose() * gm;
                    }
                }
            }
            if (need_x) add_from_padded(gin_pad.data(), g.cin, g, t.grad_buffer(x).plane(n, 0));
        }

        if (need_w) {
            Tensor& gw = t.grad_buffer(weight);
            for (int co = 0; co < g.cout; ++co) {
                for (int ci = 0; ci < g.cin; ++ci) {
                    for (int tp = 0; tp < g.taps(); ++tp) {
                        gw[(static_cast<std::size_t>(co) * g.cin + ci) * g.taps() + tp] += gtaps[tp](co, ci);
                    }
                }
            }
        }
    });
}

}  // namespace voxelforge::tn
