#include "voxelforge/tensor.hpp"

#include "voxelforge/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace voxelforge::tn {

std::string to_string(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

namespace {

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw ShapeError("negative tensor dimension in " + to_string(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_size(shape_)) {
        throw ShapeError("tensor value count " + std::to_string(values_.size()) + " does not match shape " +
                         to_string(shape_));
    }
}

double Tensor::item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return values_[0];
}

Shape shape5(int n, int c, Dims3 d) { return {n, c, d.z, d.y, d.x}; }

void require_rank5(const Tensor& t, const char* op) {
    if (t.rank() != 5) throw ShapeError(std::string(op) + ": expected a 5-axis tensor, got " + to_string(t.shape()));
}

const Tensor& Var::value() const { return tape->value(*this); }

// ---- tape -----------------------------------------------------------------

Tape::Node& Tape::node(Var v) {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw ShapeError("variable does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
    if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
        throw ShapeError("variable does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || node(in).requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(backward) : nullptr});
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor Tape::grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
    return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
    Node& n = node(v);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::backward(Var root) {
    if (value(root).size() != 1) throw ShapeError("backward() without seed needs a one-element root");
    backward(root, Tensor(value(root).shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed) {
    if (seed.shape() != value(root).shape()) throw ShapeError("backward seed shape differs from root shape");
    for (auto& n : nodes_) n.grad = Tensor{};
    grad_buffer(root) = seed;
    for (std::size_t i = static_cast<std::size_t>(root.id) + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        n.backward(*this, n.grad);
    }
}

// ---- elementwise ------------------------------------------------------------

Var relu(Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    const Var inputs[] = {x};
    return tape.record(std::move(out), inputs, [x](Tape& t, const Tensor& g) {
        if (!t.requires_grad(x)) return;
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > 0.0) gx[i] += g[i];
        }
    });
}

Var sigmoid(Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        if (v >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out[i] = e / (1.0 + e);
        }
    }
    const Var inputs[] = {x};
    Tensor saved = out;
    return tape.record(std::move(out), inputs, [x, y = std::move(saved)](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var add(Var a, Var b) {
    Tape& tape = *a.tape;
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
    }
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    const Var inputs[] = {a, b};
    return tape.record(std::move(out), inputs, [a, b](Tape& t, const Tensor& g) {
        for (Var v : {a, b}) {
            if (!t.requires_grad(v)) continue;
            Tensor& gv = t.grad_buffer(v);
            for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
        }
    });
}

Var scale(Var a, double s) {
    Tape& tape = *a.tape;
    Tensor out = a.value();
    for (double& v : out.values()) v *= s;
    const Var inputs[] = {a};
    return tape.record(std::move(out), inputs, [a, s](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    });
}

Var sum(Var x) {
    Tape& tape = *x.tape;
    const auto vals = x.value().values();
    const double s = std::accumulate(vals.begin(), vals.end(), 0.0);
    const Var inputs[] = {x};
    return tape.record(Tensor::scalar(s), inputs, [x](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (double& v : gx.values()) v += g[0];
    });
}

Var dot(Var x, const Tensor& weights) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    if (xv.size() != weights.size()) throw ShapeError("dot: weight count differs from tensor size");
    double s = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
    const Var inputs[] = {x};
    return tape.record(Tensor::scalar(s), inputs, [x, weights](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * weights[i];
    });
}

// ---- normalization ----------------------------------------------------------

int default_group_count(int channels) {
    for (int g = std::min(8, channels); g > 1; --g) {
        if (channels % g == 0) return g;
    }
    return 1;
}

Var group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    require_rank5(xv, "group_norm");
    const int N = xv.batch();
    const int C = xv.channels();
    if (groups < 1 || C % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
    }
    if (gamma.value().size() != static_cast<std::size_t>(C) || beta.value().size() != static_cast<std::size_t>(C)) {
        throw ShapeError("group_norm: gamma/beta must have one entry per channel");
    }
    const int cpg = C / groups;
    const std::size_t S = xv.spatial_size();
    const std::size_t M = static_cast<std::size_t>(cpg) * S;

    Tensor xhat(xv.shape());
    std::vector<double> inv_std(static_cast<std::size_t>(N) * groups);
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const double* src = xv.plane(n, g * cpg);
            double* dst = xhat.plane(n, g * cpg);
            double mean = 0.0;
            for (std::size_t i = 0; i < M; ++i) mean += src[i];
            mean /= static_cast<double>(M);
            double var = 0.0;
            for (std::size_t i = 0; i < M; ++i) var += (src[i] - mean) * (src[i] - mean);
            var /= static_cast<double>(M);
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(n) * groups + g] = inv;
            for (std::size_t i = 0; i < M; ++i) dst[i] = (src[i] - mean) * inv;
        }
    }

    Tensor out(xv.shape());
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* h = xhat.plane(n, c);
            double* o = out.plane(n, c);
            for (std::size_t i = 0; i < S; ++i) o[i] = gv[c] * h[i] + bv[c];
        }
    }

    const Var inputs[] = {x, gamma, beta};
    return tape.record(std::move(out), inputs,
                       [x, gamma, beta, groups, cpg, S, M, xhat = std::move(xhat),
                        inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                           const int N = g.batch();
                           const int C = g.channels();
                           const Tensor& gv = t.value(gamma);
                           if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                               Tensor& gg = t.grad_buffer(gamma);
                               Tensor& gb = t.grad_buffer(beta);
                               for (int n = 0; n < N; ++n) {
                                   for (int c = 0; c < C; ++c) {
                                       const double* go = g.plane(n, c);
                                       const double* h = xhat.plane(n, c);
                                       double sg = 0.0, sb = 0.0;
                                       for (std::size_t i = 0; i < S; ++i) {
                                           sg += go[i] * h[i];
                                           sb += go[i];
                                       }
                                       gg[c] += sg;
                                       gb[c] += sb;
                                   }
                               }
                           }
                           if (!t.requires_grad(x)) return;
                           Tensor& gx = t.grad_buffer(x);
                           std::vector<double> dxhat(M);
                           for (int n = 0; n < N; ++n) {
                               for (int grp = 0; grp < groups; ++grp) {
                                   double m1 = 0.0, m2 = 0.0;
                                   for (int k = 0; k < cpg; ++k) {
                                       const int c = grp * cpg + k;
                                       const double* go = g.plane(n, c);
                                       const double* h = xhat.plane(n, c);
                                       double* d = dxhat.data() + static_cast<std::size_t>(k) * S;
                                       for (std::size_t i = 0; i < S; ++i) {
                                           d[i] = go[i] * gv[c];
                                           m1 += d[i];
                                           m2 += d[i] * h[i];
                                       }
                                   }
                                   m1 /= static_cast<double>(M);
                                   m2 /= static_cast<double>(M);
                                   const double inv = inv_std[static_cast<std::size_t>(n) * groups + grp];
                                   const double* h = xhat.plane(n, grp * cpg);
                                   double* out = gx.plane(n, grp * cpg);
                                   for (std::size_t i = 0; i < M; ++i) {
                                       out[i] += inv * (dxhat[i] - m1 - h[i] * m2);
                                   }
                               }
                           }
                       });
}

Var instance_norm(Var x, Var gamma, Var beta, double eps) {
    require_rank5(x.value(), "instance_norm");
    return group_norm(x, x.value().channels(), gamma, beta, eps);
}

// ---- pooling / resampling -----------------------------------------------------

Var maxpool3d(Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    require_rank5(xv, "maxpool3d");
    const Dims3 d = xv.spatial();
    if (d.z % 2 || d.y % 2 || d.x % 2) {
        throw ShapeError("maxpool3d: spatial dims must be even, got " + to_string(xv.shape()));
    }
    const Dims3 od{d.z / 2, d.y / 2, d.x / 2};
    Tensor out(shape5(xv.batch(), xv.channels(), od));
    std::vector<std::uint32_t> argmax(out.size());
    std::size_t o = 0;
    for (int n = 0; n < xv.batch(); ++n) {
        for (int c = 0; c < xv.channels(); ++c) {
            const double* src = xv.plane(n, c);
            for (int z = 0; z < od.z; ++z) {
                for (int y = 0; y < od.y; ++y) {
                    for (int xx = 0; xx < od.x; ++xx, ++o) {
                        std::size_t best = d.index(2 * z, 2 * y, 2 * xx);
                        for (int dz = 0; dz < 2; ++dz) {
                            for (int dy = 0; dy < 2; ++dy) {
                                for (int dx = 0; dx < 2; ++dx) {
                                    const std::size_t i = d.index(2 * z + dz, 2 * y + dy, 2 * xx + dx);
                                    if (src[i] > src[best]) best = i;
                                }
                            }
                        }
                        out[o] = src[best];
                        argmax[o] = static_cast<std::uint32_t>(best);
                    }
                }
            }
        }
    }
    const Var inputs[] = {x};
    return tape.record(std::move(out), inputs, [x, argmax = std::move(argmax)](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        const std::size_t in_plane = gx.spatial_size();
        const std::size_t out_plane = g.spatial_size();
        const std::size_t planes = static_cast<std::size_t>(g.batch()) * g.channels();
        for (std::size_t p = 0; p < planes; ++p) {
            for (std::size_t i = 0; i < out_plane; ++i) {
                gx[p * in_plane + argmax[p * out_plane + i]] += g[p * out_plane + i];
            }
        }
    });
}

namespace {

struct Interp1D {
    std::vector<int> i0, i1;
    std::vector<double> w0, w1;
};

Interp1D half_pixel_table(int in, int factor) {
    Interp1D t;
    const int out = in * factor;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w0.resize(out);
    t.w1.resize(out);
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) / factor - 0.5;
        if (src < 0.0) src = 0.0;
        int lo = static_cast<int>(std::floor(src));
        if (lo > in - 1) lo = in - 1;
        const int hi = std::min(lo + 1, in - 1);
        const double frac = src - lo;
        t.i0[o] = lo;
        t.i1[o] = hi;
        t.w1[o] = frac;
        t.w0[o] = 1.0 - frac;
    }
    return t;
}

// Applies the 1-D interpolation along `axis` of every (n, c) plane.
// Forward maps dims `in` to dims with axis scaled; transpose does the reverse.
void interp_axis(const double* src, Dims3 in, double* dst, Dims3 out, int axis, const Interp1D& t, bool transpose) {
    // For the forward pass `in` is the small grid along `axis`; when
    // transposing, `in` is the large grid and contributions scatter back.
    const Dims3 big = transpose ? in : out;
    const Dims3 small = transpose ? out : in;
    if (transpose) std::fill(dst, dst + small.size(), 0.0);
    for (int z = 0; z < big.z; ++z) {
        for (int y = 0; y < big.y; ++y) {
            for (int x = 0; x < big.x; ++x) {
                const int p[3] = {z, y, x};
                const int o = p[axis];
                int a[3] = {z, y, x};
                int b[3] = {z, y, x};
                a[axis] = t.i0[o];
                b[axis] = t.i1[o];
                const std::size_t ia = small.index(a[0], a[1], a[2]);
                const std::size_t ib = small.index(b[0], b[1], b[2]);
                const std::size_t ibig = big.index(z, y, x);
                if (!transpose) {
                    dst[ibig] = t.w0[o] * src[ia] + t.w1[o] * src[ib];
                } else {
                    dst[ia] += t.w0[o] * src[ibig];
                    dst[ib] += t.w1[o] * src[ibig];
                }
            }
        }
    }
}

}  // namespace

Var trilinear_upsample(Var x, int factor) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    require_rank5(xv, "trilinear_upsample");
    if (factor < 1) throw ShapeError("trilinear_upsample: factor must be >= 1");
    const Dims3 d0 = xv.spatial();
    // Stage dims: x scaled, then y, then z.
    const Dims3 d1{d0.z, d0.y, d0.x * factor};
    const Dims3 d2{d0.z, d0.y * factor, d0.x * factor};
    const Dims3 d3{d0.z * factor, d0.y * factor, d0.x * factor};
    const Interp1D tx = half_pixel_table(d0.x, factor);
    const Interp1D ty = half_pixel_table(d0.y, factor);
    const Interp1D tz = half_pixel_table(d0.z, factor);

    Tensor out(shape5(xv.batch(), xv.channels(), d3));
    std::vector<double> s1(d1.size()), s2(d2.size());
    for (int n = 0; n < xv.batch(); ++n) {
        for (int c = 0; c < xv.channels(); ++c) {
            interp_axis(xv.plane(n, c), d0, s1.data(), d1, 2, tx, false);
            interp_axis(s1.data(), d1, s2.data(), d2, 1, ty, false);
            interp_axis(s2.data(), d2, out.plane(n, c), d3, 0, tz, false);
        }
    }
    const Var inputs[] = {x};
    return tape.record(std::move(out), inputs, [x, d0, d1, d2, d3, tx, ty, tz](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        std::vector<double> s1(d1.size()), s2(d2.size()), s0(d0.size());
        for (int n = 0; n < g.batch(); ++n) {
            for (int c = 0; c < g.channels(); ++c) {
                interp_axis(g.plane(n, c), d3, s2.data(), d2, 0, tz, true);
                interp_axis(s2.data(), d2, s1.data(), d1, 1, ty, true);
                interp_axis(s1.data(), d1, s0.data(), d0, 2, tx, true);
                double* dst = gx.plane(n, c);
                for (std::size_t i = 0; i < s0.size(); ++i) dst[i] += s0[i];
            }
        }
    });
}

Var concat_channels(Var a, Var b) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank5(av, "concat_channels");
    require_rank5(bv, "concat_channels");
    if (av.batch() != bv.batch() || !(av.spatial() == bv.spatial())) {
        throw ShapeError("concat_channels: batch/spatial dims differ: " + to_string(av.shape()) + " vs " +
                         to_string(bv.shape()));
    }
    const int ca = av.channels();
    const int cb = bv.channels();
    const std::size_t S = av.spatial_size();
    Tensor out(shape5(av.batch(), ca + cb, av.spatial()));
    for (int n = 0; n < av.batch(); ++n) {
        if (ca) std::copy_n(av.plane(n, 0), ca * S, out.plane(n, 0));
        if (cb) std::copy_n(bv.plane(n, 0), cb * S, out.plane(n, ca));
    }
    const Var inputs[] = {a, b};
    return tape.record(std::move(out), inputs, [a, b, ca, cb, S](Tape& t, const Tensor& g) {
        for (int n = 0; n < g.batch(); ++n) {
            if (t.requires_grad(a) && ca) {
                double* ga = t.grad_buffer(a).plane(n, 0);
                const double* src = g.plane(n, 0);
                for (std::size_t i = 0; i < ca * S; ++i) ga[i] += src[i];
            }
            if (t.requires_grad(b) && cb) {
                double* gb = t.grad_buffer(b).plane(n, 0);
                const double* src = g.plane(n, ca);
                for (std::size_t i = 0; i < cb * S; ++i) gb[i] += src[i];
            }
        }
    });
}

// ---- parameters ---------------------------------------------------------------

const Tensor& find_tensor(const NamedTensors& set, const std::string& name) {
    for (const auto& nt : set) {
        if (nt.name == name) return nt.tensor;
    }
    throw ShapeError("no parameter named '" + name + "'");
}

std::size_t parameter_count(const NamedTensors& set) {
    std::size_t n = 0;
    for (const auto& nt : set) n += nt.tensor.size();
    return n;
}

// ---- gradient check -------------------------------------------------------------

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params, const GradCheckOptions& opt) {
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& p : params) vars.push_back(tape.leaf(p, true));
        Var out = f(tape, vars);
        tape.backward(out);
        for (Var v : vars) analytic.push_back(tape.grad(v));
    }

    auto evaluate = [&](const std::vector<Tensor>& ps) {
        Tape tape;
        std::vector<Var> vars;
        for (const auto& p : ps) vars.push_back(tape.leaf(p, false));
        return f(tape, vars).value().item();
    };

    GradCheckReport report;
    std::vector<Tensor> probe = params;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const std::size_t n = params[p].size();
        std::size_t stride = 1;
        if (opt.max_checks_per_param && n > opt.max_checks_per_param) {
            stride = (n + opt.max_checks_per_param - 1) / opt.max_checks_per_param;
        }
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = params[p][i];
            probe[p][i] = orig + opt.h;
            const double fp = evaluate(probe);
            probe[p][i] = orig - opt.h;
            const double fm = evaluate(probe);
            probe[p][i] = orig;

            const double numeric = (fp - fm) / (2.0 * opt.h);
            const double a = analytic[p][i];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
            ++report.checked;
            report.max_abs_error = std::max(report.max_abs_error, abs_err);
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = p;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace voxelforge::tn
