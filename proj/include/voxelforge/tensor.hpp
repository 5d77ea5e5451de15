#pragma once

// Minimal reverse-mode differentiation over dense double tensors. Activations
// are 5-axis (batch, channel, z, y, x); parameters may have any rank.

#include "voxelforge/volio.hpp"

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace voxelforge::tn {

using Shape = std::vector<int>;

std::string to_string(const Shape& s);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double item() const;

    // 5-axis accessors; valid only for rank-5 tensors.
    int batch() const { return shape_[0]; }
    int channels() const { return shape_[1]; }
    Dims3 spatial() const { return {shape_[2], shape_[3], shape_[4]}; }
    std::size_t spatial_size() const { return spatial().size(); }
    double* plane(int n, int c) { return values_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * spatial_size(); }
    const double* plane(int n, int c) const {
        return values_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * spatial_size();
    }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

Shape shape5(int n, int c, Dims3 d);
void require_rank5(const Tensor& t, const char* op);

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Ordered record of executed operations. Backward replays the recorded
/// closures in reverse order and accumulates gradients into every node that
/// depends on a requires_grad leaf.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Var leaf(Tensor value, bool requires_grad);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records an op output. The closure is kept only when some input needs
    /// gradients.
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    const Tensor& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    /// Gradient accumulated for v; zeros when nothing reached it.
    Tensor grad(Var v) const;

    /// Gradient buffer for v, allocated as zeros on first use. Backward
    /// closures accumulate into it.
    Tensor& grad_buffer(Var v);

    void backward(Var root);                           // root must hold one element
    void backward(Var root, const Tensor& seed);       // arbitrary seed of root's shape

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Node& node(Var v);
    const Node& node(Var v) const;

    std::deque<Node> nodes_;
};

// ---- operations --------------------------------------------------------

struct ConvSpec {
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 3;    // 1 or 3
    int dilation = 1;  // 1 or 2

    int padding() const { return dilation * (kernel - 1) / 2; }
    void validate() const;
    Shape weight_shape() const { return {out_channels, in_channels, kernel, kernel, kernel}; }
};

/// Zero-padded cross-correlation preserving spatial dims. weight has shape
/// (out, in, k, k, k), bias (out).
Var conv3d(Var x, Var weight, Var bias, const ConvSpec& spec);
Var relu(Var x);
Var sigmoid(Var x);
Var group_norm(Var x, int groups, Var gamma, Var beta, double eps = 1e-5);
Var instance_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// 2x2x2 max pooling with stride 2; the first maximum in row-major order wins.
Var maxpool3d(Var x);
/// Trilinear upsampling by an integer factor, half-pixel (align_corners=false).
Var trilinear_upsample(Var x, int factor);
inline Var trilinear_upsample2x(Var x) { return trilinear_upsample(x, 2); }
Var concat_channels(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double s);
Var sum(Var x);
/// Scalar <x, weights> with a constant weight tensor.
Var dot(Var x, const Tensor& weights);

/// Largest divisor of `channels` that is <= 8.
int default_group_count(int channels);

// ---- named parameters and checkpoints -----------------------------------

struct NamedTensor {
    std::string name;
    Tensor tensor;

    bool operator==(const NamedTensor&) const = default;
};

using NamedTensors = std::vector<NamedTensor>;

const Tensor& find_tensor(const NamedTensors& set, const std::string& name);
std::size_t parameter_count(const NamedTensors& set);

/// TNPK layout: magic | u32 count | per tensor (u16 name length, name,
/// u8 rank, u32 dims, f32 payload). Little-endian.
std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& set);
NamedTensors decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const NamedTensors& set, const std::filesystem::path& path);
NamedTensors load_checkpoint(const std::filesystem::path& path);

// ---- gradient checking ---------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    bool passed(double tol) const { return max_rel_error < tol; }
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckOptions {
    double h = 1e-3;
    // Denominator floor for the relative error, so that gradients that are
    // zero on both sides do not divide by zero.
    double abs_floor = 1e-8;
    // When non-zero, at most this many entries per parameter are probed,
    // spread evenly.
    std::size_t max_checks_per_param = 0;
};

/// Compares tape gradients of f with central differences for every entry of
/// every parameter.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params, const GradCheckOptions& opt = {});

}  // namespace voxelforge::tn
