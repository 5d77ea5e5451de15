#include "voxelforge/unet3d.hpp"

#include "voxelforge/error.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace voxelforge {

using tn::ConvSpec;
using tn::Tape;
using tn::Tensor;
using tn::Var;

void ArchConfig::validate() const {
    if (base_width < 2) throw ConfigError("arch.base_width: must be >= 2");
    if (stages != 4) throw ConfigError("arch.stages: only the four-stage encoder is supported");
    if (input_channels < 1) throw ConfigError("arch.input_channels: must be >= 1");
    if (output_channels < 1) throw ConfigError("arch.output_channels: must be >= 1");
}

std::vector<LayerSpec> layer_table(const ArchConfig& cfg) {
    cfg.validate();
    const int w = cfg.base_width;
    auto conv3 = [](int in, int out, int dilation = 1) { return ConvSpec{in, out, 3, dilation}; };
    auto head = [&](int in) { return ConvSpec{in, cfg.output_channels, 1, 1}; };
    return {
        {"enc1.conv1", conv3(cfg.input_channels, w)},
        {"enc1.conv2", conv3(w, w)},
        {"enc2.conv1", conv3(w, 2 * w)},
        {"enc2.conv2", conv3(2 * w, 2 * w)},
        {"enc3.conv1", conv3(2 * w, 4 * w)},
        {"enc3.conv2", conv3(4 * w, 4 * w)},
        {"enc4.conv1", conv3(4 * w, 8 * w)},
        {"enc4.conv2", conv3(8 * w, 8 * w)},
        {"dil.conv1", conv3(8 * w, 8 * w, 2)},
        {"dil.conv2", conv3(8 * w, 8 * w, 2)},
        {"dec4.conv1", conv3(16 * w, 8 * w)},
        {"dec3.conv1", conv3(8 * w + 4 * w, 4 * w)},
        {"dec3.conv2", conv3(4 * w, 4 * w)},
        {"dec2.conv1", conv3(4 * w + 2 * w, 2 * w)},
        {"dec2.conv2", conv3(2 * w, 2 * w)},
        {"dec1.conv1", conv3(2 * w + w, w)},
        {"dec1.conv2", conv3(w, w)},
        {"head.main", head(w), false},
        {"head.aux1", head(8 * w), false},
        {"head.aux2", head(8 * w), false},
        {"head.aux3", head(4 * w), false},
        {"head.aux4", head(2 * w), false},
    };
}

ModelParams build_model(const ArchConfig& cfg, std::mt19937_64& rng) {
    ModelParams params{cfg, {}};
    for (const auto& layer : layer_table(cfg)) {
        const int fan_in = layer.conv.in_channels * layer.conv.kernel * layer.conv.kernel * layer.conv.kernel;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> init(-bound, bound);
        Tensor weight(layer.conv.weight_shape());
        for (double& v : weight.values()) v = init(rng);
        params.tensors.push_back({layer.name + ".weight", std::move(weight)});
        params.tensors.push_back({layer.name + ".bias", Tensor({layer.conv.out_channels}, 0.0)});
        if (layer.normalized) {
            params.tensors.push_back({layer.name + ".norm.gamma", Tensor({layer.conv.out_channels}, 1.0)});
            params.tensors.push_back({layer.name + ".norm.beta", Tensor({layer.conv.out_channels}, 0.0)});
        }
    }
    return params;
}

ModelParams model_from_tensors(tn::NamedTensors tensors, NormKind norm) {
    const auto it = std::find_if(tensors.begin(), tensors.end(),
                                 [](const tn::NamedTensor& t) { return t.name == "enc1.conv1.weight"; });
    if (it == tensors.end() || it->tensor.rank() != 5) {
        throw FormatError("checkpoint: missing or malformed enc1.conv1.weight");
    }
    const ArchConfig cfg{it->tensor.shape()[0], 4, norm, it->tensor.shape()[1], 3};
    std::mt19937_64 rng(0);
    const ModelParams expected = build_model(cfg, rng);
    if (expected.tensors.size() != tensors.size()) {
        throw FormatError("checkpoint: expected " + std::to_string(expected.tensors.size()) + " tensors, found " +
                          std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].name != expected.tensors[i].name ||
            tensors[i].tensor.shape() != expected.tensors[i].tensor.shape()) {
            throw FormatError("checkpoint: tensor " + tensors[i].name + " " + tn::to_string(tensors[i].tensor.shape()) +
                              " does not match " + expected.tensors[i].name + " " +
                              tn::to_string(expected.tensors[i].tensor.shape()));
        }
    }
    return {cfg, std::move(tensors)};
}

namespace {

class Network {
public:
    Network(Tape& tape, const ModelParams& params, bool requires_grad, std::vector<Var>* param_vars)
        : norm_(params.arch.norm) {
        for (const auto& layer : layer_table(params.arch)) specs_[layer.name] = layer;
        for (const auto& nt : params.tensors) {
            Var v = tape.leaf(nt.tensor, requires_grad);
            vars_[nt.name] = v;
            if (param_vars) param_vars->push_back(v);
        }
    }

    Network(const ModelParams& params, std::span<const Var> vars) : norm_(params.arch.norm) {
        if (vars.size() != params.tensors.size()) throw ShapeError("forward: one var per parameter tensor required");
        for (const auto& layer : layer_table(params.arch)) specs_[layer.name] = layer;
        for (std::size_t i = 0; i < vars.size(); ++i) {
            if (vars[i].value().shape() != params.tensors[i].tensor.shape()) {
                throw ShapeError("forward: var for " + params.tensors[i].name + " has the wrong shape");
            }
            vars_[params.tensors[i].name] = vars[i];
        }
    }

    Var conv(const std::string& name, Var x) {
        const LayerSpec& layer = spec(name);
        Var y = tn::conv3d(x, param(name + ".weight"), param(name + ".bias"), layer.conv);
        if (!layer.normalized) return y;
        Var gamma = param(name + ".norm.gamma");
        Var beta = param(name + ".norm.beta");
        y = norm_ == NormKind::Group ? tn::group_norm(y, tn::default_group_count(layer.conv.out_channels), gamma, beta)
                                     : tn::instance_norm(y, gamma, beta);
        return tn::relu(y);
    }

    Var head(const std::string& name, Var x, int upsample) {
        Var y = tn::sigmoid(conv(name, x));
        return upsample > 1 ? tn::trilinear_upsample(y, upsample) : y;
    }

private:
    const LayerSpec& spec(const std::string& name) const {
        auto it = specs_.find(name);
        if (it == specs_.end()) throw ShapeError("unknown layer " + name);
        return it->second;
    }
    Var param(const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end()) throw ShapeError("checkpoint is missing parameter '" + name + "'");
        return it->second;
    }

    NormKind norm_;
    std::unordered_map<std::string, LayerSpec> specs_;
    std::unordered_map<std::string, Var> vars_;
};

void check_params(const ModelParams& params) {
    for (const auto& layer : layer_table(params.arch)) {
        const Tensor& w = tn::find_tensor(params.tensors, layer.name + ".weight");
        if (w.shape() != layer.conv.weight_shape()) {
            throw ShapeError("parameter " + layer.name + ".weight has shape " + tn::to_string(w.shape()) +
                             ", architecture expects " + tn::to_string(layer.conv.weight_shape()));
        }
    }
}

}  // namespace

namespace {

void check_input(const ModelParams& params, Var x) {
    const Tensor& xv = x.value();
    tn::require_rank5(xv, "forward");
    const Dims3 d = xv.spatial();
    if (d.z % 8 || d.y % 8 || d.x % 8) {
        throw ShapeError("forward: spatial dims must be divisible by 8, got " + tn::to_string(xv.shape()));
    }
    if (xv.channels() != params.arch.input_channels) {
        throw ShapeError("forward: input has " + std::to_string(xv.channels()) + " channels, model expects " +
                         std::to_string(params.arch.input_channels));
    }
    check_params(params);
}

ModelOutputs run_network(Network& net, Var x) {
    Var e1 = net.conv("enc1.conv2", net.conv("enc1.conv1", x));
    Var e2 = net.conv("enc2.conv2", net.conv("enc2.conv1", tn::maxpool3d(e1)));
    Var e3 = net.conv("enc3.conv2", net.conv("enc3.conv1", tn::maxpool3d(e2)));
    Var e4 = net.conv("enc4.conv2", net.conv("enc4.conv1", tn::maxpool3d(e3)));
    Var dil = net.conv("dil.conv2", net.conv("dil.conv1", e4));

    Var d4 = net.conv("dec4.conv1", tn::concat_channels(e4, dil));
    Var d3 = net.conv("dec3.conv2", net.conv("dec3.conv1", tn::concat_channels(tn::trilinear_upsample2x(d4), e3)));
    Var d2 = net.conv("dec2.conv2", net.conv("dec2.conv1", tn::concat_channels(tn::trilinear_upsample2x(d3), e2)));
    Var d1 = net.conv("dec1.conv2", net.conv("dec1.conv1", tn::concat_channels(tn::trilinear_upsample2x(d2), e1)));

    ModelOutputs out;
    out.main = net.head("head.main", d1, 1);
    out.aux[0] = net.head("head.aux1", dil, 8);
    out.aux[1] = net.head("head.aux2", d4, 8);
    out.aux[2] = net.head("head.aux3", d3, 4);
    out.aux[3] = net.head("head.aux4", d2, 2);
    return out;
}

}  // namespace

ModelOutputs forward(Tape& tape, const ModelParams& params, Var x, bool requires_grad, std::vector<Var>* param_vars) {
    check_input(params, x);
    Network net(tape, params, requires_grad, param_vars);
    return run_network(net, x);
}

ModelOutputs forward(const ModelParams& params, Var x, std::span<const Var> param_vars) {
    check_input(params, x);
    Network net(params, param_vars);
    return run_network(net, x);
}

Tensor predict(const ModelParams& params, const Tensor& x) {
    Tape tape;
    Var in = tape.constant(x);
    return forward(tape, params, in, false).main.value();
}

void DiceLossSpec::validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("dice.epsilon: must be > 0");
    if (!(numerator_factor > 0.0)) throw ConfigError("dice.numerator_factor: must be > 0");
}

Var dice_loss(Var pred, const Tensor& target, const DiceLossSpec& spec) {
    spec.validate();
    const Tensor& s = pred.value();
    tn::require_rank5(s, "dice_loss");
    if (s.shape() != target.shape()) {
        throw ShapeError("dice_loss: prediction " + tn::to_string(s.shape()) + " vs target " +
                         tn::to_string(target.shape()));
    }
    for (double v : s.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw RangeError("dice_loss: prediction outside [0, 1]");
    }
    const int N = s.batch();
    const int C = s.channels();
    const std::size_t S = s.spatial_size();
    const bool squared = spec.variant == DiceVariant::SquaredDenom;

    std::vector<double> inter(C, 0.0), denom(C, 0.0);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* sp = s.plane(n, c);
            const double* rp = target.plane(n, c);
            for (std::size_t i = 0; i < S; ++i) {
                inter[c] += sp[i] * rp[i];
                denom[c] += squared ? sp[i] * sp[i] + rp[i] * rp[i] : sp[i] + rp[i];
            }
        }
    }
    double mean_term = 0.0;
    for (int c = 0; c < C; ++c) {
        mean_term += (spec.numerator_factor * inter[c] + spec.epsilon) / (denom[c] + spec.epsilon);
    }
    mean_term /= C;

    const Var inputs[] = {pred};
    return pred.tape->record(
        Tensor::scalar(1.0 - mean_term), inputs,
        [pred, target, spec, inter, denom, squared](Tape& t, const Tensor& g) {
            const Tensor& s = t.value(pred);
            Tensor& gs = t.grad_buffer(pred);
            const int N = s.batch();
            const int C = s.channels();
            const std::size_t S = s.spatial_size();
            for (int c = 0; c < C; ++c) {
                const double num = spec.numerator_factor * inter[c] + spec.epsilon;
                const double den = denom[c] + spec.epsilon;
                // d(1 - mean term)/dS = -(1/C) * (f R / den - num * dD/dS / den^2)
                const double a = -g[0] / C;
                for (int n = 0; n < N; ++n) {
                    const double* sp = s.plane(n, c);
                    const double* rp = target.plane(n, c);
                    double* gp = gs.plane(n, c);
                    for (std::size_t i = 0; i < S; ++i) {
                        const double dd = squared ? 2.0 * sp[i] : 1.0;
                        gp[i] += a * (spec.numerator_factor * rp[i] / den - num * dd / (den * den));
                    }
                }
            }
        });
}

Var total_loss(const ModelOutputs& out, const Tensor& target, const DiceLossSpec& spec) {
    Var total = dice_loss(out.main, target, spec);
    for (const Var& aux : out.aux) total = tn::add(total, dice_loss(aux, target, spec));
    return total;
}

Tensor volume_to_tensor(const Volume4D& v) {
    Tensor t(tn::shape5(1, v.channels(), v.dims()));
    const auto src = v.data();
    std::copy(src.begin(), src.end(), t.values().begin());
    return t;
}

Tensor regions_to_tensor(const RegionMasks& m) {
    Tensor t(tn::shape5(1, 3, m.et.dims));
    const Mask* masks[3] = {&m.et, &m.tc, &m.wt};
    for (int c = 0; c < 3; ++c) {
        double* dst = t.plane(0, c);
        for (std::size_t i = 0; i < masks[c]->size(); ++i) dst[i] = masks[c]->values[i];
    }
    return t;
}

RegionProbs tensor_to_probs(const Tensor& t, int batch_index) {
    tn::require_rank5(t, "tensor_to_probs");
    if (t.channels() != 3) throw ShapeError("tensor_to_probs: expected 3 channels");
    RegionProbs p{Field(t.spatial()), Field(t.spatial()), Field(t.spatial())};
    Field* fields[3] = {&p.et, &p.tc, &p.wt};
    for (int c = 0; c < 3; ++c) {
        const double* src = t.plane(batch_index, c);
        std::copy(src, src + t.spatial_size(), fields[c]->values.begin());
    }
    return p;
}

Tensor stack_batch(const std::vector<Tensor>& items) {
    if (items.empty()) throw ShapeError("stack_batch: no items");
    tn::Shape shape = items.front().shape();
    std::vector<double> values;
    for (const auto& it : items) {
        tn::require_rank5(it, "stack_batch");
        if (it.batch() != 1 || it.channels() != shape[1] || !(it.spatial() == items.front().spatial())) {
            throw ShapeError("stack_batch: items must share channel and spatial dims");
        }
        values.insert(values.end(), it.values().begin(), it.values().end());
    }
    shape[0] = static_cast<int>(items.size());
    return Tensor(std::move(shape), std::move(values));
}

}  // namespace voxelforge
