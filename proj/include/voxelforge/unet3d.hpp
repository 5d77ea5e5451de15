#pragma once

#include "voxelforge/tensor.hpp"
#include "voxelforge/volio.hpp"

#include <array>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace voxelforge {

enum class NormKind { Group, Instance };

struct ArchConfig {
    int base_width = 8;  // 48 in the full-size network
    int stages = 4;
    NormKind norm = NormKind::Group;
    int input_channels = 4;
    int output_channels = 3;

    void validate() const;
};

/// One convolution of the network, optionally followed by normalization + ReLU.
struct LayerSpec {
    std::string name;
    tn::ConvSpec conv;
    bool normalized = true;
};

/// Every convolution in construction order: four encoder stages, the dilated
/// block, the four decoder stages, then the main head and four auxiliary heads.
std::vector<LayerSpec> layer_table(const ArchConfig& cfg);

struct ModelParams {
    ArchConfig arch;
    tn::NamedTensors tensors;
};

ModelParams build_model(const ArchConfig& cfg, std::mt19937_64& rng);

/// Wraps loaded tensors, recovering the width from the first layer and
/// checking every name and shape against the layer table.
ModelParams model_from_tensors(tn::NamedTensors tensors, NormKind norm);

/// Main head plus the four deep-supervision heads, all at input resolution.
struct ModelOutputs {
    tn::Var main;
    std::array<tn::Var, 4> aux;
};

/// Records the forward pass on `tape`. Parameters become leaves; their vars
/// are returned through `param_vars` (same order as params.tensors).
ModelOutputs forward(tn::Tape& tape, const ModelParams& params, tn::Var x, bool requires_grad,
                     std::vector<tn::Var>* param_vars = nullptr);
/// Same network, reading parameters from caller-owned vars (same order as
/// params.tensors) so gradients flow to those vars.
ModelOutputs forward(const ModelParams& params, tn::Var x, std::span<const tn::Var> param_vars);

/// Main-head probabilities without recording gradients.
tn::Tensor predict(const ModelParams& params, const tn::Tensor& x);

enum class DiceVariant {
    SquaredDenom,  // pipeline A: S^2 + R^2 in the denominator
    PlainDenom,    // pipeline B: S + R
};

struct DiceLossSpec {
    DiceVariant variant = DiceVariant::SquaredDenom;
    double epsilon = 1.0;
    // 2 gives the usual soft Dice; with 1 a perfect prediction has loss near 0.5.
    double numerator_factor = 2.0;

    void validate() const;
};

/// 1 - mean over channels of (f * sum(S R) + eps) / (sum(D) + eps), sums
/// pooled over batch and voxels.
tn::Var dice_loss(tn::Var pred, const tn::Tensor& target, const DiceLossSpec& spec);

/// Unweighted sum of the main loss and the four auxiliary losses.
tn::Var total_loss(const ModelOutputs& out, const tn::Tensor& target, const DiceLossSpec& spec);

// Conversions between volumes and 5-axis tensors (batch of one).
tn::Tensor volume_to_tensor(const Volume4D& v);
tn::Tensor regions_to_tensor(const RegionMasks& m);  // channels ET, TC, WT
RegionProbs tensor_to_probs(const tn::Tensor& t, int batch_index = 0);
tn::Tensor stack_batch(const std::vector<tn::Tensor>& items);

}  // namespace voxelforge
