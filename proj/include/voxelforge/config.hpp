#pragma once

#include "voxelforge/preprocess.hpp"
#include "voxelforge/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace voxelforge {

using OrderedJson = nlohmann::ordered_json;

struct PhantomSection {
    int cases = 5;
    Dims3 dims{32, 32, 32};
};

struct PreprocessSection {
    std::optional<NormMode> mode;  // defaults to the pipeline's scheme
    std::string images;
    std::string labels;
};

struct TrainSection {
    PipelineKind pipeline = PipelineKind::A;
    std::string images;
    std::string labels;
    int base_width = 8;
    std::optional<NormKind> norm;  // defaults to the pipeline's norm
    Dims3 patch{128, 128, 128};
    int toy_scale_factor = 1;
    std::optional<double> lr0;
    std::optional<double> lr_restart;  // pipeline A; lr0 / 2 when unset
    int repeats_per_epoch = 1;
    double noise_probability = 0.2;
    double dice_numerator_factor = 2.0;
    IterationUnit iteration_unit = IterationUnit::Epoch;
    std::optional<double> filter_quantile;
};

struct InferSection {
    PipelineKind pipeline = PipelineKind::A;
    std::string images;
    std::vector<std::string> checkpoints;
    bool tta = true;
    double threshold = 0.5;
};

struct MergeSection {
    std::string a;
    std::string b;
};

struct EvaluateSection {
    std::string pred;
    std::string ref;
};

struct RunConfig {
    std::optional<std::uint64_t> seed;
    std::string output_dir = "out";
    int jobs = 1;
    PhantomSection phantom;
    PreprocessSection preprocess;
    TrainSection train;
    InferSection infer;
    MergeSection merge;
    EvaluateSection evaluate;

    /// Collects every problem for `command` and throws one ConfigError
    /// listing all of them.
    void validate(const std::string& command) const;

    /// Resolved training settings (pipeline preset, toy scaling, overrides).
    TrainConfig train_config() const;
    NormMode norm_mode(PipelineKind kind) const;
};

/// Parses a config document; unknown keys are errors. Missing keys keep
/// their defaults.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

/// Fully resolved config, defaults filled in.
OrderedJson config_to_json(const RunConfig& c);

/// Everything the training run derives from the config: norm mode, loss
/// variant, augmentation probabilities, resolved schedules, optimizer.
OrderedJson training_settings_json(const RunConfig& c);

const char* to_string(PipelineKind k);
const char* to_string(NormMode m);
const char* to_string(NormKind k);

}  // namespace voxelforge
