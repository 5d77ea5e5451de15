#pragma once

#include "voxelforge/augment.hpp"
#include "voxelforge/preprocess.hpp"
#include "voxelforge/unet3d.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace voxelforge {

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamState {
    AdamConfig config;
    std::vector<tn::Tensor> m;
    std::vector<tn::Tensor> v;
    long step = 0;
};

AdamState make_adam(const tn::NamedTensors& params, AdamConfig cfg = {});

/// Bias-corrected Adam update. Throws NumericError naming the parameter when
/// a gradient is not finite.
void adam_step(tn::NamedTensors& params, const std::vector<tn::Tensor>& grads, AdamState& state, double lr);

// ---- schedules -------------------------------------------------------------

struct SwaConfig {
    double lr_restart = 5e-5;
    int cycle_epochs = 30;
    int snapshot_every = 3;
    int cycles = 5;

    void validate() const;
    int total_epochs() const { return cycle_epochs * cycles; }
    int snapshots_per_cycle() const { return cycle_epochs / snapshot_every; }
    int total_snapshots() const { return snapshots_per_cycle() * cycles; }
};

struct ScheduleA {
    int epochs_total = 200;
    int flat_epochs = 100;
    double lr0 = 1e-4;
    SwaConfig swa;

    void validate() const;
    /// Divides every epoch count by `factor` (at least one epoch each); the
    /// snapshot period is shrunk until it divides the cycle length.
    ScheduleA scaled(int factor) const;
};

enum class IterationUnit { Epoch, Step };

struct ScheduleB {
    int epochs_max = 400;
    double lr0 = 1e-4;
    int batch = 3;
    IterationUnit unit = IterationUnit::Epoch;

    void validate() const;
    ScheduleB scaled(int factor) const;
};

/// Constant lr0 for the flat part, then half-cosine down to 0 at epochs_total.
double cosine_lr(double epoch, const ScheduleA& s);
/// Half-cosine from lr_restart to 0 over one cycle.
double swa_cycle_lr(double epoch_in_cycle, const SwaConfig& s);
/// Cosine annealing over the whole run, lr0 at 0 and 0 at `total`.
double cosine_annealing_lr(double epoch, double lr0, int total);

// ---- self-ensembling ---------------------------------------------------------

struct SWAState {
    std::size_t count = 0;
    tn::NamedTensors mean;
};

/// mean <- mean + (snapshot - mean) / (count + 1)
void swa_update(SWAState& state, const tn::NamedTensors& snapshot);

// ---- data management ---------------------------------------------------------

using FoldSplit = std::array<std::vector<std::string>, 5>;

/// Seeded shuffle, then round-robin assignment to five folds.
FoldSplit five_fold_split(const std::vector<std::string>& case_ids, std::uint64_t seed);

/// Drops cases whose final loss is strictly above the nearest-rank quantile
/// of all losses. Keeps input order.
std::vector<std::string> filter_training_set(const std::vector<std::pair<std::string, double>>& final_losses,
                                             double threshold_quantile);

/// One normalized, brain-cropped case.
struct TrainingCase {
    std::string id;
    Volume4D image;
    LabelMap labels;
};

/// Normalizes every channel, then crops image and labels to the brain box.
TrainingCase prepare_case(std::string id, const Volume4D& raw, const LabelMap& labels, NormMode mode);

// ---- pipelines -----------------------------------------------------------------

enum class PipelineKind { A, B };

struct TrainConfig {
    PipelineKind pipeline = PipelineKind::A;
    ArchConfig arch;
    DiceLossSpec loss;
    AugmentPolicy augment = AugmentPolicy::pipeline_a();
    Dims3 patch{128, 128, 128};
    ScheduleA schedule_a;
    ScheduleB schedule_b;
    std::uint64_t seed = 0;
    // Passes over the training cases that make up one epoch.
    int repeats_per_epoch = 1;

    void validate() const;
    /// Preset matching one of the two pipelines (norm, loss, augmentation).
    static TrainConfig preset(PipelineKind kind);
};

struct EpochRecord {
    std::string phase;  // "main", "swa" or "b"
    int epoch = 0;      // global epoch index
    double lr = 0.0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochRecord> history;
    std::vector<int> snapshot_epochs;  // global epoch index after which a snapshot was taken
    std::optional<int> selected_epoch;
    std::optional<double> selected_val_loss;
    bool adam_reset_for_swa = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mean total_loss over whole (padded) validation cases, no augmentation.
double validation_loss(const ModelParams& params, const std::vector<TrainingCase>& cases, const DiceLossSpec& loss);

/// Main phase with cosine decay after the flat part, then SWA cycles with a
/// fresh Adam state; returns the average of all snapshots.
TrainResult train_pipeline_A(const std::vector<TrainingCase>& train, const std::vector<TrainingCase>& val,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Cosine-annealed training; returns the parameters of the epoch with the
/// lowest validation loss (earliest on ties).
TrainResult train_pipeline_B(const std::vector<TrainingCase>& train, const std::vector<TrainingCase>& val,
                             const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Selects the index of the smallest value, earliest on ties.
std::size_t select_best_epoch(const std::vector<double>& val_losses);

}  // namespace voxelforge
