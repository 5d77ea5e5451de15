#include "voxelforge/train.hpp"

#include "voxelforge/error.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace voxelforge {

using tn::NamedTensors;
using tn::Tensor;

// ---- optimizer -------------------------------------------------------------

AdamState make_adam(const NamedTensors& params, AdamConfig cfg) {
    AdamState s;
    s.config = cfg;
    for (const auto& p : params) {
        s.m.emplace_back(p.tensor.shape());
        s.v.emplace_back(p.tensor.shape());
    }
    return s;
}

void adam_step(NamedTensors& params, const std::vector<Tensor>& grads, AdamState& state, double lr) {
    if (grads.size() != params.size() || state.m.size() != params.size()) {
        throw ShapeError("adam_step: parameter, gradient and state counts differ");
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (grads[p].shape() != params[p].tensor.shape() || state.m[p].shape() != params[p].tensor.shape()) {
            throw ShapeError("adam_step: shape mismatch for " + params[p].name);
        }
        for (double g : grads[p].values()) {
            if (!std::isfinite(g)) {
                throw NumericError("adam_step: non-finite gradient for " + params[p].name + " at step " +
                                   std::to_string(state.step + 1));
            }
        }
    }
    ++state.step;
    const AdamConfig& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto w = params[p].tensor.values();
        auto g = grads[p].values();
        auto m = state.m[p].values();
        auto v = state.v[p].values();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i] + c.weight_decay * w[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
        }
    }
}

// ---- schedules -------------------------------------------------------------

void SwaConfig::validate() const {
    if (cycle_epochs < 1 || cycles < 0 || snapshot_every < 1) {
        throw ConfigError("swa: cycle_epochs and snapshot_every must be >= 1, cycles >= 0");
    }
    if (cycle_epochs % snapshot_every != 0) throw ConfigError("swa.snapshot_every: must divide swa.cycle_epochs");
    if (!(lr_restart >= 0.0)) throw ConfigError("swa.lr_restart: must be >= 0");
}

void ScheduleA::validate() const {
    if (epochs_total < 1) throw ConfigError("schedule_a.epochs_total: must be >= 1");
    if (flat_epochs < 0 || flat_epochs >= epochs_total) {
        throw ConfigError("schedule_a.flat_epochs: must lie in [0, epochs_total)");
    }
    if (!(lr0 > 0.0)) throw ConfigError("schedule_a.lr0: must be > 0");
    swa.validate();
}

ScheduleA ScheduleA::scaled(int factor) const {
    if (factor < 1) throw ConfigError("toy_scale_factor: must be >= 1");
    ScheduleA s = *this;
    s.epochs_total = std::max(1, epochs_total / factor);
    s.flat_epochs = std::min(flat_epochs / factor, s.epochs_total - 1);
    s.swa.cycle_epochs = std::max(1, swa.cycle_epochs / factor);
    int every = std::max(1, swa.snapshot_every / factor);
    while (s.swa.cycle_epochs % every != 0) --every;
    s.swa.snapshot_every = every;
    return s;
}

void ScheduleB::validate() const {
    if (epochs_max < 1) throw ConfigError("schedule_b.epochs_max: must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigError("schedule_b.lr0: must be > 0");
    if (batch < 1) throw ConfigError("schedule_b.batch: must be >= 1");
}

ScheduleB ScheduleB::scaled(int factor) const {
    if (factor < 1) throw ConfigError("toy_scale_factor: must be >= 1");
    ScheduleB s = *this;
    s.epochs_max = std::max(1, epochs_max / factor);
    return s;
}

double cosine_lr(double epoch, const ScheduleA& s) {
    if (!(epoch >= 0.0 && epoch <= s.epochs_total)) {
        throw RangeError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(s.epochs_total) + "]");
    }
    if (epoch < s.flat_epochs) return s.lr0;
    const double progress = (epoch - s.flat_epochs) / static_cast<double>(s.epochs_total - s.flat_epochs);
    return s.lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double swa_cycle_lr(double epoch_in_cycle, const SwaConfig& s) {
    if (!(epoch_in_cycle >= 0.0 && epoch_in_cycle <= s.cycle_epochs)) {
        throw RangeError("swa_cycle_lr: epoch " + std::to_string(epoch_in_cycle) + " outside [0, " +
                         std::to_string(s.cycle_epochs) + "]");
    }
    return s.lr_restart * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch_in_cycle / s.cycle_epochs));
}

double cosine_annealing_lr(double epoch, double lr0, int total) {
    if (total < 1 || !(epoch >= 0.0 && epoch <= total)) {
        throw RangeError("cosine_annealing_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                         std::to_string(total) + "]");
    }
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total));
}

// ---- self-ensembling ---------------------------------------------------------

void swa_update(SWAState& state, const NamedTensors& snapshot) {
    if (state.count == 0) {
        state.mean = snapshot;
        state.count = 1;
        return;
    }
    if (snapshot.size() != state.mean.size()) throw ShapeError("swa_update: snapshot layout differs from mean");
    const double inv = 1.0 / static_cast<double>(state.count + 1);
    for (std::size_t p = 0; p < snapshot.size(); ++p) {
        auto& mean = state.mean[p];
        const auto& snap = snapshot[p];
        if (mean.name != snap.name || mean.tensor.shape() != snap.tensor.shape()) {
            throw ShapeError("swa_update: snapshot parameter " + snap.name + " does not match " + mean.name);
        }
        auto mv = mean.tensor.values();
        auto sv = snap.tensor.values();
        for (std::size_t i = 0; i < mv.size(); ++i) mv[i] += (sv[i] - mv[i]) * inv;
    }
    ++state.count;
}

// ---- data management ---------------------------------------------------------

FoldSplit five_fold_split(const std::vector<std::string>& case_ids, std::uint64_t seed) {
    std::vector<std::string> ids = case_ids;
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    FoldSplit folds;
    for (std::size_t i = 0; i < ids.size(); ++i) folds[i % 5].push_back(ids[i]);
    return folds;
}

std::vector<std::string> filter_training_set(const std::vector<std::pair<std::string, double>>& final_losses,
                                             double threshold_quantile) {
    if (!(threshold_quantile >= 0.0 && threshold_quantile <= 1.0)) {
        throw RangeError("filter_training_set: quantile must lie in [0, 1]");
    }
    if (final_losses.empty()) return {};
    std::vector<double> sorted;
    for (const auto& [id, loss] : final_losses) sorted.push_back(loss);
    std::sort(sorted.begin(), sorted.end());
    const double threshold = nearest_rank(sorted, threshold_quantile * 100.0);
    std::vector<std::string> kept;
    for (const auto& [id, loss] : final_losses) {
        if (!(loss > threshold)) kept.push_back(id);
    }
    return kept;
}

TrainingCase prepare_case(std::string id, const Volume4D& raw, const LabelMap& labels, NormMode mode) {
    if (!(raw.dims() == labels.dims())) throw ShapeError("prepare_case: image and labelmap dims differ for " + id);
    const Volume4D normalized = normalize(raw, mode);
    const BBox box = brain_bounding_box(raw);
    return {std::move(id), crop_to_bbox(normalized, box), crop_to_bbox(labels, box)};
}

// ---- pipelines -----------------------------------------------------------------

void TrainConfig::validate() const {
    arch.validate();
    loss.validate();
    augment.validate();
    if (patch.z % 8 || patch.y % 8 || patch.x % 8 || patch.z < 8 || patch.y < 8 || patch.x < 8) {
        throw ConfigError("train.patch: every component must be a positive multiple of 8");
    }
    if (repeats_per_epoch < 1) throw ConfigError("train.repeats_per_epoch: must be >= 1");
    if (pipeline == PipelineKind::A) {
        schedule_a.validate();
    } else {
        schedule_b.validate();
    }
}

TrainConfig TrainConfig::preset(PipelineKind kind) {
    TrainConfig c;
    c.pipeline = kind;
    if (kind == PipelineKind::A) {
        c.arch.norm = NormKind::Group;
        c.loss.variant = DiceVariant::SquaredDenom;
        c.augment = AugmentPolicy::pipeline_a();
    } else {
        c.arch.norm = NormKind::Instance;
        c.loss.variant = DiceVariant::PlainDenom;
        c.augment = AugmentPolicy::pipeline_b();
    }
    return c;
}

namespace {

enum StreamTag : std::uint32_t { kInit = 1, kOrder = 2, kSample = 3 };

// Independent stream per (tag, epoch, index) so results do not depend on
// the order in which samples are produced.
std::mt19937_64 stream(std::uint64_t seed, StreamTag tag, std::uint32_t a = 0, std::uint32_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), a, b};
    return std::mt19937_64(seq);
}

struct Sample {
    Tensor image;
    Tensor target;
};

Sample draw_sample(const TrainingCase& c, const TrainConfig& cfg, std::mt19937_64& rng) {
    auto [img, lm] = random_crop_patch(c.image, c.labels, cfg.patch, rng);
    auto [aug_img, aug_lm] = apply_policy(img, lm, cfg.augment, rng);
    return {volume_to_tensor(aug_img), regions_to_tensor(labelmap_to_regions(aug_lm))};
}

// One forward/backward/update on a batch; returns the loss before the update.
double train_step(ModelParams& params, AdamState& adam, const std::vector<Sample>& batch, const DiceLossSpec& loss,
                  double lr) {
    std::vector<Tensor> images, targets;
    for (const auto& s : batch) {
        images.push_back(s.image);
        targets.push_back(s.target);
    }
    tn::Tape tape;
    std::vector<tn::Var> vars;
    const Tensor x = batch.size() == 1 ? images.front() : stack_batch(images);
    const Tensor y = batch.size() == 1 ? targets.front() : stack_batch(targets);
    ModelOutputs out = forward(tape, params, tape.constant(x), true, &vars);
    tn::Var total = total_loss(out, y, loss);
    const double value = total.value().item();
    if (!std::isfinite(value)) throw NumericError("non-finite training loss");
    tape.backward(total);
    std::vector<Tensor> grads;
    grads.reserve(vars.size());
    for (tn::Var v : vars) grads.push_back(tape.grad(v));
    adam_step(params.tensors, grads, adam, lr);
    return value;
}

std::vector<std::size_t> epoch_order(std::size_t n_cases, int repeats, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order;
    for (int r = 0; r < repeats; ++r) {
        for (std::size_t i = 0; i < n_cases; ++i) order.push_back(i);
    }
    auto rng = stream(seed, kOrder, static_cast<std::uint32_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// Runs one epoch of batch-1 (or batch-k) training and returns the mean loss.
double run_epoch(ModelParams& params, AdamState& adam, const std::vector<TrainingCase>& train, const TrainConfig& cfg,
                 int epoch, double lr, int batch_size) {
    const auto order = epoch_order(train.size(), cfg.repeats_per_epoch, cfg.seed, epoch);
    double sum = 0.0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        std::vector<Sample> batch;
        for (std::size_t j = start; j < std::min(order.size(), start + batch_size); ++j) {
            auto rng = stream(cfg.seed, kSample, static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(j));
            batch.push_back(draw_sample(train[order[j]], cfg, rng));
        }
        try {
            sum += train_step(params, adam, batch, cfg.loss, lr);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(steps) + ")");
        }
        ++steps;
    }
    return sum / std::max(steps, 1);
}

void require_cases(const std::vector<TrainingCase>& cases, const char* what) {
    if (cases.empty()) throw ConfigError(std::string(what) + " fold is empty");
}

}  // namespace

double validation_loss(const ModelParams& params, const std::vector<TrainingCase>& cases, const DiceLossSpec& loss) {
    double sum = 0.0;
    for (const auto& c : cases) {
        auto [img, pad] = pad_to_multiple(c.image, 8);
        const LabelMap lm = pad_to_size(c.labels, pad);
        tn::Tape tape;
        ModelOutputs out = forward(tape, params, tape.constant(volume_to_tensor(img)), false);
        sum += total_loss(out, regions_to_tensor(labelmap_to_regions(lm)), loss).value().item();
    }
    return cases.empty() ? 0.0 : sum / static_cast<double>(cases.size());
}

TrainResult train_pipeline_A(const std::vector<TrainingCase>& train, const std::vector<TrainingCase>& val,
                             const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    require_cases(train, "training");
    const ScheduleA& sched = cfg.schedule_a;

    TrainResult result;
    auto init_rng = stream(cfg.seed, kInit);
    ModelParams params = build_model(cfg.arch, init_rng);
    AdamState adam = make_adam(params.tensors);

    auto finish_epoch = [&](const char* phase, int epoch, double lr, double loss) {
        EpochRecord rec{phase, epoch, lr, loss, std::nullopt};
        if (!val.empty()) rec.val_loss = validation_loss(params, val, cfg.loss);
        result.history.push_back(rec);
        spdlog::debug("epoch {} [{}] lr={:.3e} loss={:.5f}", epoch, phase, lr, loss);
        if (on_epoch) on_epoch(rec);
    };

    for (int e = 0; e < sched.epochs_total; ++e) {
        const double lr = cosine_lr(e, sched);
        finish_epoch("main", e, lr, run_epoch(params, adam, train, cfg, e, lr, 1));
    }

    // Fresh optimizer state for the averaging phase.
    adam = make_adam(params.tensors);
    result.adam_reset_for_swa = true;
    SWAState swa;
    for (int cycle = 0; cycle < sched.swa.cycles; ++cycle) {
        for (int ec = 0; ec < sched.swa.cycle_epochs; ++ec) {
            const int e = sched.epochs_total + cycle * sched.swa.cycle_epochs + ec;
            const double lr = swa_cycle_lr(ec, sched.swa);
            finish_epoch("swa", e, lr, run_epoch(params, adam, train, cfg, e, lr, 1));
            if ((ec + 1) % sched.swa.snapshot_every == 0) {
                swa_update(swa, params.tensors);
                result.snapshot_epochs.push_back(e);
            }
        }
    }
    if (swa.count > 0) params.tensors = std::move(swa.mean);
    result.params = std::move(params);
    return result;
}

std::size_t select_best_epoch(const std::vector<double>& val_losses) {
    if (val_losses.empty()) throw RangeError("select_best_epoch: no validation losses");
    std::size_t best = 0;
    for (std::size_t i = 1; i < val_losses.size(); ++i) {
        if (val_losses[i] < val_losses[best]) best = i;
    }
    return best;
}

TrainResult train_pipeline_B(const std::vector<TrainingCase>& train, const std::vector<TrainingCase>& val,
                             const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    require_cases(train, "training");
    require_cases(val, "validation");
    const ScheduleB& sched = cfg.schedule_b;

    TrainResult result;
    auto init_rng = stream(cfg.seed, kInit);
    ModelParams params = build_model(cfg.arch, init_rng);
    AdamState adam = make_adam(params.tensors);
    ModelParams best = params;
    std::vector<double> val_losses;

    for (int e = 0; e < sched.epochs_max; ++e) {
        const double lr = cosine_annealing_lr(e, sched.lr0, sched.epochs_max);
        double loss = 0.0;
        if (sched.unit == IterationUnit::Epoch) {
            loss = run_epoch(params, adam, train, cfg, e, lr, sched.batch);
        } else {
            // One optimizer step per iteration on a random batch.
            auto order = epoch_order(train.size(), 1, cfg.seed, e);
            std::vector<Sample> batch;
            for (std::size_t j = 0; j < static_cast<std::size_t>(sched.batch); ++j) {
                auto rng = stream(cfg.seed, kSample, static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(j));
                batch.push_back(draw_sample(train[order[j % order.size()]], cfg, rng));
            }
            loss = train_step(params, adam, batch, cfg.loss, lr);
        }
        const double vl = validation_loss(params, val, cfg.loss);
        val_losses.push_back(vl);
        if (select_best_epoch(val_losses) == val_losses.size() - 1) best = params;
        EpochRecord rec{"b", e, lr, loss, vl};
        result.history.push_back(rec);
        spdlog::debug("epoch {} [b] lr={:.3e} loss={:.5f} val={:.5f}", e, lr, loss, vl);
        if (on_epoch) on_epoch(rec);
    }
    const std::size_t sel = select_best_epoch(val_losses);
    result.selected_epoch = static_cast<int>(sel);
    result.selected_val_loss = val_losses[sel];
    result.params = std::move(best);
    return result;
}

}  // namespace voxelforge
