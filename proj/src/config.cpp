#include "voxelforge/config.hpp"

#include "voxelforge/error.hpp"

#include <fstream>
#include <set>

namespace voxelforge {

const char* to_string(PipelineKind k) { return k == PipelineKind::A ? "A" : "B"; }
const char* to_string(NormMode m) { return m == NormMode::MinMaxClip ? "minmax_clip" : "zscore_nonzero"; }
const char* to_string(NormKind k) { return k == NormKind::Group ? "group" : "instance"; }

namespace {

// Reads typed fields from one JSON object, remembering every problem instead
// of stopping at the first.
class Section {
public:
    Section(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
        : path_(std::move(path)), errors_(errors) {
        if (j.is_null()) return;
        if (!j.is_object()) {
            errors_.push_back(path_ + ": expected an object");
            return;
        }
        j_ = &j;
    }

    ~Section() {
        if (!j_) return;
        for (const auto& [key, value] : j_->items()) {
            if (!seen_.count(key)) errors_.push_back(field(key) + ": unknown key");
        }
    }

    const nlohmann::json* find(const std::string& key) {
        seen_.insert(key);
        if (!j_ || !j_->contains(key)) return nullptr;
        const auto& v = (*j_)[key];
        return v.is_null() ? nullptr : &v;
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (const auto* v = find(key)) {
            try {
                out = v->get<T>();
            } catch (const nlohmann::json::exception&) {
                errors_.push_back(field(key) + ": wrong type");
            }
        }
    }

    template <class T>
    void get(const std::string& key, std::optional<T>& out) {
        if (find(key)) {
            T value{};
            get(key, value);
            out = value;
        }
    }

    void get(const std::string& key, Dims3& out) {
        if (const auto* v = find(key)) {
            if (!v->is_array() || v->size() != 3 || !(*v)[0].is_number_integer() || !(*v)[1].is_number_integer() ||
                !(*v)[2].is_number_integer()) {
                errors_.push_back(field(key) + ": expected three integers [z, y, x]");
                return;
            }
            out = {(*v)[0].get<int>(), (*v)[1].get<int>(), (*v)[2].get<int>()};
        }
    }

    template <class E>
    void get_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
        if (const auto* v = find(key)) {
            if (v->is_string()) {
                for (const auto& [name, value] : names) {
                    if (v->get<std::string>() == name) {
                        out = value;
                        return;
                    }
                }
            }
            std::string allowed;
            for (const auto& n : names) allowed += std::string(allowed.empty() ? "" : "|") + n.first;
            errors_.push_back(field(key) + ": expected one of " + allowed);
        }
    }

    template <class E>
    void get_enum(const std::string& key, std::optional<E>& out,
                  std::initializer_list<std::pair<const char*, E>> names) {
        if (find(key)) {
            E value{};
            get_enum(key, value, names);
            out = value;
        }
    }

    const nlohmann::json& child(const std::string& key) {
        static const nlohmann::json null;
        const auto* v = find(key);
        return v ? *v : null;
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const nlohmann::json* j_ = nullptr;
    std::string path_;
    std::vector<std::string>& errors_;
    std::set<std::string> seen_;
};

const std::initializer_list<std::pair<const char*, PipelineKind>> kPipelines{{"A", PipelineKind::A},
                                                                              {"B", PipelineKind::B}};
const std::initializer_list<std::pair<const char*, NormMode>> kModes{{"minmax_clip", NormMode::MinMaxClip},
                                                                      {"zscore_nonzero", NormMode::ZScoreNonzero}};
const std::initializer_list<std::pair<const char*, NormKind>> kNorms{{"group", NormKind::Group},
                                                                      {"instance", NormKind::Instance}};
const std::initializer_list<std::pair<const char*, IterationUnit>> kUnits{{"epoch", IterationUnit::Epoch},
                                                                           {"step", IterationUnit::Step}};

void throw_if_any(const std::vector<std::string>& errors) {
    if (errors.empty()) return;
    std::string msg;
    for (const auto& e : errors) msg += (msg.empty() ? "" : "; ") + e;
    throw ConfigError(msg);
}

}  // namespace

RunConfig parse_config(const nlohmann::json& j) {
    std::vector<std::string> errors;
    RunConfig c;
    {
        Section root(j, "", errors);
        root.get("seed", c.seed);
        root.get("output_dir", c.output_dir);
        root.get("jobs", c.jobs);
        {
            Section s(root.child("phantom"), "phantom", errors);
            s.get("cases", c.phantom.cases);
            s.get("dims", c.phantom.dims);
        }
        {
            Section s(root.child("preprocess"), "preprocess", errors);
            s.get_enum("mode", c.preprocess.mode, kModes);
            s.get("images", c.preprocess.images);
            s.get("labels", c.preprocess.labels);
        }
        {
            Section s(root.child("train"), "train", errors);
            auto& t = c.train;
            s.get_enum("pipeline", t.pipeline, kPipelines);
            s.get("images", t.images);
            s.get("labels", t.labels);
            s.get("base_width", t.base_width);
            s.get_enum("norm", t.norm, kNorms);
            s.get("patch", t.patch);
            s.get("toy_scale_factor", t.toy_scale_factor);
            s.get("lr0", t.lr0);
            s.get("lr_restart", t.lr_restart);
            s.get("repeats_per_epoch", t.repeats_per_epoch);
            s.get("noise_probability", t.noise_probability);
            s.get("dice_numerator_factor", t.dice_numerator_factor);
            s.get_enum("iteration_unit", t.iteration_unit, kUnits);
            s.get("filter_quantile", t.filter_quantile);
        }
        {
            Section s(root.child("infer"), "infer", errors);
            s.get_enum("pipeline", c.infer.pipeline, kPipelines);
            s.get("images", c.infer.images);
            s.get("checkpoints", c.infer.checkpoints);
            s.get("tta", c.infer.tta);
            s.get("threshold", c.infer.threshold);
        }
        {
            Section s(root.child("merge"), "merge", errors);
            s.get("a", c.merge.a);
            s.get("b", c.merge.b);
        }
        {
            Section s(root.child("evaluate"), "evaluate", errors);
            s.get("pred", c.evaluate.pred);
            s.get("ref", c.evaluate.ref);
        }
    }
    throw_if_any(errors);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    try {
        return parse_config(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

NormMode RunConfig::norm_mode(PipelineKind kind) const {
    if (preprocess.mode) return *preprocess.mode;
    return kind == PipelineKind::A ? NormMode::MinMaxClip : NormMode::ZScoreNonzero;
}

TrainConfig RunConfig::train_config() const {
    const TrainSection& t = train;
    TrainConfig cfg = TrainConfig::preset(t.pipeline);
    cfg.seed = seed.value_or(0);
    cfg.arch.base_width = t.base_width;
    if (t.norm) cfg.arch.norm = *t.norm;
    cfg.patch = t.patch;
    cfg.repeats_per_epoch = t.repeats_per_epoch;
    cfg.augment.p_noise = t.noise_probability;
    cfg.loss.numerator_factor = t.dice_numerator_factor;
    if (t.toy_scale_factor >= 1) {
        cfg.schedule_a = cfg.schedule_a.scaled(t.toy_scale_factor);
        cfg.schedule_b = cfg.schedule_b.scaled(t.toy_scale_factor);
    }
    if (t.lr0) {
        cfg.schedule_a.lr0 = *t.lr0;
        cfg.schedule_a.swa.lr_restart = *t.lr0 / 2.0;
        cfg.schedule_b.lr0 = *t.lr0;
    }
    if (t.lr_restart) cfg.schedule_a.swa.lr_restart = *t.lr_restart;
    cfg.schedule_b.unit = t.iteration_unit;
    return cfg;
}

void RunConfig::validate(const std::string& command) const {
    std::vector<std::string> errors;
    auto require = [&](bool ok, const std::string& msg) {
        if (!ok) errors.push_back(msg);
    };
    auto require_dir = [&](const std::string& path, const std::string& key) {
        if (path.empty()) {
            errors.push_back(key + ": required");
        } else if (!std::filesystem::is_directory(path)) {
            errors.push_back(key + ": directory " + path + " does not exist");
        }
    };
    require(seed.has_value(), "seed: required");
    require(jobs >= 1, "jobs: must be >= 1");
    require(!output_dir.empty(), "output_dir: required");

    if (command == "phantom") {
        require(phantom.cases >= 1, "phantom.cases: must be >= 1");
        require(phantom.dims.z >= 16 && phantom.dims.y >= 16 && phantom.dims.x >= 16,
                "phantom.dims: every component must be >= 16");
    } else if (command == "preprocess") {
        require_dir(preprocess.images, "preprocess.images");
        if (!preprocess.labels.empty()) require_dir(preprocess.labels, "preprocess.labels");
    } else if (command == "train") {
        require_dir(train.images, "train.images");
        require_dir(train.labels, "train.labels");
        require(train.toy_scale_factor >= 1, "train.toy_scale_factor: must be >= 1");
        require(train.base_width >= 2, "train.base_width: must be >= 2");
        require(train.repeats_per_epoch >= 1, "train.repeats_per_epoch: must be >= 1");
        require(train.patch.z >= 8 && train.patch.y >= 8 && train.patch.x >= 8 && train.patch.z % 8 == 0 &&
                    train.patch.y % 8 == 0 && train.patch.x % 8 == 0,
                "train.patch: every component must be a positive multiple of 8");
        require(train.noise_probability >= 0.0 && train.noise_probability <= 1.0,
                "train.noise_probability: must lie in [0, 1]");
        require(!train.lr0 || *train.lr0 > 0.0, "train.lr0: must be > 0");
        require(!train.lr_restart || *train.lr_restart >= 0.0, "train.lr_restart: must be >= 0");
        require(train.dice_numerator_factor > 0.0, "train.dice_numerator_factor: must be > 0");
        require(!train.filter_quantile || (*train.filter_quantile >= 0.0 && *train.filter_quantile <= 1.0),
                "train.filter_quantile: must lie in [0, 1]");
        if (errors.empty()) {
            try {
                train_config().validate();
            } catch (const ConfigError& e) {
                errors.push_back(e.what());
            }
        }
    } else if (command == "infer") {
        require_dir(infer.images, "infer.images");
        require(!infer.checkpoints.empty(), "infer.checkpoints: at least one checkpoint is required");
        for (const auto& ck : infer.checkpoints) {
            require(std::filesystem::is_regular_file(ck), "infer.checkpoints: " + ck + " does not exist");
        }
        require(infer.threshold > 0.0 && infer.threshold < 1.0, "infer.threshold: must lie in (0, 1)");
    } else if (command == "merge") {
        require_dir(merge.a, "merge.a");
        require_dir(merge.b, "merge.b");
    } else if (command == "evaluate") {
        require_dir(evaluate.pred, "evaluate.pred");
        require_dir(evaluate.ref, "evaluate.ref");
    } else {
        errors.push_back("unknown command " + command);
    }
    throw_if_any(errors);
}

namespace {

OrderedJson dims_json(Dims3 d) { return OrderedJson::array({d.z, d.y, d.x}); }

template <class T>
OrderedJson opt(const std::optional<T>& v) {
    return v ? OrderedJson(*v) : OrderedJson(nullptr);
}

}  // namespace

OrderedJson config_to_json(const RunConfig& c) {
    const TrainSection& t = c.train;
    const TrainConfig tc = c.train_config();
    OrderedJson j;
    j["seed"] = opt(c.seed);
    j["output_dir"] = c.output_dir;
    j["jobs"] = c.jobs;
    j["phantom"] = {{"cases", c.phantom.cases}, {"dims", dims_json(c.phantom.dims)}};
    j["preprocess"] = {{"mode", c.preprocess.mode ? OrderedJson(to_string(*c.preprocess.mode)) : OrderedJson(nullptr)},
                       {"images", c.preprocess.images},
                       {"labels", c.preprocess.labels}};
    j["train"] = {
        {"pipeline", to_string(t.pipeline)},
        {"images", t.images},
        {"labels", t.labels},
        {"base_width", tc.arch.base_width},
        {"norm", to_string(tc.arch.norm)},
        {"patch", dims_json(t.patch)},
        {"toy_scale_factor", t.toy_scale_factor},
        {"lr0", t.pipeline == PipelineKind::A ? tc.schedule_a.lr0 : tc.schedule_b.lr0},
        {"lr_restart", tc.schedule_a.swa.lr_restart},
        {"repeats_per_epoch", t.repeats_per_epoch},
        {"noise_probability", t.noise_probability},
        {"dice_numerator_factor", t.dice_numerator_factor},
        {"iteration_unit", t.iteration_unit == IterationUnit::Epoch ? "epoch" : "step"},
        {"filter_quantile", opt(t.filter_quantile)},
    };
    j["infer"] = {{"pipeline", to_string(c.infer.pipeline)},
                  {"images", c.infer.images},
                  {"checkpoints", c.infer.checkpoints},
                  {"tta", c.infer.tta},
                  {"threshold", c.infer.threshold}};
    j["merge"] = {{"a", c.merge.a}, {"b", c.merge.b}};
    j["evaluate"] = {{"pred", c.evaluate.pred}, {"ref", c.evaluate.ref}};
    return j;
}

OrderedJson training_settings_json(const RunConfig& c) {
    const TrainConfig tc = c.train_config();
    return {
        {"norm_mode", to_string(c.norm_mode(c.train.pipeline))},
        {"zscore_std", "population"},
        {"percentile", "nearest_rank"},
        {"dice_variant", tc.loss.variant == DiceVariant::SquaredDenom ? "squared_denominator" : "plain_denominator"},
        {"dice_epsilon", tc.loss.epsilon},
        {"augment",
         {{"order", "rescale,shift,noise,drop,flip"},
          {"p_rescale", tc.augment.p_rescale},
          {"p_shift", tc.augment.p_shift},
          {"p_noise", tc.augment.p_noise},
          {"p_drop", tc.augment.p_drop},
          {"p_flip", tc.augment.p_flip},
          {"noise_sigma", tc.augment.noise_sigma}}},
        {"schedule_a",
         {{"epochs_total", tc.schedule_a.epochs_total},
          {"flat_epochs", tc.schedule_a.flat_epochs},
          {"lr0", tc.schedule_a.lr0},
          {"swa_lr_restart", tc.schedule_a.swa.lr_restart},
          {"swa_cycles", tc.schedule_a.swa.cycles},
          {"swa_cycle_epochs", tc.schedule_a.swa.cycle_epochs},
          {"swa_snapshot_every", tc.schedule_a.swa.snapshot_every}}},
        {"schedule_b",
         {{"epochs_max", tc.schedule_b.epochs_max},
          {"lr0", tc.schedule_b.lr0},
          {"batch", tc.schedule_b.batch}}},
        {"optimizer", {{"name", "adam"}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}, {"weight_decay", 0.0}}},
        {"adam_reset_for_swa", c.train.pipeline == PipelineKind::A},
    };
}

}  // namespace voxelforge
