#include "voxelforge/commands.hpp"

#include "voxelforge/error.hpp"
#include "voxelforge/infer.hpp"
#include "voxelforge/preprocess.hpp"
#include "voxelforge/train.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <chrono>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <thread>

namespace voxelforge {

namespace fs = std::filesystem;

std::map<std::string, fs::path> list_cases(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(dir, ec)) {
        if (entry.is_regular_file() && entry.path().extension() == ".segv") {
            out[entry.path().stem().string()] = entry.path();
        }
    }
    if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
    return out;
}

std::vector<std::pair<fs::path, fs::path>> pair_cases(const std::map<std::string, fs::path>& a,
                                                      const std::map<std::string, fs::path>& b,
                                                      const std::string& a_name, const std::string& b_name) {
    std::vector<std::string> only_a, only_b;
    std::vector<std::pair<fs::path, fs::path>> pairs;
    for (const auto& [stem, path] : a) {
        auto it = b.find(stem);
        if (it == b.end()) {
            only_a.push_back(stem);
        } else {
            pairs.emplace_back(path, it->second);
        }
    }
    for (const auto& [stem, path] : b) {
        if (!a.count(stem)) only_b.push_back(stem);
    }
    if (!only_a.empty() || !only_b.empty()) {
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
            return s.empty() ? std::string("-") : s;
        };
        throw ConfigError("case sets differ: missing from " + b_name + ": " + join(only_a) + "; missing from " +
                          a_name + ": " + join(only_b));
    }
    if (pairs.empty()) throw ConfigError("no cases found in " + a_name);
    return pairs;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
    std::vector<std::exception_ptr> errors(n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
                break;
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint32_t tag, std::uint32_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), tag, index};
    std::mt19937_64 rng(seq);
    return rng();
}

void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

void write_json(const fs::path& path, const OrderedJson& j) {
    std::ofstream out(path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + path.string());
}

void write_text(const fs::path& path, const std::string& s) {
    std::ofstream out(path);
    out << s;
    if (!out) throw IoError("cannot write " + path.string());
}

OrderedJson manifest(const RunConfig& cfg, const std::string& command) {
    OrderedJson j;
    j["config"] = config_to_json(cfg);
    j["command"] = command;
    return j;
}

OrderedJson bbox_json(const BBox& b) {
    return {{"min", {b.min[0], b.min[1], b.min[2]}}, {"max", {b.max[0], b.max[1], b.max[2]}}};
}

std::array<double, 3> spacing_of(const LabelMap& lm) {
    const auto s = lm.spacing();
    return {s[0], s[1], s[2]};
}

NormKind norm_for(const RunConfig& cfg, PipelineKind kind) {
    if (cfg.train.norm) return *cfg.train.norm;
    return kind == PipelineKind::A ? NormKind::Group : NormKind::Instance;
}

}  // namespace

void cmd_phantom(const RunConfig& cfg) {
    const fs::path out = cfg.output_dir;
    make_dir(out / "images");
    make_dir(out / "labels");
    OrderedJson cases = OrderedJson::array();
    std::vector<OrderedJson> rows(static_cast<std::size_t>(cfg.phantom.cases));
    parallel_for(rows.size(), cfg.jobs, [&](std::size_t i) {
        char name[32];
        std::snprintf(name, sizeof name, "case_%03zu", i);
        const std::uint64_t seed = derive_seed(*cfg.seed, 0x50, static_cast<std::uint32_t>(i));
        auto [vol, lm] = generate_phantom(seed, cfg.phantom.dims);
        write_segvol(vol, out / "images" / (std::string(name) + ".segv"));
        write_segvol(lm, out / "labels" / (std::string(name) + ".segv"));
        rows[i] = {{"id", name}, {"seed", seed}};
    });
    for (auto& r : rows) cases.push_back(std::move(r));
    OrderedJson m = manifest(cfg, "phantom");
    m["cases"] = std::move(cases);
    write_json(out / "phantom_manifest.json", m);
    spdlog::info("wrote {} phantom cases to {}", cfg.phantom.cases, out.string());
}

void cmd_preprocess(const RunConfig& cfg) {
    const fs::path out = cfg.output_dir;
    const NormMode mode = cfg.norm_mode(cfg.train.pipeline);
    const auto images = list_cases(cfg.preprocess.images);
    if (images.empty()) throw ConfigError("preprocess.images: no .segv files in " + cfg.preprocess.images);
    std::map<std::string, fs::path> labels;
    if (!cfg.preprocess.labels.empty()) {
        labels = list_cases(cfg.preprocess.labels);
        pair_cases(images, labels, "preprocess.images", "preprocess.labels");
        make_dir(out / "labels");
    }
    make_dir(out / "images");

    std::vector<std::pair<std::string, fs::path>> items(images.begin(), images.end());
    std::vector<OrderedJson> rows(items.size());
    parallel_for(items.size(), cfg.jobs, [&](std::size_t i) {
        const auto& [stem, path] = items[i];
        const Volume4D raw = read_volume(path);
        const BBox box = brain_bounding_box(raw);
        write_segvol(crop_to_bbox(normalize(raw, mode), box), out / "images" / (stem + ".segv"));
        if (!labels.empty()) {
            const LabelMap lm = read_labelmap(labels.at(stem));
            if (!(lm.dims() == raw.dims())) throw ShapeError(stem + ": image and labelmap dims differ");
            write_segvol(crop_to_bbox(lm, box), out / "labels" / (stem + ".segv"));
        }
        rows[i] = {{"id", stem}, {"bbox", bbox_json(box)}};
    });
    OrderedJson m = manifest(cfg, "preprocess");
    m["mode"] = to_string(mode);
    m["cases"] = rows;
    write_json(out / "preprocess_manifest.json", m);
    spdlog::info("preprocessed {} cases ({})", items.size(), to_string(mode));
}

void cmd_train(const RunConfig& cfg) {
    const fs::path out = cfg.output_dir;
    const TrainConfig base = cfg.train_config();
    const NormMode mode = cfg.norm_mode(cfg.train.pipeline);
    const auto pairs = pair_cases(list_cases(cfg.train.images), list_cases(cfg.train.labels), "train.images",
                                  "train.labels");

    std::vector<TrainingCase> cases(pairs.size());
    parallel_for(pairs.size(), cfg.jobs, [&](std::size_t i) {
        cases[i] = prepare_case(pairs[i].first.stem().string(), read_volume(pairs[i].first),
                                read_labelmap(pairs[i].second), mode);
    });
    std::map<std::string, std::size_t> by_id;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        by_id[cases[i].id] = i;
        ids.push_back(cases[i].id);
    }
    const FoldSplit folds = five_fold_split(ids, *cfg.seed);
    make_dir(out / "checkpoints");

    std::vector<OrderedJson> fold_rows(5);
    std::vector<std::vector<std::pair<std::string, double>>> case_losses(5);
    parallel_for(5, cfg.jobs, [&](std::size_t k) {
        std::vector<TrainingCase> train, val;
        std::vector<std::string> train_ids;
        for (std::size_t f = 0; f < 5; ++f) {
            for (const auto& id : folds[f]) {
                if (f == k) {
                    val.push_back(cases[by_id.at(id)]);
                } else {
                    train.push_back(cases[by_id.at(id)]);
                    train_ids.push_back(id);
                }
            }
        }
        TrainConfig tc = base;
        tc.seed = derive_seed(*cfg.seed, 0x54, static_cast<std::uint32_t>(k));
        spdlog::info("fold {}: {} training / {} validation cases", k, train.size(), val.size());
        const TrainResult r = cfg.train.pipeline == PipelineKind::A ? train_pipeline_A(train, val, tc)
                                                                    : train_pipeline_B(train, val, tc);
        const std::string ckpt = "fold_" + std::to_string(k) + ".tnpk";
        tn::save_checkpoint(r.params.tensors, out / "checkpoints" / ckpt);

        OrderedJson history = OrderedJson::array();
        for (const auto& e : r.history) {
            history.push_back({{"epoch", e.epoch},
                               {"phase", e.phase},
                               {"lr", e.lr},
                               {"train_loss", e.train_loss},
                               {"val_loss", e.val_loss ? OrderedJson(*e.val_loss) : OrderedJson(nullptr)}});
        }
        OrderedJson row{{"fold", k},
                        {"seed", tc.seed},
                        {"train_ids", train_ids},
                        {"val_ids", folds[k]},
                        {"checkpoint", (fs::path("checkpoints") / ckpt).string()},
                        {"history", history},
                        {"snapshot_epochs", r.snapshot_epochs},
                        {"snapshot_count", r.snapshot_epochs.size()},
                        {"adam_reset_for_swa", r.adam_reset_for_swa}};
        if (r.selected_epoch) {
            row["selected_epoch"] = *r.selected_epoch;
            row["selected_val_loss"] = *r.selected_val_loss;
        }
        fold_rows[k] = std::move(row);

        if (cfg.train.filter_quantile) {
            for (const auto& c : train) {
                case_losses[k].emplace_back(c.id, validation_loss(r.params, {c}, tc.loss));
            }
        }
    });

    OrderedJson m = manifest(cfg, "train");
    m["settings"] = training_settings_json(cfg);
    m["folds"] = fold_rows;
    if (cfg.train.filter_quantile) {
        // Final loss of a case: mean over the folds that trained on it.
        std::vector<std::pair<std::string, double>> losses;
        for (const auto& id : ids) {
            double sum = 0.0;
            int n = 0;
            for (const auto& fold : case_losses) {
                for (const auto& [cid, loss] : fold) {
                    if (cid == id) {
                        sum += loss;
                        ++n;
                    }
                }
            }
            if (n) losses.emplace_back(id, sum / n);
        }
        const auto kept = filter_training_set(losses, *cfg.train.filter_quantile);
        OrderedJson per_case = OrderedJson::object();
        for (const auto& [id, loss] : losses) per_case[id] = loss;
        std::vector<std::string> flagged;
        for (const auto& [id, loss] : losses) {
            if (std::find(kept.begin(), kept.end(), id) == kept.end()) flagged.push_back(id);
        }
        m["filter"] = {{"quantile", *cfg.train.filter_quantile},
                       {"final_losses", per_case},
                       {"retained", kept},
                       {"flagged", flagged}};
    }
    write_json(out / "train_manifest.json", m);
    spdlog::info("trained 5 folds, checkpoints in {}", (out / "checkpoints").string());
}

void cmd_infer(const RunConfig& cfg) {
    const fs::path out = cfg.output_dir;
    const PipelineKind kind = cfg.infer.pipeline;
    const NormMode mode = cfg.norm_mode(kind);

    EnsembleSpec spec;
    spec.tta = cfg.infer.tta;
    spec.threshold = cfg.infer.threshold;
    for (const auto& path : cfg.infer.checkpoints) {
        try {
            spec.checkpoints.push_back(model_from_tensors(tn::load_checkpoint(path), norm_for(cfg, kind)));
        } catch (const Error& e) {
            throw FormatError(path + ": " + e.what());
        }
    }
    const auto images = list_cases(cfg.infer.images);
    if (images.empty()) throw ConfigError("infer.images: no .segv files in " + cfg.infer.images);
    make_dir(out / "predictions");

    std::vector<std::pair<std::string, fs::path>> items(images.begin(), images.end());
    std::vector<OrderedJson> rows(items.size());
    std::vector<std::string> transforms;
    std::mutex mu;
    parallel_for(items.size(), cfg.jobs, [&](std::size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto& [stem, path] = items[i];
        const Volume4D raw = read_volume(path);
        const BBox box = brain_bounding_box(raw);
        const Volume4D input = crop_to_bbox(normalize(raw, mode), box);
        PredictionStats stats;
        const RegionProbs probs = predict_regions(spec, input, &stats);
        const LabelMap cropped = reconstruct(binarize(probs, spec.threshold), raw.spacing());
        write_segvol(embed(cropped, box, raw.dims()), out / "predictions" / (stem + ".segv"));
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        spdlog::info("{}: {} predictions in {:.1f} s", stem, stats.passes, seconds);
        std::vector<std::string> names;
        for (const auto& t : stats.transforms) names.push_back(t.name());
        rows[i] = {{"id", stem}, {"predictions", stats.passes}, {"transforms", names}, {"seconds", seconds}};
        std::lock_guard lock(mu);
        if (names.size() > transforms.size()) transforms = names;
    });
    OrderedJson m = manifest(cfg, "infer");
    m["checkpoints"] = cfg.infer.checkpoints;
    m["transforms"] = transforms;
    m["threshold"] = spec.threshold;
    m["cases"] = rows;
    write_json(out / "infer_manifest.json", m);
}

void cmd_merge(const RunConfig& cfg) {
    const fs::path out = cfg.output_dir;
    const auto pairs = pair_cases(list_cases(cfg.merge.a), list_cases(cfg.merge.b), "merge.a", "merge.b");
    make_dir(out / "merged");
    std::vector<OrderedJson> rows(pairs.size());
    parallel_for(pairs.size(), cfg.jobs, [&](std::size_t i) {
        const std::string stem = pairs[i].first.stem().string();
        const LabelMap merged = merge_labelmaps(read_labelmap(pairs[i].first), read_labelmap(pairs[i].second));
        write_segvol(merged, out / "merged" / (stem + ".segv"));
        rows[i] = {{"id", stem}};
    });
    OrderedJson m = manifest(cfg, "merge");
    m["cases"] = rows;
    write_json(out / "merge_manifest.json", m);
    spdlog::info("merged {} cases", pairs.size());
}

MetricReport cmd_evaluate(const RunConfig& cfg) {
    const fs::path out = cfg.output_dir;
    const auto pairs =
        pair_cases(list_cases(cfg.evaluate.pred), list_cases(cfg.evaluate.ref), "evaluate.pred", "evaluate.ref");
    std::vector<CaseMetrics> cases(pairs.size());
    parallel_for(pairs.size(), cfg.jobs, [&](std::size_t i) {
        const LabelMap pred = read_labelmap(pairs[i].first);
        const LabelMap ref = read_labelmap(pairs[i].second);
        cases[i] = evaluate_case(pred, ref, spacing_of(ref), pairs[i].first.stem().string());
    });
    MetricReport report = aggregate(std::move(cases));
    make_dir(out);
    write_json(out / "report.json", OrderedJson::parse(report_to_json(report).dump()));
    const std::string table = report_table(report);
    write_text(out / "report.txt", table);
    write_json(out / "evaluate_manifest.json", manifest(cfg, "evaluate"));
    std::cout << table;
    return report;
}

void run_command(const std::string& command, const RunConfig& cfg) {
    cfg.validate(command);
    if (command == "phantom") {
        cmd_phantom(cfg);
    } else if (command == "preprocess") {
        cmd_preprocess(cfg);
    } else if (command == "train") {
        cmd_train(cfg);
    } else if (command == "infer") {
        cmd_infer(cfg);
    } else if (command == "merge") {
        cmd_merge(cfg);
    } else if (command == "evaluate") {
        cmd_evaluate(cfg);
    }
}

}  // namespace voxelforge
