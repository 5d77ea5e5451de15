#include "oracles.hpp"
#include "voxelforge/error.hpp"
#include "voxelforge/metrics.hpp"
#include "voxelforge/train.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

using namespace voxelforge;
using tn::NamedTensors;
using tn::Tensor;

namespace {

NamedTensors random_snapshot(std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 2.0);
    NamedTensors s{{"a", Tensor({3, 2})}, {"b", Tensor({4})}};
    for (auto& nt : s)
        for (double& v : nt.tensor.values()) v = g(rng);
    return s;
}

std::vector<TrainingCase> phantom_cases(int n, Dims3 dims, NormMode mode) {
    std::vector<TrainingCase> cases;
    for (int i = 0; i < n; ++i) {
        const auto [v, lm] = generate_phantom(100 + i, dims);
        cases.push_back(prepare_case("c" + std::to_string(i), v, lm, mode));
    }
    return cases;
}

TrainConfig tiny_config(PipelineKind kind) {
    TrainConfig cfg = TrainConfig::preset(kind);
    cfg.arch.base_width = 2;
    cfg.patch = {8, 8, 8};
    cfg.seed = 77;
    return cfg;
}

}  // namespace

TEST_CASE("adam") {
    NamedTensors p{{"w", Tensor({3}, std::vector<double>{1.0, -2.0, 0.5})}};
    SUBCASE("zero gradient leaves parameters unchanged") {
        auto s = make_adam(p);
        auto q = p;
        adam_step(q, {Tensor({3})}, s, 1e-2);
        CHECK(q == p);
        CHECK(s.step == 1);
    }
    SUBCASE("first step moves by lr times the sign of the gradient") {
        auto s = make_adam(p);
        auto q = p;
        const Tensor g({3}, std::vector<double>{0.3, -5.0, 1e-3});
        adam_step(q, {g}, s, 1e-2);
        for (int i = 0; i < 3; ++i) {
            const double expected = -1e-2 * g[i] / (std::abs(g[i]) + 1e-8);
            CHECK(std::abs((q[0].tensor[i] - p[0].tensor[i]) - expected) < 1e-12);
        }
    }
    SUBCASE("matches the closed-form update over several steps") {
        auto s = make_adam(p);
        auto q = p;
        std::vector<double> m(3, 0.0), v(3, 0.0), w(p[0].tensor.values().begin(), p[0].tensor.values().end());
        std::mt19937_64 rng(1);
        std::normal_distribution<double> n;
        for (int t = 1; t <= 5; ++t) {
            Tensor g({3});
            for (double& x : g.values()) x = n(rng);
            adam_step(q, {g}, s, 1e-3);
            for (int i = 0; i < 3; ++i) {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
                w[i] -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
            }
        }
        for (int i = 0; i < 3; ++i) CHECK(std::abs(q[0].tensor[i] - w[i]) < 1e-12);
    }
    SUBCASE("identical runs are bitwise identical") {
        auto run = [&] {
            auto s = make_adam(p);
            auto q = p;
            std::mt19937_64 rng(9);
            std::normal_distribution<double> n;
            for (int t = 0; t < 10; ++t) {
                Tensor g({3});
                for (double& x : g.values()) x = n(rng);
                adam_step(q, {g}, s, 1e-3);
            }
            return q;
        };
        CHECK(run() == run());
    }
    SUBCASE("errors") {
        auto s = make_adam(p);
        auto q = p;
        CHECK_THROWS_AS(adam_step(q, {Tensor({3}, std::vector<double>{0, NAN, 0})}, s, 1e-3), NumericError);
        CHECK_THROWS_AS(adam_step(q, {Tensor({2})}, s, 1e-3), ShapeError);
        CHECK_THROWS_AS(adam_step(q, {}, s, 1e-3), ShapeError);
    }
}

TEST_CASE("schedule A values") {
    const ScheduleA s;
    CHECK(cosine_lr(0, s) == 1e-4);
    CHECK(cosine_lr(99, s) == 1e-4);
    CHECK(cosine_lr(100, s) == 1e-4);
    CHECK(std::abs(cosine_lr(150, s) - 5e-5) < 1e-18);
    CHECK(std::abs(cosine_lr(200, s)) < 1e-18);
    for (int e = 0; e <= 200; ++e) {
        const double expected = e < 100 ? 1e-4 : oracle::cosine(1e-4, e - 100, 100);
        CHECK(std::abs(cosine_lr(e, s) - expected) < 1e-18);
    }
    for (double e = 100.0; e < 200.0; e += 0.25) CHECK(cosine_lr(e + 0.25, s) <= cosine_lr(e, s));
    CHECK_THROWS_AS(cosine_lr(-1, s), RangeError);
    CHECK_THROWS_AS(cosine_lr(201, s), RangeError);

    CHECK(s.swa.lr_restart == 5e-5);
    CHECK(swa_cycle_lr(0, s.swa) == 5e-5);
    CHECK(swa_cycle_lr(29.999, s.swa) < 1e-12);
    for (int e = 0; e < 30; ++e) CHECK(std::abs(swa_cycle_lr(e, s.swa) - oracle::cosine(5e-5, e, 30)) < 1e-18);
    CHECK_THROWS_AS(swa_cycle_lr(31, s.swa), RangeError);

    CHECK(s.swa.total_epochs() == 150);
    CHECK(s.swa.total_snapshots() == 50);
    CHECK_NOTHROW(s.validate());
}

TEST_CASE("schedule B values") {
    const ScheduleB b;
    CHECK(b.epochs_max == 400);
    CHECK(b.batch == 3);
    CHECK(cosine_annealing_lr(0, 1e-4, 400) == 1e-4);
    CHECK(std::abs(cosine_annealing_lr(200, 1e-4, 400) - 5e-5) < 1e-18);
    CHECK(std::abs(cosine_annealing_lr(400, 1e-4, 400)) < 1e-18);
    for (int e = 0; e <= 400; ++e)
        CHECK(std::abs(cosine_annealing_lr(e, 1e-4, 400) - oracle::cosine(1e-4, e, 400)) < 1e-18);
    CHECK_THROWS_AS(cosine_annealing_lr(401, 1e-4, 400), RangeError);
    CHECK(b.scaled(10).epochs_max == 40);
    CHECK(b.scaled(1000).epochs_max == 1);
}

TEST_CASE("schedule scaling and validation") {
    const ScheduleA t = ScheduleA{}.scaled(10);
    CHECK(t.epochs_total == 20);
    CHECK(t.flat_epochs == 10);
    CHECK(t.swa.cycle_epochs == 3);
    CHECK(t.swa.snapshot_every == 1);
    CHECK(t.swa.total_snapshots() == 15);
    CHECK_NOTHROW(t.validate());

    const ScheduleA toy{20, 10, 1e-4, {5e-5, 6, 3, 2}};
    CHECK(toy.swa.total_snapshots() == 4);

    ScheduleA bad;
    bad.swa.snapshot_every = 7;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = ScheduleA{};
    bad.flat_epochs = 200;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(ScheduleA{}.scaled(0), ConfigError);
}

TEST_CASE("swa running mean") {
    std::mt19937_64 rng(3);
    std::vector<NamedTensors> snaps;
    for (int i = 0; i < 50; ++i) snaps.push_back(random_snapshot(rng));

    SWAState one;
    swa_update(one, snaps[0]);
    CHECK(one.mean == snaps[0]);
    CHECK(one.count == 1);
    swa_update(one, snaps[1]);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < snaps[0][k].tensor.size(); ++i)
            CHECK(std::abs(one.mean[k].tensor[i] - (snaps[0][k].tensor[i] + snaps[1][k].tensor[i]) / 2) < 1e-15);

    auto mean_of = [](const std::vector<NamedTensors>& order) {
        SWAState s;
        for (const auto& snap : order) swa_update(s, snap);
        return s;
    };
    const SWAState all = mean_of(snaps);
    CHECK(all.count == 50);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < snaps[0][k].tensor.size(); ++i) {
            std::vector<double> vals;
            for (const auto& s : snaps) vals.push_back(s[k].tensor[i]);
            CHECK(std::abs(all.mean[k].tensor[i] - oracle::two_pass(vals).mean) < 1e-6);
        }
    for (int trial = 0; trial < 5; ++trial) {
        auto shuffled = snaps;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        const SWAState other = mean_of(shuffled);
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t i = 0; i < snaps[0][k].tensor.size(); ++i)
                CHECK(std::abs(other.mean[k].tensor[i] - all.mean[k].tensor[i]) < 1e-6);
    }
    auto wrong = snaps[0];
    wrong[1].name = "c";
    CHECK_THROWS_AS(swa_update(one, wrong), ShapeError);
    wrong = snaps[0];
    wrong.pop_back();
    CHECK_THROWS_AS(swa_update(one, wrong), ShapeError);
}

TEST_CASE("five fold split") {
    auto ids = [](int n) {
        std::vector<std::string> v;
        for (int i = 0; i < n; ++i) v.push_back("case" + std::to_string(i));
        return v;
    };
    for (int n : {5, 10, 11, 13, 27}) {
        const auto folds = five_fold_split(ids(n), 42);
        std::set<std::string> seen;
        std::size_t lo = n, hi = 0;
        for (const auto& f : folds) {
            lo = std::min(lo, f.size());
            hi = std::max(hi, f.size());
            for (const auto& id : f) CHECK(seen.insert(id).second);
        }
        CHECK(seen.size() == static_cast<std::size_t>(n));
        CHECK(hi - lo <= 1);
    }
    const auto eleven = five_fold_split(ids(11), 1);
    CHECK(eleven[0].size() == 3);
    for (int k = 1; k < 5; ++k) CHECK(eleven[k].size() == 2);
    CHECK(five_fold_split(ids(10), 1) == five_fold_split(ids(10), 1));
    CHECK_FALSE(five_fold_split(ids(20), 1) == five_fold_split(ids(20), 2));
}

TEST_CASE("training set filter") {
    std::vector<std::pair<std::string, double>> losses;
    for (int i = 0; i < 10; ++i) losses.push_back({"c" + std::to_string(i), 0.1 * ((i * 7) % 10)});
    const auto kept = filter_training_set(losses, 0.9);
    CHECK(kept.size() == 9);
    // The worst loss (0.9) belongs to c7.
    CHECK(std::find(kept.begin(), kept.end(), "c7") == kept.end());
    CHECK(kept.front() == "c0");
    CHECK(filter_training_set(losses, 1.0).size() == 10);
    std::vector<std::pair<std::string, double>> flat{{"a", 0.3}, {"b", 0.3}, {"c", 0.3}};
    CHECK(filter_training_set(flat, 0.5).size() == 3);
    CHECK_THROWS_AS(filter_training_set(losses, 1.5), RangeError);
}

TEST_CASE("best epoch selection") {
    CHECK(select_best_epoch({5, 4, 3, 2, 1}) == 4);
    CHECK(select_best_epoch({3, 1, 2, 1, 4}) == 1);
    CHECK(select_best_epoch({2, 2, 2}) == 0);
    CHECK_THROWS_AS(select_best_epoch({}), RangeError);
}

TEST_CASE("prepare case") {
    const auto [v, lm] = generate_phantom(5, {32, 32, 32});
    const auto c = prepare_case("x", v, lm, NormMode::MinMaxClip);
    CHECK(c.image.dims() == brain_bounding_box(v).extent());
    CHECK(c.labels.dims() == c.image.dims());
    for (float x : c.image.data()) REQUIRE((x >= 0.0f && x <= 1.0f));
    std::size_t wt_full = 0, wt_crop = 0;
    for (auto x : lm.labels()) wt_full += x != 0;
    for (auto x : c.labels.labels()) wt_crop += x != 0;
    CHECK(wt_full == wt_crop);
    CHECK_THROWS_AS(prepare_case("y", v, LabelMap({32, 32, 16}), NormMode::MinMaxClip), ShapeError);
}

TEST_CASE("train config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.patch = {12, 16, 16};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.repeats_per_epoch = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    const auto b = TrainConfig::preset(PipelineKind::B);
    CHECK(b.arch.norm == NormKind::Instance);
    CHECK(b.loss.variant == DiceVariant::PlainDenom);
    CHECK(b.augment.p_shift == 0.2);
}

TEST_CASE("pipeline A toy schedule: snapshots, phases and determinism") {
    const auto cases = phantom_cases(2, {16, 16, 16}, NormMode::MinMaxClip);
    TrainConfig cfg = tiny_config(PipelineKind::A);
    cfg.schedule_a = ScheduleA{20, 10, 1e-3, {5e-4, 6, 3, 2}};
    std::vector<EpochRecord> seen;
    const auto r = train_pipeline_A({cases[0]}, {cases[1]}, cfg, [&](const EpochRecord& e) { seen.push_back(e); });
    CHECK(r.snapshot_epochs == std::vector<int>{22, 25, 28, 31});
    CHECK(r.adam_reset_for_swa);
    REQUIRE(r.history.size() == 32);
    CHECK(seen.size() == 32);
    for (int e = 0; e < 32; ++e) {
        CHECK(r.history[e].epoch == e);
        CHECK(r.history[e].phase == (e < 20 ? "main" : "swa"));
        CHECK(r.history[e].val_loss.has_value());
        const double lr = e < 20 ? cosine_lr(e, cfg.schedule_a) : swa_cycle_lr((e - 20) % 6, cfg.schedule_a.swa);
        CHECK(r.history[e].lr == lr);
    }
    CHECK(r.history[20].lr == 5e-4);
    CHECK(r.history[26].lr == 5e-4);

    const auto again = train_pipeline_A({cases[0]}, {cases[1]}, cfg);
    CHECK(tn::encode_checkpoint(again.params.tensors) == tn::encode_checkpoint(r.params.tensors));
    cfg.seed = 78;
    const auto other = train_pipeline_A({cases[0]}, {cases[1]}, cfg);
    CHECK_FALSE(other.params.tensors == r.params.tensors);
    CHECK_THROWS_AS(train_pipeline_A({}, {}, cfg), ConfigError);
}

TEST_CASE("pipeline A fits one phantom") {
    const auto cases = phantom_cases(1, {32, 32, 32}, NormMode::MinMaxClip);
    TrainConfig cfg = TrainConfig::preset(PipelineKind::A);
    // The patch covers the whole cropped brain, so training sees the same
    // context as the full-case prediction below.
    cfg.patch = {32, 32, 32};
    cfg.seed = 5;
    cfg.repeats_per_epoch = 12;
    cfg.schedule_a = ScheduleA{}.scaled(10);
    cfg.schedule_a.lr0 = 3e-3;
    cfg.schedule_a.swa.lr_restart = 1.5e-3;
    const auto r = train_pipeline_A(cases, {}, cfg);

    std::vector<double> main_losses;
    for (const auto& h : r.history)
        if (h.phase == "main") main_losses.push_back(h.train_loss);
    CHECK(main_losses.back() < main_losses.front());

    auto [img, pad] = pad_to_multiple(cases[0].image, 8);
    const auto probs = tensor_to_probs(predict(r.params, volume_to_tensor(img)));
    Mask wt(img.dims());
    for (std::size_t i = 0; i < wt.size(); ++i) wt.values[i] = probs.wt.values[i] >= 0.5;
    const Mask pred = unpad(wt, pad);
    const double d = dice(confusion(pred, labelmap_to_regions(cases[0].labels).wt));
    MESSAGE("training WT Dice " << d);
    CHECK(d > 0.95);
}

TEST_CASE("pipeline B selects the best validation epoch") {
    const auto cases = phantom_cases(3, {16, 16, 16}, NormMode::ZScoreNonzero);
    for (IterationUnit unit : {IterationUnit::Epoch, IterationUnit::Step}) {
        TrainConfig cfg = tiny_config(PipelineKind::B);
        cfg.schedule_b = ScheduleB{8, 1e-2, 3, unit};
        const auto r = train_pipeline_B({cases[0], cases[1]}, {cases[2]}, cfg);
        REQUIRE(r.history.size() == 8);
        REQUIRE(r.selected_epoch.has_value());
        std::vector<double> vals;
        for (const auto& h : r.history) {
            CHECK(h.phase == "b");
            vals.push_back(*h.val_loss);
            CHECK(*r.selected_val_loss <= *h.val_loss);
        }
        CHECK(static_cast<std::size_t>(*r.selected_epoch) == select_best_epoch(vals));
        CHECK(std::abs(validation_loss(r.params, {cases[2]}, cfg.loss) - *r.selected_val_loss) < 1e-12);
        CHECK(r.history[0].lr == 1e-2);
        CHECK_THROWS_AS(train_pipeline_B({cases[0]}, {}, cfg), ConfigError);
    }
}
