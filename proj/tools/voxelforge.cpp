#include "voxelforge/commands.hpp"
#include "voxelforge/config.hpp"
#include "voxelforge/error.hpp"
#include "voxelforge/log.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> jobs;
    std::optional<std::string> out;
    std::optional<int> cases;
    std::vector<int> dims;
};

void add_common(CLI::App* sub, Flags& f) {
    sub->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "seed (overrides the config)");
    sub->add_option("--jobs", f.jobs, "cases or folds processed concurrently")->check(CLI::PositiveNumber);
    sub->add_option("--out", f.out, "output directory (overrides the config)");
}

int fail(const std::string& kind, const std::string& message) {
    std::string line = message;
    for (char& c : line) {
        if (c == '\n') c = ' ';
    }
    std::cerr << "error: " << kind << ": " << line << '\n';
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace voxelforge;
    configure_logging();

    CLI::App app{"Desk-scale brain tumor segmentation: phantoms, training, TTA inference, merging, evaluation"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<std::string, std::string>> commands{
        {"phantom", "write synthetic phantom cases"},
        {"preprocess", "normalize and crop cases to the brain box"},
        {"train", "five-fold training of pipeline A or B"},
        {"infer", "TTA-ensembled prediction of labelmaps"},
        {"merge", "merge pipeline A and B labelmaps"},
        {"evaluate", "Dice, sensitivity, specificity and HD95 report"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        add_common(sub, flags);
        if (name == "phantom") {
            sub->add_option("--cases", flags.cases, "number of cases")->check(CLI::PositiveNumber);
            sub->add_option("--dims", flags.dims, "z y x extent")->expected(3);
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("UsageError", e.what());
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        RunConfig cfg = flags.config.empty() ? RunConfig{} : load_config(flags.config);
        if (flags.seed) cfg.seed = *flags.seed;
        if (flags.jobs) cfg.jobs = *flags.jobs;
        if (flags.out) cfg.output_dir = *flags.out;
        if (flags.cases) cfg.phantom.cases = *flags.cases;
        if (!flags.dims.empty()) cfg.phantom.dims = {flags.dims[0], flags.dims[1], flags.dims[2]};
        run_command(command, cfg);
    } catch (const Error& e) {
        return fail(e.kind(), e.what());
    } catch (const std::exception& e) {
        return fail("InternalError", e.what());
    }
    return 0;
}
