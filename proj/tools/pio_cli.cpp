// Command-line front end; talks to the library exclusively through the C API.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "pio.h"

namespace {

int fail(const std::string& message) {
    std::string escaped;
    for (char c : message) {
        if (c == '"' || c == '\\') escaped += '\\';
        if (c == '\n') {
            escaped += "\\n";
            continue;
        }
        escaped += c;
    }
    std::cerr << "{\"error\": \"" << escaped << "\"}" << std::endl;
    return 1;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct OwnedString {
    char* ptr = nullptr;
    ~OwnedString() { pio_free(ptr); }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Perceiver IO experiments"};
    app.require_subcommand(1);

    std::string config_path, out_dir, preset, spec_path;
    long long seed = -1;
    bool as_text = false;

    auto* run = app.add_subcommand("run", "train/evaluate an experiment config");
    run->add_option("config", config_path, "experiment JSON file")->required();
    run->add_option("--seed", seed, "override the configured seed");
    run->add_option("--out-dir", out_dir, "override the configured output directory");

    auto* flops = app.add_subcommand("flops", "architecture FLOPs / parameter report");
    auto* preset_opt = flops->add_option("--preset", preset, "named architecture preset");
    flops->add_option("--config", spec_path, "architecture spec JSON file")->excludes(preset_opt);
    flops->add_flag("--table", as_text, "human-readable table instead of JSON");

    auto* gradcheck = app.add_subcommand("gradcheck", "reverse-mode vs finite-difference battery");

    auto* compare = app.add_subcommand("compare-decoders",
                                       "attention vs average+project decoder on a classification config");
    compare->add_option("config", config_path, "toy-classify experiment JSON file")->required();
    compare->add_option("--seed", seed, "override the configured seed");
    compare->add_option("--out-dir", out_dir, "override the configured output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        OwnedString result, error;
        if (run->parsed()) {
            result.ptr = pio_run_experiment(read_file(config_path).c_str(),
                                            out_dir.empty() ? nullptr : out_dir.c_str(), seed, &error.ptr);
        } else if (flops->parsed()) {
            if (preset.empty() && spec_path.empty()) {
                OwnedString names;
                names.ptr = pio_flops_presets();
                return fail(std::string("flops needs --preset or --config; presets: ") + names.ptr);
            }
            const std::string spec = spec_path.empty() ? "" : read_file(spec_path);
            result.ptr = pio_flops_report(preset.empty() ? nullptr : preset.c_str(),
                                          spec_path.empty() ? nullptr : spec.c_str(), as_text ? 1 : 0,
                                          &error.ptr);
        } else if (gradcheck->parsed()) {
            int all_passed = 0;
            result.ptr = pio_gradcheck(&all_passed, &error.ptr);
            if (result.ptr && !all_passed) {
                std::cout << result.ptr << std::endl;
                return fail("gradient check failed");
            }
        } else if (compare->parsed()) {
            result.ptr = pio_compare_decoders(read_file(config_path).c_str(),
                                              out_dir.empty() ? nullptr : out_dir.c_str(), seed,
                                              &error.ptr);
        }
        if (!result.ptr) return fail(error.ptr ? error.ptr : "unknown error");
        std::cout << result.ptr << std::endl;
        return 0;
    } catch (const std::exception& e) {
        return fail(e.what());
    }
}
