#include "pio.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "json.hpp"

#include "pio/checkpoint.hpp"
#include "pio/config.hpp"
#include "pio/experiments.hpp"
#include "pio/flops.hpp"
#include "pio/model.hpp"

namespace {

constexpr int kVersionMajor = 1;
constexpr int kVersionMinor = 0;

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void set_error(char** errptr, const std::string& message) {
    if (errptr) *errptr = dup_string(message);
}

template <typename Fn>
char* guarded(char** errptr, Fn&& fn) {
    try {
        return dup_string(fn());
    } catch (const std::exception& e) {
        set_error(errptr, e.what());
        return nullptr;
    }
}

pio::ExperimentConfig load_config(const char* config_json, const char* out_dir, long long seed) {
    if (!config_json) throw std::invalid_argument("config_json is NULL");
    pio::ExperimentConfig cfg = pio::parse_experiment_config(nlohmann::json::parse(config_json));
    if (out_dir) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    return cfg;
}

}  // namespace

struct pio_model_t {
    pio::PerceiverModel model;
    pio_model_t(const pio::PerceiverConfig& cfg, pio::Rng& rng) : model(cfg, rng) {}
};

extern "C" {

char* pio_run_experiment(const char* config_json, const char* out_dir, long long seed, char** errptr) {
    return guarded(errptr, [&] {
        pio::RunResult result = pio::run_experiment(load_config(config_json, out_dir, seed));
        nlohmann::json j = result.summary;
        j["run_dir"] = result.run_dir;
        return j.dump(2);
    });
}

char* pio_compare_decoders(const char* config_json, const char* out_dir, long long seed, char** errptr) {
    return guarded(errptr, [&] {
        pio::RunResult result = pio::run_compare_decoders(load_config(config_json, out_dir, seed));
        nlohmann::json j = result.summary;
        j["run_dir"] = result.run_dir;
        return j.dump(2);
    });
}

char* pio_flops_report(const char* preset, const char* spec_json, int as_text, char** errptr) {
    return guarded(errptr, [&] {
        if ((preset == nullptr) == (spec_json == nullptr)) {
            throw std::invalid_argument("pass exactly one of preset / spec_json");
        }
        pio::FlopsReport report =
            preset ? pio::flops_preset_report(preset)
                   : pio::count_perceiver(pio::parse_flops_spec(nlohmann::json::parse(spec_json)));
        return as_text ? pio::render_flops_table(report) : pio::flops_report_json(report);
    });
}

char* pio_flops_presets(void) {
    std::string joined;
    for (const std::string& name : pio::flops_preset_names()) {
        if (!joined.empty()) joined += ",";
        joined += name;
    }
    return dup_string(joined);
}

char* pio_gradcheck(int* all_passed, char** errptr) {
    return guarded(errptr, [&] {
        nlohmann::json results = pio::gradcheck_battery();
        if (all_passed) {
            *all_passed = 1;
            for (const auto& r : results) {
                if (!r["pass"].get<bool>()) *all_passed = 0;
            }
        }
        return results.dump(2);
    });
}

pio_model_t* pio_model_create(const char* model_json, unsigned long long seed, char** errptr) {
    try {
        if (!model_json) throw std::invalid_argument("model_json is NULL");
        nlohmann::json wrapper;
        wrapper["task"] = "toy-classify";  // reuse the strict model-section parser
        wrapper["model"] = nlohmann::json::parse(model_json);
        pio::ExperimentConfig cfg = pio::parse_experiment_config(wrapper);
        if (cfg.model.input_channels == 0) {
            throw std::invalid_argument("model_json needs a nonzero input_channels");
        }
        pio::PerceiverConfig pc = pio::to_perceiver_config(cfg.model);
        pio::Rng rng(seed);
        return new pio_model_t(pc, rng);
    } catch (const std::exception& e) {
        set_error(errptr, e.what());
        return nullptr;
    }
}

void pio_model_destroy(pio_model_t* model) { delete model; }

long long pio_model_parameter_count(const pio_model_t* model) {
    if (!model) return -1;
    return static_cast<long long>(const_cast<pio_model_t*>(model)->model.parameter_count());
}

long long pio_model_output_channels(const pio_model_t* model) {
    if (!model) return -1;
    return static_cast<long long>(model->model.decoder_output_channels());
}

int pio_model_forward(pio_model_t* model, const double* inputs, size_t m, size_t c,
                      const double* queries, size_t o, size_t eq, double* out, size_t out_len,
                      char** errptr) {
    try {
        if (!model || !inputs || !queries || !out) throw std::invalid_argument("NULL argument");
        pio::Tensor x({m, c}, std::vector<double>(inputs, inputs + m * c));
        pio::Tensor q({o, eq}, std::vector<double>(queries, queries + o * eq));
        pio::Tape tape;
        pio::Var result = model->model.forward(tape, tape.leaf(x), tape.leaf(q));
        const pio::Tensor& value = tape.value(result);
        if (value.size() > out_len) {
            throw std::invalid_argument("output buffer holds " + std::to_string(out_len) +
                                        " doubles, need " + std::to_string(value.size()));
        }
        std::memcpy(out, value.data(), value.size() * sizeof(double));
        return 0;
    } catch (const std::exception& e) {
        set_error(errptr, e.what());
        return 1;
    }
}

int pio_model_save(pio_model_t* model, const char* path, char** errptr) {
    try {
        if (!model || !path) throw std::invalid_argument("NULL argument");
        pio::save_checkpoint(path, model->model.parameters());
        return 0;
    } catch (const std::exception& e) {
        set_error(errptr, e.what());
        return 1;
    }
}

int pio_model_load(pio_model_t* model, const char* path, char** errptr) {
    try {
        if (!model || !path) throw std::invalid_argument("NULL argument");
        pio::load_parameters(path, model->model.parameters());
        return 0;
    } catch (const std::exception& e) {
        set_error(errptr, e.what());
        return 1;
    }
}

void pio_free(void* ptr) { std::free(ptr); }

int pio_version_major(void) { return kVersionMajor; }
int pio_version_minor(void) { return kVersionMinor; }

}  // extern "C"
