// Exercises the shared-library interface the way an external client would:
// through pio.h only.

#include <cassert>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "pio.h"

static int failures = 0;

#define CHECK(cond)                                                        \
    do {                                                                   \
        if (!(cond)) {                                                     \
            std::printf("FAIL %s:%d: %s\n", __FILE__, __LINE__, #cond);    \
            ++failures;                                                    \
        }                                                                  \
    } while (0)

static const char* kModelJson = R"({
    "input_channels": 5,
    "num_latents": 3,
    "latent_channels": 8,
    "layers_per_block": 2,
    "num_heads": 2,
    "decoder_query_channels": 6,
    "output_channels": 2
})";

static void test_version() {
    CHECK(pio_version_major() >= 1);
    CHECK(pio_version_minor() >= 0);
}

static void test_model_roundtrip() {
    char* err = nullptr;
    pio_model_t* model = pio_model_create(kModelJson, 7, &err);
    CHECK(model != nullptr);
    CHECK(err == nullptr);
    CHECK(pio_model_parameter_count(model) > 0);
    CHECK(pio_model_output_channels(model) == 2);

    std::vector<double> inputs(7 * 5), queries(4 * 6);
    for (size_t i = 0; i < inputs.size(); ++i) inputs[i] = 0.01 * static_cast<double>(i);
    for (size_t i = 0; i < queries.size(); ++i) queries[i] = 0.02 * static_cast<double>(i);
    std::vector<double> out(4 * 2), out2(4 * 2);
    CHECK(pio_model_forward(model, inputs.data(), 7, 5, queries.data(), 4, 6, out.data(), out.size(),
                            &err) == 0);
    CHECK(err == nullptr);

    const char* path = "/tmp/pio_capi_test.prcv";
    CHECK(pio_model_save(model, path, &err) == 0);

    pio_model_t* reloaded = pio_model_create(kModelJson, 99, &err);  // different init
    CHECK(reloaded != nullptr);
    CHECK(pio_model_load(reloaded, path, &err) == 0);
    CHECK(pio_model_forward(reloaded, inputs.data(), 7, 5, queries.data(), 4, 6, out2.data(), out2.size(),
                            &err) == 0);
    for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] == out2[i]);  // bit-exact after reload

    // Undersized output buffer reports cleanly.
    CHECK(pio_model_forward(model, inputs.data(), 7, 5, queries.data(), 4, 6, out.data(), 3, &err) != 0);
    CHECK(err != nullptr);
    pio_free(err);
    err = nullptr;

    std::remove(path);
    pio_model_destroy(model);
    pio_model_destroy(reloaded);
}

static void test_model_errors() {
    char* err = nullptr;
    pio_model_t* bad = pio_model_create("{\"num_latents\": 0}", 1, &err);
    CHECK(bad == nullptr);
    CHECK(err != nullptr);
    pio_free(err);
    err = nullptr;

    bad = pio_model_create("not json", 1, &err);
    CHECK(bad == nullptr);
    CHECK(err != nullptr);
    pio_free(err);
    err = nullptr;

    bad = pio_model_create("{\"unknown_field\": 3, \"input_channels\": 4}", 1, &err);
    CHECK(bad == nullptr);
    CHECK(err != nullptr && std::strstr(err, "unknown_field") != nullptr);
    pio_free(err);
}

static void test_flops() {
    char* err = nullptr;
    char* presets = pio_flops_presets();
    CHECK(presets != nullptr && std::strstr(presets, "bert-base") != nullptr);
    pio_free(presets);

    char* report = pio_flops_report("bert-base", nullptr, 0, &err);
    CHECK(report != nullptr);
    CHECK(std::strstr(report, "total_flops") != nullptr);
    pio_free(report);

    report = pio_flops_report(nullptr,
                              R"({"input_size": 16, "output_size": 8,
                                  "model": {"input_channels": 4, "num_latents": 2, "latent_channels": 4,
                                            "layers_per_block": 1, "num_heads": 1,
                                            "decoder_query_channels": 4}})",
                              1, &err);
    CHECK(report != nullptr);
    CHECK(std::strstr(report, "encode") != nullptr);
    pio_free(report);

    report = pio_flops_report(nullptr, nullptr, 0, &err);
    CHECK(report == nullptr);
    CHECK(err != nullptr);
    pio_free(err);
    err = nullptr;

    report = pio_flops_report("no-such-preset", nullptr, 0, &err);
    CHECK(report == nullptr);
    CHECK(err != nullptr && std::strstr(err, "unknown flops preset") != nullptr);
    pio_free(err);
}

static void test_run_experiment() {
    char* err = nullptr;
    const char* config = R"({
        "task": "toy-classify",
        "seed": 3,
        "out_dir": "/tmp/pio_capi_run",
        "model": {"num_latents": 4, "latent_channels": 8, "layers_per_block": 1, "num_heads": 2},
        "data": {"num_classes": 2, "rows": 4, "channels": 4, "train_examples": 16},
        "train": {"steps": 10, "batch_size": 2, "eval_examples": 8}
    })";
    char* summary = pio_run_experiment(config, nullptr, -1, &err);
    CHECK(summary != nullptr);
    CHECK(err == nullptr);
    CHECK(std::strstr(summary, "final_metrics") != nullptr);
    CHECK(std::strstr(summary, "config_hash") != nullptr);
    pio_free(summary);

    // Seed and directory overrides work through the C surface.
    summary = pio_run_experiment(config, "/tmp/pio_capi_run2", 11, &err);
    CHECK(summary != nullptr);
    CHECK(std::strstr(summary, "pio_capi_run2") != nullptr);
    pio_free(summary);

    summary = pio_run_experiment("{\"task\": \"bogus\"}", nullptr, -1, &err);
    CHECK(summary == nullptr);
    CHECK(err != nullptr);
    pio_free(err);
}

static void test_gradcheck() {
    char* err = nullptr;
    int all_passed = 0;
    char* results = pio_gradcheck(&all_passed, &err);
    CHECK(results != nullptr);
    CHECK(all_passed == 1);
    pio_free(results);
}

int main() {
    test_version();
    test_model_roundtrip();
    test_model_errors();
    test_flops();
    test_run_experiment();
    test_gradcheck();
    if (failures == 0) {
        std::printf("all C API checks passed\n");
        return 0;
    }
    std::printf("%d C API check(s) failed\n", failures);
    return 1;
}
