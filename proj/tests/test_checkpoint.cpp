#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "pio/checkpoint.hpp"

using namespace pio;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const char* name) {
        path = (std::filesystem::temp_directory_path() / name).string();
    }
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("f64 checkpoint round trip is bit exact") {
    Rng rng(1);
    Parameter a("model.encoder.f_q.w", rng.normal_tensor({7, 5}, 1.0));
    Parameter b("model.latent", rng.normal_tensor({3, 8}, 0.02));
    // Exercise values that stress the encoding.
    a.value[0] = 0.1 + 0.2;  // not exactly representable as 0.3
    a.value[1] = -0.0;
    a.value[2] = 1e-308;

    TempFile file("pio_ckpt_test.prcv");
    save_checkpoint(file.path, {&a, &b});

    auto loaded = load_checkpoint(file.path);
    CHECK(loaded.size() == 2);
    CHECK(oracle::bit_identical(loaded.at(a.name), a.value));
    CHECK(oracle::bit_identical(loaded.at(b.name), b.value));

    Parameter a2(a.name, Tensor({7, 5}));
    Parameter b2(b.name, Tensor({3, 8}));
    load_parameters(file.path, {&a2, &b2});
    CHECK(oracle::bit_identical(a2.value, a.value));
    CHECK(oracle::bit_identical(b2.value, b.value));
}

TEST_CASE("manifest preserves names, shapes, dtypes, and order") {
    Rng rng(2);
    Parameter a("first", rng.normal_tensor({2, 3}, 1.0));
    Parameter b("second", rng.normal_tensor({4}, 1.0));
    TempFile file("pio_manifest_test.prcv");
    save_checkpoint(file.path, {&a, &b});
    auto manifest = read_manifest(file.path);
    REQUIRE(manifest.size() == 2);
    CHECK(manifest[0].name == "first");
    CHECK(manifest[0].shape == std::vector<std::size_t>{2, 3});
    CHECK(manifest[0].dtype == CheckpointDtype::f64);
    CHECK(manifest[0].element_count() == 6);
    CHECK(manifest[1].name == "second");
    CHECK(manifest[1].offset == 6 * 8);
}

TEST_CASE("f32 storage mode round trips within float precision") {
    Rng rng(3);
    Parameter a("weights", rng.normal_tensor({5, 5}, 1.0));
    TempFile file("pio_f32_test.prcv");
    save_checkpoint(file.path, {&a}, CheckpointDtype::f32);
    auto manifest = read_manifest(file.path);
    CHECK(manifest[0].dtype == CheckpointDtype::f32);
    auto loaded = load_checkpoint(file.path);
    for (std::size_t i = 0; i < a.value.size(); ++i) {
        CHECK(loaded.at("weights")[i] ==
              doctest::Approx(a.value[i]).epsilon(1e-6));
        CHECK(loaded.at("weights")[i] == static_cast<double>(static_cast<float>(a.value[i])));
    }
}

TEST_CASE("loader errors") {
    Rng rng(4);
    Parameter a("present", rng.normal_tensor({2, 2}, 1.0));
    TempFile file("pio_errors_test.prcv");
    save_checkpoint(file.path, {&a});

    Parameter missing("absent", Tensor({2, 2}));
    CHECK_THROWS_WITH_AS(load_parameters(file.path, {&missing}), doctest::Contains("absent"),
                         std::runtime_error);
    Parameter wrong_shape("present", Tensor({4}));
    CHECK_THROWS_WITH_AS(load_parameters(file.path, {&wrong_shape}), doctest::Contains("shape"),
                         std::runtime_error);

    TempFile garbage("pio_garbage_test.prcv");
    {
        std::ofstream out(garbage.path, std::ios::binary);
        out << "NOPEnope";
    }
    CHECK_THROWS_WITH_AS(read_manifest(garbage.path), doctest::Contains("magic"), std::runtime_error);
    CHECK_THROWS_AS(read_manifest("/nonexistent/path.prcv"), std::runtime_error);
}

TEST_CASE("saved bytes are deterministic") {
    Rng rng(5);
    Parameter a("p", rng.normal_tensor({6, 6}, 1.0));
    TempFile f1("pio_det1.prcv"), f2("pio_det2.prcv");
    save_checkpoint(f1.path, {&a});
    save_checkpoint(f2.path, {&a});
    std::ifstream in1(f1.path, std::ios::binary), in2(f2.path, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(in1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(s1.substr(0, 4) == "PRCV");
}
