#include "doctest.h"

#include <cmath>
#include <thread>

#include "oracles.hpp"
#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

using namespace pio;

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK(t.shape_str() == "[2x3]");
}

TEST_CASE("matmul identity cases") {
    Tape tape;
    Var a = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    Var i2 = tape.leaf(Tensor::identity(2));
    const Tensor& out = tape.value(tape.matmul(a, i2));
    CHECK(out.at(0, 0) == 1.0);
    CHECK(out.at(0, 1) == 2.0);
    CHECK(out.at(1, 0) == 3.0);
    CHECK(out.at(1, 1) == 4.0);

    Var col = tape.leaf(Tensor({2, 1}, {5, 7}));
    const Tensor& out2 = tape.value(tape.matmul(i2, col));
    CHECK(out2.at(0, 0) == 5.0);
    CHECK(out2.at(1, 0) == 7.0);
}

TEST_CASE("matmul associativity with identity") {
    Rng rng(3);
    Tensor a = rng.normal_tensor({4, 6}, 1.0);
    Tensor b = rng.normal_tensor({6, 3}, 1.0);
    Tape tape;
    Var via_identity = tape.matmul(tape.matmul(tape.leaf(a), tape.leaf(Tensor::identity(6))), tape.leaf(b));
    Var direct = tape.matmul(tape.leaf(a), tape.leaf(b));
    CHECK(oracle::max_abs_diff(tape.value(via_identity), tape.value(direct)) < 1e-10);
}

TEST_CASE("matmul shape error names both shapes") {
    Tape tape;
    Var a = tape.leaf(Tensor({2, 3}));
    Var b = tape.leaf(Tensor({4, 2}));
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("matmul gradient vs central differences") {
    Rng rng(7);
    Parameter a("a", rng.normal_tensor({3, 4}, 1.0));
    Parameter b("b", rng.normal_tensor({4, 2}, 1.0));
    Tensor w = rng.normal_tensor({3, 2}, 1.0);
    auto f = [&](Tape& t) { return t.sum_all(t.matmul_nt(t.matmul(t.param(a), t.param(b)), t.leaf(w))); };
    auto result = grad_check(f, std::vector<Parameter*>{&a, &b});
    CHECK(result.max_rel_error < 1e-6);
}

TEST_CASE("softmax basics") {
    Tape tape;
    const Tensor& sym = tape.value(tape.softmax_rows(tape.leaf(Tensor({1, 2}, {0.0, 0.0}))));
    CHECK(sym.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));

    const Tensor& stable = tape.value(tape.softmax_rows(tape.leaf(Tensor({1, 2}, {1000.0, 0.0}))));
    CHECK(stable.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(stable.at(0, 1) == 0.0);
}

TEST_CASE("softmax against extended-precision evaluation") {
    // Independent oracle in long double arithmetic.
    const long double x[3] = {1.0L, 2.0L, 3.0L};
    long double sum = 0.0L;
    long double e[3];
    for (int i = 0; i < 3; ++i) {
        e[i] = expl(x[i] - 3.0L);
        sum += e[i];
    }
    Tape tape;
    const Tensor& out = tape.value(tape.softmax_rows(tape.leaf(Tensor({1, 3}, {1.0, 2.0, 3.0}))));
    for (int i = 0; i < 3; ++i) {
        CHECK(std::fabs(out.at(0, static_cast<std::size_t>(i)) - static_cast<double>(e[i] / sum)) < 1e-12);
    }
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(11);
    for (int it = 0; it < 50; ++it) {
        Tape tape;
        const Tensor& out = tape.value(tape.softmax_rows(tape.leaf(rng.normal_tensor({3, 7}, 5.0))));
        for (std::size_t i = 0; i < 3; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 7; ++j) s += out.at(i, j);
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("masked softmax zeroes blocked entries exactly") {
    Tape tape;
    Tensor mask = attention_mask(1, {1, 0, 1});
    const Tensor& out = tape.value(tape.softmax_rows(tape.leaf(Tensor({1, 3}, {0.3, 99.0, -0.7})), &mask));
    CHECK(out.at(0, 1) == 0.0);
    CHECK(out.at(0, 0) + out.at(0, 2) == doctest::Approx(1.0).epsilon(1e-14));

    Tensor all_blocked = attention_mask(1, {0, 0, 0});
    CHECK_THROWS_WITH_AS(tape.softmax_rows(tape.leaf(Tensor({1, 3})), &all_blocked),
                         doctest::Contains("no valid attention targets"), std::invalid_argument);
}

TEST_CASE("layer norm cases") {
    Tape tape;
    Var scale = tape.leaf(Tensor::full({3}, 1.0));
    Var bias = tape.leaf(Tensor({3}));
    const Tensor& constant =
        tape.value(tape.layer_norm(tape.leaf(Tensor({1, 3}, {5.0, 5.0, 5.0})), scale, bias));
    for (std::size_t j = 0; j < 3; ++j) CHECK(constant.at(0, j) == 0.0);

    Var scale2 = tape.leaf(Tensor::full({2}, 1.0));
    Var bias2 = tape.leaf(Tensor({2}));
    const Tensor& already =
        tape.value(tape.layer_norm(tape.leaf(Tensor({1, 2}, {1.0, -1.0})), scale2, bias2, 1e-12));
    CHECK(std::fabs(already.at(0, 0) - 1.0) < 1e-9);
    CHECK(std::fabs(already.at(0, 1) + 1.0) < 1e-9);
}

TEST_CASE("layer norm gradient vs central differences") {
    Rng rng(13);
    Parameter x("x", rng.normal_tensor({2, 8}, 1.0));
    Parameter g("g", rng.normal_tensor({8}, 0.3));
    Parameter b("b", rng.normal_tensor({8}, 0.3));
    Tensor w = rng.normal_tensor({2, 8}, 1.0);
    auto f = [&](Tape& t) {
        return t.sum_all(t.matmul_nt(t.layer_norm(t.param(x), t.param(g), t.param(b)), t.leaf(w)));
    };
    CHECK(grad_check(f, std::vector<Parameter*>{&x, &g, &b}).max_rel_error < 1e-6);
}

TEST_CASE("gelu values and gradients") {
    Tape tape;
    const Tensor& at_zero = tape.value(tape.gelu(tape.leaf(Tensor({1, 1}, {0.0}))));
    CHECK(at_zero[0] == 0.0);

    Parameter x("x", Tensor({1, 4}, {-2.0, -0.5, 0.5, 2.0}));
    auto f = [&](Tape& t) { return t.sum_all(t.gelu(t.param(x))); };
    CHECK(grad_check(f, std::vector<Parameter*>{&x}).max_rel_error < 1e-6);

    // The tanh approximation stays close but is not the exact definition.
    Tape t2;
    const Tensor& exact = t2.value(t2.gelu(t2.leaf(Tensor({1, 1}, {1.0})), GeluKind::Exact));
    const Tensor& approx = t2.value(t2.gelu(t2.leaf(Tensor({1, 1}, {1.0})), GeluKind::Tanh));
    CHECK(exact[0] != approx[0]);
    CHECK(std::fabs(exact[0] - approx[0]) < 1e-3);
}

TEST_CASE("concat keeps the first block in the leading channels") {
    Rng rng(5);
    Tensor a = rng.normal_tensor({2, 3}, 1.0);
    Tensor b = rng.normal_tensor({2, 5}, 1.0);
    Tape tape;
    const Tensor& out = tape.value(tape.concat_cols(std::vector<Var>{tape.leaf(a), tape.leaf(b)}));
    CHECK(out.cols() == 8);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 3; ++j) CHECK(out.at(i, j) == a.at(i, j));
        for (std::size_t j = 0; j < 5; ++j) CHECK(out.at(i, 3 + j) == b.at(i, j));
    }
}

TEST_CASE("gather and slice error paths") {
    Tape tape;
    Var x = tape.leaf(Tensor({3, 2}));
    CHECK_THROWS_AS(tape.gather_rows(x, {0, 5}), std::out_of_range);
    CHECK_THROWS_AS(tape.slice_rows(x, 2, 4), std::invalid_argument);
    CHECK_THROWS_AS(tape.slice_cols(x, 1, 3), std::invalid_argument);
}

TEST_CASE("grad_check on sum of squares") {
    Parameter x("x", Tensor({1, 2}, {1.0, 2.0}));
    auto f = [&](Tape& t) {
        Var v = t.param(x);
        return t.sum_all(t.matmul_nt(v, v));  // x . x over the single row
    };
    x.zero_grad();
    {
        Tape tape;
        tape.backward(f(tape));
    }
    CHECK(x.grad[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x.grad[1] == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(grad_check(f, std::vector<Parameter*>{&x}).max_rel_error < 1e-8);
}

TEST_CASE("replaying a tape is bit identical") {
    Rng rng(23);
    Tensor x = rng.normal_tensor({4, 6}, 1.0);
    Tensor w = rng.normal_tensor({6, 5}, 1.0);
    auto run = [&]() {
        Tape tape;
        Var out = tape.gelu(tape.matmul(tape.leaf(x), tape.leaf(w)));
        return tape.value(tape.softmax_rows(out));
    };
    CHECK(oracle::bit_identical(run(), run()));
}

TEST_CASE("backward rejects non-finite loss") {
    Tape tape;
    Var bad = tape.leaf(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()}), true);
    CHECK_THROWS_AS(tape.backward(bad), std::runtime_error);
}

TEST_CASE("independent tapes run on independent threads") {
    Rng rng(31);
    Tensor x = rng.normal_tensor({8, 8}, 1.0);
    Tensor serial;
    {
        Tape tape;
        serial = tape.value(tape.softmax_rows(tape.matmul(tape.leaf(x), tape.leaf(x))));
    }
    Tensor from_thread1, from_thread2;
    std::thread t1([&] {
        Tape tape;
        from_thread1 = tape.value(tape.softmax_rows(tape.matmul(tape.leaf(x), tape.leaf(x))));
    });
    std::thread t2([&] {
        Tape tape;
        from_thread2 = tape.value(tape.softmax_rows(tape.matmul(tape.leaf(x), tape.leaf(x))));
    });
    t1.join();
    t2.join();
    CHECK(oracle::bit_identical(serial, from_thread1));
    CHECK(oracle::bit_identical(serial, from_thread2));
}

TEST_CASE("rng streams are deterministic") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    for (int i = 0; i < 100; ++i) {
        const double u = c.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
    Rng d(7);
    auto sample = d.sample_without_replacement(10, 10);
    std::vector<bool> seen(10, false);
    for (std::size_t s : sample) seen[s] = true;
    for (bool v : seen) CHECK(v);
}
