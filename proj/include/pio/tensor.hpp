#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace pio {

// Dense row-major array of 64-bit floats. Extents are always >= 1 and the
// product of extents equals the element count. Once a tensor has been handed
// to a Tape it must not be mutated; builders fill data() before that point.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D accessors; most of the architecture works on index x channel arrays.
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& storage() { return data_; }
    const std::vector<double>& storage() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Raw 2-D matrix products shared by forward ops and backward rules. Loops use
// a fixed accumulation order so results are independent of call site.
Tensor mat_mul(const Tensor& a, const Tensor& b);     // a[r x k] * b[k x c]
Tensor mat_mul_nt(const Tensor& a, const Tensor& b);  // a[r x k] * b[c x k]^T
Tensor mat_mul_tn(const Tensor& a, const Tensor& b);  // a[k x r]^T * b[k x c]
void accumulate(Tensor& dst, const Tensor& src);

// Deterministic random source. All sampling is implemented here from raw
// 64-bit draws so streams do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();                          // [0, 1)
    double uniform(double lo, double hi);
    std::size_t uniform_index(std::size_t n);  // [0, n)
    double normal();
    // Standard normal resampled until |x| <= 2, then scaled.
    double truncated_normal(double scale);
    bool bernoulli(double p);
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);
    Rng fork(std::uint64_t stream);

    Tensor normal_tensor(std::vector<std::size_t> shape, double stddev);
    Tensor truncated_normal_tensor(std::vector<std::size_t> shape, double scale);
    Tensor uniform_tensor(std::vector<std::size_t> shape, double lo, double hi);

private:
    std::uint64_t state_[4];
};

}  // namespace pio
