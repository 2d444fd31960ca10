#include "pio/tensor.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace pio {

namespace {

std::size_t checked_extent_product(const std::vector<std::size_t>& shape) {
    if (shape.empty()) {
        throw std::invalid_argument("tensor shape must have at least one extent");
    }
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) {
            throw std::invalid_argument("tensor extent must be >= 1, got shape " + shape_to_string(shape));
        }
        n *= e;
    }
    return n;
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    data_.assign(checked_extent_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_extent_product(shape_) != data_.size()) {
        throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) +
                                    " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = value;
    return t;
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw std::invalid_argument("expected rank-2 tensor, got shape " + shape_str());
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw std::invalid_argument("expected rank-2 tensor, got shape " + shape_str());
    return shape_[1];
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

Tensor mat_mul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul shape mismatch: " + a.shape_str() + " * " + b.shape_str());
    }
    const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
    Tensor out({r, c});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < r; ++i) {
        const double* ai = pa + i * k;
        double* oi = po + i * c;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = pb + kk * c;
            for (std::size_t j = 0; j < c; ++j) oi[j] += av * bk[j];
        }
    }
    return out;
}

Tensor mat_mul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("matmul_nt shape mismatch: " + a.shape_str() + " * " + b.shape_str() + "^T");
    }
    // Materializing b^T lets the product run through the stride-1 kernel;
    // per-element accumulation order is unchanged.
    const std::size_t k = a.cols(), c = b.rows();
    Tensor bt({k, c});
    for (std::size_t j = 0; j < c; ++j) {
        const double* bj = b.data() + j * k;
        for (std::size_t kk = 0; kk < k; ++kk) bt.at(kk, j) = bj[kk];
    }
    return mat_mul(a, bt);
}

Tensor mat_mul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) {
        throw std::invalid_argument("matmul_tn shape mismatch: " + a.shape_str() + "^T * " + b.shape_str());
    }
    const std::size_t r = a.cols(), k = a.rows(), c = b.cols();
    Tensor out({r, c});
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double* ak = a.data() + kk * r;
        const double* bk = b.data() + kk * c;
        for (std::size_t i = 0; i < r; ++i) {
            const double av = ak[i];
            double* oi = out.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) oi[j] += av * bk[j];
        }
    }
    return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
    if (!dst.same_shape(src)) {
        throw std::invalid_argument("accumulate shape mismatch: " + dst.shape_str() + " += " + src.shape_str());
    }
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// xoshiro256** seeded via splitmix64.
namespace {
std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}
std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::size_t Rng::uniform_index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: n must be >= 1");
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return static_cast<std::size_t>(v % n);
}

double Rng::normal() {
    // Box-Muller; the second value is discarded so the stream layout stays
    // independent of call pattern.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

double Rng::truncated_normal(double scale) {
    double x = normal();
    while (std::fabs(x) > 2.0) x = normal();
    return x * scale;
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t k) {
    if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + uniform_index(n - i);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
}

Rng Rng::fork(std::uint64_t stream) {
    return Rng(next_u64() ^ (0x9e3779b97f4a7c15ull * (stream + 1)));
}

Tensor Rng::normal_tensor(std::vector<std::size_t> shape, double stddev) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal() * stddev;
    return t;
}

Tensor Rng::truncated_normal_tensor(std::vector<std::size_t> shape, double scale) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = truncated_normal(scale);
    return t;
}

Tensor Rng::uniform_tensor(std::vector<std::size_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
    return t;
}

}  // namespace pio
