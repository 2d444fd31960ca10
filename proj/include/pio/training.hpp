#pragma once

#include <limits>
#include <string>
#include <vector>

#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

namespace pio {

// LAMB with bias-corrected moments. The update direction per tensor is
// u = m_hat / (sqrt(v_hat) + eps) + weight_decay * theta, scaled by the trust
// ratio |theta| / |u| (1 when either norm is zero).
class LambOptimizer {
public:
    explicit LambOptimizer(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-6);

    void step(double lr, double weight_decay = 0.0);
    void zero_grad();
    std::size_t step_count() const { return step_; }
    const std::vector<Parameter*>& parameters() const { return params_; }

private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> m_, v_;
    std::size_t step_ = 0;
    double beta1_, beta2_, eps_;
};

// Scales all gradients so the global norm is at most max_norm; returns the
// pre-clip norm. max_norm <= 0 disables clipping.
double clip_global_grad_norm(const std::vector<Parameter*>& params, double max_norm);

struct Schedule {
    enum class Kind { WarmupCosine, FlatCosine };
    Kind kind = Kind::WarmupCosine;
    double base_rate = 1e-3;
    std::size_t warmup_steps = 0;  // linear 0 -> base (WarmupCosine) or flat phase length (FlatCosine)
    std::size_t total_steps = 1;   // cosine reaches 0 here; beyond it the rate is 0
};
double schedule_rate(const Schedule& schedule, std::size_t step);

// Weighted per-range losses over the output index dimension.
struct LossRange {
    enum class Kind { SoftmaxCrossEntropy, L1, MultiHotCrossEntropy };
    Kind kind = Kind::SoftmaxCrossEntropy;
    std::size_t begin = 0;
    std::size_t end = 0;
    double weight = 1.0;

    // Targets for the covered rows.
    std::vector<std::size_t> class_ids;   // SoftmaxCrossEntropy
    Tensor dense;                          // L1 / MultiHotCrossEntropy
    std::vector<std::uint8_t> valid;       // optional row filter
};

// Returns the weighted sum; per-range unweighted components are written to
// components when non-null. Ranges must partition [0, rows).
Var composite_loss(Tape& tape, Var outputs, const std::vector<LossRange>& ranges,
                   std::vector<double>* components = nullptr);

// Uniform sample of query rows without replacement, sorted ascending so a
// full-size sample reproduces the identity ordering.
std::vector<std::size_t> sample_query_subset(std::size_t total, std::size_t subsample, Rng& rng);

// Per-row softmax cross-entropy, for checking subset losses against the
// corresponding entries of the full loss vector.
std::vector<double> per_row_softmax_ce(const Tensor& logits, const std::vector<std::size_t>& targets);

double top1_accuracy(const Tensor& logits, const std::vector<std::size_t>& labels);
// 10 * log10(peak^2 / mse); +infinity when mse is zero.
double psnr(const Tensor& prediction, const Tensor& target, double peak = 1.0);
// Mean Euclidean norm of per-row flow error; rows are [dy, dx] pairs.
double end_point_error(const Tensor& predicted_flow, const Tensor& true_flow);

}  // namespace pio
