#include "pio/training.hpp"

#include <cmath>
#include <stdexcept>

namespace pio {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

LambOptimizer::LambOptimizer(std::vector<Parameter*> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Parameter* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

void LambOptimizer::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

void LambOptimizer::step(double lr, double weight_decay) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter& p = *params_[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        double theta_norm_sq = 0.0, update_norm_sq = 0.0;
        std::vector<double> update(p.value.size());
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            if (!std::isfinite(g)) {
                throw std::runtime_error("lamb: non-finite gradient in parameter '" + p.name + "'");
            }
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            const double u = m_hat / (std::sqrt(v_hat) + eps_) + weight_decay * p.value[i];
            update[i] = u;
            theta_norm_sq += p.value[i] * p.value[i];
            update_norm_sq += u * u;
        }
        const double theta_norm = std::sqrt(theta_norm_sq);
        const double update_norm = std::sqrt(update_norm_sq);
        const double ratio = (theta_norm > 0.0 && update_norm > 0.0) ? theta_norm / update_norm : 1.0;
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= lr * ratio * update[i];
    }
}

double clip_global_grad_norm(const std::vector<Parameter*>& params, double max_norm) {
    double norm_sq = 0.0;
    for (const Parameter* p : params) {
        for (std::size_t i = 0; i < p->grad.size(); ++i) norm_sq += p->grad[i] * p->grad[i];
    }
    const double norm = std::sqrt(norm_sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (Parameter* p : params) {
            for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
        }
    }
    return norm;
}

double schedule_rate(const Schedule& schedule, std::size_t step) {
    if (schedule.base_rate < 0.0) throw std::invalid_argument("schedule: base_rate must be >= 0");
    if (step > schedule.total_steps) return 0.0;
    const double base = schedule.base_rate;
    switch (schedule.kind) {
        case Schedule::Kind::WarmupCosine: {
            if (step < schedule.warmup_steps) {
                return base * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
            }
            if (schedule.total_steps <= schedule.warmup_steps) return base;
            const double t = static_cast<double>(step - schedule.warmup_steps) /
                             static_cast<double>(schedule.total_steps - schedule.warmup_steps);
            return base * 0.5 * (1.0 + std::cos(kPi * t));
        }
        case Schedule::Kind::FlatCosine: {
            if (step < schedule.warmup_steps) return base;
            if (schedule.total_steps <= schedule.warmup_steps) return base;
            const double t = static_cast<double>(step - schedule.warmup_steps) /
                             static_cast<double>(schedule.total_steps - schedule.warmup_steps);
            return base * 0.5 * (1.0 + std::cos(kPi * t));
        }
    }
    throw std::logic_error("unreachable schedule kind");
}

Var composite_loss(Tape& tape, Var outputs, const std::vector<LossRange>& ranges,
                   std::vector<double>* components) {
    const Tensor& out = tape.value(outputs);
    if (ranges.empty()) throw std::invalid_argument("composite_loss: no ranges");
    double weight_sum = 0.0;
    std::size_t covered = 0;
    for (const LossRange& r : ranges) {
        if (r.weight < 0.0) throw std::invalid_argument("composite_loss: negative weight");
        if (r.begin != covered || r.end <= r.begin) {
            throw std::invalid_argument("composite_loss: ranges must partition the output rows");
        }
        covered = r.end;
        weight_sum += r.weight;
    }
    if (covered != out.rows()) {
        throw std::invalid_argument("composite_loss: ranges cover " + std::to_string(covered) + " of " +
                                    std::to_string(out.rows()) + " rows");
    }
    if (weight_sum == 0.0) throw std::invalid_argument("composite_loss: all weights are zero");

    std::vector<Var> terms;
    std::vector<double> weights;
    if (components) components->clear();
    for (const LossRange& r : ranges) {
        Var rows = tape.slice_rows(outputs, r.begin, r.end - r.begin);
        Var term;
        switch (r.kind) {
            case LossRange::Kind::SoftmaxCrossEntropy:
                term = tape.softmax_cross_entropy(rows, r.class_ids, r.valid.empty() ? nullptr : &r.valid);
                break;
            case LossRange::Kind::L1:
                term = tape.l1_loss(rows, r.dense, r.valid.empty() ? nullptr : &r.valid);
                break;
            case LossRange::Kind::MultiHotCrossEntropy:
                term = tape.multi_hot_cross_entropy(rows, r.dense);
                break;
        }
        if (components) components->push_back(tape.value(term)[0]);
        terms.push_back(term);
        weights.push_back(r.weight);
    }
    return tape.add_scalars(terms, weights);
}

std::vector<std::size_t> sample_query_subset(std::size_t total, std::size_t subsample, Rng& rng) {
    if (subsample == 0) throw std::invalid_argument("sample_query_subset: subsample size must be >= 1");
    if (subsample > total) {
        throw std::invalid_argument("sample_query_subset: subsample " + std::to_string(subsample) +
                                    " exceeds " + std::to_string(total) + " queries");
    }
    std::vector<std::size_t> idx = rng.sample_without_replacement(total, subsample);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> per_row_softmax_ce(const Tensor& logits, const std::vector<std::size_t>& targets) {
    const std::size_t n = logits.rows(), c = logits.cols();
    if (targets.size() != n) throw std::invalid_argument("per_row_softmax_ce: target count mismatch");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < c; ++j) lse += std::exp(logits.at(i, j) - mx);
        out[i] = mx + std::log(lse) - logits.at(i, targets[i]);
    }
    return out;
}

double top1_accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    const std::size_t n = logits.rows(), c = logits.cols();
    if (labels.size() != n) throw std::invalid_argument("top1_accuracy: label count mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (logits.at(i, j) > logits.at(i, best)) best = j;
        }
        if (best == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

double psnr(const Tensor& prediction, const Tensor& target, double peak) {
    if (!prediction.same_shape(target)) {
        throw std::invalid_argument("psnr: shape mismatch " + prediction.shape_str() + " vs " +
                                    target.shape_str());
    }
    double mse = 0.0;
    for (std::size_t i = 0; i < prediction.size(); ++i) {
        const double d = prediction[i] - target[i];
        mse += d * d;
    }
    mse /= static_cast<double>(prediction.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

double end_point_error(const Tensor& predicted_flow, const Tensor& true_flow) {
    if (!predicted_flow.same_shape(true_flow) || predicted_flow.cols() != 2) {
        throw std::invalid_argument("end_point_error: expected matching [n x 2] flows, got " +
                                    predicted_flow.shape_str() + " vs " + true_flow.shape_str());
    }
    const std::size_t n = predicted_flow.rows();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dy = predicted_flow.at(i, 0) - true_flow.at(i, 0);
        const double dx = predicted_flow.at(i, 1) - true_flow.at(i, 1);
        total += std::sqrt(dy * dy + dx * dx);
    }
    return total / static_cast<double>(n);
}

}  // namespace pio
