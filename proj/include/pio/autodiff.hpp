#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pio/tensor.hpp"

namespace pio {

// Named trainable tensor. Gradient always mirrors the value shape and is
// accumulated across tapes until zero_grad().
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() {
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = 0.0;
    }
};

enum class GeluKind { Exact, Tanh };

// Handle to a tensor recorded on a tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Ordered record of executed primitives. Nodes are appended in execution
// order, so every node follows the producers of its inputs and a reverse
// sweep visits consumers before producers. One backward rule is registered
// per primitive at record time.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = false);
    Var param(Parameter& p);

    const Tensor& value(Var v) const { return node(v).value; }
    const Tensor& grad(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double s);
    Var add_bias(Var x, Var bias);  // x[n x c] + bias[c], the one permitted broadcast
    Var linear(Var x, Var w, Var b);
    Var softmax_rows(Var x, const Tensor* additive_mask = nullptr);
    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
    Var gelu(Var x, GeluKind kind = GeluKind::Exact);
    Var tanh(Var x);
    Var dropout(Var x, double rate, Rng& rng);
    Var concat_cols(std::span<const Var> parts);
    Var concat_rows(std::span<const Var> parts);
    Var slice_rows(Var x, std::size_t begin, std::size_t count);
    Var slice_cols(Var x, std::size_t begin, std::size_t count);
    Var gather_rows(Var x, std::vector<std::size_t> indices);
    Var embedding_lookup(Var table, const std::vector<std::size_t>& ids) { return gather_rows(table, ids); }
    Var tile_rows(Var row, std::size_t n);
    Var mean_rows(Var x);  // [n x c] -> [1 x c]
    Var sum_all(Var x);    // -> scalar [1]
    Var add_scalars(std::span<const Var> scalars, std::span<const double> weights);

    // Loss primitives, each producing a scalar with a fused backward rule.
    // `valid` restricts the mean to flagged rows; null means all rows.
    Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& targets,
                              const std::vector<std::uint8_t>* valid = nullptr);
    Var l1_loss(Var pred, const Tensor& target, const std::vector<std::uint8_t>* valid = nullptr);
    Var multi_hot_cross_entropy(Var logits, const Tensor& targets);

    // Reverse sweep from a finite scalar. Parameter leaves export their
    // gradient into Parameter::grad (accumulating).
    void backward(Var scalar_loss);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        Parameter* source = nullptr;
        std::function<void(Tape&)> rule;  // empty for leaves
    };

    Node& node(Var v);
    const Node& node(Var v) const;
    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> rule);
    Tensor& grad_buffer(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool needs_grad(Var v) const { return node(v).requires_grad; }

    std::deque<Node> nodes_;  // stable references across pushes
    int current_ = -1;  // node whose rule is running during the reverse sweep
    bool ran_backward_ = false;
};

// Finite-difference gradient verification. Runs f once with reverse mode and
// compares against central differences at step h, element by element.
// Relative error is |a - n| / max(|a|, |n|, 1e-8).
struct GradCheckOptions {
    double h = 1e-5;
    std::size_t max_probes_per_param = 0;  // 0 = every element
    std::uint64_t probe_seed = 17;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t probes = 0;
};

GradCheckResult grad_check(const std::function<Var(Tape&)>& f, std::span<Parameter* const> params,
                           const GradCheckOptions& opts = {});

}  // namespace pio
