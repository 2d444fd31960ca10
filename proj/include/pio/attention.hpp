#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

namespace pio {

struct AttentionConfig {
    std::size_t num_heads = 1;
    std::size_t qk_channels = 0;      // F; 0 = same as query channels
    std::size_t v_channels = 0;       // 0 = same as qk_channels
    std::size_t output_channels = 0;  // 0 = same as query channels
    double mlp_hidden_ratio = 1.0;    // hidden width = ratio * output_channels
    bool use_query_residual = true;
    double dropout_rate = 0.0;
    GeluKind gelu = GeluKind::Exact;
};

// Additive attention mask over [query rows x kv rows]; 0 = attend,
// kMaskBlocked = blocked. Blocked entries have exactly zero weight.
constexpr double kMaskBlocked = -1e9;
Tensor attention_mask(std::size_t query_rows, const std::vector<std::uint8_t>& kv_valid);

// One QKV attention block: pre-norms, multi-head attention, optional query
// residual, and a per-position two-layer MLP with its own pre-norm.
class AttentionModule {
public:
    AttentionModule(std::string name, std::size_t query_channels, std::size_t kv_channels,
                    const AttentionConfig& config, Rng& rng);

    // softmax(Q K^T / sqrt(F / heads) + mask) V per head, heads concatenated,
    // then the output projection. No norms or residuals.
    Var qkv_attention(Tape& tape, Var x_q, Var x_kv, const Tensor* mask = nullptr);

    // Full block: norm -> attention -> (+ query residual) -> (+ MLP of norm).
    Var forward(Tape& tape, Var x_q, Var x_kv, const Tensor* mask = nullptr, Rng* dropout_rng = nullptr);

    const AttentionConfig& config() const { return config_; }
    std::size_t query_channels() const { return query_channels_; }
    std::size_t kv_channels() const { return kv_channels_; }
    std::size_t output_channels() const { return config_.output_channels; }
    std::size_t qk_channels() const { return config_.qk_channels; }
    std::size_t v_channels() const { return config_.v_channels; }
    std::size_t mlp_hidden_channels() const { return mlp_hidden_; }
    const std::string& name() const { return name_; }

    std::vector<Parameter*> parameters();

private:
    std::string name_;
    std::size_t query_channels_ = 0;
    std::size_t kv_channels_ = 0;
    std::size_t mlp_hidden_ = 0;
    AttentionConfig config_;

    Parameter norm_q_scale_, norm_q_bias_;
    Parameter norm_kv_scale_, norm_kv_bias_;
    Parameter wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    Parameter norm_mlp_scale_, norm_mlp_bias_;
    Parameter mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
};

// forward() with x as both query and key-value input; the query residual is
// always applied in this role.
Var self_attention_block(AttentionModule& module, Tape& tape, Var x, Rng* dropout_rng = nullptr);

// Fills in zero config fields from the query/kv widths and validates the
// result. Exposed so cost accounting resolves shapes identically.
AttentionConfig resolve_attention_config(AttentionConfig config, std::size_t query_channels);
std::size_t attention_mlp_hidden(const AttentionConfig& resolved_config);

}  // namespace pio
