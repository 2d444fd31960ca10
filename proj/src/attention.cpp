#include "pio/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace pio {

Tensor attention_mask(std::size_t query_rows, const std::vector<std::uint8_t>& kv_valid) {
    Tensor mask({query_rows, kv_valid.size()});
    for (std::size_t i = 0; i < query_rows; ++i)
        for (std::size_t j = 0; j < kv_valid.size(); ++j) mask.at(i, j) = kv_valid[j] ? 0.0 : kMaskBlocked;
    return mask;
}

AttentionConfig resolve_attention_config(AttentionConfig config, std::size_t query_channels) {
    if (query_channels == 0) throw std::invalid_argument("attention: query channels must be >= 1");
    if (config.num_heads == 0) throw std::invalid_argument("attention: num_heads must be >= 1");
    if (config.qk_channels == 0) config.qk_channels = query_channels;
    if (config.v_channels == 0) config.v_channels = config.qk_channels;
    if (config.output_channels == 0) config.output_channels = query_channels;
    if (config.qk_channels % config.num_heads != 0) {
        throw std::invalid_argument("attention: qk_channels " + std::to_string(config.qk_channels) +
                                    " not divisible by " + std::to_string(config.num_heads) + " heads");
    }
    if (config.v_channels % config.num_heads != 0) {
        throw std::invalid_argument("attention: v_channels " + std::to_string(config.v_channels) +
                                    " not divisible by " + std::to_string(config.num_heads) + " heads");
    }
    if (config.use_query_residual && config.output_channels != query_channels) {
        throw std::invalid_argument("attention: query residual requires output_channels == query channels (" +
                                    std::to_string(config.output_channels) + " vs " +
                                    std::to_string(query_channels) + ")");
    }
    if (config.mlp_hidden_ratio <= 0.0) throw std::invalid_argument("attention: mlp_hidden_ratio must be > 0");
    if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0) {
        throw std::invalid_argument("attention: dropout_rate must be in [0, 1)");
    }
    return config;
}

std::size_t attention_mlp_hidden(const AttentionConfig& resolved_config) {
    const auto h = static_cast<std::size_t>(
        std::llround(resolved_config.mlp_hidden_ratio * static_cast<double>(resolved_config.output_channels)));
    return h == 0 ? 1 : h;
}

namespace {

Parameter make_linear_weight(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    return Parameter(name, rng.truncated_normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
}

}  // namespace

AttentionModule::AttentionModule(std::string name, std::size_t query_channels, std::size_t kv_channels,
                                 const AttentionConfig& config, Rng& rng)
    : name_(std::move(name)),
      query_channels_(query_channels),
      kv_channels_(kv_channels),
      config_(resolve_attention_config(config, query_channels)) {
    if (kv_channels == 0) throw std::invalid_argument("attention: kv channels must be >= 1");
    const std::size_t f = config_.qk_channels;
    const std::size_t v = config_.v_channels;
    const std::size_t out = config_.output_channels;
    mlp_hidden_ = attention_mlp_hidden(config_);

    norm_q_scale_ = Parameter(name_ + ".norm_q.scale", Tensor::full({query_channels_}, 1.0));
    norm_q_bias_ = Parameter(name_ + ".norm_q.bias", Tensor({query_channels_}));
    norm_kv_scale_ = Parameter(name_ + ".norm_kv.scale", Tensor::full({kv_channels_}, 1.0));
    norm_kv_bias_ = Parameter(name_ + ".norm_kv.bias", Tensor({kv_channels_}));
    wq_ = make_linear_weight(name_ + ".f_q.w", query_channels_, f, rng);
    bq_ = Parameter(name_ + ".f_q.b", Tensor({f}));
    wk_ = make_linear_weight(name_ + ".f_k.w", kv_channels_, f, rng);
    bk_ = Parameter(name_ + ".f_k.b", Tensor({f}));
    wv_ = make_linear_weight(name_ + ".f_v.w", kv_channels_, v, rng);
    bv_ = Parameter(name_ + ".f_v.b", Tensor({v}));
    wo_ = make_linear_weight(name_ + ".f_o.w", v, out, rng);
    bo_ = Parameter(name_ + ".f_o.b", Tensor({out}));
    norm_mlp_scale_ = Parameter(name_ + ".norm_mlp.scale", Tensor::full({out}, 1.0));
    norm_mlp_bias_ = Parameter(name_ + ".norm_mlp.bias", Tensor({out}));
    mlp_w1_ = make_linear_weight(name_ + ".mlp.w1", out, mlp_hidden_, rng);
    mlp_b1_ = Parameter(name_ + ".mlp.b1", Tensor({mlp_hidden_}));
    mlp_w2_ = make_linear_weight(name_ + ".mlp.w2", mlp_hidden_, out, rng);
    mlp_b2_ = Parameter(name_ + ".mlp.b2", Tensor({out}));
}

std::vector<Parameter*> AttentionModule::parameters() {
    return {&norm_q_scale_, &norm_q_bias_, &norm_kv_scale_, &norm_kv_bias_,
            &wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_,
            &norm_mlp_scale_, &norm_mlp_bias_, &mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_};
}

Var AttentionModule::qkv_attention(Tape& tape, Var x_q, Var x_kv, const Tensor* mask) {
    const Tensor& vq = tape.value(x_q);
    const Tensor& vkv = tape.value(x_kv);
    if (vq.cols() != query_channels_) {
        throw std::invalid_argument(name_ + ": query input " + vq.shape_str() + " expected " +
                                    std::to_string(query_channels_) + " channels");
    }
    if (vkv.cols() != kv_channels_) {
        throw std::invalid_argument(name_ + ": kv input " + vkv.shape_str() + " expected " +
                                    std::to_string(kv_channels_) + " channels");
    }
    Var qp = tape.linear(x_q, tape.param(wq_), tape.param(bq_));
    Var kp = tape.linear(x_kv, tape.param(wk_), tape.param(bk_));
    Var vp = tape.linear(x_kv, tape.param(wv_), tape.param(bv_));

    const std::size_t heads = config_.num_heads;
    const std::size_t fh = config_.qk_channels / heads;
    const std::size_t vh = config_.v_channels / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(fh));

    std::vector<Var> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = tape.slice_cols(qp, h * fh, fh);
        Var kh = tape.slice_cols(kp, h * fh, fh);
        Var vv = tape.slice_cols(vp, h * vh, vh);
        Var scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
        Var weights = tape.softmax_rows(scores, mask);
        head_outputs.push_back(tape.matmul(weights, vv));
    }
    Var merged = heads == 1 ? head_outputs[0] : tape.concat_cols(head_outputs);
    return tape.linear(merged, tape.param(wo_), tape.param(bo_));
}

Var AttentionModule::forward(Tape& tape, Var x_q, Var x_kv, const Tensor* mask, Rng* dropout_rng) {
    Var nq = tape.layer_norm(x_q, tape.param(norm_q_scale_), tape.param(norm_q_bias_));
    Var nkv = tape.layer_norm(x_kv, tape.param(norm_kv_scale_), tape.param(norm_kv_bias_));
    Var attended = qkv_attention(tape, nq, nkv, mask);
    if (config_.dropout_rate > 0.0 && dropout_rng) {
        attended = tape.dropout(attended, config_.dropout_rate, *dropout_rng);
    }
    Var x = config_.use_query_residual ? tape.add(attended, x_q) : attended;

    Var nm = tape.layer_norm(x, tape.param(norm_mlp_scale_), tape.param(norm_mlp_bias_));
    Var hidden = tape.gelu(tape.linear(nm, tape.param(mlp_w1_), tape.param(mlp_b1_)), config_.gelu);
    if (config_.dropout_rate > 0.0 && dropout_rng) {
        hidden = tape.dropout(hidden, config_.dropout_rate, *dropout_rng);
    }
    Var mlp_out = tape.linear(hidden, tape.param(mlp_w2_), tape.param(mlp_b2_));
    return tape.add(x, mlp_out);
}

Var self_attention_block(AttentionModule& module, Tape& tape, Var x, Rng* dropout_rng) {
    if (!module.config().use_query_residual) {
        throw std::invalid_argument(module.name() + ": self-attention always uses the query residual");
    }
    return module.forward(tape, x, x, nullptr, dropout_rng);
}

}  // namespace pio
