#include "pio/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace pio {

void PerceiverConfig::validate() const {
    if (input_channels == 0) throw std::invalid_argument("config: input_channels must be >= 1");
    if (num_latents == 0) throw std::invalid_argument("config: num_latents must be >= 1");
    if (latent_channels == 0) throw std::invalid_argument("config: latent_channels must be >= 1");
    if (num_blocks == 0) throw std::invalid_argument("config: num_blocks must be >= 1");
    if (decoder_kind == DecoderKind::Attention && decoder_query_channels == 0) {
        throw std::invalid_argument("config: decoder_query_channels must be >= 1");
    }
}

PerceiverConfig PerceiverModel::normalized(PerceiverConfig config) {
    config.validate();
    config.encoder.use_query_residual = true;
    config.encoder.output_channels = config.latent_channels;
    config.processor.use_query_residual = true;
    config.processor.output_channels = config.latent_channels;
    return config;
}

PerceiverModel::PerceiverModel(const PerceiverConfig& config, Rng& rng, const std::string& name)
    : config_(normalized(config)), name_(name) {

    latent_ = Parameter(name_ + ".latent",
                        rng.truncated_normal_tensor({config_.num_latents, config_.latent_channels}, 0.02));
    encoder_ = std::make_unique<AttentionModule>(name_ + ".encoder", config_.latent_channels,
                                                 config_.input_channels, config_.encoder, rng);
    const std::size_t stored_blocks = config_.share_weights_across_blocks ? 1 : config_.num_blocks;
    for (std::size_t b = 0; b < stored_blocks; ++b) {
        for (std::size_t k = 0; k < config_.layers_per_block; ++k) {
            const std::string prefix = config_.share_weights_across_blocks
                                           ? name_ + ".processor.layer" + std::to_string(k)
                                           : name_ + ".processor.block" + std::to_string(b) + ".layer" +
                                                 std::to_string(k);
            process_modules_.push_back(std::make_unique<AttentionModule>(
                prefix, config_.latent_channels, config_.latent_channels, config_.processor, rng));
        }
    }

    std::size_t decoder_out = 0;
    if (config_.decoder_kind == DecoderKind::Attention) {
        decoder_ = std::make_unique<AttentionModule>(name_ + ".decoder", config_.decoder_query_channels,
                                                     config_.latent_channels, config_.decoder, rng);
        decoder_out = decoder_->output_channels();
    } else {
        const std::size_t e = config_.output_channels ? config_.output_channels : config_.latent_channels;
        avg_proj_w_ = Parameter(name_ + ".avg_decoder.w",
                                rng.truncated_normal_tensor({config_.latent_channels, e},
                                                            1.0 / std::sqrt(static_cast<double>(config_.latent_channels))));
        avg_proj_b_ = Parameter(name_ + ".avg_decoder.b", Tensor({e}));
        decoder_out = e;
    }
    if (config_.decoder_kind == DecoderKind::Attention && config_.output_channels != 0 &&
        config_.output_channels != decoder_out) {
        has_final_projection_ = true;
        final_w_ = Parameter(name_ + ".head.w",
                             rng.truncated_normal_tensor({decoder_out, config_.output_channels},
                                                         1.0 / std::sqrt(static_cast<double>(decoder_out))));
        final_b_ = Parameter(name_ + ".head.b", Tensor({config_.output_channels}));
    }
    check_unique_names(parameters());
}

std::size_t PerceiverModel::decoder_output_channels() const {
    if (config_.decoder_kind == DecoderKind::AverageProject) {
        return config_.output_channels ? config_.output_channels : config_.latent_channels;
    }
    return has_final_projection_ ? config_.output_channels : decoder_->output_channels();
}

AttentionModule& PerceiverModel::process_module(std::size_t block, std::size_t layer) {
    if (block >= config_.num_blocks || layer >= config_.layers_per_block) {
        throw std::out_of_range("process_module: block/layer out of range");
    }
    const std::size_t b = config_.share_weights_across_blocks ? 0 : block;
    return *process_modules_[b * config_.layers_per_block + layer];
}

Var PerceiverModel::encode(Tape& tape, Var inputs, const std::vector<std::uint8_t>* input_valid,
                           Rng* dropout_rng) {
    const Tensor& x = tape.value(inputs);
    if (x.cols() != config_.input_channels) {
        throw std::invalid_argument("encode: input " + x.shape_str() + " expected " +
                                    std::to_string(config_.input_channels) + " channels");
    }
    Var latents = tape.param(latent_);
    if (input_valid) {
        if (input_valid->size() != x.rows()) throw std::invalid_argument("encode: input mask size mismatch");
        bool any = false;
        for (auto v : *input_valid) any = any || v;
        if (!any) throw std::invalid_argument("encode: all inputs masked");
        Tensor mask = attention_mask(config_.num_latents, *input_valid);
        return encoder_->forward(tape, latents, inputs, &mask, dropout_rng);
    }
    return encoder_->forward(tape, latents, inputs, nullptr, dropout_rng);
}

Var PerceiverModel::process(Tape& tape, Var latents, Rng* dropout_rng) {
    Var z = latents;
    for (std::size_t b = 0; b < config_.num_blocks; ++b) {
        for (std::size_t k = 0; k < config_.layers_per_block; ++k) {
            z = self_attention_block(process_module(b, k), tape, z, dropout_rng);
        }
    }
    return z;
}

Var PerceiverModel::decode(Tape& tape, Var latents, Var queries, Rng* dropout_rng) {
    if (config_.decoder_kind == DecoderKind::AverageProject) {
        return average_project_decode(tape, latents);
    }
    const Tensor& q = tape.value(queries);
    if (q.cols() != config_.decoder_query_channels) {
        throw std::invalid_argument("decode: queries " + q.shape_str() + " expected " +
                                    std::to_string(config_.decoder_query_channels) + " channels");
    }
    Var out = decoder_->forward(tape, queries, latents, nullptr, dropout_rng);
    if (has_final_projection_) {
        out = tape.linear(out, tape.param(final_w_), tape.param(final_b_));
    }
    return out;
}

Var PerceiverModel::average_project_decode(Tape& tape, Var latents) {
    if (config_.decoder_kind != DecoderKind::AverageProject) {
        throw std::logic_error("average_project_decode: model was built with an attention decoder");
    }
    Var pooled = tape.mean_rows(latents);
    return tape.linear(pooled, tape.param(avg_proj_w_), tape.param(avg_proj_b_));
}

Var PerceiverModel::forward(Tape& tape, Var inputs, Var queries, const std::vector<std::uint8_t>* input_valid,
                            Rng* dropout_rng) {
    Var z = encode(tape, inputs, input_valid, dropout_rng);
    z = process(tape, z, dropout_rng);
    return decode(tape, z, queries, dropout_rng);
}

std::vector<Parameter*> PerceiverModel::parameters() {
    std::vector<Parameter*> out;
    out.push_back(&latent_);
    for (Parameter* p : encoder_->parameters()) out.push_back(p);
    for (auto& m : process_modules_) {
        for (Parameter* p : m->parameters()) out.push_back(p);
    }
    if (config_.decoder_kind == DecoderKind::Attention) {
        for (Parameter* p : decoder_->parameters()) out.push_back(p);
        if (has_final_projection_) {
            out.push_back(&final_w_);
            out.push_back(&final_b_);
        }
    } else {
        out.push_back(&avg_proj_w_);
        out.push_back(&avg_proj_b_);
    }
    return out;
}

std::size_t PerceiverModel::parameter_count() {
    std::size_t n = 0;
    for (Parameter* p : parameters()) n += p->value.size();
    return n;
}

void check_unique_names(const std::vector<Parameter*>& params) {
    std::unordered_set<std::string> seen;
    for (Parameter* p : params) {
        if (!seen.insert(p->name).second) {
            throw std::invalid_argument("duplicate parameter name: " + p->name);
        }
    }
}

}  // namespace pio
