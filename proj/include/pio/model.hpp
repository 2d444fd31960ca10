#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pio/attention.hpp"
#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

namespace pio {

enum class DecoderKind { Attention, AverageProject };

struct PerceiverConfig {
    std::size_t input_channels = 0;         // C
    std::size_t num_latents = 0;            // N
    std::size_t latent_channels = 0;        // D
    std::size_t num_blocks = 1;             // B
    std::size_t layers_per_block = 1;       // K; total depth L = B * K (0 = identity processor)
    bool share_weights_across_blocks = false;
    AttentionConfig encoder;
    AttentionConfig processor;
    AttentionConfig decoder;                // use_query_residual controls the decoder skip
    std::size_t decoder_query_channels = 0; // E_q (ignored by the average+project decoder)
    std::size_t output_channels = 0;        // E; 0 = decoder output channels, no projection
    DecoderKind decoder_kind = DecoderKind::Attention;

    void validate() const;
};

// Encode (cross-attention into a learned latent array), process (latent
// self-attention stack, optionally weight-shared across blocks), decode
// (query cross-attention, or the average+project baseline).
class PerceiverModel {
public:
    PerceiverModel(const PerceiverConfig& config, Rng& rng, const std::string& name = "model");

    // The encoder and processor are pinned to the latent geometry: both keep
    // the query residual and emit latent_channels. Cost accounting resolves
    // shapes through the same normalization.
    static PerceiverConfig normalized(PerceiverConfig config);

    Var encode(Tape& tape, Var inputs, const std::vector<std::uint8_t>* input_valid = nullptr,
               Rng* dropout_rng = nullptr);
    Var process(Tape& tape, Var latents, Rng* dropout_rng = nullptr);
    Var decode(Tape& tape, Var latents, Var queries, Rng* dropout_rng = nullptr);
    Var average_project_decode(Tape& tape, Var latents);
    Var forward(Tape& tape, Var inputs, Var queries, const std::vector<std::uint8_t>* input_valid = nullptr,
                Rng* dropout_rng = nullptr);

    const PerceiverConfig& config() const { return config_; }
    std::size_t total_process_layers() const { return config_.num_blocks * config_.layers_per_block; }
    std::size_t decoder_output_channels() const;  // E after the optional projection
    // Module backing process layer `layer` of block `block`; with weight
    // sharing all blocks map to the block-0 modules.
    AttentionModule& process_module(std::size_t block, std::size_t layer);

    std::vector<Parameter*> parameters();
    std::size_t parameter_count();

private:
    PerceiverConfig config_;
    std::string name_;
    Parameter latent_;
    std::unique_ptr<AttentionModule> encoder_;
    std::vector<std::unique_ptr<AttentionModule>> process_modules_;
    std::unique_ptr<AttentionModule> decoder_;
    Parameter avg_proj_w_, avg_proj_b_;       // average+project decoder
    Parameter final_w_, final_b_;             // optional projection to E
    bool has_final_projection_ = false;
};

// Ensures every parameter name is unique; throws otherwise.
void check_unique_names(const std::vector<Parameter*>& params);

}  // namespace pio
