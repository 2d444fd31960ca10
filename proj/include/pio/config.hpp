#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "pio/flops.hpp"
#include "pio/model.hpp"

namespace pio {

struct OptimizerConfig {
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double grad_clip = 0.0;  // global norm; <= 0 disables
};

struct ScheduleConfig {
    std::string kind = "warmup-cosine";  // or "flat-cosine"
    std::size_t warmup_steps = 0;        // warmup length, or flat phase length
    std::size_t total_steps = 0;         // 0 = train steps
};

struct TrainConfig {
    std::size_t steps = 1000;
    std::size_t batch_size = 4;
    OptimizerConfig optimizer;
    ScheduleConfig schedule;
    std::size_t query_subsample = 0;  // 0 = decode every query during training
    std::size_t eval_every = 0;       // 0 = final evaluation only
    std::size_t eval_examples = 64;
    std::size_t log_every = 50;
};

struct ModelConfig {
    std::size_t input_channels = 0;  // tasks derive this from their data when 0
    std::size_t num_latents = 32;
    std::size_t latent_channels = 64;
    std::size_t num_blocks = 1;
    std::size_t layers_per_block = 2;
    bool share_weights_across_blocks = false;
    std::size_t num_heads = 4;
    std::size_t qk_channels = 0;
    std::size_t v_channels = 0;
    double mlp_hidden_ratio = 1.0;
    std::size_t decoder_query_channels = 0;  // 0 = latent_channels
    std::size_t decoder_channels = 0;        // decoder attention output width; 0 = query channels
    std::size_t output_channels = 0;         // final projection target; 0 = none
    bool decoder_query_residual = true;
    std::string decoder_kind = "attention";  // or "average-project"
    double dropout = 0.0;
};

struct DataConfig {
    // toy-mlm
    std::size_t crop_length = 64;
    std::size_t vocab_words = 8;
    std::size_t sentence_words = 8;
    std::size_t corpus_bytes = 8192;
    double mask_prob = 0.15;
    bool align_crops = true;
    std::string corpus_path;  // overrides the synthetic corpus
    std::size_t concat_documents = 10;
    std::size_t input_embed_channels = 32;
    std::size_t input_pos_channels = 32;
    // toy-flow / toy-multimodal-autoencode geometry
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t num_dots = 24;
    std::size_t max_shift = 3;
    std::size_t fourier_bands = 8;
    std::size_t patch = 3;
    bool concat_frames = true;
    // toy-classify
    std::size_t num_classes = 4;
    std::size_t rows = 8;
    std::size_t channels = 8;
    double noise = 0.1;
    std::size_t train_examples = 256;
    // multitask-toy
    std::vector<std::string> tasks = {"majority", "first-symbol"};
    std::size_t string_length = 16;
    std::string variant = "multitask-query";  // "shared-input-token", "task-input-tokens"
    // toy-multimodal-autoencode
    std::size_t frames = 8;
    std::size_t audio_samples = 1024;
    std::size_t audio_patch = 16;
    std::size_t video_patch = 4;
    double label_mask_prob = 0.5;
    std::size_t video_bands = 4;
    std::size_t audio_bands = 8;
    std::size_t subsample_video = 32;
    std::size_t subsample_audio = 16;
    double video_weight = 1.0;
    double audio_weight = 1.0;
    double label_weight = 1.0;
    std::size_t label_query_channels = 16;
};

struct ExperimentConfig {
    std::string task;  // toy-mlm | toy-flow | toy-multimodal-autoencode | toy-classify |
                       // multitask-toy | flops-report
    std::uint64_t seed = 1;
    std::string out_dir = "runs/out";
    ModelConfig model;
    DataConfig data;
    TrainConfig train;
    std::string flops_preset;      // flops-report task
    nlohmann::json flops_spec;     // flops-report task, inline spec
};

// Strict parsing: unknown keys raise an error naming the full field path.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig parse_experiment_config_file(const std::string& path);
// Round-trips the config with every default filled in.
nlohmann::json experiment_config_json(const ExperimentConfig& config);

PerceiverConfig to_perceiver_config(const ModelConfig& model);
PerceiverFlopsSpec parse_flops_spec(const nlohmann::json& j);

std::uint64_t fnv1a_hash(const std::string& text);

}  // namespace pio
