#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pio/model.hpp"

namespace pio {

// Counting convention: every matmul of shape (a x b) * (b x c) contributes
// 2abc (multiplies and accumulates separate); softmax, layer norm, and GELU
// are excluded; embedding lookups are table reads and cost nothing. Counts
// use integer arithmetic throughout.

struct StageCost {
    std::string name;
    std::uint64_t flops = 0;
    std::uint64_t params = 0;
};

struct FlopsReport {
    std::string title;
    std::string convention;
    std::vector<StageCost> stages;
    std::size_t process_layers = 0;
    std::uint64_t process_flops_per_layer = 0;

    bool has_reference = false;
    double reference_flops = 0.0;
    double reference_params = 0.0;
    std::string reference_note;

    std::uint64_t total_flops() const;
    std::uint64_t total_params() const;
    const StageCost* stage(const std::string& name) const;
};

// Extra matmul sites outside the core model (per-modality heads, baseline
// MLP heads) and parameter-only tables (embeddings, position/query tables).
struct ProjectionSite {
    std::string name;
    std::uint64_t rows = 0;
    std::uint64_t in = 0;
    std::uint64_t out = 0;
    bool with_bias = true;
};

struct PerceiverFlopsSpec {
    std::size_t input_size = 0;   // M
    std::size_t output_size = 0;  // O
    PerceiverConfig model;
    std::vector<std::pair<std::string, std::uint64_t>> extra_param_tables;
    std::vector<ProjectionSite> extra_projections;
};

struct TransformerFlopsSpec {
    std::size_t layers = 0;
    std::size_t width = 0;
    std::size_t ff_width = 0;
    std::size_t heads = 1;
    std::size_t vocab = 0;
    std::size_t seq_len = 0;
    bool tie_output_projection = true;
};

// Forward-pass cost of one attention block with n query rows and m kv rows.
std::uint64_t attention_module_flops(std::size_t n, std::size_t m, std::size_t query_channels,
                                     std::size_t kv_channels, const AttentionConfig& config);
std::uint64_t attention_module_params(std::size_t query_channels, std::size_t kv_channels,
                                      const AttentionConfig& config);

FlopsReport count_perceiver(const PerceiverFlopsSpec& spec);
FlopsReport count_transformer(const TransformerFlopsSpec& spec);

struct ScalingPoint {
    std::uint64_t value = 0;
    std::uint64_t total_flops = 0;
    std::uint64_t encode_flops = 0;
    std::uint64_t process_flops = 0;
    std::uint64_t decode_flops = 0;
};
struct ScalingCurve {
    char vary = 'M';  // 'M', 'O', or 'L'
    std::vector<ScalingPoint> points;
    bool exactly_affine = false;
    double slope = 0.0;
    double intercept = 0.0;
};
ScalingCurve scaling_curve(const PerceiverFlopsSpec& spec, char vary, const std::vector<std::size_t>& values);

// Named configurations with their published figures attached for comparison;
// deviations are reported, never tuned away.
std::vector<std::string> flops_preset_names();
FlopsReport flops_preset_report(const std::string& name);

std::string render_flops_table(const FlopsReport& report);
std::string flops_report_json(const FlopsReport& report);

}  // namespace pio
