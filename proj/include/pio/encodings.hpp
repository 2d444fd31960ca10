#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

namespace pio {

// Sine/cosine bands at frequencies spaced linearly from min_freq to max_freq,
// computed on positions rescaled to [-1, 1] per dimension.
struct FourierSpec {
    std::size_t num_bands = 64;
    double min_freq = 1.0;   // one full oscillation over the input extent
    double max_freq = 0.0;   // 0 = Nyquist frequency of the extent (size / 2)
    bool include_raw_position = true;

    std::size_t channels_per_dim() const { return 2 * num_bands + (include_raw_position ? 1 : 0); }
};

// Integer grid coordinates in raster order: [prod(sizes) x sizes.size()].
Tensor grid_positions(const std::vector<std::size_t>& sizes);

// positions: [n x d] in original units (grid indices); sizes give each
// dimension's extent for rescaling and the Nyquist default. Output layout per
// dimension: all sine bands, all cosine bands, then the raw position.
Tensor fourier_features(const Tensor& positions, const std::vector<std::size_t>& sizes,
                        const FourierSpec& spec);

Parameter learned_position_table(const std::string& name, std::size_t num_positions, std::size_t channels,
                                 Rng& rng);

// content || position || modality, validated against expected_width when
// nonzero. position may be null and modality_pad invalid when absent; the pad
// is a learned 1 x k row broadcast over all rows.
Var build_input_array(Tape& tape, Var content, const Tensor* position_features, Var modality_pad,
                      std::size_t expected_width = 0);

// Per-modality channel widths: content + position + pad must reach the same
// serialized width for every modality.
struct ModalitySpec {
    std::string name;
    std::size_t content_channels = 0;
    std::size_t position_channels = 0;
    std::size_t pad_channels = 0;  // derived by resolve_modality_widths
};

// Assigns pad widths so every modality reaches target_width (0 = derive the
// smallest width that leaves every modality a pad of at least one channel).
// Returns the common width; throws when irreconcilable.
std::size_t resolve_modality_widths(std::vector<ModalitySpec>& specs, std::size_t target_width = 0);

// Decoder query construction. Learned and per-task variants own a learned
// table; positional variants are pure functions of the grid; input-feature
// variants concatenate caller-supplied per-point features with optional
// position features; multimodal variants stack per-modality sub-builders,
// each padded to a common width by a learned modality vector.
class QueryBuilder {
public:
    enum class Kind { Learned, Positional, PerTask, InputFeature, Multimodal, PadOnly };

    QueryBuilder() = default;  // empty; assign from a factory before use

    static QueryBuilder learned(const std::string& name, std::size_t num_queries, std::size_t channels,
                                Rng& rng);
    static QueryBuilder per_task(const std::string& name, std::size_t num_tasks, std::size_t channels,
                                 Rng& rng);
    static QueryBuilder positional(const FourierSpec& spec, std::vector<std::size_t> grid_sizes);
    static QueryBuilder input_feature(std::size_t feature_channels, std::optional<FourierSpec> position,
                                      std::vector<std::size_t> grid_sizes);
    static QueryBuilder multimodal(const std::string& name, std::vector<QueryBuilder> parts, Rng& rng,
                                   std::size_t target_width = 0);
    // Rows with no content of their own; only meaningful inside a multimodal
    // builder, where the learned modality pad fills the whole width.
    static QueryBuilder pad_only(std::size_t rows);

    Kind kind() const { return kind_; }
    std::size_t channels() const { return channels_; }
    std::size_t rows() const { return rows_; }
    // Ranges of the built array covered by each part (multimodal only).
    const std::vector<std::pair<std::size_t, std::size_t>>& part_ranges() const { return ranges_; }

    // input_features is required for InputFeature (and forwarded to
    // multimodal sub-builders of that kind, in part order).
    Var build(Tape& tape, const Tensor* input_features = nullptr);

    std::vector<Parameter*> parameters();

private:
    Kind kind_ = Kind::Learned;
    std::size_t rows_ = 0;
    std::size_t channels_ = 0;
    Parameter table_;                 // Learned / PerTask
    FourierSpec fourier_;             // Positional / InputFeature
    std::vector<std::size_t> grid_;
    bool has_position_ = false;       // InputFeature
    std::size_t feature_channels_ = 0;
    std::vector<QueryBuilder> parts_;  // Multimodal
    std::vector<Parameter> pads_;
    std::vector<std::pair<std::size_t, std::size_t>> ranges_;
};

}  // namespace pio
