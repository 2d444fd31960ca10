#include "pio/encodings.hpp"

#include <cmath>
#include <stdexcept>

namespace pio {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Tensor grid_positions(const std::vector<std::size_t>& sizes) {
    if (sizes.empty()) throw std::invalid_argument("grid_positions: need at least one dimension");
    std::size_t total = 1;
    for (std::size_t s : sizes) {
        if (s == 0) throw std::invalid_argument("grid_positions: extent must be >= 1");
        total *= s;
    }
    const std::size_t d = sizes.size();
    Tensor out({total, d});
    std::vector<std::size_t> idx(d, 0);
    for (std::size_t r = 0; r < total; ++r) {
        for (std::size_t j = 0; j < d; ++j) out.at(r, j) = static_cast<double>(idx[j]);
        for (std::size_t j = d; j-- > 0;) {
            if (++idx[j] < sizes[j]) break;
            idx[j] = 0;
        }
    }
    return out;
}

Tensor fourier_features(const Tensor& positions, const std::vector<std::size_t>& sizes,
                        const FourierSpec& spec) {
    if (spec.num_bands == 0) throw std::invalid_argument("fourier_features: num_bands must be >= 1");
    const std::size_t n = positions.rows();
    const std::size_t d = positions.cols();
    if (sizes.size() != d) {
        throw std::invalid_argument("fourier_features: " + std::to_string(sizes.size()) +
                                    " extents for " + std::to_string(d) + " position dimensions");
    }
    const std::size_t cpd = spec.channels_per_dim();
    Tensor out({n, d * cpd});
    for (std::size_t j = 0; j < d; ++j) {
        const double extent = static_cast<double>(sizes[j]);
        const double max_freq = spec.max_freq > 0.0 ? spec.max_freq : extent / 2.0;
        if (max_freq < spec.min_freq) {
            throw std::invalid_argument("fourier_features: max_freq " + std::to_string(max_freq) +
                                        " < min_freq " + std::to_string(spec.min_freq));
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double p = sizes[j] > 1
                                 ? 2.0 * positions.at(i, j) / (extent - 1.0) - 1.0
                                 : 0.0;
            double* row = out.data() + i * d * cpd + j * cpd;
            for (std::size_t b = 0; b < spec.num_bands; ++b) {
                const double f = spec.num_bands > 1
                                     ? spec.min_freq + (max_freq - spec.min_freq) * static_cast<double>(b) /
                                                           static_cast<double>(spec.num_bands - 1)
                                     : spec.min_freq;
                row[b] = std::sin(kPi * f * p);
                row[spec.num_bands + b] = std::cos(kPi * f * p);
            }
            if (spec.include_raw_position) row[2 * spec.num_bands] = p;
        }
    }
    return out;
}

Parameter learned_position_table(const std::string& name, std::size_t num_positions, std::size_t channels,
                                 Rng& rng) {
    if (num_positions == 0 || channels == 0) {
        throw std::invalid_argument("learned_position_table: sizes must be >= 1");
    }
    return Parameter(name, rng.truncated_normal_tensor({num_positions, channels}, 0.02));
}

Var build_input_array(Tape& tape, Var content, const Tensor* position_features, Var modality_pad,
                      std::size_t expected_width) {
    const Tensor& c = tape.value(content);
    const std::size_t n = c.rows();
    std::vector<Var> parts{content};
    std::size_t pos_w = 0, pad_w = 0;
    if (position_features) {
        if (position_features->rows() != n) {
            throw std::invalid_argument("build_input_array: position rows " +
                                        std::to_string(position_features->rows()) + " != content rows " +
                                        std::to_string(n));
        }
        pos_w = position_features->cols();
        parts.push_back(tape.leaf(*position_features));
    }
    if (modality_pad.valid()) {
        pad_w = tape.value(modality_pad).cols();
        parts.push_back(tape.tile_rows(modality_pad, n));
    }
    const std::size_t width = c.cols() + pos_w + pad_w;
    if (expected_width != 0 && width != expected_width) {
        throw std::invalid_argument("build_input_array: content=" + std::to_string(c.cols()) +
                                    " + position=" + std::to_string(pos_w) + " + modality=" +
                                    std::to_string(pad_w) + " = " + std::to_string(width) + ", expected " +
                                    std::to_string(expected_width));
    }
    return parts.size() == 1 ? content : tape.concat_cols(parts);
}

std::size_t resolve_modality_widths(std::vector<ModalitySpec>& specs, std::size_t target_width) {
    if (specs.empty()) throw std::invalid_argument("resolve_modality_widths: no modalities");
    std::size_t widest = 0;
    for (const auto& s : specs) widest = std::max(widest, s.content_channels + s.position_channels);
    const std::size_t target = target_width ? target_width : widest + 1;
    for (auto& s : specs) {
        const std::size_t base = s.content_channels + s.position_channels;
        if (base + 1 > target) {
            throw std::invalid_argument("modality '" + s.name + "' needs " + std::to_string(base + 1) +
                                        " channels (content + position + pad of 1) but the serialized width is " +
                                        std::to_string(target));
        }
        s.pad_channels = target - base;
    }
    return target;
}

QueryBuilder QueryBuilder::learned(const std::string& name, std::size_t num_queries, std::size_t channels,
                                   Rng& rng) {
    QueryBuilder q;
    q.kind_ = Kind::Learned;
    q.rows_ = num_queries;
    q.channels_ = channels;
    q.table_ = learned_position_table(name, num_queries, channels, rng);
    return q;
}

QueryBuilder QueryBuilder::per_task(const std::string& name, std::size_t num_tasks, std::size_t channels,
                                    Rng& rng) {
    QueryBuilder q;
    q.kind_ = Kind::PerTask;
    q.rows_ = num_tasks;
    q.channels_ = channels;
    q.table_ = learned_position_table(name, num_tasks, channels, rng);
    // Distinct tasks must start from distinct queries.
    for (std::size_t i = 0; i < num_tasks; ++i) {
        for (std::size_t j = i + 1; j < num_tasks; ++j) {
            bool same = true;
            for (std::size_t k = 0; k < channels && same; ++k) {
                same = q.table_.value.at(i, k) == q.table_.value.at(j, k);
            }
            if (same) {
                throw std::runtime_error("per_task queries: tasks " + std::to_string(i) + " and " +
                                         std::to_string(j) + " initialized identically");
            }
        }
    }
    return q;
}

QueryBuilder QueryBuilder::positional(const FourierSpec& spec, std::vector<std::size_t> grid_sizes) {
    QueryBuilder q;
    q.kind_ = Kind::Positional;
    q.fourier_ = spec;
    q.grid_ = std::move(grid_sizes);
    q.rows_ = 1;
    for (std::size_t s : q.grid_) q.rows_ *= s;
    q.channels_ = q.grid_.size() * spec.channels_per_dim();
    return q;
}

QueryBuilder QueryBuilder::input_feature(std::size_t feature_channels, std::optional<FourierSpec> position,
                                         std::vector<std::size_t> grid_sizes) {
    QueryBuilder q;
    q.kind_ = Kind::InputFeature;
    q.feature_channels_ = feature_channels;
    q.grid_ = std::move(grid_sizes);
    q.rows_ = 1;
    for (std::size_t s : q.grid_) q.rows_ *= s;
    q.channels_ = feature_channels;
    if (position) {
        q.has_position_ = true;
        q.fourier_ = *position;
        q.channels_ += q.grid_.size() * position->channels_per_dim();
    }
    return q;
}

QueryBuilder QueryBuilder::pad_only(std::size_t rows) {
    if (rows == 0) throw std::invalid_argument("pad_only queries: rows must be >= 1");
    QueryBuilder q;
    q.kind_ = Kind::PadOnly;
    q.rows_ = rows;
    q.channels_ = 0;
    return q;
}

QueryBuilder QueryBuilder::multimodal(const std::string& name, std::vector<QueryBuilder> parts, Rng& rng,
                                      std::size_t target_width) {
    if (parts.empty()) throw std::invalid_argument("multimodal queries: no parts");
    QueryBuilder q;
    q.kind_ = Kind::Multimodal;
    q.parts_ = std::move(parts);
    std::vector<ModalitySpec> widths;
    for (std::size_t i = 0; i < q.parts_.size(); ++i) {
        widths.push_back({name + ".part" + std::to_string(i), q.parts_[i].channels(), 0, 0});
    }
    q.channels_ = resolve_modality_widths(widths, target_width);
    std::size_t row = 0;
    for (std::size_t i = 0; i < q.parts_.size(); ++i) {
        q.pads_.push_back(Parameter(name + ".pad" + std::to_string(i),
                                    rng.truncated_normal_tensor({1, widths[i].pad_channels}, 0.02)));
        q.ranges_.emplace_back(row, row + q.parts_[i].rows());
        row += q.parts_[i].rows();
    }
    q.rows_ = row;
    return q;
}

Var QueryBuilder::build(Tape& tape, const Tensor* input_features) {
    switch (kind_) {
        case Kind::Learned:
        case Kind::PerTask:
            return tape.param(table_);
        case Kind::Positional:
            return tape.leaf(fourier_features(grid_positions(grid_), grid_, fourier_));
        case Kind::InputFeature: {
            if (!input_features) throw std::invalid_argument("input-feature queries need per-point features");
            if (input_features->rows() != rows_ || input_features->cols() != feature_channels_) {
                throw std::invalid_argument("input-feature queries: features " + input_features->shape_str() +
                                            " expected [" + std::to_string(rows_) + "x" +
                                            std::to_string(feature_channels_) + "]");
            }
            Var f = tape.leaf(*input_features);
            if (!has_position_) return f;
            Var pos = tape.leaf(fourier_features(grid_positions(grid_), grid_, fourier_));
            std::vector<Var> parts{f, pos};
            return tape.concat_cols(parts);
        }
        case Kind::Multimodal: {
            std::vector<Var> rows;
            for (std::size_t i = 0; i < parts_.size(); ++i) {
                if (parts_[i].kind() == Kind::PadOnly) {
                    rows.push_back(tape.tile_rows(tape.param(pads_[i]), parts_[i].rows()));
                    continue;
                }
                Var content = parts_[i].build(tape, parts_[i].kind() == Kind::InputFeature ? input_features : nullptr);
                Var padded = pads_[i].value.cols() > 0
                                 ? build_input_array(tape, content, nullptr, tape.param(pads_[i]), channels_)
                                 : content;
                rows.push_back(padded);
            }
            return tape.concat_rows(rows);
        }
        case Kind::PadOnly:
            throw std::logic_error("pad-only queries are only usable inside a multimodal builder");
    }
    throw std::logic_error("unreachable query kind");
}

std::vector<Parameter*> QueryBuilder::parameters() {
    std::vector<Parameter*> out;
    switch (kind_) {
        case Kind::Learned:
        case Kind::PerTask:
            out.push_back(&table_);
            break;
        case Kind::Positional:
        case Kind::InputFeature:
        case Kind::PadOnly:
            break;
        case Kind::Multimodal:
            for (auto& p : parts_) {
                for (Parameter* sub : p.parameters()) out.push_back(sub);
            }
            for (auto& pad : pads_) out.push_back(&pad);
            break;
    }
    return out;
}

}  // namespace pio
