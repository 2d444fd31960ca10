#include "pio/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "pio/attention.hpp"
#include "pio/autodiff.hpp"
#include "pio/checkpoint.hpp"
#include "pio/encodings.hpp"
#include "pio/preprocessing.hpp"
#include "pio/training.hpp"

namespace pio {

namespace {

namespace fs = std::filesystem;

std::string format_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class MetricsLog {
public:
    void add(std::size_t step, const std::string& split, const std::string& metric, double value) {
        std::ostringstream row;
        row << step << "," << split << "," << metric << "," << format_value(value) << "\n";
        rows_ += row.str();
    }
    const std::string& csv() const { return rows_; }

private:
    std::string rows_ = "step,split,metric,value\n";
};

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
}

Schedule to_schedule(const TrainConfig& train) {
    Schedule s;
    s.kind = train.schedule.kind == "flat-cosine" ? Schedule::Kind::FlatCosine : Schedule::Kind::WarmupCosine;
    s.base_rate = train.optimizer.lr;
    s.warmup_steps = train.schedule.warmup_steps;
    s.total_steps = train.schedule.total_steps ? train.schedule.total_steps : train.steps;
    return s;
}

// Runs the step/evaluate/log cycle shared by every training task.
void train_loop(const ExperimentConfig& cfg, std::vector<Parameter*> params, MetricsLog& log, Rng& data_rng,
                const std::function<double(std::size_t, Rng&)>& train_step,
                const std::function<void(std::size_t, MetricsLog&)>& evaluate) {
    check_unique_names(params);
    LambOptimizer opt(std::move(params), cfg.train.optimizer.beta1, cfg.train.optimizer.beta2,
                      cfg.train.optimizer.eps);
    const Schedule schedule = to_schedule(cfg.train);
    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
        opt.zero_grad();
        double loss = 0.0;
        try {
            loss = train_step(step, data_rng);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " + e.what());
        }
        if (cfg.train.optimizer.grad_clip > 0.0) {
            clip_global_grad_norm(opt.parameters(), cfg.train.optimizer.grad_clip);
        }
        opt.step(schedule_rate(schedule, step), cfg.train.optimizer.weight_decay);
        if (cfg.train.log_every && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps)) {
            log.add(step, "train", "loss", loss);
        }
        if (cfg.train.eval_every && step > 0 && step % cfg.train.eval_every == 0) {
            evaluate(step, log);
        }
    }
    evaluate(cfg.train.steps, log);
}

Rng eval_rng_for(const ExperimentConfig& cfg) { return Rng(cfg.seed ^ 0x5eedb0a7ull); }

// ---------------------------------------------------------------------------
// toy-mlm: byte-level masked language modeling on a synthetic periodic corpus.

class ToyMlmTask {
public:
    ToyMlmTask(const ExperimentConfig& cfg, Rng& rng)
        : cfg_(cfg),
          corpus_(cfg.data.corpus_path.empty()
                      ? TextCorpus::synthetic_periodic(cfg.data.vocab_words, cfg.data.sentence_words,
                                                       cfg.data.corpus_bytes)
                      : TextCorpus::from_file(cfg.data.corpus_path, cfg.data.concat_documents)),
          byte_embed_("task.byte_embedding",
                      rng.truncated_normal_tensor({ByteVocab::size, cfg.data.input_embed_channels}, 0.02)),
          input_pos_(learned_position_table("task.input_positions", cfg.data.crop_length,
                                            cfg.data.input_pos_channels, rng)),
          queries_(QueryBuilder::learned("task.query_positions", cfg.data.crop_length, query_channels(cfg),
                                         rng)),
          model_(core_config(cfg), rng) {}

    static std::size_t query_channels(const ExperimentConfig& cfg) {
        return cfg.model.decoder_query_channels ? cfg.model.decoder_query_channels
                                                : cfg.model.latent_channels;
    }

    static PerceiverConfig core_config(const ExperimentConfig& cfg) {
        ModelConfig m = cfg.model;
        m.input_channels = cfg.data.input_embed_channels + cfg.data.input_pos_channels;
        m.output_channels = ByteVocab::size;
        m.decoder_query_residual = true;
        PerceiverConfig p = to_perceiver_config(m);
        p.decoder_query_channels = query_channels(cfg);
        return p;
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out{&byte_embed_, &input_pos_};
        for (Parameter* p : queries_.parameters()) out.push_back(p);
        for (Parameter* p : model_.parameters()) out.push_back(p);
        return out;
    }

    MaskedBatch sample_batch(Rng& rng) {
        const std::size_t align = cfg_.data.align_crops ? corpus_.period() : 1;
        for (int attempt = 0; attempt < 100; ++attempt) {
            auto bytes = corpus_.crop(cfg_.data.crop_length, rng, align);
            MaskedBatch b = mask_words(bytes, cfg_.data.mask_prob, rng, cfg_.data.crop_length);
            for (auto m : b.masked) {
                if (m) return b;
            }
        }
        throw std::runtime_error("toy-mlm: no word masked after 100 attempts; raise mask_prob");
    }

    Var logits_of(Tape& tape, const MaskedBatch& batch) {
        Var content = tape.embedding_lookup(tape.param(byte_embed_), batch.input_ids);
        std::vector<Var> parts{content, tape.param(input_pos_)};
        Var input = tape.concat_cols(parts);
        Var queries = queries_.build(tape);
        return model_.forward(tape, input, queries);
    }

    double train_step(Rng& rng) {
        double total = 0.0;
        const std::size_t batch = cfg_.train.batch_size;
        for (std::size_t i = 0; i < batch; ++i) {
            MaskedBatch b = sample_batch(rng);
            Tape tape;
            Var loss = tape.softmax_cross_entropy(logits_of(tape, b), b.target_ids, &b.masked);
            total += tape.value(loss)[0];
            tape.backward(tape.scale(loss, 1.0 / static_cast<double>(batch)));
        }
        return total / static_cast<double>(batch);
    }

    void evaluate(std::size_t step, MetricsLog& log) {
        Rng rng = eval_rng_for(cfg_);
        std::size_t correct = 0, total = 0;
        double loss_sum = 0.0;
        for (std::size_t i = 0; i < cfg_.train.eval_examples; ++i) {
            MaskedBatch b = sample_batch(rng);
            Tape tape;
            Var logits = logits_of(tape, b);
            loss_sum += tape.value(tape.softmax_cross_entropy(logits, b.target_ids, &b.masked))[0];
            const Tensor& lg = tape.value(logits);
            for (std::size_t r = 0; r < lg.rows(); ++r) {
                if (!b.masked[r]) continue;
                std::size_t best = 0;
                for (std::size_t c = 1; c < lg.cols(); ++c) {
                    if (lg.at(r, c) > lg.at(r, best)) best = c;
                }
                correct += best == b.target_ids[r];
                ++total;
            }
        }
        last_metrics_["masked_byte_accuracy"] = static_cast<double>(correct) / static_cast<double>(total);
        last_metrics_["eval_loss"] = loss_sum / static_cast<double>(cfg_.train.eval_examples);
        for (const auto& [k, v] : last_metrics_) log.add(step, "eval", k, v);
    }

    PerceiverFlopsSpec flops_spec() {
        PerceiverFlopsSpec spec;
        spec.input_size = cfg_.data.crop_length;
        spec.output_size = cfg_.data.crop_length;
        spec.model = core_config(cfg_);
        spec.extra_param_tables = {
            {byte_embed_.name, byte_embed_.value.size()},
            {input_pos_.name, input_pos_.value.size()},
        };
        for (Parameter* p : queries_.parameters()) {
            spec.extra_param_tables.emplace_back(p->name, p->value.size());
        }
        return spec;
    }

    std::map<std::string, double> last_metrics_;

private:
    ExperimentConfig cfg_;
    TextCorpus corpus_;
    Parameter byte_embed_;
    Parameter input_pos_;
    QueryBuilder queries_;

public:
    PerceiverModel model_;
};

// ---------------------------------------------------------------------------
// toy-flow: random-dot frame pairs under integer shifts; queries reuse the
// per-pixel input featurization.

class ToyFlowTask {
public:
    struct Example {
        Tensor features;  // [(H*W) x C]
        Tensor flow;      // [(H*W) x 2], (dy, dx) per pixel
    };

    ToyFlowTask(const ExperimentConfig& cfg, Rng& rng)
        : cfg_(cfg),
          position_features_(fourier_features(grid_positions({cfg.data.height, cfg.data.width}),
                                              {cfg.data.height, cfg.data.width},
                                              FourierSpec{cfg.data.fourier_bands, 1.0, 0.0, true})),
          model_(core_config(cfg), rng) {}

    static std::size_t patch_channels(const ExperimentConfig& cfg) {
        return cfg.data.patch * cfg.data.patch * 3 * 2;
    }

    static std::size_t input_channels(const ExperimentConfig& cfg) {
        const FourierSpec spec{cfg.data.fourier_bands, 1.0, 0.0, true};
        return patch_channels(cfg) + 2 * spec.channels_per_dim();
    }

    static PerceiverConfig core_config(const ExperimentConfig& cfg) {
        ModelConfig m = cfg.model;
        m.input_channels = input_channels(cfg);
        m.decoder_query_channels = input_channels(cfg);
        m.decoder_channels = m.decoder_channels ? m.decoder_channels : m.latent_channels;
        m.output_channels = 2;
        m.decoder_query_residual = false;  // queries carry input features, not flow
        return to_perceiver_config(m);
    }

    Example make_example(Rng& rng) {
        const std::size_t h = cfg_.data.height, w = cfg_.data.width;
        Tensor frame1({h, w, 3});
        for (std::size_t d = 0; d < cfg_.data.num_dots; ++d) {
            const std::size_t y = rng.uniform_index(h), x = rng.uniform_index(w);
            for (std::size_t c = 0; c < 3; ++c) frame1[(y * w + x) * 3 + c] = rng.uniform(0.2, 1.0);
        }
        const auto shift = static_cast<std::ptrdiff_t>(cfg_.data.max_shift);
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(rng.uniform_index(2 * cfg_.data.max_shift + 1)) - shift;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(rng.uniform_index(2 * cfg_.data.max_shift + 1)) - shift;
        Tensor frame2({h, w, 3});
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t sy = (y + h - static_cast<std::size_t>((dy % static_cast<std::ptrdiff_t>(h) + static_cast<std::ptrdiff_t>(h)) % static_cast<std::ptrdiff_t>(h))) % h;
                const std::size_t sx = (x + w - static_cast<std::size_t>((dx % static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(w)) % static_cast<std::ptrdiff_t>(w))) % w;
                for (std::size_t c = 0; c < 3; ++c) frame2[(y * w + x) * 3 + c] = frame1[(sy * w + sx) * 3 + c];
            }
        }
        Example ex;
        FlowPatches patches = extract_flow_patches(frame1, frame2, cfg_.data.patch, cfg_.data.concat_frames);
        Tape scratch;  // concatenation only; cheaper than a bespoke tensor splice
        Var f = scratch.concat_cols(std::vector<Var>{scratch.leaf(patches.features),
                                                     scratch.leaf(position_features_)});
        ex.features = scratch.value(f);
        ex.flow = Tensor({h * w, 2});
        for (std::size_t i = 0; i < h * w; ++i) {
            ex.flow.at(i, 0) = static_cast<double>(dy);
            ex.flow.at(i, 1) = static_cast<double>(dx);
        }
        return ex;
    }

    std::vector<Parameter*> parameters() { return model_.parameters(); }

    double train_step(Rng& rng) {
        double total = 0.0;
        const std::size_t batch = cfg_.train.batch_size;
        for (std::size_t i = 0; i < batch; ++i) {
            Example ex = make_example(rng);
            const std::size_t o = ex.features.rows();
            std::vector<std::size_t> idx;
            if (cfg_.train.query_subsample && cfg_.train.query_subsample < o) {
                idx = sample_query_subset(o, cfg_.train.query_subsample, rng);
            } else {
                idx.resize(o);
                for (std::size_t r = 0; r < o; ++r) idx[r] = r;
            }
            // Train against flow normalized by the shift range; the head then
            // works at unit scale and the trust ratio does not have to grow it.
            const double scale = static_cast<double>(cfg_.data.max_shift);
            Tensor queries({idx.size(), ex.features.cols()});
            Tensor targets({idx.size(), 2});
            for (std::size_t r = 0; r < idx.size(); ++r) {
                for (std::size_t c = 0; c < ex.features.cols(); ++c) {
                    queries.at(r, c) = ex.features.at(idx[r], c);
                }
                targets.at(r, 0) = ex.flow.at(idx[r], 0) / scale;
                targets.at(r, 1) = ex.flow.at(idx[r], 1) / scale;
            }
            Tape tape;
            Var out = model_.forward(tape, tape.leaf(ex.features), tape.leaf(queries));
            Var loss = tape.l1_loss(out, targets);
            total += tape.value(loss)[0];
            tape.backward(tape.scale(loss, 1.0 / static_cast<double>(batch)));
        }
        return total / static_cast<double>(batch);
    }

    void evaluate(std::size_t step, MetricsLog& log) {
        Rng rng = eval_rng_for(cfg_);
        double epe_sum = 0.0;
        for (std::size_t i = 0; i < cfg_.train.eval_examples; ++i) {
            Example ex = make_example(rng);
            Tape tape;
            Var out = model_.forward(tape, tape.leaf(ex.features), tape.leaf(ex.features));
            Tensor flow_pixels = tape.value(out);
            for (std::size_t k = 0; k < flow_pixels.size(); ++k) {
                flow_pixels[k] *= static_cast<double>(cfg_.data.max_shift);
            }
            epe_sum += end_point_error(flow_pixels, ex.flow);
        }
        last_metrics_["epe"] = epe_sum / static_cast<double>(cfg_.train.eval_examples);
        for (const auto& [k, v] : last_metrics_) log.add(step, "eval", k, v);
    }

    PerceiverFlopsSpec flops_spec() {
        PerceiverFlopsSpec spec;
        spec.input_size = cfg_.data.height * cfg_.data.width;
        spec.output_size = spec.input_size;
        spec.model = core_config(cfg_);
        return spec;
    }

    std::map<std::string, double> last_metrics_;

private:
    ExperimentConfig cfg_;
    Tensor position_features_;

public:
    PerceiverModel model_;
};

// ---------------------------------------------------------------------------
// toy-classify: noisy prototype rows, single learned class query. Also the
// substrate for the decoder comparison.

class ToyClassifyTask {
public:
    ToyClassifyTask(const ExperimentConfig& cfg, Rng& rng)
        : ToyClassifyTask(cfg, rng,
                          cfg.model.decoder_kind == "attention" ? DecoderKind::Attention
                                                                : DecoderKind::AverageProject) {}

    ToyClassifyTask(const ExperimentConfig& cfg, Rng& rng, DecoderKind decoder)
        : cfg_(cfg),
          decoder_kind_(decoder),
          prototypes_(Rng(cfg.seed ^ 0xda7a5e7ull)
                          .uniform_tensor({cfg.data.num_classes, cfg.data.channels}, -1.0, 1.0)),
          queries_(QueryBuilder::learned("task.class_query", 1, query_channels(cfg), rng)),
          model_(core_config(cfg, decoder), rng) {
        Rng data_rng(cfg_.seed ^ 0x7ab1e5ull);
        for (std::size_t i = 0; i < cfg_.data.train_examples; ++i) {
            train_set_.push_back(make_example(data_rng));
        }
    }

    struct Example {
        Tensor rows;
        std::size_t label;
    };

    static std::size_t query_channels(const ExperimentConfig& cfg) {
        return cfg.model.decoder_query_channels ? cfg.model.decoder_query_channels
                                                : cfg.model.latent_channels;
    }

    static PerceiverConfig core_config(const ExperimentConfig& cfg, DecoderKind decoder) {
        ModelConfig m = cfg.model;
        m.input_channels = cfg.data.channels;
        m.output_channels = cfg.data.num_classes;
        m.decoder_kind = decoder == DecoderKind::Attention ? "attention" : "average-project";
        PerceiverConfig p = to_perceiver_config(m);
        p.decoder_query_channels = query_channels(cfg);
        return p;
    }

    Example make_example(Rng& rng) {
        Example ex;
        ex.label = rng.uniform_index(cfg_.data.num_classes);
        ex.rows = Tensor({cfg_.data.rows, cfg_.data.channels});
        for (std::size_t r = 0; r < cfg_.data.rows; ++r) {
            for (std::size_t c = 0; c < cfg_.data.channels; ++c) {
                ex.rows.at(r, c) = prototypes_.at(ex.label, c) + cfg_.data.noise * rng.normal();
            }
        }
        return ex;
    }

    Var logits_of(Tape& tape, const Example& ex) {
        if (decoder_kind_ == DecoderKind::AverageProject) {
            Var latents = model_.process(tape, model_.encode(tape, tape.leaf(ex.rows)));
            return model_.average_project_decode(tape, latents);
        }
        return model_.forward(tape, tape.leaf(ex.rows), queries_.build(tape));
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        if (decoder_kind_ == DecoderKind::Attention) {
            for (Parameter* p : queries_.parameters()) out.push_back(p);
        }
        for (Parameter* p : model_.parameters()) out.push_back(p);
        return out;
    }

    double train_step(Rng& rng) {
        double total = 0.0;
        const std::size_t batch = cfg_.train.batch_size;
        for (std::size_t i = 0; i < batch; ++i) {
            const Example& ex = train_set_[rng.uniform_index(train_set_.size())];
            Tape tape;
            Var loss = tape.softmax_cross_entropy(logits_of(tape, ex), {ex.label});
            total += tape.value(loss)[0];
            tape.backward(tape.scale(loss, 1.0 / static_cast<double>(batch)));
        }
        return total / static_cast<double>(batch);
    }

    double accuracy(const std::vector<Example>& examples) {
        std::size_t correct = 0;
        for (const Example& ex : examples) {
            Tape tape;
            const Tensor& lg = tape.value(logits_of(tape, ex));
            std::size_t best = 0;
            for (std::size_t c = 1; c < lg.cols(); ++c) {
                if (lg.at(0, c) > lg.at(0, best)) best = c;
            }
            correct += best == ex.label;
        }
        return static_cast<double>(correct) / static_cast<double>(examples.size());
    }

    void evaluate(std::size_t step, MetricsLog& log) {
        Rng rng = eval_rng_for(cfg_);
        std::vector<Example> held_out;
        for (std::size_t i = 0; i < cfg_.train.eval_examples; ++i) held_out.push_back(make_example(rng));
        last_metrics_["train_accuracy"] = accuracy(train_set_);
        last_metrics_["eval_accuracy"] = accuracy(held_out);
        for (const auto& [k, v] : last_metrics_) log.add(step, "eval", k, v);
    }

    PerceiverFlopsSpec flops_spec() {
        PerceiverFlopsSpec spec;
        spec.input_size = cfg_.data.rows;
        spec.output_size = 1;
        spec.model = core_config(cfg_, decoder_kind_);
        if (decoder_kind_ == DecoderKind::Attention) {
            for (Parameter* p : queries_.parameters()) {
                spec.extra_param_tables.emplace_back(p->name, p->value.size());
            }
        }
        return spec;
    }

    std::map<std::string, double> last_metrics_;

private:
    ExperimentConfig cfg_;
    DecoderKind decoder_kind_;
    Tensor prototypes_;
    std::vector<Example> train_set_;
    QueryBuilder queries_;

public:
    PerceiverModel model_;
};

// ---------------------------------------------------------------------------
// multitask-toy: one jointly trained model answering several deterministic
// string tasks, with per-task queries or the input-token baselines.

class MultitaskTask {
public:
    MultitaskTask(const ExperimentConfig& cfg, Rng& rng)
        : cfg_(cfg),
          num_tasks_(cfg.data.tasks.size()),
          byte_embed_("task.byte_embedding",
                      rng.truncated_normal_tensor({ByteVocab::size, cfg.data.input_embed_channels}, 0.02)),
          input_pos_(learned_position_table("task.input_positions", cfg.data.string_length + 1,
                                            cfg.data.input_pos_channels, rng)),
          model_(core_config(cfg), rng) {
        for (const std::string& t : cfg_.data.tasks) {
            if (t != "majority" && t != "first-symbol" && t != "parity") {
                throw std::invalid_argument("multitask-toy: unknown task '" + t +
                                            "'; known: majority, first-symbol, parity");
            }
        }
        if (num_tasks_ == 0) throw std::invalid_argument("multitask-toy: need at least one task");
        const std::size_t eq = query_channels(cfg);
        if (cfg_.data.variant == "multitask-query") {
            queries_ = QueryBuilder::per_task("task.task_queries", num_tasks_, eq, rng);
        } else if (cfg_.data.variant == "shared-input-token" || cfg_.data.variant == "task-input-tokens") {
            queries_ = QueryBuilder::learned("task.class_query", 1, eq, rng);
            const std::size_t tokens = cfg_.data.variant == "shared-input-token" ? 1 : num_tasks_;
            input_tokens_ = Parameter("task.input_tokens",
                                      rng.truncated_normal_tensor({tokens, cfg_.data.input_embed_channels}, 0.02));
        } else {
            throw std::invalid_argument("multitask-toy: unknown variant '" + cfg_.data.variant + "'");
        }
        for (std::size_t t = 0; t < num_tasks_; ++t) {
            const std::string prefix = "task.head" + std::to_string(t);
            heads_.push_back({Parameter(prefix + ".w1",
                                        rng.truncated_normal_tensor({eq, eq}, 1.0 / std::sqrt((double)eq))),
                              Parameter(prefix + ".b1", Tensor({eq})),
                              Parameter(prefix + ".w2",
                                        rng.truncated_normal_tensor({eq, 2}, 1.0 / std::sqrt((double)eq))),
                              Parameter(prefix + ".b2", Tensor({2}))});
        }
    }

    struct Example {
        std::vector<std::size_t> ids;     // 'a' / 'b' bytes
        std::vector<std::size_t> labels;  // one per task
    };

    static std::size_t query_channels(const ExperimentConfig& cfg) {
        return cfg.model.decoder_query_channels ? cfg.model.decoder_query_channels
                                                : cfg.model.latent_channels;
    }

    static PerceiverConfig core_config(const ExperimentConfig& cfg) {
        ModelConfig m = cfg.model;
        m.input_channels = cfg.data.input_embed_channels + cfg.data.input_pos_channels;
        m.output_channels = 0;  // task heads live outside the core
        m.decoder_query_residual = true;
        PerceiverConfig p = to_perceiver_config(m);
        p.decoder_query_channels = query_channels(cfg);
        return p;
    }

    std::size_t label_for(const std::string& task, const std::vector<std::size_t>& ids) const {
        std::size_t count_a = 0;
        for (std::size_t b : ids) count_a += b == 'a';
        if (task == "majority") return count_a > ids.size() - count_a ? 0 : 1;
        if (task == "first-symbol") return ids.front() == 'a' ? 0 : 1;
        return count_a % 2;  // parity
    }

    Example make_example(Rng& rng) {
        Example ex;
        const bool has_majority =
            std::find(cfg_.data.tasks.begin(), cfg_.data.tasks.end(), "majority") != cfg_.data.tasks.end();
        for (int attempt = 0; attempt < 100; ++attempt) {
            ex.ids.clear();
            for (std::size_t i = 0; i < cfg_.data.string_length; ++i) {
                ex.ids.push_back(rng.bernoulli(0.5) ? 'a' : 'b');
            }
            std::size_t count_a = 0;
            for (std::size_t b : ex.ids) count_a += b == 'a';
            if (!has_majority || 2 * count_a != ex.ids.size()) break;  // re-draw majority ties
        }
        for (const std::string& t : cfg_.data.tasks) ex.labels.push_back(label_for(t, ex.ids));
        return ex;
    }

    Var head_logits(Tape& tape, std::size_t task, Var row) {
        auto& h = heads_[task];
        Var hidden = tape.tanh(tape.linear(row, tape.param(h.w1), tape.param(h.b1)));
        return tape.linear(hidden, tape.param(h.w2), tape.param(h.b2));
    }

    Var build_input(Tape& tape, const Example& ex, int token_index) {
        Var content = tape.embedding_lookup(tape.param(byte_embed_), ex.ids);
        std::vector<std::size_t> pos_idx(ex.ids.size());
        for (std::size_t i = 0; i < pos_idx.size(); ++i) pos_idx[i] = i + 1;
        Var pos = tape.gather_rows(tape.param(input_pos_), pos_idx);
        Var rows = tape.concat_cols(std::vector<Var>{content, pos});
        if (token_index < 0) return rows;
        Var token = tape.gather_rows(tape.param(input_tokens_), {static_cast<std::size_t>(token_index)});
        Var token_pos = tape.gather_rows(tape.param(input_pos_), {0});
        Var token_row = tape.concat_cols(std::vector<Var>{token, token_pos});
        return tape.concat_rows(std::vector<Var>{token_row, rows});
    }

    // Logits for every task, shape [num_tasks x 2].
    Var logits_of(Tape& tape, const Example& ex) {
        std::vector<Var> per_task;
        if (cfg_.data.variant == "multitask-query") {
            Var out = model_.forward(tape, build_input(tape, ex, -1), queries_.build(tape));
            for (std::size_t t = 0; t < num_tasks_; ++t) {
                per_task.push_back(head_logits(tape, t, tape.slice_rows(out, t, 1)));
            }
        } else if (cfg_.data.variant == "shared-input-token") {
            Var out = model_.forward(tape, build_input(tape, ex, 0), queries_.build(tape));
            for (std::size_t t = 0; t < num_tasks_; ++t) per_task.push_back(head_logits(tape, t, out));
        } else {
            for (std::size_t t = 0; t < num_tasks_; ++t) {
                Var out = model_.forward(tape, build_input(tape, ex, static_cast<int>(t)),
                                         queries_.build(tape));
                per_task.push_back(head_logits(tape, t, out));
            }
        }
        return tape.concat_rows(per_task);
    }

    double train_step(Rng& rng) {
        double total = 0.0;
        const std::size_t batch = cfg_.train.batch_size;
        for (std::size_t i = 0; i < batch; ++i) {
            Example ex = make_example(rng);
            Tape tape;
            Var logits = logits_of(tape, ex);
            std::vector<LossRange> ranges(num_tasks_);
            for (std::size_t t = 0; t < num_tasks_; ++t) {
                ranges[t] = {LossRange::Kind::SoftmaxCrossEntropy, t, t + 1,
                             1.0 / static_cast<double>(num_tasks_),
                             {ex.labels[t]}, {}, {}};
            }
            Var loss = composite_loss(tape, logits, ranges);
            total += tape.value(loss)[0];
            tape.backward(tape.scale(loss, 1.0 / static_cast<double>(batch)));
        }
        return total / static_cast<double>(batch);
    }

    void evaluate(std::size_t step, MetricsLog& log) {
        Rng rng = eval_rng_for(cfg_);
        std::vector<std::size_t> correct(num_tasks_, 0);
        for (std::size_t i = 0; i < cfg_.train.eval_examples; ++i) {
            Example ex = make_example(rng);
            Tape tape;
            const Tensor& lg = tape.value(logits_of(tape, ex));
            for (std::size_t t = 0; t < num_tasks_; ++t) {
                correct[t] += (lg.at(t, 0) > lg.at(t, 1) ? 0 : 1) == ex.labels[t];
            }
        }
        double min_acc = 1.0;
        for (std::size_t t = 0; t < num_tasks_; ++t) {
            const double acc = static_cast<double>(correct[t]) / static_cast<double>(cfg_.train.eval_examples);
            last_metrics_[cfg_.data.tasks[t] + "_accuracy"] = acc;
            min_acc = std::min(min_acc, acc);
        }
        last_metrics_["min_task_accuracy"] = min_acc;
        for (const auto& [k, v] : last_metrics_) log.add(step, "eval", k, v);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out{&byte_embed_, &input_pos_};
        if (input_tokens_.value.size() > 0) out.push_back(&input_tokens_);
        for (Parameter* p : queries_.parameters()) out.push_back(p);
        for (auto& h : heads_) {
            out.push_back(&h.w1);
            out.push_back(&h.b1);
            out.push_back(&h.w2);
            out.push_back(&h.b2);
        }
        for (Parameter* p : model_.parameters()) out.push_back(p);
        return out;
    }

    PerceiverFlopsSpec flops_spec() {
        PerceiverFlopsSpec spec;
        spec.input_size = cfg_.data.string_length + (cfg_.data.variant == "multitask-query" ? 0 : 1);
        spec.output_size = cfg_.data.variant == "multitask-query" ? num_tasks_ : 1;
        spec.model = core_config(cfg_);
        spec.extra_param_tables = {{byte_embed_.name, byte_embed_.value.size()},
                                   {input_pos_.name, input_pos_.value.size()}};
        if (input_tokens_.value.size() > 0) {
            spec.extra_param_tables.emplace_back(input_tokens_.name, input_tokens_.value.size());
        }
        for (Parameter* p : queries_.parameters()) {
            spec.extra_param_tables.emplace_back(p->name, p->value.size());
        }
        const std::size_t eq = query_channels(cfg_);
        const std::size_t head_rows = cfg_.data.variant == "task-input-tokens" ? num_tasks_ : 1;
        for (std::size_t t = 0; t < num_tasks_; ++t) {
            spec.extra_projections.push_back({"head" + std::to_string(t) + ".w1", head_rows, eq, eq, true});
            spec.extra_projections.push_back({"head" + std::to_string(t) + ".w2", head_rows, eq, 2, true});
        }
        return spec;
    }

    std::map<std::string, double> last_metrics_;

private:
    struct Head {
        Parameter w1, b1, w2, b2;
    };

    ExperimentConfig cfg_;
    std::size_t num_tasks_;
    Parameter byte_embed_;
    Parameter input_pos_;
    Parameter input_tokens_;
    QueryBuilder queries_;
    std::vector<Head> heads_;

public:
    PerceiverModel model_;
};

// ---------------------------------------------------------------------------
// toy-multimodal-autoencode: video + audio + label serialized into one array
// with learned modality pads, decoded through modality-padded queries.

class MultimodalTask {
public:
    MultimodalTask(const ExperimentConfig& cfg, Rng& rng)
        : cfg_(cfg),
          video_grid_{cfg.data.frames, cfg.data.height / cfg.data.video_patch,
                      cfg.data.width / cfg.data.video_patch},
          audio_patches_(cfg.data.audio_samples / cfg.data.audio_patch),
          video_ff_(fourier_features(grid_positions(video_grid_), video_grid_,
                                     FourierSpec{cfg.data.video_bands, 1.0, 0.0, true})),
          audio_ff_(fourier_features(grid_positions({audio_patches_}), {audio_patches_},
                                     FourierSpec{cfg.data.audio_bands, 1.0, 0.0, true})),
          model_(core_config(cfg), rng) {
        if (cfg.data.height % cfg.data.video_patch || cfg.data.width % cfg.data.video_patch ||
            cfg.data.audio_samples % cfg.data.audio_patch) {
            throw std::invalid_argument("toy-multimodal-autoencode: extents must divide their patch sizes");
        }
        // Input serialization widths: content || position || modality pad.
        std::vector<ModalitySpec> input_specs = {
            {"video", video_content_channels(cfg_), video_ff_.cols(), 0},
            {"audio", audio_content_channels(cfg_), audio_ff_.cols(), 0},
            {"label", cfg_.data.num_classes, 0, 0},
        };
        input_width_ = resolve_modality_widths(input_specs);
        in_pads_.push_back(Parameter("task.input_pad.video",
                                     rng.truncated_normal_tensor({1, input_specs[0].pad_channels}, 0.02)));
        in_pads_.push_back(Parameter("task.input_pad.audio",
                                     rng.truncated_normal_tensor({1, input_specs[1].pad_channels}, 0.02)));
        in_pads_.push_back(Parameter("task.input_pad.label",
                                     rng.truncated_normal_tensor({1, input_specs[2].pad_channels}, 0.02)));

        std::vector<QueryBuilder> parts;
        parts.push_back(QueryBuilder::positional(FourierSpec{cfg_.data.video_bands, 1.0, 0.0, true},
                                                 video_grid_));
        parts.push_back(QueryBuilder::positional(FourierSpec{cfg_.data.audio_bands, 1.0, 0.0, true},
                                                 {audio_patches_}));
        parts.push_back(QueryBuilder::learned("task.label_query", 1, cfg_.data.label_query_channels, rng));
        queries_ = QueryBuilder::multimodal("task.query", std::move(parts), rng);

        // Output heads start at zero so an untrained model predicts its bias.
        const std::size_t dec = decoder_channels(cfg_);
        head_video_w_ = Parameter("task.head_video.w", Tensor({dec, video_content_channels(cfg_)}));
        head_video_b_ = Parameter("task.head_video.b", Tensor({video_content_channels(cfg_)}));
        head_audio_w_ = Parameter("task.head_audio.w", Tensor({dec, audio_content_channels(cfg_)}));
        head_audio_b_ = Parameter("task.head_audio.b", Tensor({audio_content_channels(cfg_)}));
        head_label_w_ = Parameter("task.head_label.w", Tensor({dec, cfg_.data.num_classes}));
        head_label_b_ = Parameter("task.head_label.b", Tensor({cfg_.data.num_classes}));
    }

    struct Example {
        Tensor video_rows;  // [Vp x video_content]
        Tensor audio_rows;  // [Ap x audio_patch]
        std::size_t label = 0;
    };

    static std::size_t video_content_channels(const ExperimentConfig& cfg) {
        return cfg.data.video_patch * cfg.data.video_patch * 3;
    }
    static std::size_t audio_content_channels(const ExperimentConfig& cfg) { return cfg.data.audio_patch; }
    static std::size_t decoder_channels(const ExperimentConfig& cfg) {
        return cfg.model.decoder_channels ? cfg.model.decoder_channels : cfg.model.latent_channels;
    }

    PerceiverConfig core_config(const ExperimentConfig& cfg) {
        ModelConfig m = cfg.model;
        // Channel widths come from the serialized modalities, resolved below;
        // recompute the same arithmetic here.
        const FourierSpec vf{cfg.data.video_bands, 1.0, 0.0, true};
        const FourierSpec af{cfg.data.audio_bands, 1.0, 0.0, true};
        std::vector<ModalitySpec> specs = {
            {"video", video_content_channels(cfg), 3 * vf.channels_per_dim(), 0},
            {"audio", audio_content_channels(cfg), af.channels_per_dim(), 0},
            {"label", cfg.data.num_classes, 0, 0},
        };
        m.input_channels = resolve_modality_widths(specs);
        m.decoder_channels = decoder_channels(cfg);
        m.output_channels = 0;
        m.decoder_query_residual = false;
        PerceiverConfig p = to_perceiver_config(m);
        if (m.qk_channels == 0) p.decoder.qk_channels = m.latent_channels;
        if (m.v_channels == 0) p.decoder.v_channels = m.latent_channels;
        std::vector<ModalitySpec> qspecs = {
            {"video", 3 * vf.channels_per_dim(), 0, 0},
            {"audio", af.channels_per_dim(), 0, 0},
            {"label", cfg.data.label_query_channels, 0, 0},
        };
        p.decoder_query_channels = resolve_modality_widths(qspecs);
        return p;
    }

    Example make_example(Rng& rng) {
        const std::size_t t = cfg_.data.frames, h = cfg_.data.height, w = cfg_.data.width;
        Example ex;
        ex.label = rng.uniform_index(cfg_.data.num_classes);
        static const double palette[4][3] = {{1.0, 0.2, 0.2}, {0.2, 1.0, 0.2}, {0.2, 0.4, 1.0}, {1.0, 1.0, 0.3}};
        static const int velocity[4][2] = {{1, 0}, {0, 1}, {1, 1}, {0, 0}};
        const auto* color = palette[ex.label % 4];
        const int vy = velocity[ex.label % 4][0], vx = velocity[ex.label % 4][1];
        const std::size_t y0 = rng.uniform_index(h), x0 = rng.uniform_index(w);
        Tensor video({t, h, w, 3});
        for (std::size_t f = 0; f < t; ++f) {
            const std::size_t cy = (y0 + f * static_cast<std::size_t>(vy)) % h;
            const std::size_t cx = (x0 + f * static_cast<std::size_t>(vx)) % w;
            for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
                for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                    const std::size_t y = (cy + h + static_cast<std::size_t>(dy + 1) - 1) % h;
                    const std::size_t x = (cx + w + static_cast<std::size_t>(dx + 1) - 1) % w;
                    for (std::size_t c = 0; c < 3; ++c) video[((f * h + y) * w + x) * 3 + c] = color[c];
                }
            }
        }
        ex.video_rows = patch_video(video, cfg_.data.video_patch).rows;

        Tensor audio({cfg_.data.audio_samples});
        const double freq = 2.0 * (static_cast<double>(ex.label) + 1.0);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        for (std::size_t s = 0; s < cfg_.data.audio_samples; ++s) {
            audio[s] = 0.5 + 0.45 * std::sin(6.283185307179586 * freq * static_cast<double>(s) /
                                                 static_cast<double>(cfg_.data.audio_samples) +
                                             phase);
        }
        ex.audio_rows = patch_audio(audio, cfg_.data.audio_patch).rows;
        return ex;
    }

    // Serialized input rows: video || audio || label, each padded with its
    // learned modality vector.
    Var build_input(Tape& tape, const Example& ex, bool label_visible) {
        Tensor label_content({1, cfg_.data.num_classes});
        if (label_visible) label_content.at(0, ex.label) = 1.0;
        Var video = build_input_array(tape, tape.leaf(ex.video_rows), &video_ff_, tape.param(in_pads_[0]),
                                      input_width_);
        Var audio = build_input_array(tape, tape.leaf(ex.audio_rows), &audio_ff_, tape.param(in_pads_[1]),
                                      input_width_);
        Var label = build_input_array(tape, tape.leaf(label_content), nullptr, tape.param(in_pads_[2]),
                                      input_width_);
        return tape.concat_rows(std::vector<Var>{video, audio, label});
    }

    struct Decoded {
        Var video, audio, label;  // projected per-modality rows
    };

    Decoded decode_rows(Tape& tape, Var latents, Var queries, const std::vector<std::size_t>& video_idx,
                        const std::vector<std::size_t>& audio_idx, bool include_label) {
        std::vector<std::size_t> rows;
        const auto& ranges = queries_.part_ranges();
        for (std::size_t i : video_idx) rows.push_back(ranges[0].first + i);
        for (std::size_t i : audio_idx) rows.push_back(ranges[1].first + i);
        if (include_label) rows.push_back(ranges[2].first);
        Var out = model_.decode(tape, latents, tape.gather_rows(queries, rows));
        Decoded d;
        std::size_t off = 0;
        if (!video_idx.empty()) {
            d.video = tape.linear(tape.slice_rows(out, off, video_idx.size()), tape.param(head_video_w_),
                                  tape.param(head_video_b_));
            off += video_idx.size();
        }
        if (!audio_idx.empty()) {
            d.audio = tape.linear(tape.slice_rows(out, off, audio_idx.size()), tape.param(head_audio_w_),
                                  tape.param(head_audio_b_));
            off += audio_idx.size();
        }
        if (include_label) {
            d.label = tape.linear(tape.slice_rows(out, off, 1), tape.param(head_label_w_),
                                  tape.param(head_label_b_));
        }
        return d;
    }

    double train_step(Rng& rng) {
        double total = 0.0;
        const std::size_t batch = cfg_.train.batch_size;
        for (std::size_t i = 0; i < batch; ++i) {
            Example ex = make_example(rng);
            const bool label_visible = !rng.bernoulli(cfg_.data.label_mask_prob);
            Tape tape;
            Var latents = model_.process(tape, model_.encode(tape, build_input(tape, ex, label_visible)));
            Var queries = queries_.build(tape);
            const std::size_t vp = ex.video_rows.rows(), ap = ex.audio_rows.rows();
            auto vid_idx = sample_query_subset(vp, std::min(cfg_.data.subsample_video, vp), rng);
            auto aud_idx = sample_query_subset(ap, std::min(cfg_.data.subsample_audio, ap), rng);
            Decoded d = decode_rows(tape, latents, queries, vid_idx, aud_idx, true);

            Tensor vid_target({vid_idx.size(), ex.video_rows.cols()});
            for (std::size_t r = 0; r < vid_idx.size(); ++r) {
                for (std::size_t c = 0; c < ex.video_rows.cols(); ++c) {
                    vid_target.at(r, c) = ex.video_rows.at(vid_idx[r], c);
                }
            }
            Tensor aud_target({aud_idx.size(), ex.audio_rows.cols()});
            for (std::size_t r = 0; r < aud_idx.size(); ++r) {
                for (std::size_t c = 0; c < ex.audio_rows.cols(); ++c) {
                    aud_target.at(r, c) = ex.audio_rows.at(aud_idx[r], c);
                }
            }
            std::vector<Var> terms{tape.l1_loss(d.video, vid_target), tape.l1_loss(d.audio, aud_target),
                                   tape.softmax_cross_entropy(d.label, {ex.label})};
            std::vector<double> weights{cfg_.data.video_weight, cfg_.data.audio_weight,
                                        cfg_.data.label_weight};
            Var loss = tape.add_scalars(terms, weights);
            total += tape.value(loss)[0];
            tape.backward(tape.scale(loss, 1.0 / static_cast<double>(batch)));
        }
        return total / static_cast<double>(batch);
    }

    // Full decode in query batches; the label stays masked so the model acts
    // as a classifier.
    void evaluate(std::size_t step, MetricsLog& log) {
        Rng rng = eval_rng_for(cfg_);
        const std::size_t n = std::max<std::size_t>(1, cfg_.train.eval_examples / 4);
        double video_err = 0.0, audio_err = 0.0;
        std::size_t video_count = 0, audio_count = 0, correct = 0;
        for (std::size_t i = 0; i < n; ++i) {
            Example ex = make_example(rng);
            Tape tape;
            Var latents = model_.process(tape, model_.encode(tape, build_input(tape, ex, false)));
            Var queries = queries_.build(tape);
            const std::size_t vp = ex.video_rows.rows(), ap = ex.audio_rows.rows();
            const std::size_t chunk = 64;
            for (std::size_t begin = 0; begin < vp; begin += chunk) {
                std::vector<std::size_t> idx;
                for (std::size_t r = begin; r < std::min(vp, begin + chunk); ++r) idx.push_back(r);
                Decoded d = decode_rows(tape, latents, queries, idx, {}, false);
                const Tensor& rec = tape.value(d.video);
                for (std::size_t r = 0; r < idx.size(); ++r) {
                    for (std::size_t c = 0; c < rec.cols(); ++c) {
                        const double e = rec.at(r, c) - ex.video_rows.at(idx[r], c);
                        video_err += e * e;
                        ++video_count;
                    }
                }
            }
            for (std::size_t begin = 0; begin < ap; begin += chunk) {
                std::vector<std::size_t> idx;
                for (std::size_t r = begin; r < std::min(ap, begin + chunk); ++r) idx.push_back(r);
                Decoded d = decode_rows(tape, latents, queries, {}, idx, false);
                const Tensor& rec = tape.value(d.audio);
                for (std::size_t r = 0; r < idx.size(); ++r) {
                    for (std::size_t c = 0; c < rec.cols(); ++c) {
                        const double e = rec.at(r, c) - ex.audio_rows.at(idx[r], c);
                        audio_err += e * e;
                        ++audio_count;
                    }
                }
            }
            Decoded d = decode_rows(tape, latents, queries, {}, {}, true);
            const Tensor& lg = tape.value(d.label);
            std::size_t best = 0;
            for (std::size_t c = 1; c < lg.cols(); ++c) {
                if (lg.at(0, c) > lg.at(0, best)) best = c;
            }
            correct += best == ex.label;
        }
        const double video_mse = video_err / static_cast<double>(video_count);
        const double audio_mse = audio_err / static_cast<double>(audio_count);
        last_metrics_["video_psnr"] = video_mse == 0.0 ? std::numeric_limits<double>::infinity()
                                                       : 10.0 * std::log10(1.0 / video_mse);
        last_metrics_["audio_psnr"] = audio_mse == 0.0 ? std::numeric_limits<double>::infinity()
                                                       : 10.0 * std::log10(1.0 / audio_mse);
        last_metrics_["label_accuracy"] = static_cast<double>(correct) / static_cast<double>(n);
        last_metrics_["compression_ratio"] = compression_ratio();
        for (const auto& [k, v] : last_metrics_) log.add(step, "eval", k, v);
    }

    double compression_ratio() const {
        const std::size_t vp = video_grid_[0] * video_grid_[1] * video_grid_[2];
        const std::size_t elements = vp + audio_patches_ + 1;
        return static_cast<double>(elements * input_width_) /
               static_cast<double>(cfg_.model.num_latents * cfg_.model.latent_channels);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (auto& p : in_pads_) out.push_back(&p);
        for (Parameter* p : queries_.parameters()) out.push_back(p);
        out.push_back(&head_video_w_);
        out.push_back(&head_video_b_);
        out.push_back(&head_audio_w_);
        out.push_back(&head_audio_b_);
        out.push_back(&head_label_w_);
        out.push_back(&head_label_b_);
        for (Parameter* p : model_.parameters()) out.push_back(p);
        return out;
    }

    PerceiverFlopsSpec flops_spec() {
        const std::size_t vp = video_grid_[0] * video_grid_[1] * video_grid_[2];
        PerceiverFlopsSpec spec;
        spec.input_size = vp + audio_patches_ + 1;
        spec.output_size = spec.input_size;
        spec.model = core_config(cfg_);
        for (auto& p : in_pads_) spec.extra_param_tables.emplace_back(p.name, p.value.size());
        for (Parameter* p : queries_.parameters()) {
            spec.extra_param_tables.emplace_back(p->name, p->value.size());
        }
        const std::size_t dec = decoder_channels(cfg_);
        spec.extra_projections = {
            {"head_video", vp, dec, video_content_channels(cfg_), true},
            {"head_audio", audio_patches_, dec, audio_content_channels(cfg_), true},
            {"head_label", 1, dec, cfg_.data.num_classes, true},
        };
        return spec;
    }

    std::map<std::string, double> last_metrics_;
    QueryBuilder queries_;

private:
    ExperimentConfig cfg_;
    std::vector<std::size_t> video_grid_;
    std::size_t audio_patches_ = 0;
    Tensor video_ff_;
    Tensor audio_ff_;
    std::size_t input_width_ = 0;
    std::vector<Parameter> in_pads_;
    Parameter head_video_w_, head_video_b_, head_audio_w_, head_audio_b_, head_label_w_, head_label_b_;

public:
    PerceiverModel model_;
};

// ---------------------------------------------------------------------------

nlohmann::json finalize_run(const fs::path& dir, const ExperimentConfig& cfg, const MetricsLog& log,
                            const std::map<std::string, double>& final_metrics,
                            const std::vector<Parameter*>& params, double runtime_sec) {
    write_file(dir / "metrics.csv", log.csv());
    if (!params.empty()) save_checkpoint((dir / "checkpoint.prcv").string(), params);
    nlohmann::json summary;
    const std::string resolved = experiment_config_json(cfg).dump(2);
    char hash[32];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(fnv1a_hash(resolved)));
    summary["config_hash"] = hash;
    summary["final_metrics"] = final_metrics;
    summary["runtime_sec"] = runtime_sec;
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    return summary;
}

template <typename Task>
RunResult run_training_task(const ExperimentConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    write_file(dir / "resolved_config.json", experiment_config_json(cfg).dump(2) + "\n");

    Rng master(cfg.seed);
    Rng init_rng = master.fork(1);
    Rng data_rng = master.fork(2);
    Task task(cfg, init_rng);
    MetricsLog log;
    train_loop(
        cfg, task.parameters(), log, data_rng,
        [&task](std::size_t, Rng& rng) { return task.train_step(rng); },
        [&task](std::size_t step, MetricsLog& l) { task.evaluate(step, l); });

    const double runtime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    RunResult result;
    result.run_dir = dir.string();
    result.final_metrics = task.last_metrics_;
    result.summary = finalize_run(dir, cfg, log, result.final_metrics, task.parameters(), runtime);
    return result;
}

RunResult run_flops_report(const ExperimentConfig& cfg) {
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    write_file(dir / "resolved_config.json", experiment_config_json(cfg).dump(2) + "\n");
    FlopsReport report = cfg.flops_preset.empty() ? count_perceiver(parse_flops_spec(cfg.flops_spec))
                                                  : flops_preset_report(cfg.flops_preset);
    write_file(dir / "flops_report.json", flops_report_json(report) + "\n");
    write_file(dir / "flops_report.txt", render_flops_table(report));
    MetricsLog log;
    log.add(0, "report", "total_flops", static_cast<double>(report.total_flops()));
    log.add(0, "report", "total_params", static_cast<double>(report.total_params()));
    RunResult result;
    result.run_dir = dir.string();
    result.final_metrics["total_flops"] = static_cast<double>(report.total_flops());
    result.final_metrics["total_params"] = static_cast<double>(report.total_params());
    result.summary = finalize_run(dir, cfg, log, result.final_metrics, {}, 0.0);
    return result;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
    if (cfg.task == "toy-mlm") return run_training_task<ToyMlmTask>(cfg);
    if (cfg.task == "toy-flow") return run_training_task<ToyFlowTask>(cfg);
    if (cfg.task == "toy-classify") return run_training_task<ToyClassifyTask>(cfg);
    if (cfg.task == "multitask-toy") return run_training_task<MultitaskTask>(cfg);
    if (cfg.task == "toy-multimodal-autoencode") return run_training_task<MultimodalTask>(cfg);
    if (cfg.task == "flops-report") return run_flops_report(cfg);
    throw std::invalid_argument("unknown task '" + cfg.task + "'");
}

RunResult run_compare_decoders(const ExperimentConfig& cfg) {
    if (cfg.task != "toy-classify") {
        throw std::invalid_argument("compare-decoders requires a toy-classify config");
    }
    const auto start = std::chrono::steady_clock::now();
    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);
    write_file(dir / "resolved_config.json", experiment_config_json(cfg).dump(2) + "\n");

    constexpr std::size_t kSeeds = 5;
    MetricsLog log;
    std::map<std::string, std::vector<double>> acc;
    std::uint64_t params_attention = 0, params_average = 0;
    for (std::size_t s = 0; s < kSeeds; ++s) {
        ExperimentConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + s;
        for (DecoderKind kind : {DecoderKind::Attention, DecoderKind::AverageProject}) {
            const std::string name = kind == DecoderKind::Attention ? "attention" : "average-project";
            Rng master(run_cfg.seed);
            Rng init_rng = master.fork(1);
            Rng data_rng = master.fork(2);
            ToyClassifyTask task(run_cfg, init_rng, kind);
            std::uint64_t total = 0;
            for (Parameter* p : task.parameters()) total += p->value.size();
            (kind == DecoderKind::Attention ? params_attention : params_average) = total;
            train_loop(
                run_cfg, task.parameters(), log, data_rng,
                [&task](std::size_t, Rng& rng) { return task.train_step(rng); },
                [&task, &name, s](std::size_t step, MetricsLog& l) {
                    task.evaluate(step, l);
                    (void)name;
                    (void)s;
                });
            acc[name + "_train_accuracy"].push_back(task.last_metrics_["train_accuracy"]);
            acc[name + "_eval_accuracy"].push_back(task.last_metrics_["eval_accuracy"]);
            log.add(run_cfg.seed, "compare/" + name, "train_accuracy",
                    task.last_metrics_["train_accuracy"]);
            log.add(run_cfg.seed, "compare/" + name, "eval_accuracy", task.last_metrics_["eval_accuracy"]);
        }
    }

    RunResult result;
    result.run_dir = dir.string();
    for (const auto& [metric, values] : acc) {
        double mean = 0.0;
        for (double v : values) mean += v;
        mean /= static_cast<double>(values.size());
        double var = 0.0;
        for (double v : values) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(values.size()));
        result.final_metrics[metric + "_mean"] = mean;
        result.final_metrics[metric + "_sd"] = sd;
    }
    result.final_metrics["params_attention_decoder"] = static_cast<double>(params_attention);
    result.final_metrics["params_average_project_decoder"] = static_cast<double>(params_average);
    result.final_metrics["params_delta"] =
        static_cast<double>(params_attention) - static_cast<double>(params_average);
    const double runtime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.summary = finalize_run(dir, cfg, log, result.final_metrics, {}, runtime);
    return result;
}

nlohmann::json gradcheck_battery() {
    nlohmann::json results = nlohmann::json::array();
    auto record = [&results](const std::string& name, const GradCheckResult& r, double tolerance) {
        results.push_back({{"name", name},
                           {"max_rel_error", r.max_rel_error},
                           {"tolerance", tolerance},
                           {"worst", r.worst_param},
                           {"pass", r.max_rel_error < tolerance}});
    };

    Rng rng(11);
    {
        Parameter a("a", rng.normal_tensor({3, 4}, 1.0));
        Parameter b("b", rng.normal_tensor({4, 2}, 1.0));
        auto f = [&](Tape& t) { return t.sum_all(t.matmul(t.param(a), t.param(b))); };
        record("matmul", grad_check(f, std::vector<Parameter*>{&a, &b}), 1e-6);
    }
    {
        Parameter x("x", rng.normal_tensor({2, 5}, 1.0));
        Tensor w = rng.normal_tensor({2, 5}, 1.0);
        auto f = [&](Tape& t) {
            Var s = t.softmax_rows(t.param(x));
            Var weighted = t.add(s, t.leaf(w));  // break the rows-sum-to-one degeneracy
            return t.sum_all(t.matmul_nt(weighted, t.leaf(w)));
        };
        record("softmax", grad_check(f, std::vector<Parameter*>{&x}), 1e-6);
    }
    {
        Parameter x("x", rng.normal_tensor({2, 8}, 1.0));
        Parameter g("g", rng.normal_tensor({8}, 0.2));
        Parameter b("b", rng.normal_tensor({8}, 0.2));
        Tensor w = rng.normal_tensor({2, 8}, 1.0);
        auto f = [&](Tape& t) {
            Var y = t.layer_norm(t.param(x), t.param(g), t.param(b));
            return t.sum_all(t.matmul_nt(y, t.leaf(w)));
        };
        record("layer_norm", grad_check(f, std::vector<Parameter*>{&x, &g, &b}), 1e-6);
    }
    {
        Parameter x("x", Tensor({1, 4}, {-2.0, -0.5, 0.5, 2.0}));
        auto f = [&](Tape& t) { return t.sum_all(t.gelu(t.param(x))); };
        record("gelu", grad_check(f, std::vector<Parameter*>{&x}), 1e-6);
    }
    {
        AttentionConfig cfg;
        cfg.num_heads = 2;
        cfg.qk_channels = 8;
        AttentionModule module("attn", 8, 6, cfg, rng);
        Tensor xq = rng.normal_tensor({2, 8}, 1.0);
        Tensor xkv = rng.normal_tensor({3, 6}, 1.0);
        Tensor w = rng.normal_tensor({2, 8}, 1.0);
        auto f = [&](Tape& t) {
            // The key bias has an exactly zero gradient (softmax is invariant
            // to per-row score shifts); a small loss scale keeps the
            // finite-difference noise on that direction below tolerance.
            Var out = module.forward(t, t.leaf(xq), t.leaf(xkv));
            return t.scale(t.sum_all(t.matmul_nt(out, t.leaf(w))), 0.002);
        };
        record("attention_block", grad_check(f, module.parameters()), 1e-4);
    }
    {
        PerceiverConfig cfg;
        cfg.input_channels = 5;
        cfg.num_latents = 3;
        cfg.latent_channels = 8;
        cfg.num_blocks = 1;
        cfg.layers_per_block = 2;
        cfg.encoder.num_heads = 2;
        cfg.processor.num_heads = 2;
        cfg.decoder.num_heads = 2;
        cfg.decoder_query_channels = 6;
        cfg.output_channels = 2;
        PerceiverModel model(cfg, rng);
        Tensor inputs = rng.normal_tensor({7, 5}, 1.0);
        Tensor queries = rng.normal_tensor({4, 6}, 1.0);
        std::vector<std::size_t> targets{0, 1, 0, 1};
        auto f = [&](Tape& t) {
            Var out = model.forward(t, t.leaf(inputs), t.leaf(queries));
            return t.scale(t.softmax_cross_entropy(out, targets), 0.002);
        };
        record("full_model", grad_check(f, model.parameters()), 1e-4);
    }
    return results;
}

PerceiverFlopsSpec flops_spec_for(const ExperimentConfig& cfg) {
    Rng rng(cfg.seed);
    if (cfg.task == "toy-mlm") return ToyMlmTask(cfg, rng).flops_spec();
    if (cfg.task == "toy-flow") return ToyFlowTask(cfg, rng).flops_spec();
    if (cfg.task == "toy-classify") return ToyClassifyTask(cfg, rng).flops_spec();
    if (cfg.task == "multitask-toy") return MultitaskTask(cfg, rng).flops_spec();
    if (cfg.task == "toy-multimodal-autoencode") return MultimodalTask(cfg, rng).flops_spec();
    throw std::invalid_argument("flops_spec_for: task '" + cfg.task + "' has no model");
}

}  // namespace pio
