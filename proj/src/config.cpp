#include "pio/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace pio {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw std::invalid_argument("config: " + path + ": " + what);
}

void check_keys(const json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) fail(path, "expected an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) fail(path + "." + key, "unknown key");
    }
}

double get_number(const json& j, const std::string& path, const char* key, double fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number()) fail(path + "." + key, "expected a number");
    return j[key].get<double>();
}

std::size_t get_size(const json& j, const std::string& path, const char* key, std::size_t fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number_unsigned() && !j[key].is_number_integer()) {
        fail(path + "." + key, "expected a non-negative integer");
    }
    const auto v = j[key].get<long long>();
    if (v < 0) fail(path + "." + key, "expected a non-negative integer");
    return static_cast<std::size_t>(v);
}

bool get_bool(const json& j, const std::string& path, const char* key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_boolean()) fail(path + "." + key, "expected a boolean");
    return j[key].get<bool>();
}

std::string get_string(const json& j, const std::string& path, const char* key, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_string()) fail(path + "." + key, "expected a string");
    return j[key].get<std::string>();
}

OptimizerConfig parse_optimizer(const json& j, const std::string& path) {
    check_keys(j, path, {"lr", "weight_decay", "beta1", "beta2", "eps", "grad_clip"});
    OptimizerConfig o;
    o.lr = get_number(j, path, "lr", o.lr);
    o.weight_decay = get_number(j, path, "weight_decay", o.weight_decay);
    o.beta1 = get_number(j, path, "beta1", o.beta1);
    o.beta2 = get_number(j, path, "beta2", o.beta2);
    o.eps = get_number(j, path, "eps", o.eps);
    o.grad_clip = get_number(j, path, "grad_clip", o.grad_clip);
    return o;
}

ScheduleConfig parse_schedule(const json& j, const std::string& path) {
    check_keys(j, path, {"kind", "warmup_steps", "total_steps"});
    ScheduleConfig s;
    s.kind = get_string(j, path, "kind", s.kind);
    if (s.kind != "warmup-cosine" && s.kind != "flat-cosine") {
        fail(path + ".kind", "expected 'warmup-cosine' or 'flat-cosine'");
    }
    s.warmup_steps = get_size(j, path, "warmup_steps", s.warmup_steps);
    s.total_steps = get_size(j, path, "total_steps", s.total_steps);
    return s;
}

TrainConfig parse_train(const json& j, const std::string& path) {
    check_keys(j, path, {"steps", "batch_size", "optimizer", "schedule", "query_subsample", "eval_every",
                         "eval_examples", "log_every"});
    TrainConfig t;
    t.steps = get_size(j, path, "steps", t.steps);
    t.batch_size = get_size(j, path, "batch_size", t.batch_size);
    if (j.contains("optimizer")) t.optimizer = parse_optimizer(j["optimizer"], path + ".optimizer");
    if (j.contains("schedule")) t.schedule = parse_schedule(j["schedule"], path + ".schedule");
    t.query_subsample = get_size(j, path, "query_subsample", t.query_subsample);
    t.eval_every = get_size(j, path, "eval_every", t.eval_every);
    t.eval_examples = get_size(j, path, "eval_examples", t.eval_examples);
    t.log_every = get_size(j, path, "log_every", t.log_every);
    return t;
}

ModelConfig parse_model(const json& j, const std::string& path) {
    check_keys(j, path,
               {"input_channels", "num_latents", "latent_channels", "num_blocks", "layers_per_block",
                "share_weights_across_blocks", "num_heads", "qk_channels", "v_channels", "mlp_hidden_ratio",
                "decoder_query_channels", "decoder_channels", "output_channels", "decoder_query_residual",
                "decoder_kind", "dropout"});
    ModelConfig m;
    m.input_channels = get_size(j, path, "input_channels", m.input_channels);
    m.num_latents = get_size(j, path, "num_latents", m.num_latents);
    m.latent_channels = get_size(j, path, "latent_channels", m.latent_channels);
    m.num_blocks = get_size(j, path, "num_blocks", m.num_blocks);
    m.layers_per_block = get_size(j, path, "layers_per_block", m.layers_per_block);
    m.share_weights_across_blocks = get_bool(j, path, "share_weights_across_blocks", false);
    m.num_heads = get_size(j, path, "num_heads", m.num_heads);
    m.qk_channels = get_size(j, path, "qk_channels", m.qk_channels);
    m.v_channels = get_size(j, path, "v_channels", m.v_channels);
    m.mlp_hidden_ratio = get_number(j, path, "mlp_hidden_ratio", m.mlp_hidden_ratio);
    m.decoder_query_channels = get_size(j, path, "decoder_query_channels", m.decoder_query_channels);
    m.decoder_channels = get_size(j, path, "decoder_channels", m.decoder_channels);
    m.output_channels = get_size(j, path, "output_channels", m.output_channels);
    m.decoder_query_residual = get_bool(j, path, "decoder_query_residual", m.decoder_query_residual);
    m.decoder_kind = get_string(j, path, "decoder_kind", m.decoder_kind);
    if (m.decoder_kind != "attention" && m.decoder_kind != "average-project") {
        fail(path + ".decoder_kind", "expected 'attention' or 'average-project'");
    }
    m.dropout = get_number(j, path, "dropout", m.dropout);
    return m;
}

DataConfig parse_data(const json& j, const std::string& path, const std::string& task) {
    static const std::set<std::string> mlm_keys = {
        "crop_length", "vocab_words", "sentence_words", "corpus_bytes", "mask_prob", "align_crops",
        "corpus_path", "concat_documents", "input_embed_channels", "input_pos_channels"};
    static const std::set<std::string> flow_keys = {"height", "width", "num_dots", "max_shift",
                                                    "fourier_bands", "patch", "concat_frames"};
    static const std::set<std::string> classify_keys = {"num_classes", "rows", "channels", "noise",
                                                        "train_examples"};
    static const std::set<std::string> multitask_keys = {"tasks", "string_length", "variant",
                                                         "input_embed_channels", "input_pos_channels"};
    static const std::set<std::string> multimodal_keys = {
        "frames", "height", "width", "num_classes", "audio_samples", "audio_patch", "video_patch",
        "label_mask_prob", "video_bands", "audio_bands", "subsample_video", "subsample_audio",
        "video_weight", "audio_weight", "label_weight", "label_query_channels"};

    std::set<std::string> allowed;
    if (task == "toy-mlm") allowed = mlm_keys;
    else if (task == "toy-flow") allowed = flow_keys;
    else if (task == "toy-classify") allowed = classify_keys;
    else if (task == "multitask-toy") allowed = multitask_keys;
    else if (task == "toy-multimodal-autoencode") allowed = multimodal_keys;
    else if (task == "flops-report") allowed = {};
    check_keys(j, path, allowed);

    DataConfig d;
    d.crop_length = get_size(j, path, "crop_length", d.crop_length);
    d.vocab_words = get_size(j, path, "vocab_words", d.vocab_words);
    d.sentence_words = get_size(j, path, "sentence_words", d.sentence_words);
    d.corpus_bytes = get_size(j, path, "corpus_bytes", d.corpus_bytes);
    d.mask_prob = get_number(j, path, "mask_prob", d.mask_prob);
    d.align_crops = get_bool(j, path, "align_crops", d.align_crops);
    d.corpus_path = get_string(j, path, "corpus_path", d.corpus_path);
    d.concat_documents = get_size(j, path, "concat_documents", d.concat_documents);
    d.input_embed_channels = get_size(j, path, "input_embed_channels", d.input_embed_channels);
    d.input_pos_channels = get_size(j, path, "input_pos_channels", d.input_pos_channels);
    d.height = get_size(j, path, "height", d.height);
    d.width = get_size(j, path, "width", d.width);
    d.num_dots = get_size(j, path, "num_dots", d.num_dots);
    d.max_shift = get_size(j, path, "max_shift", d.max_shift);
    d.fourier_bands = get_size(j, path, "fourier_bands", d.fourier_bands);
    d.patch = get_size(j, path, "patch", d.patch);
    d.concat_frames = get_bool(j, path, "concat_frames", d.concat_frames);
    d.num_classes = get_size(j, path, "num_classes", d.num_classes);
    d.rows = get_size(j, path, "rows", d.rows);
    d.channels = get_size(j, path, "channels", d.channels);
    d.noise = get_number(j, path, "noise", d.noise);
    d.train_examples = get_size(j, path, "train_examples", d.train_examples);
    if (j.contains("tasks")) {
        if (!j["tasks"].is_array()) fail(path + ".tasks", "expected an array of task names");
        d.tasks.clear();
        for (const auto& t : j["tasks"]) {
            if (!t.is_string()) fail(path + ".tasks", "expected strings");
            d.tasks.push_back(t.get<std::string>());
        }
    }
    d.string_length = get_size(j, path, "string_length", d.string_length);
    d.variant = get_string(j, path, "variant", d.variant);
    d.frames = get_size(j, path, "frames", d.frames);
    d.audio_samples = get_size(j, path, "audio_samples", d.audio_samples);
    d.audio_patch = get_size(j, path, "audio_patch", d.audio_patch);
    d.video_patch = get_size(j, path, "video_patch", d.video_patch);
    d.label_mask_prob = get_number(j, path, "label_mask_prob", d.label_mask_prob);
    d.video_bands = get_size(j, path, "video_bands", d.video_bands);
    d.audio_bands = get_size(j, path, "audio_bands", d.audio_bands);
    d.subsample_video = get_size(j, path, "subsample_video", d.subsample_video);
    d.subsample_audio = get_size(j, path, "subsample_audio", d.subsample_audio);
    d.video_weight = get_number(j, path, "video_weight", d.video_weight);
    d.audio_weight = get_number(j, path, "audio_weight", d.audio_weight);
    d.label_weight = get_number(j, path, "label_weight", d.label_weight);
    d.label_query_channels = get_size(j, path, "label_query_channels", d.label_query_channels);
    return d;
}

}  // namespace

ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    check_keys(j, "$", {"task", "seed", "out_dir", "model", "data", "train", "flops_preset", "flops_spec"});
    ExperimentConfig c;
    c.task = get_string(j, "$", "task", "");
    static const std::set<std::string> tasks = {"toy-mlm",        "toy-flow",      "toy-multimodal-autoencode",
                                                "toy-classify",   "multitask-toy", "flops-report"};
    if (!tasks.count(c.task)) {
        fail("$.task", "expected one of toy-mlm, toy-flow, toy-multimodal-autoencode, toy-classify, "
                       "multitask-toy, flops-report");
    }
    c.seed = get_size(j, "$", "seed", 1);
    c.out_dir = get_string(j, "$", "out_dir", c.out_dir);
    if (j.contains("model")) c.model = parse_model(j["model"], "$.model");
    c.data = parse_data(j.contains("data") ? j["data"] : nlohmann::json::object(), "$.data", c.task);
    if (j.contains("train")) c.train = parse_train(j["train"], "$.train");
    c.flops_preset = get_string(j, "$", "flops_preset", "");
    if (j.contains("flops_spec")) c.flops_spec = j["flops_spec"];
    if (c.task == "flops-report" && c.flops_preset.empty() && c.flops_spec.is_null()) {
        fail("$.flops_preset", "flops-report needs a preset name or an inline flops_spec");
    }
    return c;
}

ExperimentConfig parse_experiment_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
    }
    return parse_experiment_config(j);
}

nlohmann::json experiment_config_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["task"] = c.task;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    nlohmann::json m;
    m["input_channels"] = c.model.input_channels;
    m["num_latents"] = c.model.num_latents;
    m["latent_channels"] = c.model.latent_channels;
    m["num_blocks"] = c.model.num_blocks;
    m["layers_per_block"] = c.model.layers_per_block;
    m["share_weights_across_blocks"] = c.model.share_weights_across_blocks;
    m["num_heads"] = c.model.num_heads;
    m["qk_channels"] = c.model.qk_channels;
    m["v_channels"] = c.model.v_channels;
    m["mlp_hidden_ratio"] = c.model.mlp_hidden_ratio;
    m["decoder_query_channels"] = c.model.decoder_query_channels;
    m["decoder_channels"] = c.model.decoder_channels;
    m["output_channels"] = c.model.output_channels;
    m["decoder_query_residual"] = c.model.decoder_query_residual;
    m["decoder_kind"] = c.model.decoder_kind;
    m["dropout"] = c.model.dropout;
    j["model"] = m;
    nlohmann::json d;
    if (c.task == "toy-mlm") {
        d["crop_length"] = c.data.crop_length;
        d["vocab_words"] = c.data.vocab_words;
        d["sentence_words"] = c.data.sentence_words;
        d["corpus_bytes"] = c.data.corpus_bytes;
        d["mask_prob"] = c.data.mask_prob;
        d["align_crops"] = c.data.align_crops;
        d["corpus_path"] = c.data.corpus_path;
        d["concat_documents"] = c.data.concat_documents;
        d["input_embed_channels"] = c.data.input_embed_channels;
        d["input_pos_channels"] = c.data.input_pos_channels;
    } else if (c.task == "toy-flow") {
        d["height"] = c.data.height;
        d["width"] = c.data.width;
        d["num_dots"] = c.data.num_dots;
        d["max_shift"] = c.data.max_shift;
        d["fourier_bands"] = c.data.fourier_bands;
        d["patch"] = c.data.patch;
        d["concat_frames"] = c.data.concat_frames;
    } else if (c.task == "toy-classify") {
        d["num_classes"] = c.data.num_classes;
        d["rows"] = c.data.rows;
        d["channels"] = c.data.channels;
        d["noise"] = c.data.noise;
        d["train_examples"] = c.data.train_examples;
    } else if (c.task == "multitask-toy") {
        d["tasks"] = c.data.tasks;
        d["string_length"] = c.data.string_length;
        d["variant"] = c.data.variant;
        d["input_embed_channels"] = c.data.input_embed_channels;
        d["input_pos_channels"] = c.data.input_pos_channels;
    } else if (c.task == "toy-multimodal-autoencode") {
        d["frames"] = c.data.frames;
        d["height"] = c.data.height;
        d["width"] = c.data.width;
        d["num_classes"] = c.data.num_classes;
        d["audio_samples"] = c.data.audio_samples;
        d["audio_patch"] = c.data.audio_patch;
        d["video_patch"] = c.data.video_patch;
        d["label_mask_prob"] = c.data.label_mask_prob;
        d["video_bands"] = c.data.video_bands;
        d["audio_bands"] = c.data.audio_bands;
        d["subsample_video"] = c.data.subsample_video;
        d["subsample_audio"] = c.data.subsample_audio;
        d["video_weight"] = c.data.video_weight;
        d["audio_weight"] = c.data.audio_weight;
        d["label_weight"] = c.data.label_weight;
        d["label_query_channels"] = c.data.label_query_channels;
    }
    j["data"] = d;
    nlohmann::json t;
    t["steps"] = c.train.steps;
    t["batch_size"] = c.train.batch_size;
    t["optimizer"] = {{"lr", c.train.optimizer.lr},
                      {"weight_decay", c.train.optimizer.weight_decay},
                      {"beta1", c.train.optimizer.beta1},
                      {"beta2", c.train.optimizer.beta2},
                      {"eps", c.train.optimizer.eps},
                      {"grad_clip", c.train.optimizer.grad_clip}};
    t["schedule"] = {{"kind", c.train.schedule.kind},
                     {"warmup_steps", c.train.schedule.warmup_steps},
                     {"total_steps", c.train.schedule.total_steps}};
    t["query_subsample"] = c.train.query_subsample;
    t["eval_every"] = c.train.eval_every;
    t["eval_examples"] = c.train.eval_examples;
    t["log_every"] = c.train.log_every;
    j["train"] = t;
    if (c.task == "flops-report") {
        j["flops_preset"] = c.flops_preset;
        if (!c.flops_spec.is_null()) j["flops_spec"] = c.flops_spec;
    }
    return j;
}

PerceiverConfig to_perceiver_config(const ModelConfig& m) {
    PerceiverConfig p;
    p.input_channels = m.input_channels;
    p.num_latents = m.num_latents;
    p.latent_channels = m.latent_channels;
    p.num_blocks = m.num_blocks;
    p.layers_per_block = m.layers_per_block;
    p.share_weights_across_blocks = m.share_weights_across_blocks;
    AttentionConfig a;
    a.num_heads = m.num_heads;
    a.qk_channels = m.qk_channels;
    a.v_channels = m.v_channels;
    a.mlp_hidden_ratio = m.mlp_hidden_ratio;
    a.dropout_rate = m.dropout;
    p.encoder = a;
    p.processor = a;
    p.decoder = a;
    p.decoder.use_query_residual = m.decoder_query_residual;
    p.decoder.output_channels = m.decoder_channels;
    p.decoder_query_channels = m.decoder_query_channels ? m.decoder_query_channels : m.latent_channels;
    p.output_channels = m.output_channels;
    p.decoder_kind = m.decoder_kind == "attention" ? DecoderKind::Attention : DecoderKind::AverageProject;
    return p;
}

PerceiverFlopsSpec parse_flops_spec(const nlohmann::json& j) {
    check_keys(j, "$", {"kind", "input_size", "output_size", "model", "extra_param_tables"});
    const std::string kind = get_string(j, "$", "kind", "perceiver-io");
    if (kind != "perceiver-io") {
        throw std::invalid_argument("config: $.kind: only 'perceiver-io' specs are accepted here; "
                                    "transformer costing is preset-driven");
    }
    PerceiverFlopsSpec spec;
    spec.input_size = get_size(j, "$", "input_size", 0);
    spec.output_size = get_size(j, "$", "output_size", 0);
    ModelConfig m = j.contains("model") ? parse_model(j["model"], "$.model") : ModelConfig{};
    spec.model = to_perceiver_config(m);
    if (j.contains("extra_param_tables")) {
        if (!j["extra_param_tables"].is_object()) {
            throw std::invalid_argument("config: $.extra_param_tables: expected an object of name -> count");
        }
        for (const auto& [name, count] : j["extra_param_tables"].items()) {
            spec.extra_param_tables.emplace_back(name, count.get<std::uint64_t>());
        }
    }
    return spec;
}

std::uint64_t fnv1a_hash(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace pio
