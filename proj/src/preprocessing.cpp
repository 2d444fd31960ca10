#include "pio/preprocessing.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pio {

namespace {
bool is_space_byte(unsigned char b) { return b == ' ' || b == '\n' || b == '\t' || b == '\r'; }
}

MaskedBatch mask_words(std::span<const unsigned char> text, double mask_prob, Rng& rng,
                       std::size_t pad_to) {
    if (mask_prob < 0.0 || mask_prob > 1.0) throw std::invalid_argument("mask_words: mask_prob must be in [0, 1]");
    MaskedBatch batch;
    const std::size_t n = std::max(text.size(), pad_to);
    batch.input_ids.assign(n, ByteVocab::pad);
    batch.target_ids.assign(n, ByteVocab::pad);
    batch.masked.assign(n, 0);

    std::size_t i = 0;
    while (i < text.size()) {
        if (is_space_byte(text[i])) {
            batch.input_ids[i] = text[i];
            batch.target_ids[i] = text[i];
            ++i;
            continue;
        }
        std::size_t end = i;
        while (end < text.size() && !is_space_byte(text[end])) ++end;
        const bool mask_word = rng.bernoulli(mask_prob);
        for (std::size_t j = i; j < end; ++j) {
            batch.target_ids[j] = text[j];
            if (mask_word) {
                batch.input_ids[j] = ByteVocab::mask;
                batch.masked[j] = 1;
            } else {
                batch.input_ids[j] = text[j];
            }
        }
        i = end;
    }
    return batch;
}

TextCorpus TextCorpus::from_documents(const std::vector<std::string>& documents,
                                      std::size_t concat_documents) {
    if (concat_documents == 0) concat_documents = 1;
    TextCorpus corpus;
    std::size_t in_group = 0;
    for (const std::string& doc : documents) {
        if (doc.empty()) continue;
        for (char c : doc) corpus.text_.push_back(static_cast<unsigned char>(c));
        if (++in_group == concat_documents) {
            corpus.text_.push_back('\n');
            in_group = 0;
        } else {
            corpus.text_.push_back(' ');
        }
    }
    if (corpus.text_.empty()) throw std::invalid_argument("corpus: no document text");
    corpus.period_ = 1;
    return corpus;
}

TextCorpus TextCorpus::from_file(const std::string& path, std::size_t concat_documents) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    std::vector<std::string> documents;
    std::string line, current;
    while (std::getline(in, line)) {
        if (line.empty()) {
            if (!current.empty()) documents.push_back(current);
            current.clear();
        } else {
            if (!current.empty()) current += ' ';
            current += line;
        }
    }
    if (!current.empty()) documents.push_back(current);
    if (documents.empty()) throw std::runtime_error("corpus: no documents in " + path);
    return from_documents(documents, concat_documents);
}

TextCorpus TextCorpus::synthetic_periodic(std::size_t vocab_words, std::size_t sentence_words,
                                          std::size_t total_bytes) {
    if (vocab_words == 0 || vocab_words > 26 || sentence_words == 0) {
        throw std::invalid_argument("synthetic_periodic: need 1..26 vocab words and >= 1 sentence words");
    }
    // Word i is the three bytes {'a'+i, 'a'+i, 'z'-i}; every byte position in
    // the sentence then has a stable identity.
    std::string sentence;
    for (std::size_t w = 0; w < sentence_words; ++w) {
        const std::size_t v = w % vocab_words;
        sentence += static_cast<char>('a' + v);
        sentence += static_cast<char>('a' + v);
        sentence += static_cast<char>('z' - v);
        sentence += ' ';
    }
    TextCorpus corpus;
    corpus.period_ = sentence.size();
    corpus.text_.reserve(total_bytes + sentence.size());
    while (corpus.text_.size() < total_bytes) {
        for (char c : sentence) corpus.text_.push_back(static_cast<unsigned char>(c));
    }
    corpus.text_.resize(std::max<std::size_t>(total_bytes, 1));
    return corpus;
}

std::vector<unsigned char> TextCorpus::crop(std::size_t length, Rng& rng, std::size_t align) const {
    if (length == 0) throw std::invalid_argument("crop: length must be >= 1");
    if (align == 0) align = 1;
    if (length >= text_.size()) {
        std::vector<unsigned char> out = text_;
        out.resize(length, ' ');
        return out;
    }
    const std::size_t max_offset = text_.size() - length;
    std::size_t offset = rng.uniform_index(max_offset + 1);
    offset -= offset % align;
    return std::vector<unsigned char>(text_.begin() + static_cast<std::ptrdiff_t>(offset),
                                      text_.begin() + static_cast<std::ptrdiff_t>(offset + length));
}

namespace {

void check_frame(const Tensor& frame, const char* which) {
    if (frame.rank() != 3 || frame.shape()[2] != 3) {
        throw std::invalid_argument(std::string("extract_flow_patches: ") + which + " must be [H x W x 3], got " +
                                    frame.shape_str());
    }
}

double frame_at(const Tensor& frame, std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) {
    const auto h = static_cast<std::ptrdiff_t>(frame.shape()[0]);
    const auto w = static_cast<std::ptrdiff_t>(frame.shape()[1]);
    y = std::clamp<std::ptrdiff_t>(y, 0, h - 1);  // replicate padding
    x = std::clamp<std::ptrdiff_t>(x, 0, w - 1);
    return frame[(static_cast<std::size_t>(y) * frame.shape()[1] + static_cast<std::size_t>(x)) * 3 + c];
}

}  // namespace

FlowPatches extract_flow_patches(const Tensor& frame1, const Tensor& frame2, std::size_t patch,
                                 bool concat_frames) {
    check_frame(frame1, "frame1");
    check_frame(frame2, "frame2");
    if (!frame1.same_shape(frame2)) {
        throw std::invalid_argument("extract_flow_patches: frame shapes differ, " + frame1.shape_str() +
                                    " vs " + frame2.shape_str());
    }
    if (patch == 0 || patch % 2 == 0) throw std::invalid_argument("extract_flow_patches: patch must be odd");
    const std::size_t h = frame1.shape()[0], w = frame1.shape()[1];
    const std::size_t per_frame = patch * patch * 3;
    const auto r = static_cast<std::ptrdiff_t>(patch / 2);

    FlowPatches out;
    const std::size_t n = h * w;
    if (concat_frames) {
        out.features = Tensor({n, 2 * per_frame});
        out.positions = Tensor({n, 2});
    } else {
        out.features = Tensor({2 * n, per_frame});
        out.positions = Tensor({2 * n, 3});
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t pixel = y * w + x;
            for (std::size_t t = 0; t < 2; ++t) {
                const Tensor& frame = t == 0 ? frame1 : frame2;
                const std::size_t row = concat_frames ? pixel : t * n + pixel;
                const std::size_t base = concat_frames ? t * per_frame : 0;
                std::size_t k = 0;
                for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
                    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                        for (std::size_t c = 0; c < 3; ++c, ++k) {
                            out.features.at(row, base + k) =
                                frame_at(frame, static_cast<std::ptrdiff_t>(y) + dy,
                                         static_cast<std::ptrdiff_t>(x) + dx, c);
                        }
                    }
                }
                if (concat_frames) {
                    out.positions.at(row, 0) = static_cast<double>(y);
                    out.positions.at(row, 1) = static_cast<double>(x);
                } else {
                    out.positions.at(row, 0) = static_cast<double>(t);
                    out.positions.at(row, 1) = static_cast<double>(y);
                    out.positions.at(row, 2) = static_cast<double>(x);
                }
            }
        }
    }
    return out;
}

Patched patch_video(const Tensor& video, std::size_t patch) {
    if (video.rank() != 4) {
        throw std::invalid_argument("patch_video: expected [T x H x W x C], got " + video.shape_str());
    }
    if (patch == 0) throw std::invalid_argument("patch_video: patch must be >= 1");
    const std::size_t t = video.shape()[0], h = video.shape()[1], w = video.shape()[2], c = video.shape()[3];
    const std::size_t hp = (h + patch - 1) / patch * patch;
    const std::size_t wp = (w + patch - 1) / patch * patch;
    const std::size_t gy = hp / patch, gx = wp / patch;

    Patched out;
    out.grid.source = {t, h, w, c};
    out.grid.padded = {t, hp, wp, c};
    out.grid.patch = {1, patch, patch};
    out.grid.num_patches = t * gy * gx;
    out.grid.patch_channels = patch * patch * c;
    out.rows = Tensor({out.grid.num_patches, out.grid.patch_channels});
    out.valid.assign(out.rows.size(), 0);

    std::size_t row = 0;
    for (std::size_t ti = 0; ti < t; ++ti) {
        for (std::size_t py = 0; py < gy; ++py) {
            for (std::size_t px = 0; px < gx; ++px, ++row) {
                std::size_t k = 0;
                for (std::size_t dy = 0; dy < patch; ++dy) {
                    for (std::size_t dx = 0; dx < patch; ++dx) {
                        const std::size_t y = py * patch + dy, x = px * patch + dx;
                        for (std::size_t ci = 0; ci < c; ++ci, ++k) {
                            if (y < h && x < w) {
                                out.rows.at(row, k) = video[((ti * h + y) * w + x) * c + ci];
                                out.valid[row * out.grid.patch_channels + k] = 1;
                            }
                        }
                    }
                }
            }
        }
    }
    return out;
}

Tensor unpatch_video(const Tensor& rows, const PatchGrid& grid) {
    if (grid.source.size() != 4) throw std::invalid_argument("unpatch_video: grid is not a video grid");
    const std::size_t t = grid.source[0], h = grid.source[1], w = grid.source[2], c = grid.source[3];
    const std::size_t patch = grid.patch[1];
    const std::size_t gy = grid.padded[1] / patch, gx = grid.padded[2] / patch;
    if (rows.rows() != grid.num_patches || rows.cols() != grid.patch_channels) {
        throw std::invalid_argument("unpatch_video: rows " + rows.shape_str() + " do not match grid");
    }
    Tensor video({t, h, w, c});
    std::size_t row = 0;
    for (std::size_t ti = 0; ti < t; ++ti) {
        for (std::size_t py = 0; py < gy; ++py) {
            for (std::size_t px = 0; px < gx; ++px, ++row) {
                std::size_t k = 0;
                for (std::size_t dy = 0; dy < patch; ++dy) {
                    for (std::size_t dx = 0; dx < patch; ++dx) {
                        const std::size_t y = py * patch + dy, x = px * patch + dx;
                        for (std::size_t ci = 0; ci < c; ++ci, ++k) {
                            if (y < h && x < w) video[((ti * h + y) * w + x) * c + ci] = rows.at(row, k);
                        }
                    }
                }
            }
        }
    }
    return video;
}

Patched patch_audio(const Tensor& samples, std::size_t patch) {
    if (samples.rank() != 1) {
        throw std::invalid_argument("patch_audio: expected [S], got " + samples.shape_str());
    }
    if (patch == 0) throw std::invalid_argument("patch_audio: patch must be >= 1");
    const std::size_t s = samples.shape()[0];
    const std::size_t padded = (s + patch - 1) / patch * patch;
    Patched out;
    out.grid.source = {s};
    out.grid.padded = {padded};
    out.grid.patch = {patch};
    out.grid.num_patches = padded / patch;
    out.grid.patch_channels = patch;
    out.rows = Tensor({out.grid.num_patches, patch});
    out.valid.assign(out.rows.size(), 0);
    for (std::size_t i = 0; i < s; ++i) {
        out.rows.at(i / patch, i % patch) = samples[i];
        out.valid[i] = 1;
    }
    return out;
}

Tensor unpatch_audio(const Tensor& rows, const PatchGrid& grid) {
    if (grid.source.size() != 1) throw std::invalid_argument("unpatch_audio: grid is not an audio grid");
    const std::size_t s = grid.source[0];
    if (rows.rows() != grid.num_patches || rows.cols() != grid.patch_channels) {
        throw std::invalid_argument("unpatch_audio: rows " + rows.shape_str() + " do not match grid");
    }
    Tensor samples({s});
    for (std::size_t i = 0; i < s; ++i) samples[i] = rows.at(i / grid.patch_channels, i % grid.patch_channels);
    return samples;
}

Serialized serialize_multimodal(const std::vector<Tensor>& modalities) {
    if (modalities.empty()) throw std::invalid_argument("serialize_multimodal: no modalities");
    const std::size_t width = modalities[0].cols();
    std::size_t total = 0;
    for (const Tensor& m : modalities) {
        if (m.cols() != width) {
            throw std::invalid_argument("serialize_multimodal: width mismatch, " + m.shape_str() +
                                        " vs expected " + std::to_string(width) + " channels");
        }
        total += m.rows();
    }
    Serialized out;
    out.array = Tensor({total, width});
    std::size_t row = 0;
    for (const Tensor& m : modalities) {
        std::copy(m.data(), m.data() + m.size(), out.array.data() + row * width);
        out.ranges.push_back({row, row + m.rows()});
        row += m.rows();
    }
    return out;
}

std::vector<Tensor> deserialize_multimodal(const Tensor& array, const std::vector<IndexRange>& ranges) {
    std::vector<Tensor> out;
    const std::size_t width = array.cols();
    for (const IndexRange& r : ranges) {
        if (r.end <= r.begin || r.end > array.rows()) {
            throw std::invalid_argument("deserialize_multimodal: bad range [" + std::to_string(r.begin) +
                                        ", " + std::to_string(r.end) + ")");
        }
        Tensor part({r.end - r.begin, width});
        std::copy(array.data() + r.begin * width, array.data() + r.end * width, part.data());
        out.push_back(std::move(part));
    }
    return out;
}

}  // namespace pio
