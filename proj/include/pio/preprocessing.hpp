#pragma once

#include <span>
#include <string>
#include <vector>

#include "pio/tensor.hpp"

namespace pio {

// 256 raw byte ids followed by the four specials.
struct ByteVocab {
    static constexpr std::size_t pad = 256;
    static constexpr std::size_t mask = 257;
    static constexpr std::size_t cls = 258;
    static constexpr std::size_t sep = 259;
    static constexpr std::size_t size = 260;
};

struct MaskedBatch {
    std::vector<std::size_t> input_ids;   // padded with ByteVocab::pad up to pad_to
    std::vector<std::size_t> target_ids;  // original bytes, aligned with input_ids
    std::vector<std::uint8_t> masked;     // 1 exactly at masked positions
};

// Whole space-delimited words are selected i.i.d. with mask_prob; every byte
// of a selected word becomes ByteVocab::mask. Targets are defined exactly at
// masked positions.
MaskedBatch mask_words(std::span<const unsigned char> text, double mask_prob, Rng& rng,
                       std::size_t pad_to = 0);

// Plain UTF-8 text corpus. Documents are blank-line separated; consecutive
// documents are concatenated in groups before cropping.
class TextCorpus {
public:
    static TextCorpus from_file(const std::string& path, std::size_t concat_documents = 10);
    static TextCorpus from_documents(const std::vector<std::string>& documents,
                                     std::size_t concat_documents = 10);
    // Deterministic corpus of repeating sentences over a small word list;
    // period() is the byte length of one sentence.
    static TextCorpus synthetic_periodic(std::size_t vocab_words, std::size_t sentence_words,
                                         std::size_t total_bytes);

    const std::vector<unsigned char>& text() const { return text_; }
    std::size_t period() const { return period_; }
    // Crop of `length` bytes at a random offset; offsets are rounded down to a
    // multiple of `align` (1 = byte-aligned).
    std::vector<unsigned char> crop(std::size_t length, Rng& rng, std::size_t align = 1) const;

private:
    std::vector<unsigned char> text_;
    std::size_t period_ = 0;
};

// Per-pixel patches from a frame pair [H x W x 3]. Concat mode stacks the two
// frames along channels before extraction (row = frame1 patch || frame2
// patch); separate mode emits one row per (frame, pixel) with a time
// coordinate in positions. Edges use replicate padding.
struct FlowPatches {
    Tensor features;   // [(H*W) x (p*p*6)] or [(2*H*W) x (p*p*3)]
    Tensor positions;  // [n x 2] (y, x) or [n x 3] (t, y, x)
};
FlowPatches extract_flow_patches(const Tensor& frame1, const Tensor& frame2, std::size_t patch = 3,
                                 bool concat_frames = true);

// Raster-order flattening of patches; zero-padded remainders are recorded in
// the validity mask, and unpatch is the exact inverse on valid regions.
struct PatchGrid {
    std::vector<std::size_t> source;   // original extents, channels last for video
    std::vector<std::size_t> padded;   // extents after zero padding
    std::vector<std::size_t> patch;    // patch extents
    std::size_t num_patches = 0;
    std::size_t patch_channels = 0;
};
struct Patched {
    Tensor rows;                  // [num_patches x patch_channels]
    std::vector<std::uint8_t> valid;  // per row-element, 1 where source data exists
    PatchGrid grid;
};

Patched patch_video(const Tensor& video, std::size_t patch);  // video [T x H x W x C], patch 1 x p x p
Patched patch_audio(const Tensor& samples, std::size_t patch);  // samples [S]
Tensor unpatch_video(const Tensor& rows, const PatchGrid& grid);
Tensor unpatch_audio(const Tensor& rows, const PatchGrid& grid);

// Concatenation along the index dimension with ranges for loss routing and
// exact de-serialization.
struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
};
struct Serialized {
    Tensor array;
    std::vector<IndexRange> ranges;
};
Serialized serialize_multimodal(const std::vector<Tensor>& modalities);
std::vector<Tensor> deserialize_multimodal(const Tensor& array, const std::vector<IndexRange>& ranges);

}  // namespace pio
