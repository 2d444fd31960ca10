#pragma once

#include <map>
#include <string>
#include <vector>

#include "pio/autodiff.hpp"
#include "pio/tensor.hpp"

namespace pio {

// Container layout: 4-byte magic "PRCV", u32 version, u64 entry count, then
// per entry (u32 name length, name bytes, u8 dtype, u32 ndim, u64 dims...,
// u64 byte offset into the payload region), then raw little-endian payloads.
// f64 round trips are bit-exact; f32 is a storage-only mode.
enum class CheckpointDtype : std::uint8_t { f64 = 0, f32 = 1 };

struct ManifestEntry {
    std::string name;
    CheckpointDtype dtype = CheckpointDtype::f64;
    std::vector<std::size_t> shape;
    std::uint64_t offset = 0;

    std::size_t element_count() const;
};

void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params,
                     CheckpointDtype dtype = CheckpointDtype::f64);
std::vector<ManifestEntry> read_manifest(const std::string& path);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);
// Loads by name into existing parameters; every parameter must be present
// with a matching shape.
void load_parameters(const std::string& path, const std::vector<Parameter*>& params);

}  // namespace pio
