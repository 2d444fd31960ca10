#include "pio/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pio {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'C', 'V'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return value;
}

std::size_t dtype_size(CheckpointDtype d) { return d == CheckpointDtype::f64 ? 8 : 4; }

}  // namespace

std::size_t ManifestEntry::element_count() const {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

void save_checkpoint(const std::string& path, const std::vector<Parameter*>& params,
                     CheckpointDtype dtype) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_raw<std::uint32_t>(out, kVersion);
    write_raw<std::uint64_t>(out, params.size());
    std::uint64_t offset = 0;
    for (const Parameter* p : params) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
        out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        write_raw<std::uint8_t>(out, static_cast<std::uint8_t>(dtype));
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
        for (std::size_t e : p->value.shape()) write_raw<std::uint64_t>(out, e);
        write_raw<std::uint64_t>(out, offset);
        offset += p->value.size() * dtype_size(dtype);
    }
    for (const Parameter* p : params) {
        if (dtype == CheckpointDtype::f64) {
            out.write(reinterpret_cast<const char*>(p->value.data()),
                      static_cast<std::streamsize>(p->value.size() * 8));
        } else {
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                write_raw<float>(out, static_cast<float>(p->value[i]));
            }
        }
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

namespace {

std::vector<ManifestEntry> read_manifest_stream(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("checkpoint: bad magic, not a PRCV container");
    }
    const auto version = read_raw<std::uint32_t>(in);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto count = read_raw<std::uint64_t>(in);
    std::vector<ManifestEntry> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        ManifestEntry e;
        const auto name_len = read_raw<std::uint32_t>(in);
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        const auto dtype = read_raw<std::uint8_t>(in);
        if (dtype > 1) throw std::runtime_error("checkpoint: unknown dtype " + std::to_string(dtype));
        e.dtype = static_cast<CheckpointDtype>(dtype);
        const auto ndim = read_raw<std::uint32_t>(in);
        for (std::uint32_t d = 0; d < ndim; ++d) {
            e.shape.push_back(static_cast<std::size_t>(read_raw<std::uint64_t>(in)));
        }
        e.offset = read_raw<std::uint64_t>(in);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    return read_manifest_stream(in);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
    auto entries = read_manifest_stream(in);
    const std::streampos payload_start = in.tellg();
    std::map<std::string, Tensor> out;
    for (const ManifestEntry& e : entries) {
        in.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        Tensor t(e.shape);
        if (e.dtype == CheckpointDtype::f64) {
            in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
        } else {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(read_raw<float>(in));
        }
        if (!in) throw std::runtime_error("checkpoint: truncated payload for '" + e.name + "'");
        out.emplace(e.name, std::move(t));
    }
    return out;
}

void load_parameters(const std::string& path, const std::vector<Parameter*>& params) {
    auto tensors = load_checkpoint(path);
    for (Parameter* p : params) {
        auto it = tensors.find(p->name);
        if (it == tensors.end()) {
            throw std::runtime_error("checkpoint: parameter '" + p->name + "' missing from " + path);
        }
        if (it->second.shape() != p->value.shape()) {
            throw std::runtime_error("checkpoint: parameter '" + p->name + "' has shape " +
                                     it->second.shape_str() + ", expected " + p->value.shape_str());
        }
        p->value = it->second;
    }
}

}  // namespace pio
