#ifndef PICOSAM_CHECKPOINT_HPP
#define PICOSAM_CHECKPOINT_HPP

#include <filesystem>
#include <map>
#include <string>

#include "io.hpp"
#include "model.hpp"

namespace picosam {

// "PCKP" | u8 version | config block | u32 record count |
// records: u32 name length, name bytes, embedded PTSR tensor.
inline constexpr std::uint8_t checkpoint_version = 1;

inline Bytes checkpoint_bytes(Model<float>& model) {
    ByteWriter w;
    w.raw("PCKP");
    w.u8(checkpoint_version);
    write_config_block(w, model.config());
    const auto params = model.params();
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
        w.u32(static_cast<std::uint32_t>(p->name.size()));
        w.raw(p->name);
        write_tensor(w, p->value);
    }
    return w.take();
}

inline Model<float> checkpoint_from_bytes(const Bytes& bytes, const std::string& source) {
    ByteReader r(bytes, source);
    r.expect_magic("PCKP");
    const auto version = r.u8();
    if (version != checkpoint_version)
        throw FormatError(source + ": unsupported checkpoint version " + std::to_string(version), 4);
    Model<float> model(read_config_block(r));
    std::map<std::string, Param<float>*> by_name;
    for (auto* p : model.params()) by_name[p->name] = p;

    const auto count_at = r.pos();
    const auto count = r.u32();
    if (count != by_name.size()) {
        throw FormatError(source + ": " + std::to_string(count) + " parameter records, model has " +
                              std::to_string(by_name.size()),
                          count_at);
    }
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto at = r.pos();
        const auto len = r.u32();
        const auto name = r.str(len);
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError(source + ": unknown or repeated parameter '" + name + "'", at);
        auto t = read_tensor<float>(r);
        if (t.shape() != it->second->value.shape()) {
            throw FormatError(source + ": parameter '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                                  shape_str(it->second->value.shape()),
                              at);
        }
        it->second->value = std::move(t);
        by_name.erase(it);
    }
    if (r.remaining() != 0) throw FormatError(source + ": trailing bytes after checkpoint", r.pos());
    return model;
}

inline void save_checkpoint(Model<float>& model, const std::filesystem::path& path) {
    write_file(path, checkpoint_bytes(model));
}

inline Model<float> load_checkpoint(const std::filesystem::path& path) {
    return checkpoint_from_bytes(read_file(path), path.string());
}

// Bytes taken by parameter values alone (4 per float parameter).
inline std::uint64_t float_payload_bytes(Model<float>& model) { return count_params(model) * sizeof(float); }

} // namespace picosam

#endif
