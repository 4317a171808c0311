#ifndef PICOSAM_IO_HPP
#define PICOSAM_IO_HPP

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "model_config.hpp"
#include "tensor.hpp"

namespace picosam {

using Bytes = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Little-endian byte streams
// ---------------------------------------------------------------------------

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void i8(std::int8_t v) { buf_.push_back(static_cast<std::uint8_t>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void raw(const Bytes& b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

    std::size_t size() const { return buf_.size(); }
    Bytes& bytes() { return buf_; }
    Bytes take() { return std::move(buf_); }

private:
    Bytes buf_;
};

class ByteReader {
public:
    ByteReader(const Bytes& b, std::string source) : data_(b.data()), size_(b.size()), source_(std::move(source)) {}
    ByteReader(const std::uint8_t* d, std::size_t n, std::string source) : data_(d), size_(n), source_(std::move(source)) {}

    std::uint8_t u8() { return *take(1); }
    std::int8_t i8() { return static_cast<std::int8_t>(*take(1)); }
    std::uint32_t u32() {
        const auto* p = take(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        const auto* p = take(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        const auto* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    void expect_magic(std::string_view magic) {
        const auto at = pos_;
        if (remaining() < magic.size() || str(magic.size()) != magic) {
            throw FormatError(source_ + ": bad magic, expected \"" + std::string(magic) + "\"", at);
        }
    }
    const std::uint8_t* take(std::size_t n) {
        if (n > remaining()) {
            throw FormatError(source_ + ": truncated, expected " + std::to_string(n) + " more bytes but only " +
                                  std::to_string(remaining()) + " remain",
                              pos_);
        }
        const auto* p = data_ + pos_;
        pos_ += n;
        return p;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }
    const std::string& source() const { return source_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
    std::string source_;
};

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const Bytes& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write to '" + path.string() + "' failed");
}

// ---------------------------------------------------------------------------
// PTSR tensor files
//   "PTSR" | u8 version=1 | u8 dtype | u8 rank | u8 0 | rank x u32 dims | payload
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t tensor_format_version = 1;

template <Element T>
void write_element(ByteWriter& w, T v) {
    if constexpr (std::is_same_v<T, float>) w.f32(v);
    else if constexpr (std::is_same_v<T, double>) w.f64(v);
    else if constexpr (std::is_same_v<T, std::int8_t>) w.i8(v);
    else w.i32(v);
}

template <Element T>
T read_element(ByteReader& r) {
    if constexpr (std::is_same_v<T, float>) return r.f32();
    else if constexpr (std::is_same_v<T, double>) return r.f64();
    else if constexpr (std::is_same_v<T, std::int8_t>) return r.i8();
    else return r.i32();
}

template <Element T>
void write_tensor(ByteWriter& w, const Tensor<T>& t) {
    if (t.rank() == 0) throw DomainError("tensor files require rank >= 1");
    if (t.rank() > 255) throw DomainError("tensor rank exceeds 255");
    w.raw("PTSR");
    w.u8(tensor_format_version);
    w.u8(static_cast<std::uint8_t>(Tensor<T>::dtype));
    w.u8(static_cast<std::uint8_t>(t.rank()));
    w.u8(0);
    for (auto d : t.shape()) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw DomainError("tensor dim exceeds u32");
        w.u32(static_cast<std::uint32_t>(d));
    }
    for (auto v : t.data()) write_element(w, v);
}

template <Element T>
Tensor<T> read_tensor(ByteReader& r) {
    const auto start = r.pos();
    r.expect_magic("PTSR");
    const auto version = r.u8();
    if (version != tensor_format_version)
        throw FormatError(r.source() + ": unsupported tensor version " + std::to_string(version), start + 4);
    const auto dtype_at = r.pos();
    const auto dtype = r.u8();
    if (dtype > 3) throw FormatError(r.source() + ": unknown dtype code " + std::to_string(dtype), dtype_at);
    if (static_cast<DType>(dtype) != Tensor<T>::dtype) {
        throw FormatError(r.source() + ": dtype mismatch, file holds " + dtype_name(static_cast<DType>(dtype)) +
                              " but " + dtype_name(Tensor<T>::dtype) + " was requested",
                          dtype_at);
    }
    const auto rank_at = r.pos();
    const auto rank = r.u8();
    if (rank == 0) throw FormatError(r.source() + ": rank-0 tensors are not supported", rank_at);
    if (r.u8() != 0) throw FormatError(r.source() + ": nonzero header padding", rank_at + 1);
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
        const auto at = r.pos();
        d = r.u32();
        if (d == 0) throw FormatError(r.source() + ": zero dimension", at);
        count *= d;
        if (count > r.remaining()) {
            throw FormatError(r.source() + ": dims overflow the file (" + std::to_string(count) + "+ elements)", at);
        }
    }
    const std::uint64_t need = count * sizeof(T);
    if (need > r.remaining()) {
        throw FormatError(r.source() + ": truncated payload, expected " + std::to_string(need) + " bytes, got " +
                              std::to_string(r.remaining()),
                          r.pos());
    }
    std::vector<T> data(count);
    for (auto& v : data) v = read_element<T>(r);
    return Tensor<T>(std::move(shape), std::move(data));
}

template <Element T>
void save_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
    ByteWriter w;
    write_tensor(w, t);
    write_file(path, w.bytes());
}

template <Element T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    ByteReader r(bytes, path.string());
    auto t = read_tensor<T>(r);
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after tensor payload", r.pos());
    return t;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6) / PGM (P5), maxval 255
// ---------------------------------------------------------------------------

namespace detail {

struct PnmHeader {
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
    std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const Bytes& b, const std::string& src) {
    std::size_t pos = 0;
    auto skip_ws_and_comments = [&] {
        while (pos < b.size()) {
            if (b[pos] == '#') {
                while (pos < b.size() && b[pos] != '\n' && b[pos] != '\r') ++pos;
            } else if (std::isspace(b[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto token = [&]() -> std::string {
        skip_ws_and_comments();
        std::string t;
        while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') t.push_back(static_cast<char>(b[pos++]));
        if (t.empty()) throw FormatError(src + ": truncated PNM header", pos);
        return t;
    };
    auto number = [&](const char* what) -> std::size_t {
        const auto at = pos;
        const auto t = token();
        std::size_t v = 0;
        for (char c : t) {
            if (!std::isdigit(static_cast<unsigned char>(c)))
                throw FormatError(src + ": bad " + std::string(what) + " '" + t + "'", at);
            v = v * 10 + static_cast<std::size_t>(c - '0');
            if (v > (1u << 24)) throw FormatError(src + ": " + std::string(what) + " too large", at);
        }
        return v;
    };
    PnmHeader h;
    if (b.size() < 2) throw FormatError(src + ": too short for a PNM header", 0);
    h.magic = std::string{static_cast<char>(b[0]), static_cast<char>(b[1])};
    pos = 2;
    if (h.magic == "P3" || h.magic == "P2")
        throw FormatError(src + ": ASCII PNM (" + h.magic + ") is not supported, use binary P6/P5", 0);
    h.width = number("width");
    h.height = number("height");
    h.maxval = number("maxval");
    if (h.width == 0 || h.height == 0) throw FormatError(src + ": zero image dimension", pos);
    if (h.maxval != 255) throw FormatError(src + ": maxval " + std::to_string(h.maxval) + " unsupported (need 255)", pos);
    if (pos >= b.size() || !std::isspace(b[pos])) throw FormatError(src + ": missing whitespace after maxval", pos);
    h.data_offset = pos + 1;
    return h;
}

inline PnmHeader read_pnm(const Bytes& b, const std::string& src, const char* magic, std::size_t channels) {
    auto h = parse_pnm_header(b, src);
    if (h.magic != magic) throw FormatError(src + ": expected " + std::string(magic) + ", found " + h.magic, 0);
    const std::size_t need = h.width * h.height * channels;
    if (b.size() - h.data_offset < need) {
        throw FormatError(src + ": truncated raster, expected " + std::to_string(need) + " bytes, got " +
                              std::to_string(b.size() - h.data_offset),
                          h.data_offset);
    }
    return h;
}

} // namespace detail

// P6 -> float tensor [1,3,H,W] in [0,1].
inline Tensor<float> decode_ppm(const Bytes& b, const std::string& src) {
    const auto h = detail::read_pnm(b, src, "P6", 3);
    Tensor<float> t({1, 3, h.height, h.width});
    const auto* p = b.data() + h.data_offset;
    for (std::size_t y = 0; y < h.height; ++y)
        for (std::size_t x = 0; x < h.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                t.at(0, c, y, x) = static_cast<float>(p[(y * h.width + x) * 3 + c]) / 255.0f;
    return t;
}

// P5 with values {0,255} -> binary mask [1,1,H,W].
inline Tensor<float> decode_pgm_mask(const Bytes& b, const std::string& src) {
    const auto h = detail::read_pnm(b, src, "P5", 1);
    Tensor<float> t({1, 1, h.height, h.width});
    const auto* p = b.data() + h.data_offset;
    for (std::size_t i = 0; i < h.width * h.height; ++i) {
        if (p[i] != 0 && p[i] != 255)
            throw FormatError(src + ": mask value " + std::to_string(p[i]) + " is not 0 or 255", h.data_offset + i);
        t[i] = p[i] ? 1.0f : 0.0f;
    }
    return t;
}

inline Tensor<float> load_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }
inline Tensor<float> load_pgm(const std::filesystem::path& path) { return decode_pgm_mask(read_file(path), path.string()); }

inline std::uint8_t to_byte(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline Bytes encode_ppm(const Tensor<float>& img) {
    require_rank(img.shape(), 4, "encode_ppm");
    if (img.dim(0) != 1 || img.dim(1) != 3) throw ShapeError("encode_ppm: expected 1x3xHxW, got " + shape_str(img.shape()));
    const auto h = img.dim(2), w = img.dim(3);
    ByteWriter out;
    out.raw("P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n");
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) out.u8(to_byte(img.at(0, c, y, x)));
    return out.take();
}

inline Bytes encode_pgm_mask(const Tensor<float>& mask) {
    require_rank(mask.shape(), 4, "encode_pgm_mask");
    if (mask.dim(0) != 1 || mask.dim(1) != 1) throw ShapeError("encode_pgm_mask: expected 1x1xHxW, got " + shape_str(mask.shape()));
    ByteWriter out;
    out.raw("P5\n" + std::to_string(mask.dim(3)) + " " + std::to_string(mask.dim(2)) + "\n255\n");
    for (auto v : mask.data()) out.u8(v > 0.5f ? 255 : 0);
    return out.take();
}

inline void save_ppm(const Tensor<float>& img, const std::filesystem::path& path) { write_file(path, encode_ppm(img)); }
inline void save_pgm(const Tensor<float>& mask, const std::filesystem::path& path) { write_file(path, encode_pgm_mask(mask)); }

// ---------------------------------------------------------------------------
// key = value files
// ---------------------------------------------------------------------------

class KeyValues {
public:
    static KeyValues parse(std::string_view text, const std::string& source) {
        KeyValues kv;
        kv.source_ = source;
        std::size_t line_no = 0;
        std::istringstream in{std::string(text)};
        std::string line;
        while (std::getline(in, line)) {
            ++line_no;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            const auto trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
            auto key = trim(trimmed.substr(0, eq));
            auto value = trim(trimmed.substr(eq + 1));
            if (key.empty()) throw ConfigError(source + ":" + std::to_string(line_no) + ": empty key");
            if (kv.values_.count(key)) throw ConfigError(source + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
            kv.values_[key] = value;
        }
        return kv;
    }

    static KeyValues load(const std::filesystem::path& path) {
        const auto bytes = read_file(path);
        return parse(std::string(bytes.begin(), bytes.end()), path.string());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& source() const { return source_; }
    const std::map<std::string, std::string>& values() const { return values_; }

    std::string get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError(source_ + ": missing key '" + key + "'");
        return it->second;
    }

    std::size_t get_size(const std::string& key) const { return parse_size(key, get(key)); }

    double get_double(const std::string& key) const {
        const auto v = get(key);
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return d;
        } catch (const std::exception&) {
            throw ConfigError(source_ + ": key '" + key + "' is not a number: '" + v + "'");
        }
    }

    std::vector<std::size_t> get_size_list(const std::string& key) const {
        std::vector<std::size_t> out;
        std::string item;
        std::istringstream in(get(key));
        while (std::getline(in, item, ',')) out.push_back(parse_size(key, trim(item)));
        return out;
    }

    bool get_bool(const std::string& key) const {
        const auto v = get(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError(source_ + ": key '" + key + "' is not a boolean: '" + v + "'");
    }

    // Rejects keys outside `allowed`.
    void require_known(const std::vector<std::string>& allowed) const {
        for (const auto& [k, v] : values_) {
            if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
                throw ConfigError(source_ + ": unknown key '" + k + "'");
        }
    }

private:
    static std::string trim(std::string_view s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return std::string(s.substr(a, b - a));
    }

    std::size_t parse_size(const std::string& key, const std::string& v) const {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
            throw ConfigError(source_ + ": key '" + key + "' needs a non-negative integer, got '" + v + "'");
        return static_cast<std::size_t>(std::stoull(v));
    }

    std::string source_;
    std::map<std::string, std::string> values_;
};

inline const std::vector<std::string>& model_config_keys() {
    static const std::vector<std::string> k{"input_size", "stage_channels", "blocks_per_stage", "head_channels",
                                            "kernel", "norm"};
    return k;
}

inline ModelConfig model_config_from(const KeyValues& kv) {
    ModelConfig c;
    c.input_size = kv.get_size("input_size");
    c.stage_channels = kv.get_size_list("stage_channels");
    c.blocks_per_stage = kv.get_size("blocks_per_stage");
    c.head_channels = kv.get_size("head_channels");
    if (kv.has("kernel")) c.kernel = kv.get_size("kernel");
    if (kv.has("norm")) c.norm = kv.get_bool("norm");
    c.validate();
    return c;
}

inline std::string model_config_text(const ModelConfig& c) {
    std::ostringstream os;
    os << "input_size = " << c.input_size << "\nstage_channels = ";
    for (std::size_t i = 0; i < c.stage_channels.size(); ++i) os << (i ? "," : "") << c.stage_channels[i];
    os << "\nblocks_per_stage = " << c.blocks_per_stage << "\nhead_channels = " << c.head_channels
       << "\nkernel = " << c.kernel << "\nnorm = " << (c.norm ? "true" : "false") << "\n";
    return os.str();
}

// Binary config block shared by checkpoints and quantized model files.
inline void write_config_block(ByteWriter& w, const ModelConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.input_size));
    w.u32(static_cast<std::uint32_t>(c.stage_channels.size()));
    for (auto ch : c.stage_channels) w.u32(static_cast<std::uint32_t>(ch));
    w.u32(static_cast<std::uint32_t>(c.blocks_per_stage));
    w.u32(static_cast<std::uint32_t>(c.head_channels));
    w.u32(static_cast<std::uint32_t>(c.kernel));
    w.u8(c.norm ? 1 : 0);
}

inline ModelConfig read_config_block(ByteReader& r) {
    const auto at = r.pos();
    ModelConfig c;
    c.input_size = r.u32();
    const auto stages = r.u32();
    if (stages > 64) throw FormatError(r.source() + ": implausible stage count " + std::to_string(stages), at + 4);
    c.stage_channels.resize(stages);
    for (auto& ch : c.stage_channels) ch = r.u32();
    c.blocks_per_stage = r.u32();
    c.head_channels = r.u32();
    c.kernel = r.u32();
    c.norm = r.u8() != 0;
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(r.source() + ": " + e.what(), at);
    }
    return c;
}

} // namespace picosam

#endif
