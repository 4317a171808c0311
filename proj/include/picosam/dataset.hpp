#ifndef PICOSAM_DATASET_HPP
#define PICOSAM_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "io.hpp"
#include "prompt.hpp"
#include "rng.hpp"

namespace picosam {

inline PromptPoint parse_prompt(std::string_view text, const std::string& source) {
    std::istringstream in{std::string(text)};
    long long x = 0, y = 0;
    std::string rest;
    if (!(in >> x >> y) || (in >> rest)) throw FormatError(source + ": expected \"x y\"", 0);
    return {x, y};
}

inline PromptPoint load_prompt(const std::filesystem::path& path) {
    const auto b = read_file(path);
    return parse_prompt(std::string(b.begin(), b.end()), path.string());
}

inline void save_prompt(PromptPoint p, const std::filesystem::path& path) {
    const auto s = std::to_string(p.x) + " " + std::to_string(p.y) + "\n";
    write_file(path, Bytes(s.begin(), s.end()));
}

// One prompted instance on disk: image.ppm, mask.pgm, prompt.txt and an
// optional teacher.ptsr holding crop-frame teacher logits.
struct Sample {
    std::string name;
    Tensor<float> image; // 1x3xHxW
    Tensor<float> mask;  // 1x1xHxW, {0,1}
    PromptPoint prompt;
    std::optional<Tensor<float>> teacher; // 1x1xSxS
};

enum class TeacherFiles { load, ignore };

inline Sample load_sample(const std::filesystem::path& dir, TeacherFiles teachers) {
    Sample s;
    s.name = dir.filename().string();
    s.image = load_ppm(dir / "image.ppm");
    s.mask = load_pgm(dir / "mask.pgm");
    s.prompt = load_prompt(dir / "prompt.txt");
    if (s.mask.dim(2) != s.image.dim(2) || s.mask.dim(3) != s.image.dim(3)) {
        throw DataError(s.name + ": mask " + shape_str(s.mask.shape()) + " does not match image " +
                        shape_str(s.image.shape()));
    }
    if (s.prompt.x < 0 || s.prompt.y < 0 || s.prompt.x >= static_cast<std::int64_t>(s.image.dim(3)) ||
        s.prompt.y >= static_cast<std::int64_t>(s.image.dim(2))) {
        throw DataError(s.name + ": prompt (" + std::to_string(s.prompt.x) + "," + std::to_string(s.prompt.y) +
                        ") lies outside the image");
    }
    if (teachers == TeacherFiles::load && std::filesystem::exists(dir / "teacher.ptsr")) {
        auto t = load_tensor<float>(dir / "teacher.ptsr");
        if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 1 || t.dim(2) != t.dim(3)) {
            throw DataError(s.name + ": teacher logits must be 1x1xSxS, got " + shape_str(t.shape()));
        }
        s.teacher = std::move(t);
    }
    return s;
}

// Sample directories are the immediate subdirectories of `dir`, in name order.
inline std::vector<std::filesystem::path> sample_dirs(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("'" + dir.string() + "' is not a directory");
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_directory()) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("'" + dir.string() + "' contains no sample directories");
    return out;
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& dir, TeacherFiles teachers) {
    std::vector<Sample> out;
    for (const auto& d : sample_dirs(dir)) out.push_back(load_sample(d, teachers));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes with a synthetic teacher
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t count = 0;
    std::uint64_t seed = 0;
    std::size_t image_size = 96;
    std::size_t crop_size = 64;

    void validate() const {
        if (count == 0) throw ConfigError("synth: count must be positive");
        if (crop_size == 0 || crop_size % 2 != 0) throw ConfigError("synth: crop size must be positive and even");
        if (image_size < 16) throw ConfigError("synth: image size must be at least 16");
    }
};

// 3x3 box mean with zero padding.
inline Tensor<float> box_blur3(const Tensor<float>& m) {
    require_rank(m.shape(), 4, "box_blur3");
    Tensor<float> out(m.shape());
    const auto h = static_cast<std::int64_t>(m.dim(2)), w = static_cast<std::int64_t>(m.dim(3));
    for (std::size_t n = 0; n < m.dim(0); ++n)
        for (std::size_t c = 0; c < m.dim(1); ++c)
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x) {
                    float s = 0;
                    for (std::int64_t dy = -1; dy <= 1; ++dy)
                        for (std::int64_t dx = -1; dx <= 1; ++dx) {
                            const auto yy = y + dy, xx = x + dx;
                            if (yy >= 0 && yy < h && xx >= 0 && xx < w)
                                s += m.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                        }
                    out.at(n, c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = s / 9.0f;
                }
    return out;
}

// Confident soft teacher: logit(clip(blur(mask), 1e-4, 1 - 1e-4)).
inline Tensor<float> synthetic_teacher(const Tensor<float>& mask_crop) {
    auto t = box_blur3(mask_crop);
    for (auto& v : t.data()) {
        const double p = std::clamp(static_cast<double>(v), 1e-4, 1.0 - 1e-4);
        v = static_cast<float>(std::log(p / (1.0 - p)));
    }
    return t;
}

struct SynthSample {
    Tensor<float> image;
    Tensor<float> mask;
    PromptPoint prompt;
    Tensor<float> teacher;
};

namespace detail {

struct Shape2d {
    bool disk = true;
    double cx = 0, cy = 0, rx = 0, ry = 0; // rx = radius for disks
    std::array<double, 3> colour{};

    bool contains(std::size_t x, std::size_t y) const {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        if (disk) return dx * dx + dy * dy <= rx * rx;
        return std::abs(dx) <= rx && std::abs(dy) <= ry;
    }
};

inline double colour_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double d = 0;
    for (int i = 0; i < 3; ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

} // namespace detail

// Noise background, 1-3 flat convex shapes, the last one drawn is the target.
inline SynthSample synth_sample(Rng& rng, std::size_t image_size, std::size_t crop_size) {
    const auto size = image_size;
    const double fsize = static_cast<double>(size);
    const double r_lo = std::max(3.0, static_cast<double>(crop_size) / 10.0);
    const double r_hi = std::max(r_lo + 1.0, std::min(static_cast<double>(crop_size) / 4.0, fsize / 4.0));

    std::array<double, 3> background{};
    for (auto& c : background) c = rng.uniform(0.2, 0.8);

    const auto n_shapes = static_cast<std::size_t>(rng.integer(1, 3));
    std::vector<detail::Shape2d> shapes;
    std::vector<std::array<double, 3>> used{background};
    for (std::size_t i = 0; i < n_shapes; ++i) {
        detail::Shape2d s;
        s.disk = rng.uniform() < 0.5;
        s.rx = rng.uniform(r_lo, r_hi);
        s.ry = s.disk ? s.rx : rng.uniform(r_lo, r_hi);
        s.cx = rng.uniform(s.rx, fsize - 1.0 - s.rx);
        s.cy = rng.uniform(s.ry, fsize - 1.0 - s.ry);
        for (int attempt = 0;; ++attempt) {
            for (auto& c : s.colour) c = rng.uniform();
            bool ok = true;
            for (const auto& u : used) ok = ok && detail::colour_distance(u, s.colour) >= 0.35;
            if (ok || attempt > 100) break;
        }
        used.push_back(s.colour);
        shapes.push_back(s);
    }

    SynthSample out{Tensor<float>({1, 3, size, size}), Tensor<float>({1, 1, size, size}), {}, {}};
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            std::array<double, 3> px = background;
            double noise = 0.25;
            for (const auto& s : shapes) {
                if (s.contains(x, y)) {
                    px = s.colour;
                    noise = 0.05;
                }
            }
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(px[c] + rng.uniform(-noise, noise), 0.0, 1.0);
                // Stored as bytes on disk; keep the in-memory copy identical.
                out.image.at(0, c, y, x) = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
            }
            out.mask.at(0, 0, y, x) = shapes.back().contains(x, y) ? 1.0f : 0.0f;
        }
    }

    double sx = 0, sy = 0, n = 0;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
            if (out.mask.at(0, 0, y, x) != 0.0f) {
                sx += static_cast<double>(x);
                sy += static_cast<double>(y);
                n += 1;
            }
    out.prompt = {static_cast<std::int64_t>(std::lround(sx / n)), static_cast<std::int64_t>(std::lround(sy / n))};
    out.teacher = synthetic_teacher(crop_centered(out.mask, out.prompt, crop_size).crop);
    return out;
}

inline std::string sample_dir_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%05zu", i);
    return buf;
}

// Writes `count` sample directories. Output is a pure function of the config.
inline void synth_shapes_dataset(const std::filesystem::path& out_dir, const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    std::filesystem::create_directories(out_dir);
    for (std::size_t i = 0; i < cfg.count; ++i) {
        const auto s = synth_sample(rng, cfg.image_size, cfg.crop_size);
        const auto dir = out_dir / sample_dir_name(i);
        save_ppm(s.image, dir / "image.ppm");
        save_pgm(s.mask, dir / "mask.pgm");
        save_prompt(s.prompt, dir / "prompt.txt");
        save_tensor(s.teacher, dir / "teacher.ptsr");
    }
}

} // namespace picosam

#endif
