#ifndef PICOSAM_MODEL_CONFIG_HPP
#define PICOSAM_MODEL_CONFIG_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "error.hpp"

namespace picosam {

// Declarative U-Net description. Encoder widths run shallow to deep; the
// decoder mirrors them.
struct ModelConfig {
    std::size_t input_size = 64;
    std::vector<std::size_t> stage_channels{16, 32, 64, 128};
    std::size_t blocks_per_stage = 1;
    std::size_t head_channels = 16;
    std::size_t kernel = 3;
    bool norm = true;

    std::size_t stages() const { return stage_channels.size(); }

    void validate() const {
        auto fail = [](const std::string& why) { throw ConfigError("invalid model config: " + why); };
        if (stage_channels.size() < 2) fail("stage_channels needs at least 2 entries");
        for (auto c : stage_channels)
            if (c == 0) fail("stage_channels entries must be positive");
        if (input_size == 0) fail("input_size must be positive");
        const std::size_t factor = std::size_t{1} << (stage_channels.size() - 1);
        if (input_size % factor != 0) {
            fail("input_size " + std::to_string(input_size) + " not divisible by 2^(stages-1) = " +
                 std::to_string(factor));
        }
        if (blocks_per_stage < 1) fail("blocks_per_stage must be >= 1");
        if (head_channels < 1) fail("head_channels must be >= 1");
        if (kernel < 1 || kernel % 2 == 0) fail("kernel must be odd and >= 1");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Committed reference architecture. Measured with the counting rules in
// nn.hpp at a 1x3x160x160 input:
//   parameters            1,290,833
//   MACs                  322,641,600  (folded graph: identical)
//   float32 checkpoint    5,173,838 bytes
//   int8 model file       1,334,508 bytes
inline ModelConfig reference_config() {
    ModelConfig c;
    c.input_size = 160;
    c.stage_channels = {16, 32, 64, 128, 256, 480};
    c.blocks_per_stage = 2;
    c.head_channels = 32;
    return c;
}

// Reference topology with every width scaled by `factor` (at least 1).
inline ModelConfig scaled_config(double factor) {
    if (!(factor > 0.0)) throw ConfigError("scaled_config: factor must be positive");
    auto c = reference_config();
    for (auto& w : c.stage_channels) {
        w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) * factor)));
    }
    c.head_channels =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(c.head_channels) * factor)));
    return c;
}

// Small model used for CPU training runs (64x64 crops).
inline ModelConfig desk_config() {
    ModelConfig c;
    c.input_size = 64;
    c.stage_channels = {8, 16, 32, 64, 192};
    c.blocks_per_stage = 1;
    c.head_channels = 8;
    return c;
}

} // namespace picosam

#endif
