#ifndef PICOSAM_PROMPT_HPP
#define PICOSAM_PROMPT_HPP

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>

#include "tensor.hpp"

namespace picosam {

// Prompt location in original-image pixels (x = column, y = row).
struct PromptPoint {
    std::int64_t x = 0;
    std::int64_t y = 0;

    friend bool operator==(const PromptPoint&, const PromptPoint&) = default;
};

// Placement of a square crop in the original frame. The origin may be
// negative; crop pixel (side/2, side/2) is always the prompt point.
struct CropSpec {
    std::int64_t origin_x = 0;
    std::int64_t origin_y = 0;
    std::size_t side = 0;
    std::size_t original_w = 0;
    std::size_t original_h = 0;

    friend bool operator==(const CropSpec&, const CropSpec&) = default;
};

template <Element T>
struct Crop {
    Tensor<T> crop;
    CropSpec spec;
};

// Crops [1,C,H,W] so that `point` lands on the crop centre. Pixels outside
// the image are zero.
template <Element T>
Crop<T> crop_centered(const Tensor<T>& image, PromptPoint point, std::size_t side) {
    require_rank(image.shape(), 4, "crop_centered");
    if (image.dim(0) != 1) throw ShapeError("crop_centered: expected batch 1, got " + shape_str(image.shape()));
    if (side == 0 || side % 2 != 0) throw DomainError("crop_centered: side must be positive and even, got " + std::to_string(side));
    const auto c = image.dim(1), h = image.dim(2), w = image.dim(3);
    if (point.x < 0 || point.y < 0 || point.x >= static_cast<std::int64_t>(w) ||
        point.y >= static_cast<std::int64_t>(h)) {
        throw DomainError("crop_centered: prompt (" + std::to_string(point.x) + "," + std::to_string(point.y) +
                          ") outside " + std::to_string(w) + "x" + std::to_string(h) + " image");
    }
    const auto half = static_cast<std::int64_t>(side / 2);
    CropSpec spec{point.x - half, point.y - half, side, w, h};
    Tensor<T> out({1, c, side, side});
    const auto sside = static_cast<std::int64_t>(side);
    // Column range of the crop that maps inside the image.
    const std::int64_t col_lo = std::max<std::int64_t>(0, -spec.origin_x);
    const std::int64_t col_hi = std::min<std::int64_t>(sside, static_cast<std::int64_t>(w) - spec.origin_x);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::int64_t r = 0; r < sside; ++r) {
            const std::int64_t iy = spec.origin_y + r;
            if (iy < 0 || iy >= static_cast<std::int64_t>(h) || col_hi <= col_lo) continue;
            const T* src = &image.at(0, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(spec.origin_x + col_lo));
            T* dst = &out.at(0, ch, static_cast<std::size_t>(r), static_cast<std::size_t>(col_lo));
            std::copy_n(src, col_hi - col_lo, dst);
        }
    }
    return {std::move(out), spec};
}

// Pastes a crop-frame mask back into the original frame; everything outside
// the crop window is background.
template <Element T>
Tensor<T> uncrop_mask(const Tensor<T>& mask, const CropSpec& spec) {
    require_rank(mask.shape(), 4, "uncrop_mask");
    if (mask.dim(0) != 1 || mask.dim(1) != 1 || mask.dim(2) != spec.side || mask.dim(3) != spec.side) {
        throw ShapeError("uncrop_mask: mask " + shape_str(mask.shape()) + " does not match crop side " +
                         std::to_string(spec.side));
    }
    Tensor<T> out({1, 1, spec.original_h, spec.original_w});
    const auto sside = static_cast<std::int64_t>(spec.side);
    const std::int64_t col_lo = std::max<std::int64_t>(0, -spec.origin_x);
    const std::int64_t col_hi = std::min<std::int64_t>(sside, static_cast<std::int64_t>(spec.original_w) - spec.origin_x);
    if (col_hi <= col_lo) return out;
    for (std::int64_t r = 0; r < sside; ++r) {
        const std::int64_t iy = spec.origin_y + r;
        if (iy < 0 || iy >= static_cast<std::int64_t>(spec.original_h)) continue;
        const T* src = &mask.at(0, 0, static_cast<std::size_t>(r), static_cast<std::size_t>(col_lo));
        T* dst = &out.at(0, 0, static_cast<std::size_t>(iy), static_cast<std::size_t>(spec.origin_x + col_lo));
        std::copy_n(src, col_hi - col_lo, dst);
    }
    return out;
}

} // namespace picosam

#endif
