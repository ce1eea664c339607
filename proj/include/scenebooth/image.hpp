#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "scenebooth/autograd.hpp"

namespace scenebooth {

// Planar float image, values in [0,1]. Three channels are RGB; a fourth
// channel, when present, is a binary alpha (1 = opaque subject pixel).
struct image {
    int width    = 0;
    int height   = 0;
    int channels = 0;
    std::vector<double> data;  // [channels][height][width]

    image() = default;
    image(int w, int h, int c, double fill = 0.0);

    bool empty() const { return data.empty(); }
    bool has_alpha() const { return channels == 4; }
    std::size_t plane() const { return static_cast<std::size_t>(width) * height; }
    double& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    double at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
    bool opaque(int y, int x) const { return !has_alpha() || at(3, y, x) >= 0.5; }

    bool operator==(const image&) const = default;
};

struct binary_mask {
    int width  = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // row-major, 0/1

    binary_mask() = default;
    binary_mask(int w, int h, std::uint8_t fill = 0) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::size_t count() const;

    bool operator==(const binary_mask&) const = default;
};

// Integer pixel rectangle [x0, x0+w) x [y0, y0+h); may extend past the canvas.
struct pixel_rect {
    int x0 = 0, y0 = 0, w = 0, h = 0;
    bool operator==(const pixel_rect&) const = default;
};

image read_png(const std::filesystem::path& path);
// 8-bit RGB, or RGBA when the image carries alpha. Values are rounded from [0,1].
void write_png(const std::filesystem::path& path, const image& img);

// Values are quantised to the 8-bit grid, i.e. exactly what a PNG round trip yields.
image quantize8(const image& img);

// Nearest-neighbour resize; source pixel for destination j is floor((j + 0.5) * src / dst).
image resize_nearest(const image& src, int new_width, int new_height);
image resize_bilinear(const image& src, int new_width, int new_height);

// RGB planes as a [3,H,W] tensor, optionally mapped affinely from [0,1] to [-1,1].
ag::tensor image_to_tensor(const image& img, bool signed_range);
image tensor_to_image(const ag::tensor& t, int batch_index, bool signed_range);

}  // namespace scenebooth
