#include "scenebooth/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>

#include "scenebooth/errors.hpp"

namespace scenebooth {

image::image(int w, int h, int c, double fill)
    : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

std::size_t binary_mask::count() const { return std::accumulate(data.begin(), data.end(), std::size_t{0}); }

namespace {

struct file_closer {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

image read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, file_closer> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw io_error("cannot open image: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("libpng init failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("malformed PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_packing(png);
    const auto color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);

    const int w  = static_cast<int>(png_get_image_width(png, info));
    const int h  = static_cast<int>(png_get_image_height(png, info));
    const int ch = png_get_channels(png, info);
    std::vector<png_byte> buf(static_cast<std::size_t>(w) * h * ch);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y) rows[y] = buf.data() + static_cast<std::size_t>(y) * w * ch;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    image img(w, h, ch == 4 ? 4 : 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < img.channels; ++c) {
                double v = buf[(static_cast<std::size_t>(y) * w + x) * ch + c] / 255.0;
                // alpha is binarised
                if (c == 3) v = v >= 0.5 ? 1.0 : 0.0;
                img.at(c, y, x) = v;
            }
    return img;
}

void write_png(const std::filesystem::path& path, const image& img) {
    if (img.channels != 3 && img.channels != 4) throw io_error("write_png: expects 3 or 4 channels");
    std::unique_ptr<std::FILE, file_closer> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw io_error("cannot write image: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info  = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw io_error("libpng init failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw io_error("failed writing PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 4 ? PNG_COLOR_TYPE_RGBA : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * img.channels);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) row[static_cast<std::size_t>(x) * img.channels + c] = to_byte(img.at(c, y, x));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

image quantize8(const image& img) {
    image out = img;
    for (auto& v : out.data) v = to_byte(v) / 255.0;
    return out;
}

image resize_nearest(const image& src, int new_width, int new_height) {
    if (new_width < 1 || new_height < 1) throw input_error("resize: target size must be positive");
    image out(new_width, new_height, src.channels);
    for (int y = 0; y < new_height; ++y) {
        int sy = std::min(src.height - 1, static_cast<int>((y + 0.5) * src.height / new_height));
        for (int x = 0; x < new_width; ++x) {
            int sx = std::min(src.width - 1, static_cast<int>((x + 0.5) * src.width / new_width));
            for (int c = 0; c < src.channels; ++c) out.at(c, y, x) = src.at(c, sy, sx);
        }
    }
    return out;
}

image resize_bilinear(const image& src, int new_width, int new_height) {
    if (new_width < 1 || new_height < 1) throw input_error("resize: target size must be positive");
    image out(new_width, new_height, src.channels);
    for (int y = 0; y < new_height; ++y) {
        double fy = std::clamp((y + 0.5) * src.height / new_height - 0.5, 0.0, src.height - 1.0);
        int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, src.height - 1);
        double wy = fy - y0;
        for (int x = 0; x < new_width; ++x) {
            double fx = std::clamp((x + 0.5) * src.width / new_width - 0.5, 0.0, src.width - 1.0);
            int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, src.width - 1);
            double wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                double v = (1 - wy) * ((1 - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1)) +
                           wy * ((1 - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1));
                // alpha stays binary
                out.at(c, y, x) = c == 3 ? (v >= 0.5 ? 1.0 : 0.0) : v;
            }
        }
    }
    return out;
}

ag::tensor image_to_tensor(const image& img, bool signed_range) {
    ag::tensor t({3, img.height, img.width});
    const std::size_t n = 3 * img.plane();
    for (std::size_t i = 0; i < n; ++i) t[i] = signed_range ? 2.0 * img.data[i] - 1.0 : img.data[i];
    return t;
}

image tensor_to_image(const ag::tensor& t, int batch_index, bool signed_range) {
    if (t.rank() != 4 || t.dim(1) != 3) throw shape_error("tensor_to_image: expects [B,3,H,W]");
    const int h = t.dim(2), w = t.dim(3);
    image img(w, h, 3);
    const std::size_t off = static_cast<std::size_t>(batch_index) * 3 * h * w;
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        double v    = t[off + i];
        img.data[i] = std::clamp(signed_range ? (v + 1.0) * 0.5 : v, 0.0, 1.0);
    }
    return img;
}

}  // namespace scenebooth
