#pragma once

#include "volsplat/types.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace volsplat {

/// Reads an 8- or 16-bit PNG into a float image in [0,1]. Grayscale and
/// palette images expand to RGB; an alpha channel is kept as channel 3.
inline Image read_png(const std::string& path) {
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "rb"),
                                                       &std::fclose);
    if (!fp) throw std::runtime_error("cannot open PNG: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("malformed PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const int bit_depth = png_get_bit_depth(png, info);
    const png_byte color = png_get_color_type(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (bit_depth == 16) png_set_swap(png);  // stored big-endian
    png_read_update_info(png, info);

    const int width = static_cast<int>(png_get_image_width(png, info));
    const int height = static_cast<int>(png_get_image_height(png, info));
    const int channels = png_get_channels(png, info);
    const int depth = png_get_bit_depth(png, info);

    const size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> raw(static_cast<size_t>(height) * rowbytes);
    std::vector<png_bytep> rows(height);
    for (int y = 0; y < height; ++y) rows[y] = raw.data() + static_cast<size_t>(y) * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(height, width, channels);
    if (depth == 16) {
        const uint16_t* p = reinterpret_cast<const uint16_t*>(raw.data());
        for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = p[i] / Real(65535);
    } else {
        for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = raw[i] / Real(255);
    }
    return img;
}

/// Writes an RGB image as PNG (values clamped to [0,1]); 8-bit by default,
/// 16-bit when asked.
inline void write_png(const std::string& path, const Image& img, int bit_depth = 8) {
    if (img.channels != 3) throw std::invalid_argument("write_png expects 3 channels");
    if (bit_depth != 8 && bit_depth != 16)
        throw std::invalid_argument("write_png: bit depth must be 8 or 16");
    std::unique_ptr<std::FILE, int (*)(std::FILE*)> fp(std::fopen(path.c_str(), "wb"),
                                                       &std::fclose);
    if (!fp) throw std::runtime_error("cannot write PNG: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, bit_depth, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (bit_depth == 16) png_set_swap(png);

    auto quant = [&](Real v, Real scale) {
        const Real c = std::min(Real(1), std::max(Real(0), v));
        return static_cast<uint32_t>(std::lround(c * scale));
    };
    if (bit_depth == 16) {
        std::vector<uint16_t> row(static_cast<size_t>(img.width) * 3);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c)
                    row[static_cast<size_t>(x) * 3 + c] =
                        static_cast<uint16_t>(quant(img.at(y, x, c), 65535));
            png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
        }
    } else {
        std::vector<png_byte> row(static_cast<size_t>(img.width) * 3);
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x)
                for (int c = 0; c < 3; ++c)
                    row[static_cast<size_t>(x) * 3 + c] =
                        static_cast<png_byte>(quant(img.at(y, x, c), 255));
            png_write_row(png, row.data());
        }
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace volsplat
