#pragma once

#include <png.h>

#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "lvd/tensor.hpp"

namespace lvd {

// 8-bit RGB PNG <-> [3, H, W] float tensor in [-1, 1]

template <typename T = float>
Tensor<T> read_png_rgb(const std::string& path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw std::runtime_error("png: cannot read '" + path + "': " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw std::runtime_error("png: decode failed for '" + path + "': " + msg);
    }
    const int64_t H = img.height, W = img.width;
    Tensor<T> out({3, H, W});
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c)
                out.data[static_cast<size_t>((c * H + y) * W + x)] =
                    static_cast<T>(buf[static_cast<size_t>((y * W + x) * 3 + c)]) / T(127.5) - T(1);
    return out;
}

template <typename T = float>
void write_png_rgb(const std::string& path, const Tensor<T>& t) {
    if (t.rank() != 3 || t.shape[0] != 3) throw std::invalid_argument("png: want [3, H, W]");
    const int64_t H = t.shape[1], W = t.shape[2];
    std::vector<unsigned char> buf(static_cast<size_t>(H * W * 3));
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x)
            for (int64_t c = 0; c < 3; ++c) {
                T v = (t.data[static_cast<size_t>((c * H + y) * W + x)] + T(1)) * T(127.5);
                v = std::min(T(255), std::max(T(0), v));
                buf[static_cast<size_t>((y * W + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(static_cast<double>(v)));
            }
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(W);
    img.height = static_cast<png_uint_32>(H);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
        throw std::runtime_error("png: cannot write '" + path + "': " + img.message);
}

}  // namespace lvd
