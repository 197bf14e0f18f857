#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "swapprobe/util.hpp"

namespace swapprobe {

/// Decoded 8-bit RGB raster, row-major, 3 bytes per pixel.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Image() = default;
    Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

    std::uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* pixel(int x, int y) const {
        return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
};

struct Dimensions {
    int width = 0;
    int height = 0;
    friend bool operator==(const Dimensions&, const Dimensions&) = default;
};

/// Decodes PNG or JPEG (sniffed from the magic bytes). Throws IoError on
/// truncated or otherwise undecodable input.
Image decode_image(const Bytes& encoded);
Image load_image(const std::filesystem::path& path);

Bytes encode_png(const Image& image);
void save_png(const Image& image, const std::filesystem::path& path);

/// "image/png" or "image/jpeg" from the magic bytes; empty if unknown.
const char* sniff_mime(const Bytes& encoded);

/// BT.601 luma in [0, 255].
template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> luma(const Image& image) {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> y(image.height, image.width);
    for (int r = 0; r < image.height; ++r) {
        for (int c = 0; c < image.width; ++c) {
            const auto* p = image.pixel(c, r);
            y(r, c) = Scalar(0.299) * p[0] + Scalar(0.587) * p[1] + Scalar(0.114) * p[2];
        }
    }
    return y;
}

}  // namespace swapprobe
