#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace diffslam::io {

// Row-major interleaved 8-bit RGB.
struct ImageU8 {
    int width = 0, height = 0, channels = 3;
    std::vector<std::uint8_t> pixels;
};

// Row-major 16-bit single channel (depth maps).
struct ImageU16 {
    int width = 0, height = 0;
    std::vector<std::uint16_t> pixels;
};

ImageU8 read_png_rgb8(const std::string& path);
ImageU16 read_png_gray16(const std::string& path);
void write_png_rgb8(const std::string& path, const ImageU8& img);
void write_png_gray16(const std::string& path, const ImageU16& img);

}  // namespace diffslam::io
