#include "diffslam/io/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "diffslam/error.hpp"

namespace diffslam::io {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

struct PngWriter {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngWriter() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

void open_reader(PngReader& r, std::FILE* f, const std::string& path) {
    png_byte header[8];
    if (std::fread(header, 1, 8, f) != 8 || png_sig_cmp(header, 0, 8))
        throw IoError("png: " + path + " is not a PNG file");
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!r.png) throw IoError("png: allocation failure reading " + path);
    r.info = png_create_info_struct(r.png);
    if (!r.info) throw IoError("png: allocation failure reading " + path);
    png_init_io(r.png, f);
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);
}

}  // namespace

ImageU8 read_png_rgb8(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("png: cannot open " + path);
    PngReader r;
    open_reader(r, f.get(), path);
    if (setjmp(png_jmpbuf(r.png))) throw IoError("png: failed to decode " + path);

    // normalize everything to 8-bit RGB
    png_set_strip_16(r.png);
    png_set_palette_to_rgb(r.png);
    png_set_expand_gray_1_2_4_to_8(r.png);
    png_set_strip_alpha(r.png);
    png_set_gray_to_rgb(r.png);
    png_read_update_info(r.png, r.info);

    ImageU8 img;
    img.width = static_cast<int>(png_get_image_width(r.png, r.info));
    img.height = static_cast<int>(png_get_image_height(r.png, r.info));
    img.channels = 3;
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = img.pixels.data() + static_cast<size_t>(y) * img.width * 3;
    png_read_image(r.png, rows.data());
    png_read_end(r.png, nullptr);
    return img;
}

ImageU16 read_png_gray16(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("png: cannot open " + path);
    PngReader r;
    open_reader(r, f.get(), path);
    if (setjmp(png_jmpbuf(r.png))) throw IoError("png: failed to decode " + path);

    const png_byte color = png_get_color_type(r.png, r.info);
    const png_byte depth = png_get_bit_depth(r.png, r.info);
    if (color != PNG_COLOR_TYPE_GRAY)
        throw IoError("png: " + path + " is not grayscale (depth maps must be 16-bit gray)");
    if (depth == 8) {
        // tolerated: scale 8-bit to the 16-bit range
        png_set_expand_gray_1_2_4_to_8(r.png);
    } else if (depth != 16) {
        throw IoError("png: " + path + " has unsupported bit depth");
    }
    if (depth == 16) png_set_swap(r.png);  // PNG is big-endian on disk
    png_read_update_info(r.png, r.info);

    ImageU16 img;
    img.width = static_cast<int>(png_get_image_width(r.png, r.info));
    img.height = static_cast<int>(png_get_image_height(r.png, r.info));
    img.pixels.resize(static_cast<size_t>(img.width) * img.height);

    if (depth == 16) {
        std::vector<png_bytep> rows(static_cast<size_t>(img.height));
        for (int y = 0; y < img.height; ++y)
            rows[static_cast<size_t>(y)] =
                reinterpret_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y) * img.width);
        png_read_image(r.png, rows.data());
    } else {
        std::vector<std::uint8_t> tmp(static_cast<size_t>(img.width) * img.height);
        std::vector<png_bytep> rows(static_cast<size_t>(img.height));
        for (int y = 0; y < img.height; ++y)
            rows[static_cast<size_t>(y)] = tmp.data() + static_cast<size_t>(y) * img.width;
        png_read_image(r.png, rows.data());
        for (size_t i = 0; i < tmp.size(); ++i)
            img.pixels[i] = static_cast<std::uint16_t>(tmp[i]) * 257;
    }
    png_read_end(r.png, nullptr);
    return img;
}

void write_png_rgb8(const std::string& path, const ImageU8& img) {
    if (img.channels != 3 ||
        img.pixels.size() != static_cast<size_t>(img.width) * img.height * 3)
        throw ContractError("png: malformed RGB image for " + path);
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("png: cannot write " + path);
    PngWriter w;
    w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    w.info = png_create_info_struct(w.png);
    if (!w.png || !w.info) throw IoError("png: allocation failure writing " + path);
    if (setjmp(png_jmpbuf(w.png))) throw IoError("png: failed to encode " + path);
    png_init_io(w.png, f.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(w.png, const_cast<png_bytep>(img.pixels.data() +
                                                   static_cast<size_t>(y) * img.width * 3));
    png_write_end(w.png, nullptr);
}

void write_png_gray16(const std::string& path, const ImageU16& img) {
    if (img.pixels.size() != static_cast<size_t>(img.width) * img.height)
        throw ContractError("png: malformed gray16 image for " + path);
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("png: cannot write " + path);
    PngWriter w;
    w.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    w.info = png_create_info_struct(w.png);
    if (!w.png || !w.info) throw IoError("png: allocation failure writing " + path);
    if (setjmp(png_jmpbuf(w.png))) throw IoError("png: failed to encode " + path);
    png_init_io(w.png, f.get());
    png_set_IHDR(w.png, w.info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(w.png, w.info);
    png_set_swap(w.png);
    for (int y = 0; y < img.height; ++y)
        png_write_row(w.png, reinterpret_cast<png_bytep>(const_cast<std::uint16_t*>(
                                 img.pixels.data() + static_cast<size_t>(y) * img.width)));
    png_write_end(w.png, nullptr);
}

}  // namespace diffslam::io
