#include "viewalign/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "viewalign/errors.hpp"

namespace viewalign {

namespace {

struct FileCloser {
    FILE* f = nullptr;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

}  // namespace

ImageU8 read_png(const std::string& path) {
    FileCloser fc{std::fopen(path.c_str(), "rb")};
    if (!fc.f) throw IoFailure("cannot open image: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoFailure("png reader allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoFailure("png info allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoFailure("failed decoding png: " + path);
    }
    png_init_io(png, fc.f);
    png_read_info(png, info);

    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    ImageU8 img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.channels = channels;
    img.pixels.resize(static_cast<size_t>(w) * h * static_cast<size_t>(channels));
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = img.pixels.data() + static_cast<size_t>(y) * w * static_cast<size_t>(channels);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw IoFailure("write_png: only 1- or 3-channel images supported");
    FileCloser fc{std::fopen(path.c_str(), "wb")};
    if (!fc.f) throw IoFailure("cannot write image: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoFailure("png writer allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoFailure("png info allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoFailure("failed encoding png: " + path);
    }
    png_init_io(png, fc.f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8,
                 image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(image.height));
    for (int y = 0; y < image.height; ++y)
        rows[static_cast<size_t>(y)] = const_cast<png_bytep>(
            image.pixels.data() +
            static_cast<size_t>(y) * image.width * static_cast<size_t>(image.channels));
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor image_to_tensor(const ImageU8& image) {
    Tensor t({image.channels, image.height, image.width});
    const int64_t plane = static_cast<int64_t>(image.height) * image.width;
    for (int64_t y = 0; y < image.height; ++y)
        for (int64_t x = 0; x < image.width; ++x)
            for (int c = 0; c < image.channels; ++c)
                t[c * plane + y * image.width + x] =
                    image.pixels[static_cast<size_t>((y * image.width + x) * image.channels +
                                                     c)] /
                    255.0;
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.rank() != 3) throw IoFailure("tensor_to_image: expected [C,H,W]");
    ImageU8 img;
    img.channels = static_cast<int>(t.dim(0));
    img.height = static_cast<int>(t.dim(1));
    img.width = static_cast<int>(t.dim(2));
    img.pixels.resize(static_cast<size_t>(t.numel()));
    const int64_t plane = static_cast<int64_t>(img.height) * img.width;
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c) {
                const double v = std::clamp(t[c * plane + y * img.width + x], 0.0, 1.0);
                img.pixels[static_cast<size_t>((y * img.width + x) * img.channels + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    return img;
}

Tensor mask_from_image(const ImageU8& image) {
    if (image.channels != 1) throw IoFailure("mask_from_image: expected grayscale");
    Tensor t({image.height, image.width});
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = image.pixels[static_cast<size_t>(i)] >= 128 ? 1.0 : 0.0;
    return t;
}

ImageU8 mask_to_image(const Tensor& mask) {
    if (mask.rank() != 2) throw IoFailure("mask_to_image: expected [H,W]");
    ImageU8 img;
    img.channels = 1;
    img.height = static_cast<int>(mask.dim(0));
    img.width = static_cast<int>(mask.dim(1));
    img.pixels.resize(static_cast<size_t>(mask.numel()));
    for (int64_t i = 0; i < mask.numel(); ++i)
        img.pixels[static_cast<size_t>(i)] = mask[i] > 0.5 ? 255 : 0;
    return img;
}

void write_pfm(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) throw IoFailure("write_pfm: expected [H,W]");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoFailure("cannot write float map: " + path);
    const int64_t h = map.dim(0), w = map.dim(1);
    out << "Pf\n" << w << " " << h << "\n-1.0\n";
    // rows bottom-to-top per the format
    for (int64_t y = h - 1; y >= 0; --y)
        for (int64_t x = 0; x < w; ++x) {
            const float f = static_cast<float>(map.at(y, x));
            out.write(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    if (!out) throw IoFailure("failed writing float map: " + path);
}

Tensor read_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open float map: " + path);
    std::string magic;
    in >> magic;
    if (magic != "Pf") throw IoFailure("not a grayscale float map: " + path);
    int64_t w = 0, h = 0;
    double scale = 0.0;
    in >> w >> h >> scale;
    in.get();  // newline before payload
    if (w <= 0 || h <= 0 || scale >= 0.0)
        throw IoFailure("unsupported float map header: " + path);
    Tensor t({h, w});
    for (int64_t y = h - 1; y >= 0; --y)
        for (int64_t x = 0; x < w; ++x) {
            float f;
            in.read(reinterpret_cast<char*>(&f), sizeof(float));
            t.at(y, x) = static_cast<double>(f);
        }
    if (!in) throw IoFailure("float map truncated: " + path);
    return t;
}

}  // namespace viewalign
