#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "viewalign/tensor.hpp"

namespace viewalign {

// 8-bit interleaved image; channels is 1 or 3.
struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<unsigned char> pixels;  // row-major, interleaved
};

ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& image);

// [C,H,W] in [0,1] <-> 8-bit image (round-to-nearest, clamped).
Tensor image_to_tensor(const ImageU8& image);
ImageU8 tensor_to_image(const Tensor& t);

// Single-channel [H,W] mask in {0,1} <-> 8-bit grayscale 0/255.
Tensor mask_from_image(const ImageU8& image);
ImageU8 mask_to_image(const Tensor& mask);

// Portable float map (grayscale "Pf", little-endian). Values round-trip as
// exact float32.
void write_pfm(const std::string& path, const Tensor& map);  // [H,W]
Tensor read_pfm(const std::string& path);

}  // namespace viewalign
