#pragma once

#include <filesystem>

#include "protolab/types.hpp"

namespace protolab {

// Decodes any 8-bit or 16-bit PNG into an RGB sample with values in [0,1].
ImageSample read_png(const std::filesystem::path& path);

// Writes an RGB (or grayscale, channels == 1) sample as 8-bit PNG.
void write_png(const std::filesystem::path& path, const ImageSample& img);

// Bilinear resize to size x size.
ImageSample resize(const ImageSample& img, int size);

}  // namespace protolab
