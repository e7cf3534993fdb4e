#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxbias/core/types.hpp"

namespace ctxbias::png {

// Minimal PNG support: 8-bit grayscale and 8-bit RGB, non-interlaced.
// Writing always emits filter-None scanlines inside stored deflate blocks,
// which keeps output byte-deterministic. Reading handles any deflate stream
// (stored, fixed, dynamic) and all five scanline filters.

void write_gray8(const std::string& path, int width, int height,
                 const std::uint8_t* pixels);
void write_rgb8(const std::string& path, int width, int height,
                const std::uint8_t* pixels);

// Decoded image: channels is 1 or 3.
ImageU8 read(const std::string& path);

// Convenience wrappers over the raster types.
inline void write_image(const std::string& path, const ImageU8& img) {
    if (img.channels == 1)
        write_gray8(path, img.width, img.height, img.data.data());
    else if (img.channels == 3)
        write_rgb8(path, img.width, img.height, img.data.data());
    else
        throw format_error("png: unsupported channel count " + std::to_string(img.channels));
}

// Binary masks are stored as 0/255 grayscale; any nonzero pixel reads as set.
void write_mask(const std::string& path, const Mask& mask);
Mask read_mask(const std::string& path);

// Semantic maps store raw label ids in the gray channel.
void write_semantic(const std::string& path, const SemanticMap& map);
SemanticMap read_semantic(const std::string& path, const std::string& image_id);

}  // namespace ctxbias::png
