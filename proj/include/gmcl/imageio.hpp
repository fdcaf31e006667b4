#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmcl/errors.hpp"

// Byte-level readers/writers for the two on-disk image formats: IDX pairs
// (big-endian headers) and binary PNM (P5 grayscale / P6 color, maxval 255).
// Pixel payloads stay uint8; numeric conversion happens in the data layer.

namespace gmcl {
namespace io {

struct RawImageSet {
    int64_t count = 0, rows = 0, cols = 0;
    std::vector<uint8_t> pixels;  // count * rows * cols
};

struct RawImage {
    int64_t channels = 0, rows = 0, cols = 0;
    std::vector<uint8_t> pixels;  // planar, channels * rows * cols
};

RawImageSet read_idx_images(const std::string& path);
std::vector<uint8_t> read_idx_labels(const std::string& path);
void write_idx_images(const std::string& path, const RawImageSet& set);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

RawImage read_pnm(const std::string& path);
// channels must be 1 (P5) or 3 (P6)
void write_pnm(const std::string& path, const RawImage& img);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace io
}  // namespace gmcl
