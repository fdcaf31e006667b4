#include "gmcl/imageio.hpp"

#include <cctype>
#include <fstream>

namespace gmcl {
namespace io {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("short write to " + path);
}

namespace {

uint32_t read_be32(const std::vector<uint8_t>& b, size_t off, const std::string& path) {
    if (off + 4 > b.size()) throw DataError(path + ": truncated header");
    return (uint32_t(b[off]) << 24) | (uint32_t(b[off + 1]) << 16) | (uint32_t(b[off + 2]) << 8) |
           uint32_t(b[off + 3]);
}

void push_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

}  // namespace

RawImageSet read_idx_images(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (read_be32(bytes, 0, path) != 0x00000803u)
        throw DataError(path + ": bad magic for an image file (want 0x00000803)");
    RawImageSet set;
    set.count = read_be32(bytes, 4, path);
    set.rows = read_be32(bytes, 8, path);
    set.cols = read_be32(bytes, 12, path);
    const size_t need = 16 + size_t(set.count) * size_t(set.rows) * size_t(set.cols);
    if (bytes.size() < need)
        throw DataError(path + ": truncated pixel data (" + std::to_string(bytes.size()) +
                        " bytes, need " + std::to_string(need) + ")");
    set.pixels.assign(bytes.begin() + 16, bytes.begin() + static_cast<int64_t>(need));
    return set;
}

std::vector<uint8_t> read_idx_labels(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (read_be32(bytes, 0, path) != 0x00000801u)
        throw DataError(path + ": bad magic for a label file (want 0x00000801)");
    const uint32_t count = read_be32(bytes, 4, path);
    if (bytes.size() < 8 + size_t(count))
        throw DataError(path + ": truncated label data");
    return std::vector<uint8_t>(bytes.begin() + 8, bytes.begin() + 8 + count);
}

void write_idx_images(const std::string& path, const RawImageSet& set) {
    std::vector<uint8_t> out;
    push_be32(out, 0x00000803u);
    push_be32(out, uint32_t(set.count));
    push_be32(out, uint32_t(set.rows));
    push_be32(out, uint32_t(set.cols));
    out.insert(out.end(), set.pixels.begin(), set.pixels.end());
    write_file_bytes(path, out);
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
    std::vector<uint8_t> out;
    push_be32(out, 0x00000801u);
    push_be32(out, uint32_t(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    write_file_bytes(path, out);
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string pnm_token(const std::vector<uint8_t>& b, size_t& off, const std::string& path) {
    while (off < b.size()) {
        if (std::isspace(b[off])) {
            ++off;
        } else if (b[off] == '#') {
            while (off < b.size() && b[off] != '\n') ++off;
        } else {
            break;
        }
    }
    std::string tok;
    while (off < b.size() && !std::isspace(b[off]) && b[off] != '#') tok.push_back(char(b[off++]));
    if (tok.empty()) throw DataError(path + ": malformed header (unexpected end of file)");
    return tok;
}

int64_t pnm_number(const std::vector<uint8_t>& b, size_t& off, const std::string& path) {
    const std::string tok = pnm_token(b, off, path);
    try {
        size_t used = 0;
        const long long v = std::stoll(tok, &used);
        if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw DataError(path + ": malformed header token '" + tok + "'");
    }
}

}  // namespace

RawImage read_pnm(const std::string& path) {
    auto bytes = read_file_bytes(path);
    size_t off = 0;
    const std::string magic = pnm_token(bytes, off, path);
    int64_t channels = 0;
    if (magic == "P5")
        channels = 1;
    else if (magic == "P6")
        channels = 3;
    else
        throw DataError(path + ": unsupported format '" + magic + "' (want binary P5 or P6)");
    RawImage img;
    img.channels = channels;
    img.cols = pnm_number(bytes, off, path);
    img.rows = pnm_number(bytes, off, path);
    const int64_t maxval = pnm_number(bytes, off, path);
    if (maxval != 255)
        throw DataError(path + ": unsupported maxval " + std::to_string(maxval) + " (want 255)");
    if (img.cols < 1 || img.rows < 1) throw DataError(path + ": non-positive dimensions");
    if (off >= bytes.size() || !std::isspace(bytes[off]))
        throw DataError(path + ": missing separator after maxval");
    ++off;  // exactly one whitespace byte before the raster
    const size_t need = size_t(img.rows) * size_t(img.cols) * size_t(channels);
    if (bytes.size() - off < need)
        throw DataError(path + ": truncated raster (" + std::to_string(bytes.size() - off) +
                        " bytes, need " + std::to_string(need) + ")");
    // raster is interleaved by pixel; store planar channel-major
    img.pixels.resize(need);
    const uint8_t* src = bytes.data() + off;
    const int64_t plane = img.rows * img.cols;
    for (int64_t p = 0; p < plane; ++p)
        for (int64_t c = 0; c < channels; ++c) img.pixels[c * plane + p] = src[p * channels + c];
    return img;
}

void write_pnm(const std::string& path, const RawImage& img) {
    if (img.channels != 1 && img.channels != 3)
        throw DataError(path + ": can only write 1-channel (P5) or 3-channel (P6) images");
    const int64_t plane = img.rows * img.cols;
    if (int64_t(img.pixels.size()) != plane * img.channels)
        throw DataError(path + ": pixel buffer does not match dimensions");
    std::string header = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.cols) + " " +
                         std::to_string(img.rows) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + img.pixels.size());
    for (int64_t p = 0; p < plane; ++p)
        for (int64_t c = 0; c < img.channels; ++c) out.push_back(img.pixels[c * plane + p]);
    write_file_bytes(path, out);
}

}  // namespace io
}  // namespace gmcl
