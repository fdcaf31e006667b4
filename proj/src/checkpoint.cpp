#include "gmcl/checkpoint.hpp"

#include <cstring>

#include "gmcl/imageio.hpp"

namespace gmcl {

namespace {

void push_le32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 24));
}

void push_le16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(uint8_t(v));
    out.push_back(uint8_t(v >> 8));
}

struct Reader {
    const std::vector<uint8_t>& b;
    size_t off = 0;
    std::string path;

    void need(size_t n, const char* what) {
        if (off + n > b.size())
            throw DataError(path + ": truncated checkpoint (reading " + what + ")");
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = uint32_t(b[off]) | (uint32_t(b[off + 1]) << 8) |
                     (uint32_t(b[off + 2]) << 16) | (uint32_t(b[off + 3]) << 24);
        off += 4;
        return v;
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = uint16_t(b[off]) | uint16_t(uint16_t(b[off + 1]) << 8);
        off += 2;
        return v;
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return b[off++];
    }
    std::string str(size_t n, const char* what) {
        need(n, what);
        std::string s(b.begin() + int64_t(off), b.begin() + int64_t(off + n));
        off += n;
        return s;
    }
};

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointData& data) {
    std::vector<uint8_t> out;
    out.insert(out.end(), {'G', 'M', 'C', 'L'});
    push_le32(out, kCheckpointVersion);
    push_le32(out, uint32_t(data.config_text.size()));
    out.insert(out.end(), data.config_text.begin(), data.config_text.end());
    push_le32(out, uint32_t(data.tensors.size()));
    for (const auto& [name, t] : data.tensors) {
        if (name.size() > 0xFFFF) throw ValueError("checkpoint: tensor name too long: " + name);
        if (t.rank() > 0xFF)
            throw ValueError("checkpoint: tensor rank too large for '" + name + "'");
        push_le16(out, uint16_t(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(uint8_t(t.rank()));
        for (int64_t d : t.shape) push_le32(out, uint32_t(d));
        const size_t bytes = size_t(t.numel()) * 4;
        const size_t at = out.size();
        out.resize(at + bytes);
        static_assert(sizeof(float) == 4);
        std::memcpy(out.data() + at, t.data.data(), bytes);
    }
    io::write_file_bytes(path, out);
}

CheckpointData read_checkpoint(const std::string& path) {
    const auto bytes = io::read_file_bytes(path);
    Reader r{bytes, 0, path};
    if (r.str(4, "magic") != "GMCL") throw DataError(path + ": bad checkpoint magic");
    const uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    CheckpointData data;
    const uint32_t cfg_len = r.u32("config length");
    data.config_text = r.str(cfg_len, "config text");
    const uint32_t count = r.u32("tensor count");
    data.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = r.u16("tensor name length");
        std::string name = r.str(name_len, "tensor name");
        const uint8_t rank = r.u8("tensor rank");
        Shape shape(rank);
        int64_t numel = 1;
        for (auto& d : shape) {
            d = r.u32("tensor dim");
            numel *= d;
        }
        if (rank == 0) numel = 1;
        r.need(size_t(numel) * 4, "tensor data");
        std::vector<float> vals(static_cast<size_t>(numel));
        std::memcpy(vals.data(), bytes.data() + r.off, size_t(numel) * 4);
        r.off += size_t(numel) * 4;
        data.tensors.emplace_back(std::move(name), TensorT<float>(std::move(shape), std::move(vals)));
    }
    return data;
}

}  // namespace gmcl
