#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gmcl/tensor.hpp"

namespace gmcl {

/// On-disk snapshot: embedded config text plus an ordered list of named f32
/// tensors. Layout (little-endian): magic "GMCL", u32 version, u32 config
/// length + UTF-8 config text, u32 tensor count, then per tensor u16 name
/// length + name, u8 rank, u32 per dim, raw f32 data.
struct CheckpointData {
    std::string config_text;
    std::vector<std::pair<std::string, TensorT<float>>> tensors;

    const TensorT<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
    const TensorT<float>& require(const std::string& name) const {
        if (const auto* t = find(name)) return *t;
        throw DataError("checkpoint: missing tensor '" + name + "'");
    }
    void add(const std::string& name, TensorT<float> t) {
        tensors.emplace_back(name, std::move(t));
    }
    void add_scalar(const std::string& name, double v) {
        add(name, TensorT<float>(Shape{1}, {float(v)}));
    }
    // exact for values below 2^40: split into 20-bit halves
    void add_u64(const std::string& name, uint64_t v) {
        add(name, TensorT<float>(Shape{2}, {float(v >> 20), float(v & 0xFFFFFu)}));
    }
    uint64_t get_u64(const std::string& name) const {
        const auto& t = require(name);
        if (t.numel() != 2) throw DataError("checkpoint: tensor '" + name + "' is not a counter");
        return (uint64_t(t.data[0]) << 20) | uint64_t(t.data[1]);
    }
};

inline constexpr uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& path);

}  // namespace gmcl
