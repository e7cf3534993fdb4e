#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ctxbias/core/error.hpp"

namespace ctxbias {

// Where an activation tensor came from.
struct Provenance {
    std::string image_id;
    std::optional<std::string> instance_id;
    std::string domain_id;
    std::string intervention;  // "none", "bg_removed:<label>", "cam_bin:<k>", ...
};

// Rank-3 activation array, channels x height x width, row-major.
struct FeatureTensor {
    std::string layer;
    std::array<std::uint32_t, 3> dims{};  // C, H, W
    std::vector<float> data;
    Provenance provenance;

    std::uint32_t channels() const { return dims[0]; }
    std::uint32_t height() const { return dims[1]; }
    std::uint32_t width() const { return dims[2]; }
    size_t size() const { return static_cast<size_t>(dims[0]) * dims[1] * dims[2]; }

    float at(std::uint32_t c, std::uint32_t y, std::uint32_t x) const {
        return data[(static_cast<size_t>(c) * dims[1] + y) * dims[2] + x];
    }
    float& at(std::uint32_t c, std::uint32_t y, std::uint32_t x) {
        return data[(static_cast<size_t>(c) * dims[1] + y) * dims[2] + x];
    }

    void validate() const {
        if (data.size() != size())
            throw format_error("tensor '" + layer + "': data length " +
                               std::to_string(data.size()) + " != C*H*W " +
                               std::to_string(size()));
    }
};

namespace io {

// CBT1 container: magic "CBT1", u8 dtype (1 = f32), u8 rank, two reserved
// zero bytes, rank x u32 little-endian dims, then a row-major f32 payload.
void write_cbt(const std::string& path, const std::vector<std::uint32_t>& dims,
               const float* data);

struct CbtPayload {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;
};
CbtPayload read_cbt(const std::string& path);

// FeatureTensor round-trip: payload in <path>, metadata sidecar in a JSON
// file with the same basename and .json extension.
void write_tensor(const FeatureTensor& t, const std::string& path);
FeatureTensor read_tensor(const std::string& path);

}  // namespace io

}  // namespace ctxbias
