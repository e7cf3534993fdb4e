#include "ctxbias/core/tensor.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace ctxbias::io {

namespace {

constexpr char kMagic[4] = {'C', 'B', 'T', '1'};
constexpr std::uint8_t kDtypeF32 = 1;

std::string sidecar_path(const std::string& path) {
    std::filesystem::path p(path);
    p.replace_extension(".json");
    return p.string();
}

void put_u32_le(std::ofstream& f, std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16),
                               static_cast<std::uint8_t>(v >> 24)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

}  // namespace

void write_cbt(const std::string& path, const std::vector<std::uint32_t>& dims,
               const float* data) {
    size_t count = 1;
    for (auto d : dims) count *= d;
    if (dims.size() > 255) throw format_error("cbt: rank exceeds 255");

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw load_error("cbt: cannot open for write: " + path);
    f.write(kMagic, 4);
    const std::uint8_t head[4] = {kDtypeF32, static_cast<std::uint8_t>(dims.size()), 0, 0};
    f.write(reinterpret_cast<const char*>(head), 4);
    for (auto d : dims) put_u32_le(f, d);

    // Payload is serialized little-endian; on the LE targets this builds for
    // the in-memory representation already matches.
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
    if (!f) throw load_error("cbt: write failed: " + path);
}

CbtPayload read_cbt(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw load_error("cbt: cannot open: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw format_error("cbt: magic mismatch: " + path);
    if (buf[4] != kDtypeF32) throw format_error("cbt: unsupported dtype: " + path);
    const int rank = buf[5];
    if (buf[6] != 0 || buf[7] != 0) throw format_error("cbt: reserved bytes nonzero: " + path);
    if (buf.size() < 8 + static_cast<size_t>(rank) * 4)
        throw format_error("cbt: truncated header: " + path);

    CbtPayload out;
    out.dims.resize(static_cast<size_t>(rank));
    size_t count = 1;
    for (int i = 0; i < rank; ++i) {
        out.dims[static_cast<size_t>(i)] = get_u32_le(buf.data() + 8 + static_cast<size_t>(i) * 4);
        count *= out.dims[static_cast<size_t>(i)];
    }
    const size_t payload_at = 8 + static_cast<size_t>(rank) * 4;
    if (buf.size() != payload_at + count * 4)
        throw format_error("cbt: truncated payload: " + path);

    out.data.resize(count);
    std::memcpy(out.data.data(), buf.data() + payload_at, count * 4);
    for (float v : out.data)
        if (!std::isfinite(v)) throw format_error("cbt: non-finite value in payload: " + path);
    return out;
}

void write_tensor(const FeatureTensor& t, const std::string& path) {
    t.validate();
    write_cbt(path, {t.dims[0], t.dims[1], t.dims[2]}, t.data.data());

    nlohmann::ordered_json meta;
    meta["layer"] = t.layer;
    meta["provenance"]["image_id"] = t.provenance.image_id;
    if (t.provenance.instance_id)
        meta["provenance"]["instance_id"] = *t.provenance.instance_id;
    meta["provenance"]["domain_id"] = t.provenance.domain_id;
    meta["provenance"]["intervention"] = t.provenance.intervention;

    std::ofstream f(sidecar_path(path), std::ios::trunc);
    if (!f) throw load_error("cbt: cannot open sidecar for write: " + sidecar_path(path));
    f << meta.dump(2) << "\n";
}

FeatureTensor read_tensor(const std::string& path) {
    CbtPayload p = read_cbt(path);
    if (p.dims.size() != 3)
        throw format_error("cbt: expected rank-3 feature tensor: " + path);

    FeatureTensor t;
    t.dims = {p.dims[0], p.dims[1], p.dims[2]};
    t.data = std::move(p.data);

    std::ifstream f(sidecar_path(path));
    if (!f) throw load_error("cbt: missing metadata sidecar: " + sidecar_path(path));
    nlohmann::json meta = nlohmann::json::parse(f, nullptr, true);
    t.layer = meta.at("layer").get<std::string>();
    const auto& prov = meta.at("provenance");
    t.provenance.image_id = prov.at("image_id").get<std::string>();
    if (prov.contains("instance_id"))
        t.provenance.instance_id = prov.at("instance_id").get<std::string>();
    t.provenance.domain_id = prov.at("domain_id").get<std::string>();
    t.provenance.intervention = prov.at("intervention").get<std::string>();
    return t;
}

}  // namespace ctxbias::io
