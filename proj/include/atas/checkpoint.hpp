#pragma once

// Checkpoint container: magic "ATAS", u32 format version, a flat key=value
// config block, then each named tensor as (name, rank, dims, raw f64 data).
// Everything little-endian; round trips are bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "atas/error.hpp"
#include "atas/model.hpp"
#include "atas/tensor.hpp"

namespace atas {

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

inline std::string model_config_text(const ModelConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "image_side=" << c.image_side << "\n"
       << "patch_size=" << c.patch_size << "\n"
       << "embed_dim=" << c.embed_dim << "\n"
       << "num_layers=" << c.num_layers << "\n"
       << "num_heads=" << c.num_heads << "\n"
       << "mlp_ratio=" << c.mlp_ratio << "\n"
       << "channels=" << c.channels << "\n";
    return os.str();
}

inline ModelConfig parse_model_config_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("malformed config line in checkpoint: " + line);
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        if (key == "image_side") c.image_side = std::stoull(val);
        else if (key == "patch_size") c.patch_size = std::stoull(val);
        else if (key == "embed_dim") c.embed_dim = std::stoull(val);
        else if (key == "num_layers") c.num_layers = std::stoull(val);
        else if (key == "num_heads") c.num_heads = std::stoull(val);
        else if (key == "mlp_ratio") c.mlp_ratio = std::stod(val);
        else if (key == "channels") c.channels = std::stoull(val);
        else throw IoError("unknown config key in checkpoint: " + key);
    }
    return c;
}

// Model params plus any rider tensors (optimizer moments, loss history).
inline std::string serialize_checkpoint(const ModelParams& params,
                                        const std::map<std::string, Tensor>& extra = {}) {
    std::string out;
    out += "ATAS";
    detail::put_u32(out, 1);
    std::string config = model_config_text(params.config);
    detail::put_u64(out, config.size());
    out += config;
    detail::put_u64(out, params.tensors.size() + extra.size());
    auto write_tensor = [&](const std::string& name, const Tensor& t) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u64(out, d);
        for (double v : t.data()) detail::put_f64(out, v);
    };
    for (const auto& [name, t] : params.tensors) write_tensor(name, t);
    for (const auto& [name, t] : extra) write_tensor(name, t);
    return out;
}

struct Checkpoint {
    ModelConfig config;
    std::map<std::string, Tensor> tensors; // params and riders mixed; split by prefix
};

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    detail::ByteReader r{bytes};
    if (r.bytes(4) != "ATAS") throw IoError("bad checkpoint magic");
    std::uint32_t version = r.u32();
    if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    std::uint64_t config_len = r.u64();
    ck.config = parse_model_config_text(r.bytes(config_len));
    std::uint64_t count = r.u64();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::uint32_t name_len = r.u32();
        std::string name = r.bytes(name_len);
        std::uint32_t rank = r.u32();
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            shape[k] = r.u64();
            numel *= shape[k];
        }
        std::vector<double> data(numel);
        for (std::size_t k = 0; k < numel; ++k) data[k] = r.f64();
        ck.tensors[name] = Tensor::from(std::move(shape), std::move(data), false);
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const std::map<std::string, Tensor>& extra = {}) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    std::string bytes = serialize_checkpoint(params, extra);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_checkpoint(ss.str());
}

// Splits a loaded checkpoint back into model params (no rider prefixes).
inline ModelParams params_from_checkpoint(const Checkpoint& ck, bool trainable = false) {
    ModelParams p;
    p.config = ck.config;
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("opt.", 0) == 0 || name.rfind("train.", 0) == 0) continue;
        p.tensors[name] = t.clone(trainable);
    }
    return p;
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Stable digest of the full parameter set; frozen-teacher tests compare this.
inline std::uint64_t param_hash(const ModelParams& params) {
    return fnv1a64(serialize_checkpoint(params));
}

} // namespace atas
