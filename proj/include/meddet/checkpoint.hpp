// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: magic "MDKT", version u16, then parameter records
// (name length u16, UTF-8 name, rank u8, dims u32 each, f32 little-endian
// values). Run state (epoch, config hash, rng state) rides in a reserved
// "__meta" record whose f32 slots are bit-cast u32 words; optimizer state
// uses "opt/" prefixed records. Writes are atomic (temp file + rename).
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "meddet/errors.hpp"
#include "meddet/tensor.hpp"

namespace meddet::ckpt {

inline constexpr uint16_t kVersion = 1;
inline constexpr char kMagic[4] = {'M', 'D', 'K', 'T'};
inline constexpr const char* kMetaName = "__meta";

struct ParamRecord {
    std::string name;
    std::vector<int> dims;
    std::vector<float> data;
};

struct Checkpoint {
    uint16_t version = kVersion;
    uint64_t config_hash = 0;
    uint32_t epoch = 0;
    uint64_t rng_state = 0;
    std::vector<ParamRecord> params;  // order preserved across save/load

    ParamRecord* find(const std::string& name) {
        for (auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }
};

namespace detail {

inline uint32_t f2u(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}
inline float u2f(uint32_t u) {
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& is, const char* what) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is)
        throw FormatError(std::string("checkpoint truncated while reading ") + what + " near offset " +
                          std::to_string(static_cast<long long>(is.tellg())));
    return v;
}

inline void write_record(std::ostream& os, const ParamRecord& r) {
    put<uint16_t>(os, static_cast<uint16_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<uint8_t>(os, static_cast<uint8_t>(r.dims.size()));
    for (int d : r.dims) put<uint32_t>(os, static_cast<uint32_t>(d));
    for (float v : r.data) put<float>(os, v);
}

}  // namespace detail

inline void save(const Checkpoint& c, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open " + tmp + " for writing");
        os.write(kMagic, 4);
        detail::put<uint16_t>(os, c.version);

        ParamRecord meta;
        meta.name = kMetaName;
        meta.dims = {6};
        meta.data = {detail::u2f(c.epoch),
                     detail::u2f(static_cast<uint32_t>(c.config_hash & 0xffffffffu)),
                     detail::u2f(static_cast<uint32_t>(c.config_hash >> 32)),
                     detail::u2f(static_cast<uint32_t>(c.rng_state & 0xffffffffu)),
                     detail::u2f(static_cast<uint32_t>(c.rng_state >> 32)),
                     detail::u2f(0)};
        detail::write_record(os, meta);
        for (const auto& p : c.params) detail::write_record(os, p);
        if (!os) throw FormatError("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot move " + tmp + " into place");
}

inline Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic in " + path);
    Checkpoint c;
    c.version = detail::take<uint16_t>(is, "version");
    if (c.version != kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(c.version) + " in " + path);
    bool meta_seen = false;
    while (true) {
        uint16_t name_len;
        is.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (is.eof()) break;
        if (!is) throw FormatError("checkpoint truncated while reading record header in " + path);
        ParamRecord r;
        r.name.resize(name_len);
        is.read(r.name.data(), name_len);
        if (!is) throw FormatError("checkpoint truncated while reading a record name in " + path);
        const auto rank = detail::take<uint8_t>(is, "rank");
        int64_t count = 1;
        for (int i = 0; i < rank; ++i) {
            const auto d = detail::take<uint32_t>(is, "dims");
            r.dims.push_back(static_cast<int>(d));
            count *= d;
        }
        r.data.resize(static_cast<size_t>(count));
        is.read(reinterpret_cast<char*>(r.data.data()), count * 4);
        if (!is) throw FormatError("checkpoint truncated inside record '" + r.name + "' in " + path);
        if (r.name == kMetaName) {
            if (r.data.size() != 6) throw FormatError("malformed __meta record in " + path);
            c.epoch = detail::f2u(r.data[0]);
            c.config_hash = static_cast<uint64_t>(detail::f2u(r.data[1])) |
                            (static_cast<uint64_t>(detail::f2u(r.data[2])) << 32);
            c.rng_state = static_cast<uint64_t>(detail::f2u(r.data[3])) |
                          (static_cast<uint64_t>(detail::f2u(r.data[4])) << 32);
            meta_seen = true;
        } else {
            c.params.push_back(std::move(r));
        }
    }
    if (!meta_seen) throw FormatError("checkpoint missing __meta record in " + path);
    return c;
}

// FNV-1a over a checkpoint's parameter bytes; the frozen-teacher witness.
inline uint64_t param_checksum(const Checkpoint& c) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& p : c.params) {
        mix(p.name.data(), p.name.size());
        mix(p.data.data(), p.data.size() * 4);
    }
    return h;
}

template <typename T>
uint64_t params_checksum(std::vector<std::pair<std::string, TensorT<T>*>> named) {
    Checkpoint c;
    for (auto& [name, t] : named) {
        ParamRecord r;
        r.name = name;
        r.dims = t->shape();
        r.data.reserve(static_cast<size_t>(t->size()));
        for (T v : t->data()) r.data.push_back(static_cast<float>(v));
        c.params.push_back(std::move(r));
    }
    return param_checksum(c);
}

// Tensor <-> record bridging for whole networks.
template <typename T>
void pack_params(Checkpoint& c, const std::vector<std::pair<std::string, TensorT<T>*>>& named,
                 const std::string& prefix = "") {
    for (const auto& [name, t] : named) {
        ParamRecord r;
        r.name = prefix + name;
        r.dims = t->shape();
        r.data.reserve(static_cast<size_t>(t->size()));
        for (T v : t->data()) r.data.push_back(static_cast<float>(v));
        c.params.push_back(std::move(r));
    }
}

template <typename T>
void unpack_params(Checkpoint& c, const std::vector<std::pair<std::string, TensorT<T>*>>& named,
                   const std::string& prefix = "") {
    for (const auto& [name, t] : named) {
        ParamRecord* r = c.find(prefix + name);
        if (!r) throw FormatError("checkpoint lacks parameter '" + prefix + name + "'");
        if (r->dims != t->shape())
            throw FormatError("checkpoint parameter '" + prefix + name + "' has shape " + shape_str(r->dims) +
                              ", expected " + shape_str(t->shape()));
        auto& v = t->data_mut();
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(r->data[i]);
    }
}

}  // namespace meddet::ckpt
