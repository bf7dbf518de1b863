// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "elder/core/errors.hpp"
#include "elder/core/tape.hpp"

namespace elder {

// Flat checkpoint manifest: magic, version, scalar width, then per parameter
// name -> shape -> raw little-endian scalar block. Round-trips exactly.
namespace ckpt {

inline constexpr char kMagic[8] = {'E', 'L', 'D', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint truncated");
    return v;
}

} // namespace ckpt

// Writes to a temp file in the same directory, then renames (whole-file atomic).
template <class S>
void save_checkpoint(const std::string& path, const std::vector<Parameter<S>*>& params) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
        os.write(ckpt::kMagic, sizeof(ckpt::kMagic));
        ckpt::write_pod<std::uint32_t>(os, ckpt::kVersion);
        ckpt::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(sizeof(S)));
        ckpt::write_pod<std::uint64_t>(os, params.size());
        for (const Parameter<S>* p : params) {
            ckpt::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p->name.size()));
            os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
            ckpt::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(p->value.rows()));
            ckpt::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(p->value.cols()));
            os.write(reinterpret_cast<const char*>(p->value.data()),
                     static_cast<std::streamsize>(sizeof(S) * std::size_t(p->value.size())));
        }
        if (!os) throw IoError("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);
}

// Loads into an existing parameter set; names and shapes must match exactly.
template <class S>
void load_checkpoint(const std::string& path, const std::vector<Parameter<S>*>& params) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint '" + path + "'");
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, ckpt::kMagic, sizeof(magic)) != 0)
        throw IoError("bad checkpoint magic in '" + path + "'");
    const auto version = ckpt::read_pod<std::uint32_t>(is);
    if (version != ckpt::kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    const auto ssize = ckpt::read_pod<std::uint32_t>(is);
    if (ssize != sizeof(S))
        throw IoError("checkpoint scalar width " + std::to_string(ssize) + " does not match model");
    const auto count = ckpt::read_pod<std::uint64_t>(is);
    if (count != params.size())
        throw IoError("checkpoint has " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));
    for (Parameter<S>* p : params) {
        const auto name_len = ckpt::read_pod<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto rows = ckpt::read_pod<std::uint64_t>(is);
        const auto cols = ckpt::read_pod<std::uint64_t>(is);
        if (!is || name != p->name || rows != std::uint64_t(p->value.rows()) ||
            cols != std::uint64_t(p->value.cols()))
            throw IoError("checkpoint entry '" + name + "' does not match parameter '" + p->name + "'");
        is.read(reinterpret_cast<char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(S) * std::size_t(p->value.size())));
        if (!is) throw IoError("checkpoint truncated while reading '" + name + "'");
    }
}

} // namespace elder
