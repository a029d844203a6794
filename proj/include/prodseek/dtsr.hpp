#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "prodseek/tensor.hpp"

namespace prodseek {

// Binary tensor file: magic "DTSR", version u32, rank u32, extents u32[rank],
// payload little-endian f64 row-major.
namespace dtsr {

static_assert(std::endian::native == std::endian::little,
              "DTSR I/O assumes a little-endian host");

inline constexpr std::uint32_t kVersion = 1;

inline void write(const std::filesystem::path& path, const TensorF& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("dtsr::write: cannot open " + path.string());
    out.write("DTSR", 4);
    auto put_u32 = [&out](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(kVersion);
    put_u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int e : t.shape) put_u32(static_cast<std::uint32_t>(e));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!out) throw std::runtime_error("dtsr::write: write failed for " + path.string());
}

inline TensorF read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("dtsr::read: cannot open " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DTSR", 4) != 0) {
        throw std::runtime_error("dtsr::read: bad magic in " + path.string());
    }
    auto get_u32 = [&in, &path]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        if (!in) throw std::runtime_error("dtsr::read: truncated header in " + path.string());
        return v;
    };
    const std::uint32_t version = get_u32();
    if (version != kVersion) {
        throw std::runtime_error("dtsr::read: unsupported version " + std::to_string(version) + " in " +
                                 path.string());
    }
    const std::uint32_t rank = get_u32();
    if (rank == 0 || rank > 8) {
        throw std::runtime_error("dtsr::read: bad rank " + std::to_string(rank) + " in " + path.string());
    }
    std::vector<int> shape(rank);
    for (auto& e : shape) e = static_cast<int>(get_u32());
    TensorF t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(t.data.size() * sizeof(double))) {
        throw std::runtime_error("dtsr::read: truncated payload in " + path.string());
    }
    return t;
}

}  // namespace dtsr
}  // namespace prodseek
