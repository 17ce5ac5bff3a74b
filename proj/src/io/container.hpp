#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace l3d::io {

// On-disk tensor container shared by datasets, checkpoints and exports.
// Layout: magic "LTSR" | version u8 | dtype u8 | ndim u8 | dims u32-LE[ndim]
// | row-major payload. dtype 0 = f32 little-endian, 1 = u8.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, std::uint64_t offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::uint64_t byte_offset;
};

enum class Dtype : std::uint8_t { f32 = 0, u8 = 1 };

struct TensorArray {
    Dtype dtype = Dtype::f32;
    std::vector<std::uint32_t> dims;  // empty = 0-dim scalar
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    std::uint64_t element_count() const {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }

    static TensorArray from_f32(std::vector<std::uint32_t> dims, std::vector<float> data);
    static TensorArray from_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data);
};

// Atomic write: temp file in the target directory, then rename.
void write_container(const std::filesystem::path& path, const TensorArray& array);
TensorArray read_container(const std::filesystem::path& path);

}  // namespace l3d::io
