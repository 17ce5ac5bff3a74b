#include "io/container.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace l3d::io {

namespace {

constexpr char kMagic[4] = {'L', 'T', 'S', 'R'};
constexpr std::uint8_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "container IO assumes a little-endian host");

std::uint64_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 1; }

}  // namespace

TensorArray TensorArray::from_f32(std::vector<std::uint32_t> dims, std::vector<float> data) {
    TensorArray a;
    a.dtype = Dtype::f32;
    a.dims = std::move(dims);
    a.f32 = std::move(data);
    if (a.f32.size() != a.element_count())
        throw std::invalid_argument("f32 payload size does not match dims");
    return a;
}

TensorArray TensorArray::from_u8(std::vector<std::uint32_t> dims, std::vector<std::uint8_t> data) {
    TensorArray a;
    a.dtype = Dtype::u8;
    a.dims = std::move(dims);
    a.u8 = std::move(data);
    if (a.u8.size() != a.element_count())
        throw std::invalid_argument("u8 payload size does not match dims");
    return a;
}

void write_container(const std::filesystem::path& path, const TensorArray& array) {
    if (array.dims.size() > 255) throw std::invalid_argument("too many dimensions");
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out.write(kMagic, 4);
        out.put(static_cast<char>(kVersion));
        out.put(static_cast<char>(array.dtype));
        out.put(static_cast<char>(array.dims.size()));
        for (std::uint32_t d : array.dims)
            out.write(reinterpret_cast<const char*>(&d), 4);
        if (array.dtype == Dtype::f32) {
            out.write(reinterpret_cast<const char*>(array.f32.data()),
                      static_cast<std::streamsize>(array.f32.size() * 4));
        } else {
            out.write(reinterpret_cast<const char*>(array.u8.data()),
                      static_cast<std::streamsize>(array.u8.size()));
        }
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

TensorArray read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path.string());

    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad magic in " + path.string(), 0);

    const int version = in.get();
    if (version != kVersion)
        throw FormatError("unsupported container version " + std::to_string(version), 4);

    const int dtype_raw = in.get();
    if (dtype_raw != 0 && dtype_raw != 1)
        throw FormatError("unknown dtype " + std::to_string(dtype_raw), 5);

    const int ndim = in.get();
    if (ndim < 0) throw FormatError("truncated header", 6);

    TensorArray a;
    a.dtype = static_cast<Dtype>(dtype_raw);
    a.dims.resize(static_cast<std::size_t>(ndim));
    for (int i = 0; i < ndim; ++i) {
        std::uint32_t d;
        in.read(reinterpret_cast<char*>(&d), 4);
        if (in.gcount() != 4)
            throw FormatError("truncated dims", 7 + static_cast<std::uint64_t>(i) * 4);
        a.dims[static_cast<std::size_t>(i)] = d;
    }

    const std::uint64_t payload_offset = 7 + static_cast<std::uint64_t>(ndim) * 4;
    const std::uint64_t n = a.element_count();
    const std::uint64_t payload_bytes = n * dtype_size(a.dtype);
    if (a.dtype == Dtype::f32) {
        a.f32.resize(n);
        in.read(reinterpret_cast<char*>(a.f32.data()), static_cast<std::streamsize>(payload_bytes));
    } else {
        a.u8.resize(n);
        in.read(reinterpret_cast<char*>(a.u8.data()), static_cast<std::streamsize>(payload_bytes));
    }
    const auto got = static_cast<std::uint64_t>(in.gcount());
    if (got != payload_bytes)
        throw FormatError("truncated payload in " + path.string(), payload_offset + got);
    return a;
}

}  // namespace l3d::io
