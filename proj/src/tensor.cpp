#include "voxrep/tensor.hpp"

#include <bit>
#include <fstream>
#include <ostream>

namespace voxrep {

namespace {

constexpr char kMagic[4] = {'V', 'X', 'T', '1'};

void put_u32_le(std::ostream& os, uint32_t x) {
    unsigned char b[4] = {static_cast<unsigned char>(x & 0xff),
                          static_cast<unsigned char>((x >> 8) & 0xff),
                          static_cast<unsigned char>((x >> 16) & 0xff),
                          static_cast<unsigned char>((x >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

static_assert(std::endian::native == std::endian::little,
              "float payload io assumes a little-endian host");

}  // namespace

void write_vxt(std::ostream& os, const TensorF& t) {
    os.write(kMagic, 4);
    put_u32_le(os, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape) {
        if (d < 0 || d > 0xffffffffLL) throw IoError("write_vxt: dim out of u32 range");
        put_u32_le(os, static_cast<uint32_t>(d));
    }
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!os) throw IoError("write_vxt: stream write failed");
}

void write_vxt(const std::string& path, const TensorF& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("write_vxt: cannot open " + path);
    write_vxt(os, t);
}

TensorF read_vxt(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("read_vxt: bad magic (expected VXT1)");
    uint32_t rank = get_u32_le(is);
    if (rank > 8) throw FormatError("read_vxt: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(get_u32_le(is));
    TensorF t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!is) throw FormatError("read_vxt: truncated payload");
    return t;
}

TensorF read_vxt(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("read_vxt: cannot open " + path);
    return read_vxt(is);
}

}  // namespace voxrep
