#include "segaware/tensor_io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "segaware/errors.hpp"

namespace segaware {

namespace {

const unsigned char kMagic[4] = {0x54, 0x4E, 0x53, 0x52};  // "TNSR"
const unsigned char kDtypeF64 = 0x01;

void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw IoError("truncated tensor header in " + path);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(kMagic), 4);
  os.put(static_cast<char>(kDtypeF64));
  os.put(static_cast<char>(t.shape.size()));
  for (std::size_t e : t.shape) put_u32_le(os, static_cast<std::uint32_t>(e));
  // f64 payload written as-is; this code targets little-endian hosts.
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!os) throw IoError("short write to " + path);
}

Tensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  unsigned char magic[4];
  if (!is.read(reinterpret_cast<char*>(magic), 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("bad magic in " + path + ": not a tensor file");
  }
  int dtype = is.get();
  if (dtype != kDtypeF64) {
    throw IoError("unsupported dtype tag in " + path);
  }
  int rank = is.get();
  if (rank < 1 || rank > 4) {
    throw IoError("unsupported tensor rank in " + path);
  }
  std::vector<std::size_t> shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) e = get_u32_le(is, path);
  Tensor t(shape);
  if (!is.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(double)))) {
    throw IoError("truncated tensor payload in " + path);
  }
  return t;
}

}  // namespace segaware
