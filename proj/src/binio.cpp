#include "binio.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <iterator>

namespace tpkd::binio {

uint32_t crc32(const unsigned char* p, size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<uint32_t>(c);
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCode::kIo, "cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<unsigned char>& data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorCode::kIo, "cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
    require(static_cast<bool>(f), ErrorCode::kIo, "write failed for " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, ErrorCode::kIo,
          "cannot rename " + tmp + " to " + path);
}

void seal(Writer& w) {
  const uint32_t c = crc32(w.buffer().data(), w.size());
  w.u32(c);
}

size_t unseal(const std::vector<unsigned char>& data) {
  require(data.size() >= 4, ErrorCode::kCorruptFile, "file too short");
  const size_t body = data.size() - 4;
  uint32_t stored;
  std::memcpy(&stored, data.data() + body, 4);
  require(stored == crc32(data.data(), body), ErrorCode::kCorruptFile,
          "checksum mismatch");
  return body;
}

}  // namespace tpkd::binio
