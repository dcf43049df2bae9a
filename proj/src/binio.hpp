#pragma once

// Little-endian byte writer/reader shared by the checkpoint and dataset
// formats. Reads past the end raise kCorruptFile.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "tpkd/error.hpp"

namespace tpkd::binio {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(uint32_t v) { bytes(&v, 4); }
  void u64(uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void i32(int32_t v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  size_t size() const { return buf_.size(); }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(const unsigned char* p, size_t n) : p_(p), n_(n) {}

  void bytes(void* out, size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  uint32_t u32() { return get<uint32_t>(); }
  uint64_t u64() { return get<uint64_t>(); }
  float f32() { return get<float>(); }
  double f64() { return get<double>(); }
  int32_t i32() { return get<int32_t>(); }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }
  size_t remaining() const { return n_ - pos_; }

 private:
  template <typename T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void need(size_t n) const {
    require(n <= n_ - pos_, ErrorCode::kCorruptFile, "unexpected end of file");
  }

  const unsigned char* p_;
  size_t n_;
  size_t pos_ = 0;
};

uint32_t crc32(const unsigned char* p, size_t n);

std::vector<unsigned char> read_file(const std::string& path);
/// Writes via a temporary file and rename so readers never see a partial file.
void write_file(const std::string& path, const std::vector<unsigned char>& data);

/// Appends the CRC-32 of everything written so far.
void seal(Writer& w);
/// Verifies and strips the trailing CRC-32; returns the payload length.
size_t unseal(const std::vector<unsigned char>& data);

}  // namespace tpkd::binio
