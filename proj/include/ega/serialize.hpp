#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ega/common.hpp"

namespace ega {

// Little-endian binary encoding helpers. Readers throw FormatError naming the
// byte offset of the trouble; writers go through a temp file + rename so a
// crash never leaves a partial artifact behind.

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(char(v)); }
  void u16(uint16_t v) {
    u8(uint8_t(v & 0xFF));
    u8(uint8_t(v >> 8));
  }
  void u32(uint32_t v) {
    u16(uint16_t(v & 0xFFFF));
    u16(uint16_t(v >> 16));
  }
  void u64(uint64_t v) {
    u32(uint32_t(v & 0xFFFFFFFFULL));
    u32(uint32_t(v >> 32));
  }
  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void bytes(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void f32_array(const float* p, size_t n) {
    // x86 and every target we care about store IEEE floats little-endian;
    // fall back to per-element encoding elsewhere
    if constexpr (std::endian::native == std::endian::little) {
      bytes(p, n * sizeof(float));
    } else {
      for (size_t i = 0; i < n; ++i) f32(p[i]);
    }
  }

  const std::string& buffer() const { return buf_; }
  size_t size() const { return buf_.size(); }

  void write_file(const std::string& path) const {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) {
      std::error_code ec;
      fs::create_directories(target.parent_path(), ec);
    }
    fs::path tmp = target;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
      out.write(buf_.data(), std::streamsize(buf_.size()));
      if (!out) throw IoError("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path + ": " + ec.message());
  }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data, std::string source = "")
      : data_(std::move(data)), source_(std::move(source)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data), path);
  }

  uint8_t u8() {
    need(1, "u8");
    return uint8_t(data_[pos_++]);
  }
  uint16_t u16() {
    uint16_t lo = u8();
    return uint16_t(lo | (uint16_t(u8()) << 8));
  }
  uint32_t u32() {
    uint32_t lo = u16();
    return lo | (uint32_t(u16()) << 16);
  }
  uint64_t u64() {
    uint64_t lo = u32();
    return lo | (uint64_t(u32()) << 32);
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n, "string body");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void f32_array(float* p, size_t n) {
    need(n * sizeof(float), "float32 array");
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(p, data_.data() + pos_, n * sizeof(float));
      pos_ += n * sizeof(float);
    } else {
      for (size_t i = 0; i < n; ++i) p[i] = f32();
    }
  }
  void expect_magic(const char magic[4]) {
    need(4, "magic");
    if (std::memcmp(data_.data() + pos_, magic, 4) != 0)
      throw FormatError(where() + "bad magic at offset " + std::to_string(pos_) + ", expected \"" +
                        std::string(magic, 4) + "\"");
    pos_ += 4;
  }

  size_t offset() const { return pos_; }
  bool exhausted() const { return pos_ == data_.size(); }
  size_t remaining() const { return data_.size() - pos_; }

  void fail(const std::string& why) const {
    throw FormatError(where() + why + " at offset " + std::to_string(pos_));
  }

 private:
  void need(size_t n, const char* what) const {
    if (pos_ + n > data_.size())
      throw FormatError(where() + "truncated file: needed " + std::to_string(n) + " bytes for " +
                        what + " at offset " + std::to_string(pos_) + ", have " +
                        std::to_string(data_.size() - pos_));
  }
  std::string where() const { return source_.empty() ? "" : source_ + ": "; }

  std::string data_;
  std::string source_;
  size_t pos_ = 0;
};

// Simple container for a named float tensor inside checkpoint/tensor files.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

// Stand-alone tensor file ("EGT1"): rank, dims, raw float32. Used by the
// attack-demo export.
inline void write_tensor_file(const std::string& path, const std::vector<int>& shape,
                              const float* data) {
  ByteWriter w;
  w.bytes("EGT1", 4);
  w.u16(1);
  w.u32(uint32_t(shape.size()));
  size_t n = 1;
  for (int d : shape) {
    w.u32(uint32_t(d));
    n *= size_t(d);
  }
  w.f32_array(data, n);
  w.write_file(path);
}

inline NamedTensor read_tensor_file(const std::string& path) {
  ByteReader r = ByteReader::from_file(path);
  r.expect_magic("EGT1");
  uint16_t version = r.u16();
  if (version != 1) r.fail("unsupported tensor file version " + std::to_string(version));
  NamedTensor t;
  t.name = path;
  uint32_t rank = r.u32();
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    t.shape.push_back(int(r.u32()));
    n *= size_t(t.shape.back());
  }
  t.data.resize(n);
  r.f32_array(t.data.data(), n);
  return t;
}

}  // namespace ega
