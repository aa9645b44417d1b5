#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nspforge/errors.hpp"

namespace nspforge {

// Little-endian fixed-width serialization into a growable byte buffer, and
// the matching cursor-based reader. All artifact formats go through these.
struct ByteSink {
  std::vector<char> bytes;

  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes.insert(bytes.end(), buf, buf + sizeof(T));
  }
  void put_bytes(const void* p, size_t n) {
    const char* c = static_cast<const char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  void put_string(const std::string& s) {
    put<uint32_t>(static_cast<uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  // Overwrites sizeof(T) bytes at a previously reserved offset.
  template <class T>
  void patch(size_t off, T v) {
    std::memcpy(bytes.data() + off, &v, sizeof(T));
  }
};

class ByteSource {
 public:
  ByteSource(const char* data, size_t size) : data_(data), size_(size) {}

  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_ + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_bytes(void* out, size_t n) {
    need(n);
    std::memcpy(out, data_ + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<uint32_t>();
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }
  void seek(size_t pos) {
    if (pos > size_) throw DatasetError("seek past end of file");
    pos_ = pos;
  }
  size_t pos() const { return pos_; }
  size_t size() const { return size_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > size_)
      throw DatasetError("truncated file: wanted " + std::to_string(n) +
                         " bytes at offset " + std::to_string(pos_));
  }
  const char* data_;
  size_t size_;
  size_t pos_ = 0;
};

inline void write_file(const std::string& path, const std::vector<char>& bytes,
                       const char* error_kind = "io") {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) {
    const std::string msg = "cannot open for write: " + path;
    if (std::string(error_kind) == "dataset") throw DatasetWriteError(msg);
    throw IoError(msg);
  }
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) {
    const std::string msg = "short write: " + path;
    if (std::string(error_kind) == "dataset") throw DatasetWriteError(msg);
    throw IoError(msg);
  }
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open: " + path);
  const auto size = f.tellg();
  f.seekg(0);
  std::vector<char> bytes(static_cast<size_t>(size));
  f.read(bytes.data(), size);
  if (!f) throw IoError("short read: " + path);
  return bytes;
}

// FNV-1a over a byte string; fingerprints resolved configs.
inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace nspforge
