#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace mv2mae::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class U>
U byteswap_if_needed(U v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(U) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
}

/// Little-endian writer over an in-memory buffer.
class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class U>
  void put(U v) {
    static_assert(std::is_arithmetic_v<U>);
    v = byteswap_if_needed(v);
    bytes(&v, sizeof(U));
  }
  template <class U>
  void put_span(std::span<const U> vs) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(vs.data(), vs.size_bytes());
    } else {
      for (auto v : vs) put(v);
    }
  }
  const std::vector<unsigned char>& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }

 private:
  std::vector<unsigned char> buf_;
};

/// Little-endian reader over a whole file loaded in memory.
class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : name_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + name_ + " for reading");
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  explicit Reader(std::vector<unsigned char> buf, std::string name = "<memory>")
      : name_(std::move(name)), buf_(std::move(buf)) {}

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw IoError("unexpected end of file: " + name_);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <class U>
  U get() {
    U v;
    bytes(&v, sizeof(U));
    return byteswap_if_needed(v);
  }
  template <class U>
  void get_span(std::span<U> out) {
    bytes(out.data(), out.size_bytes());
    if constexpr (std::endian::native != std::endian::little) {
      for (auto& v : out) v = byteswap_if_needed(v);
    }
  }
  bool at_end() const { return pos_ == buf_.size(); }
  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::vector<unsigned char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace mv2mae::io
