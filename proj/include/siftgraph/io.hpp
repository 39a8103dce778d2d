#pragma once

// File helpers: whole-file reads, atomic writes, FNV-1a digests, little-endian
// byte streams and binary PPM images.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "siftgraph/error.hpp"
#include "siftgraph/image.hpp"

namespace siftgraph {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) { return fnv1a64(s.data(), s.size(), h); }

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw io_error("read failed for " + path.string());
  return os.str();
}

// Writes to a sibling temporary file and renames it over the target.
inline void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw io_error("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  thread_local std::mt19937_64 rng(std::hash<std::thread::id>{}(std::this_thread::get_id()) ^
                                   static_cast<std::uint64_t>(std::random_device{}()));
  fs::path tmp = path;
  tmp += ".tmp" + hex64(rng()).substr(0, 8);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw io_error("write failed for " + path.string());
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw io_error("cannot move temporary file onto " + path.string());
  }
}

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void bytes(std::string_view s) { buf_.append(s); }
  const std::string& str() const { return buf_; }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

// Reads fixed-width little-endian values; `truncated` names the failure.
class ByteReader {
 public:
  ByteReader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw validation_error(what_ + ": truncated at byte " + std::to_string(pos_));
  }
  std::string_view data_;
  std::size_t pos_ = 0;
  std::string what_;
};

// ---------------------------------------------------------------------------
// PPM (P6 colour, P5 grey), maxval up to 255
// ---------------------------------------------------------------------------

inline ImageTensor decode_ppm(std::string_view bytes, const std::string& name = "image") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        return;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) throw validation_error(name + ": PPM header value too large");
    }
    if (digits == 0) throw validation_error(name + ": malformed PPM header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5'))
    throw validation_error(name + ": not a binary PPM/PGM file (expected P6 or P5)");
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) throw validation_error(name + ": empty image");
  if (maxval == 0 || maxval > 255) throw validation_error(name + ": only 8-bit PPM is supported");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw validation_error(name + ": malformed PPM header");
  ++pos;
  if (bytes.size() - pos < w * h * channels) throw validation_error(name + ": truncated PPM pixel data");
  ImageTensor img(h, w, channels);
  for (std::size_t i = 0; i < img.values.size(); ++i)
    img.values[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / static_cast<float>(maxval);
  return img;
}

inline std::string encode_ppm(const ImageTensor& img) {
  std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.values.size());
  for (float v : img.values) out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

inline ImageTensor read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path), path.string()); }
inline void write_ppm(const std::filesystem::path& path, const ImageTensor& img) { atomic_write(path, encode_ppm(img)); }

}  // namespace siftgraph
