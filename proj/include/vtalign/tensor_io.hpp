#pragma once

// VTEN container: the on-disk tensor format used for feature volumes, blob
// masks, relevance-map exports and checkpoint payloads.
//
//   offset 0  magic "VTEN"
//          4  version  u16 LE (currently 1)
//          6  dtype    u8     (0 = 64-bit float, 1 = 32-bit float)
//          7  ndim     u8
//          8  dims     ndim x u64 LE
//          .  payload  row-major, little-endian
//
// Math stays 64-bit everywhere; dtype 1 is a storage mode that rounds to
// nearest on write and widens on read.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vtalign/tensor.hpp"

namespace vtalign {

enum class Dtype : std::uint8_t { f64 = 0, f32 = 1 };

struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string origin;

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size()) {
      std::ostringstream os;
      os << origin << ": truncated " << what << " at offset " << pos << " (need " << n
         << " bytes, have " << bytes.size() - pos << ")";
      throw FormatError(os.str());
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= std::uint16_t(std::uint8_t(bytes[pos++])) << (8 * i);
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(bytes[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[pos++])) << (8 * i);
    return v;
  }
};

}  // namespace detail

// Serializes to an in-memory buffer; checkpoints embed these blobs verbatim.
inline std::string tensor_to_bytes(const Tensor& t, Dtype dtype = Dtype::f64) {
  std::string out;
  out += "VTEN";
  detail::put_u16(out, 1);
  out.push_back(static_cast<char>(dtype));
  if (t.rank() > 255) throw std::invalid_argument("tensor_to_bytes: rank exceeds 255");
  out.push_back(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_u64(out, d);
  if (dtype == Dtype::f64) {
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  } else {
    for (double v : t.values()) {
      const float f = static_cast<float>(v);
      detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  }
  return out;
}

inline Tensor tensor_from_bytes(detail::ByteReader& r) {
  r.need(4, "magic");
  if (r.bytes.compare(r.pos, 4, "VTEN") != 0) {
    throw FormatError(r.origin + ": bad magic at offset " + std::to_string(r.pos) +
                      " (expected VTEN)");
  }
  r.pos += 4;
  const std::uint16_t version = r.u16("version");
  if (version != 1) {
    throw FormatError(r.origin + ": unsupported version " + std::to_string(version) +
                      " at offset " + std::to_string(r.pos - 2));
  }
  const std::uint8_t dtype_code = r.u8("dtype");
  if (dtype_code > 1) {
    throw FormatError(r.origin + ": unknown dtype code " + std::to_string(dtype_code) +
                      " at offset " + std::to_string(r.pos - 1));
  }
  const std::uint8_t ndim = r.u8("ndim");
  Shape shape(ndim);
  for (auto& d : shape) {
    d = r.u64("dims");
    if (d == 0) throw FormatError(r.origin + ": zero extent in dims");
  }
  const std::size_t count = numel(shape);
  std::vector<double> data(count);
  if (dtype_code == 0) {
    r.need(count * 8, "payload");
    for (auto& v : data) v = std::bit_cast<double>(r.u64("payload"));
  } else {
    r.need(count * 4, "payload");
    for (auto& v : data) v = static_cast<double>(std::bit_cast<float>(r.u32("payload")));
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

inline Tensor tensor_from_bytes(const std::string& bytes, const std::string& origin = "tensor") {
  detail::ByteReader r{bytes, 0, origin};
  Tensor t = tensor_from_bytes(r);
  if (r.pos != bytes.size()) {
    throw FormatError(origin + ": " + std::to_string(bytes.size() - r.pos) +
                      " trailing bytes after payload at offset " + std::to_string(r.pos));
  }
  return t;
}

inline void write_tensor(const std::string& path, const Tensor& t, Dtype dtype = Dtype::f64) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(path + ": cannot open for writing");
  const std::string bytes = tensor_to_bytes(t, dtype);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(path + ": write failed");
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(path + ": cannot open");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline Tensor read_tensor(const std::string& path) {
  return tensor_from_bytes(read_file_bytes(path), path);
}

}  // namespace vtalign
