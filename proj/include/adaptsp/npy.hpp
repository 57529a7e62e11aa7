#pragma once

// Reader/writer for the NPY v1.0 array container restricted to little-endian
// f4/f8 payloads in C order. Output is byte-identical to what numpy.save
// produces for the same array.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "adaptsp/error.hpp"

namespace adaptsp {

enum class Dtype { f32, f64 };

inline const char* to_string(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw validation_error("unknown dtype '" + s + "' (expected f32 or f64)");
}

struct NpyArray {
  std::vector<std::size_t> shape;
  Dtype dtype = Dtype::f64;
  std::vector<double> values;  // widened, row-major
};

namespace npy_detail {

inline constexpr char kMagic[] = "\x93NUMPY";
inline constexpr std::size_t kMagicLen = 6;

inline std::string shape_literal(std::span<const std::size_t> shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  if (shape.size() == 1) s += ",";
  s += ")";
  return s;
}

inline void put_le(std::string& out, std::uint64_t bits, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace npy_detail

/// Serialises an array. Throws if an f64 value cannot be represented as f32
/// when narrowing, or if the header would not fit the v1.0 length field.
inline std::string encode_npy(std::span<const std::size_t> shape, std::span<const double> values,
                              Dtype dtype) {
  using namespace npy_detail;
  std::size_t count = 1;
  for (std::size_t s : shape) count *= s;
  if (count != values.size()) throw internal_error("encode_npy: shape does not match payload");

  std::string header = "{'descr': '";
  header += dtype == Dtype::f32 ? "<f4" : "<f8";
  header += "', 'fortran_order': False, 'shape': " + shape_literal(shape) + ", }";
  const std::size_t preamble = kMagicLen + 2 + 2;
  std::size_t total = preamble + header.size() + 1;
  const std::size_t padded = (total + 63) / 64 * 64;
  header.append(padded - total, ' ');
  header.push_back('\n');
  if (header.size() > 0xffff) throw validation_error("array shape not representable in NPY v1.0 header");

  std::string out;
  const std::size_t width = dtype == Dtype::f32 ? 4 : 8;
  out.reserve(padded + values.size() * width);
  out.append(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  put_le(out, header.size(), 2);
  out += header;
  for (double x : values) {
    if (dtype == Dtype::f64) {
      put_le(out, std::bit_cast<std::uint64_t>(x), 8);
    } else {
      const float f = static_cast<float>(x);
      if (std::isfinite(x) && !std::isfinite(f)) {
        throw validation_error("value " + std::to_string(x) + " not representable as f32");
      }
      put_le(out, std::bit_cast<std::uint32_t>(f), 4);
    }
  }
  return out;
}

inline NpyArray decode_npy(std::string_view bytes) {
  using namespace npy_detail;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kMagicLen + 4 || bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen)) {
    throw validation_error("malformed array header: bad magic");
  }
  const unsigned major = p[6];
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (major == 1) {
    header_len = get_le(p + 8, 2);
    offset = 10;
  } else if (major == 2 && bytes.size() >= 12) {
    header_len = get_le(p + 8, 4);
    offset = 12;
  } else {
    throw validation_error("malformed array header: unsupported version " + std::to_string(major));
  }
  if (bytes.size() < offset + header_len) throw validation_error("malformed array header: truncated");
  const std::string header(bytes.substr(offset, header_len));

  static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  std::smatch m;

  NpyArray arr;
  if (!std::regex_search(header, m, descr_re)) throw validation_error("malformed array header: no descr");
  if (m[1] == "<f8") {
    arr.dtype = Dtype::f64;
  } else if (m[1] == "<f4") {
    arr.dtype = Dtype::f32;
  } else {
    throw validation_error("malformed array header: unsupported descr '" + m[1].str() + "'");
  }
  if (!std::regex_search(header, m, order_re)) throw validation_error("malformed array header: no fortran_order");
  if (m[1] != "False") throw validation_error("malformed array header: fortran_order arrays are not supported");
  if (!std::regex_search(header, m, shape_re)) throw validation_error("malformed array header: no shape");

  std::stringstream dims(m[1].str());
  std::string tok;
  std::size_t count = 1;
  while (std::getline(dims, tok, ',')) {
    const auto first = tok.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(tok.substr(first), &used);
    } catch (const std::exception&) {
      throw validation_error("malformed array header: bad shape entry '" + tok + "'");
    }
    arr.shape.push_back(static_cast<std::size_t>(v));
    count *= static_cast<std::size_t>(v);
  }

  const std::size_t width = arr.dtype == Dtype::f32 ? 4 : 8;
  const std::size_t payload = offset + header_len;
  if (bytes.size() - payload != count * width) {
    throw validation_error("malformed array: payload has " + std::to_string(bytes.size() - payload) +
                           " bytes, shape needs " + std::to_string(count * width));
  }
  arr.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto* q = p + payload + i * width;
    if (width == 8) {
      arr.values[i] = std::bit_cast<double>(get_le(q, 8));
    } else {
      arr.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(q, 4)));
    }
  }
  return arr;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw validation_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw validation_error("write failed for " + path.string());
}

inline NpyArray read_npy(const std::filesystem::path& path) { return decode_npy(read_file(path)); }

inline void write_npy(const std::filesystem::path& path, std::span<const std::size_t> shape,
                      std::span<const double> values, Dtype dtype) {
  write_file(path, encode_npy(shape, values, dtype));
}

}  // namespace adaptsp
