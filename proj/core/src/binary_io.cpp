#include "bakd/binary_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <zlib.h>

namespace bakd {

namespace {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

template <class T>
void put(std::vector<std::uint8_t>& buf, T v) {
  v = to_little(v);
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

}  // namespace

void ByteWriter::bytes(std::span<const std::uint8_t> data) {
  buf_.insert(buf_.end(), data.begin(), data.end());
}

void ByteWriter::magic(std::string_view tag) {
  buf_.insert(buf_.end(), tag.begin(), tag.end());
}

void ByteWriter::u32(std::uint32_t v) { put(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put(buf_, v); }
void ByteWriter::f64(double v) { put(buf_, std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::f64s(std::span<const double> values) {
  buf_.reserve(buf_.size() + values.size() * 8);
  for (double v : values) f64(v);
}

void ByteWriter::str(std::string_view s) {
  u64(s.size());
  buf_.insert(buf_.end(), s.begin(), s.end());
}

std::span<const std::uint8_t> ByteReader::take(std::size_t n) {
  if (remaining() < n) {
    throw FormatError("truncated data: needed " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", " + std::to_string(remaining()) + " available");
  }
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}

void ByteReader::expect_magic(std::string_view tag) {
  const std::size_t at = pos_;
  auto got = take(tag.size());
  if (!std::equal(got.begin(), got.end(), tag.begin())) {
    throw FormatError("bad magic at offset " + std::to_string(at) + ": expected '" +
                      std::string(tag) + "'");
  }
}

std::uint8_t ByteReader::u8() { return take(1)[0]; }

std::uint32_t ByteReader::u32() {
  std::uint32_t v = 0;
  std::memcpy(&v, take(4).data(), 4);
  return to_little(v);
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v = 0;
  std::memcpy(&v, take(8).data(), 8);
  return to_little(v);
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::f64s(std::span<double> out) {
  for (double& v : out) v = f64();
}

std::string ByteReader::str() {
  const auto n = u64();
  auto raw = take(static_cast<std::size_t>(n));
  return {raw.begin(), raw.end()};
}

std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  constexpr std::size_t kChunk = 1u << 30;
  for (std::size_t off = 0; off < data.size(); off += kChunk) {
    const std::size_t n = std::min(kChunk, data.size() - off);
    crc = crc32(crc, data.data() + off, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}

void append_crc32(ByteWriter& w) { w.u32(crc32_of(w.buffer())); }

std::span<const std::uint8_t> verify_crc32(std::span<const std::uint8_t> data,
                                           std::string_view what) {
  if (data.size() < 4) throw FormatError(std::string(what) + ": file too short for checksum");
  auto body = data.first(data.size() - 4);
  ByteReader tail(data.last(4));
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32_of(body);
  if (stored != actual) {
    throw FormatError(std::string(what) + ": integrity check failed (crc32 mismatch)");
  }
  return body;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace bakd
