#include "diet/bytes.hpp"

#include <fstream>
#include <iterator>

namespace diet {

void ByteWriter::str(const std::string& s) {
  if (s.size() > 0xFFFF) throw std::length_error("string too long for u16 length prefix");
  u16(static_cast<std::uint16_t>(s.size()));
  raw(s.data(), s.size());
}

void ByteReader::need(std::size_t n) const {
  if (n > remaining()) {
    throw DataError("truncated input: need " + std::to_string(n) + " bytes at offset " + std::to_string(offset_) +
                    ", have " + std::to_string(remaining()));
  }
}

void ByteReader::f64s(std::span<double> out) {
  need(out.size_bytes());
  std::memcpy(out.data(), bytes_.data() + offset_, out.size_bytes());
  offset_ += out.size_bytes();
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
  need(n);
  auto view = bytes_.subspan(offset_, n);
  offset_ += n;
  return view;
}

std::string ByteReader::str() {
  const std::size_t n = u16();
  auto view = bytes(n);
  return std::string(view.begin(), view.end());
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

}  // namespace diet
