#include "downscale/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace downscale {

void BinWriter::u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
}

void BinWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void BinWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void BinWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void BinWriter::f64_array(const double* p, std::size_t n) {
    buf_.reserve(buf_.size() + 8 * n);
    for (std::size_t i = 0; i < n; ++i) f64(p[i]);
}

void BinWriter::str(const std::string& s) {
    if (s.size() > 0xffff) throw FormatError("string too long for container: " + std::to_string(s.size()));
    u16(static_cast<std::uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
}

void BinWriter::magic(const char tag[4]) {
    buf_.insert(buf_.end(), tag, tag + 4);
}

void BinWriter::write_file(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw FormatError("write failed: " + path.string());
}

BinReader BinReader::from_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return BinReader(std::move(bytes));
}

void BinReader::need(std::size_t n) const {
    if (pos_ + n > buf_.size())
        throw FormatError("container truncated: need " + std::to_string(n) + " bytes at offset " +
                          std::to_string(pos_) + ", have " + std::to_string(buf_.size() - pos_));
}

std::uint16_t BinReader::u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

std::uint32_t BinReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
}

std::uint64_t BinReader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
}

double BinReader::f64() { return std::bit_cast<double>(u64()); }

void BinReader::f64_array(double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) p[i] = f64();
}

std::string BinReader::str() {
    std::uint16_t n = u16();
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
}

void BinReader::expect_magic(const char tag[4], const std::string& what) {
    need(4);
    if (std::memcmp(buf_.data() + pos_, tag, 4) != 0)
        throw FormatError("bad magic for " + what + " container");
    pos_ += 4;
}

} // namespace downscale
