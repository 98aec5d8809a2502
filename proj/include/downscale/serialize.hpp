#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "downscale/error.hpp"

namespace downscale {

// Little-endian binary writer/reader for the versioned containers (dataset,
// checkpoint). Values are written byte-by-byte so the on-disk layout is
// host-independent; doubles are IEEE-754 bit patterns.

class BinWriter {
public:
    void u16(std::uint16_t v);
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void f64_array(const double* p, std::size_t n);
    void str(const std::string& s); // u16 length prefix + bytes
    void magic(const char tag[4]);

    const std::vector<std::uint8_t>& bytes() const { return buf_; }
    void write_file(const std::filesystem::path& path) const;

private:
    std::vector<std::uint8_t> buf_;
};

class BinReader {
public:
    explicit BinReader(std::vector<std::uint8_t> bytes) : buf_(std::move(bytes)) {}
    static BinReader from_file(const std::filesystem::path& path);

    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    void f64_array(double* p, std::size_t n);
    std::string str();
    void expect_magic(const char tag[4], const std::string& what);

    std::size_t remaining() const { return buf_.size() - pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const;
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

} // namespace downscale
