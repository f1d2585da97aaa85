// Little-endian binary file helpers shared by the checkpoint, trace, state
// and cache formats.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kvhybrid {

enum class format_fault {
    io,          // cannot open / read / write
    bad_magic,   // magic bytes do not match
    bad_version, // unsupported format version
    truncated,   // file ends before the header-declared payload
    dim_mismatch, // header dimensions inconsistent with payload or caller
    inconsistent // payload violates a recomputable invariant (e.g. stored scores)
};

class format_error : public std::runtime_error {
public:
    format_error(format_fault fault, const std::string& msg)
        : std::runtime_error(msg), fault_(fault) {}
    format_fault fault() const { return fault_; }

private:
    format_fault fault_;
};

class BinWriter {
public:
    explicit BinWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw format_error(format_fault::io, "cannot open for write: " + path);
    }

    void magic(const char (&m)[9]) { out_.write(m, 8); }
    void u32(std::uint32_t v) {
        std::array<unsigned char, 4> b;
        for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xFF;
        out_.write(reinterpret_cast<const char*>(b.data()), 4);
    }
    void f64(double v) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        std::array<unsigned char, 8> b;
        for (int i = 0; i < 8; ++i) b[i] = (bits >> (8 * i)) & 0xFF;
        out_.write(reinterpret_cast<const char*>(b.data()), 8);
    }
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }
    void close() {
        out_.close();
        if (!out_) throw format_error(format_fault::io, "write failed on close");
    }

private:
    std::ofstream out_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw format_error(format_fault::io, "cannot open for read: " + path);
    }

    void expect_magic(const char (&m)[9]) {
        char got[8];
        in_.read(got, 8);
        if (!in_ || std::memcmp(got, m, 8) != 0)
            throw format_error(format_fault::bad_magic, path_ + ": bad magic");
    }
    std::uint32_t u32() {
        unsigned char b[4];
        in_.read(reinterpret_cast<char*>(b), 4);
        if (!in_) throw format_error(format_fault::truncated, path_ + ": truncated");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
        return v;
    }
    double f64() {
        unsigned char b[8];
        in_.read(reinterpret_cast<char*>(b), 8);
        if (!in_) throw format_error(format_fault::truncated, path_ + ": truncated");
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
        return std::bit_cast<double>(bits);
    }
    void f64s(std::span<double> v) {
        for (double& x : v) x = f64();
    }
    bool at_eof() {
        in_.peek();
        return in_.eof();
    }

private:
    std::ifstream in_;
    std::string path_;
};

}  // namespace kvhybrid
