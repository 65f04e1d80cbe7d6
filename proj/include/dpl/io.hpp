#pragma once

// Little-endian binary serialization plus atomic file writes. All on-disk
// artifacts (encoder/generator checkpoints, embedding caches) go through
// these helpers so fingerprints are stable across platforms.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dpl/common.hpp"

namespace dpl::io {

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void bytes(const void* data, std::size_t len) {
        buf_.append(static_cast<const char*>(data), len);
    }

    void magic(const char m[4]) { bytes(m, 4); }

    const std::string& str() const { return buf_; }
    std::uint64_t fingerprint() const { return fnv1a(buf_); }

private:
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string data) : buf_(std::move(data)) {}

    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }

    std::uint16_t u16() {
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= std::uint16_t(u8()) << (8 * i);
        return v;
    }

    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
        return v;
    }

    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    void expect_magic(const char m[4], const std::string& what) {
        need(4);
        if (std::memcmp(buf_.data() + pos_, m, 4) != 0)
            throw IoError(what + ": bad magic bytes");
        pos_ += 4;
    }

    bool at_end() const { return pos_ == buf_.size(); }
    std::size_t remaining() const { return buf_.size() - pos_; }

    std::string rest() {
        std::string out = buf_.substr(pos_);
        pos_ = buf_.size();
        return out;
    }

private:
    void need(std::size_t n) {
        if (pos_ + n > buf_.size()) throw IoError("truncated binary payload");
    }

    std::string buf_;
    std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return data;
}

// Write-temp-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& data) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(data.data(), static_cast<std::streamsize>(data.size()));
        if (!out) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

}  // namespace dpl::io
