#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "fedseg/common.hpp"

namespace fedseg::binio {

// Little-endian byte buffers for the on-disk formats, independent of host
// endianness.

class Writer {
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
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void bytes(const void* p, std::size_t n) {
        buf_.append(static_cast<const char*>(p), n);
    }
    void f32_array(const float* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f32(p[i]);
    }

    const std::string& str() const { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string data) : buf_(std::move(data)) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return buf_.size() - pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

    std::uint8_t u8() {
        need(1, "u8");
        return static_cast<std::uint8_t>(buf_[pos_++]);
    }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n, "raw bytes");
        std::string out = buf_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::vector<float> f32_array(std::size_t n) {
        std::vector<float> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = f32();
        return out;
    }

private:
    void need(std::size_t n, const char* what) {
        if (buf_.size() - pos_ < n)
            throw FormatError(std::string("truncated file: expected ") + what, pos_);
    }
    std::uint64_t le(int width) {
        need(static_cast<std::size_t>(width), "integer field");
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(buf_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }

    std::string buf_;
    std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& data);

}  // namespace fedseg::binio
