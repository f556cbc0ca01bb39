#pragma once

// Little-endian record encoding used by every on-the-wire format in the
// project. Field order and widths for each record type are listed in
// docs/formats.md; this header supplies the primitive cursor types.

#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>

#include "errors.hpp"

namespace quonet {

using Bytes = std::vector<uint8_t>;

class WireWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }

    void u16(uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }

    void f64(double v) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        __builtin_memcpy(&bits, &v, 8);
        u64(bits);
    }

    // u32 length prefix + raw bytes.
    void blob(const uint8_t* data, std::size_t n) {
        u32(static_cast<uint32_t>(n));
        buf_.insert(buf_.end(), data, data + n);
    }

    void blob(const Bytes& b) { blob(b.data(), b.size()); }

    void raw(const uint8_t* data, std::size_t n) { buf_.insert(buf_.end(), data, data + n); }

    Bytes take() { return std::move(buf_); }
    const Bytes& view() const { return buf_; }

private:
    Bytes buf_;
};

class WireReader {
public:
    explicit WireReader(const Bytes& b) : data_(b.data()), size_(b.size()) {}
    WireReader(const uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    uint8_t u8() { return data_[need(1)]; }

    uint16_t u16() {
        std::size_t o = need(2);
        uint16_t v = 0;
        for (int i = 1; i >= 0; --i) v = static_cast<uint16_t>((v << 8) | data_[o + i]);
        return v;
    }

    uint32_t u32() {
        std::size_t o = need(4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | data_[o + i];
        return v;
    }

    uint64_t u64() {
        std::size_t o = need(8);
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | data_[o + i];
        return v;
    }

    double f64() {
        uint64_t bits = u64();
        double v;
        __builtin_memcpy(&v, &bits, 8);
        return v;
    }

    Bytes blob() {
        uint32_t n = u32();
        std::size_t o = need(n);
        return Bytes(data_ + o, data_ + o + n);
    }

    bool done() const { return pos_ == size_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    std::size_t need(std::size_t n) {
        if (pos_ + n > size_) fail(Errc::invalid_input, "truncated wire record");
        std::size_t o = pos_;
        pos_ += n;
        return o;
    }

    const uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline Bytes to_bytes(const std::string& s) { return Bytes(s.begin(), s.end()); }

inline std::string to_string(const Bytes& b) { return std::string(b.begin(), b.end()); }

}  // namespace quonet
