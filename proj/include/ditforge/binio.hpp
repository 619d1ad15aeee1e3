#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ditforge/errors.hpp"

namespace ditforge::binio {

// All on-disk formats are little-endian; these helpers assume a
// little-endian host (asserted at startup by the library's format tests).

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path) {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw IoError("cannot open " + path + " for reading");
        std::fseek(f, 0, SEEK_END);
        long n = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        buf_.resize(static_cast<size_t>(n));
        if (n > 0 && std::fread(buf_.data(), 1, static_cast<size_t>(n), f) != static_cast<size_t>(n)) {
            std::fclose(f);
            throw IoError("short read on " + path);
        }
        std::fclose(f);
    }

    size_t offset() const { return off_; }
    size_t remaining() const { return buf_.size() - off_; }
    bool eof() const { return off_ == buf_.size(); }

    void need(size_t n, const char* what) const {
        if (remaining() < n)
            throw FormatError(path_ + ": truncated while reading " + what + " (need " +
                                  std::to_string(n) + " bytes, have " + std::to_string(remaining()) + ")",
                              static_cast<long long>(off_));
    }

    void magic(const char tag[4]) {
        need(4, "magic");
        if (std::memcmp(buf_.data() + off_, tag, 4) != 0)
            throw FormatError(path_ + ": bad magic, expected '" + std::string(tag, 4) + "'", 0);
        off_ += 4;
    }

    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v;
        std::memcpy(&v, buf_.data() + off_, 4);
        off_ += 4;
        return v;
    }

    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v;
        std::memcpy(&v, buf_.data() + off_, 8);
        off_ += 8;
        return v;
    }

    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v;
        std::memcpy(&v, buf_.data() + off_, 2);
        off_ += 2;
        return v;
    }

    std::string str(size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(buf_.data() + off_), n);
        off_ += n;
        return s;
    }

    void f32(float* dst, size_t count, const char* what) {
        need(count * 4, what);
        std::memcpy(dst, buf_.data() + off_, count * 4);
        off_ += count * 4;
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::vector<unsigned char> buf_;
    size_t off_ = 0;
};

class Writer {
public:
    void magic(const char tag[4]) { raw(tag, 4); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void str(const std::string& s) { raw(s.data(), s.size()); }
    void f32(const float* src, size_t count) { raw(src, count * 4); }

    // Writes to <path>.tmp then renames, so a crash never leaves a partial
    // file under the final name.
    void commit(const std::string& path) const {
        std::string tmp = path + ".tmp";
        std::FILE* f = std::fopen(tmp.c_str(), "wb");
        if (!f) throw IoError("cannot open " + tmp + " for writing");
        if (!buf_.empty() && std::fwrite(buf_.data(), 1, buf_.size(), f) != buf_.size()) {
            std::fclose(f);
            std::remove(tmp.c_str());
            throw IoError("short write on " + tmp);
        }
        if (std::fclose(f) != 0) {
            std::remove(tmp.c_str());
            throw IoError("close failed on " + tmp);
        }
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) {
            std::remove(tmp.c_str());
            throw IoError("rename " + tmp + " -> " + path + " failed: " + ec.message());
        }
    }

    const std::vector<unsigned char>& bytes() const { return buf_; }

private:
    void raw(const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }

    std::vector<unsigned char> buf_;
};

// Guard rails applied before any allocation driven by file contents.
inline constexpr uint32_t kMaxNameLen = 4096;
inline constexpr uint32_t kMaxRank = 8;
inline constexpr uint64_t kMaxDim = uint64_t(1) << 24;
inline constexpr uint64_t kMaxElems = uint64_t(1) << 28;

inline void check_dims(Reader& r, const std::vector<uint32_t>& dims) {
    uint64_t total = 1;
    for (uint32_t d : dims) {
        if (d > kMaxDim)
            throw FormatError(r.path() + ": dimension " + std::to_string(d) + " exceeds limit",
                              static_cast<long long>(r.offset()));
        total *= d;
        if (total > kMaxElems)
            throw FormatError(r.path() + ": tensor element count exceeds limit",
                              static_cast<long long>(r.offset()));
    }
    // The payload must actually fit in what is left of the file.
    if (total * 4 > r.remaining())
        throw FormatError(r.path() + ": declared payload of " + std::to_string(total * 4) +
                              " bytes exceeds remaining " + std::to_string(r.remaining()),
                          static_cast<long long>(r.offset()));
}

} // namespace ditforge::binio
