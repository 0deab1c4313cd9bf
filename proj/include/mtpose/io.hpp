#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mtpose/config.hpp"

// Helpers shared by the binary file formats: a magic line, a text header
// closed by "end", then little-endian 4-byte payloads.

namespace mtpose {

namespace detail {

inline bool host_is_little_endian() {
    const std::uint32_t one = 1;
    unsigned char b;
    std::memcpy(&b, &one, 1);
    return b == 1;
}

template <typename T>
void write_le(std::ostream& out, const std::vector<T>& v) {
    static_assert(sizeof(T) == 4);
    if (host_is_little_endian()) {
        out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
        return;
    }
    for (const T& x : v) {
        unsigned char b[4];
        std::memcpy(b, &x, 4);
        std::swap(b[0], b[3]);
        std::swap(b[1], b[2]);
        out.write(reinterpret_cast<const char*>(b), 4);
    }
}

/// Reads `n` little-endian 4-byte values; reports the byte offset on
/// truncation.
template <typename T>
std::vector<T> read_le(std::istream& in, std::size_t n, const std::string& what, const std::string& path) {
    static_assert(sizeof(T) == 4);
    std::vector<T> v(n);
    const auto offset = static_cast<long long>(in.tellg());
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 4));
    if (static_cast<std::size_t>(in.gcount()) != n * 4) {
        throw std::runtime_error(path + ": truncated " + what + " payload at byte offset " +
                                 std::to_string(offset + in.gcount()) + " (expected " + std::to_string(n * 4) +
                                 " bytes from offset " + std::to_string(offset) + ")");
    }
    if (!host_is_little_endian()) {
        for (auto& x : v) {
            unsigned char b[4];
            std::memcpy(b, &x, 4);
            std::swap(b[0], b[3]);
            std::swap(b[1], b[2]);
            std::memcpy(&x, b, 4);
        }
    }
    return v;
}

struct HeaderReader {
    std::istream& in;
    std::string path;
    std::string tag;

    std::string line() {
        const auto offset = static_cast<long long>(in.tellg());
        std::string l;
        if (!std::getline(in, l)) {
            throw std::runtime_error(path + ": unexpected end of " + tag + " header at byte offset " +
                                     std::to_string(offset));
        }
        return l;
    }
    [[noreturn]] void fail(const std::string& msg, long long offset) const {
        throw std::runtime_error(path + ": " + msg + " at byte offset " + std::to_string(offset));
    }
};

inline void expect_magic(std::istream& in, const std::string& magic, const std::string& path) {
    std::string got;
    if (!std::getline(in, got)) throw std::runtime_error(path + ": empty file (byte offset 0)");
    if (got != magic) {
        throw std::runtime_error(path + ": bad magic tag '" + got.substr(0, 16) + "' at byte offset 0, expected '" +
                                 magic + "'");
    }
}

/// key=value header lines until "end".
inline KeyValueConfig read_header(std::istream& in, const std::string& path, const std::string& tag) {
    HeaderReader r{in, path, tag};
    KeyValueConfig kv;
    while (true) {
        const auto offset = static_cast<long long>(in.tellg());
        const std::string l = r.line();
        if (l == "end") break;
        const auto eq = l.find('=');
        if (eq == std::string::npos) r.fail("malformed header line '" + l.substr(0, 40) + "'", offset);
        kv.set(l.substr(0, eq), l.substr(eq + 1));
    }
    return kv;
}

inline int header_int(const KeyValueConfig& kv, const std::string& key, const std::string& path) {
    if (!kv.has(key)) throw std::runtime_error(path + ": header is missing '" + key + "'");
    const int v = kv.get_int(key, 0);
    if (v < 0) throw std::runtime_error(path + ": negative header value for '" + key + "'");
    return v;
}

inline void expect_eof(std::istream& in, const std::string& path) {
    const auto offset = static_cast<long long>(in.tellg());
    if (in.peek() != std::char_traits<char>::eof()) {
        throw std::runtime_error(path + ": trailing bytes after payload at byte offset " + std::to_string(offset));
    }
}

inline std::size_t checked_product(std::initializer_list<std::size_t> dims, const std::string& path) {
    std::size_t n = 1;
    for (std::size_t d : dims) {
        if (d != 0 && n > (std::size_t{1} << 40) / d) throw std::runtime_error(path + ": header declares an implausible size");
        n *= d;
    }
    return n;
}

}  // namespace detail

}  // namespace mtpose
