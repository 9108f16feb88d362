#include "misa/io.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace misa {

void append_f32_span_le(std::vector<std::uint8_t>& out, const float* p, std::size_t n) {
    out.reserve(out.size() + 4 * n);
    for (std::size_t i = 0; i < n; ++i) append_f32_le(out, p[i]);
}

std::uint32_t BlobReader::u32() {
    if (off_ + 4 > n_)
        throw std::runtime_error("blob truncated: need 4 bytes at offset " + std::to_string(off_) +
                                 ", have " + std::to_string(n_ - off_));
    std::uint32_t v = static_cast<std::uint32_t>(p_[off_]) |
                      (static_cast<std::uint32_t>(p_[off_ + 1]) << 8) |
                      (static_cast<std::uint32_t>(p_[off_ + 2]) << 16) |
                      (static_cast<std::uint32_t>(p_[off_ + 3]) << 24);
    off_ += 4;
    return v;
}

std::uint64_t BlobReader::u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
}

float BlobReader::f32() { return std::bit_cast<float>(u32()); }

double BlobReader::f64() { return std::bit_cast<double>(u64()); }

void BlobReader::f32_array(float* dst, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) dst[i] = f32();
}

void BlobReader::expect_exhausted(const std::string& what) const {
    if (off_ != n_)
        throw std::runtime_error(what + ": " + std::to_string(n_ - off_) +
                                 " unread trailing bytes in blob");
}

void write_blob_file(const std::string& path, const json& header,
                     const std::vector<std::uint8_t>& blob) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    const std::string head = header.dump();
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    f.put('\n');
    if (!blob.empty())
        f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

BlobFile read_blob_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::size_t nl = bytes.find('\n');
    if (nl == std::string::npos)
        throw std::runtime_error(path + ": missing header line (no newline in file)");
    BlobFile out;
    try {
        out.header = json::parse(bytes.substr(0, nl));
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path + ": header is not valid JSON: " + e.what());
    }
    out.blob.assign(bytes.begin() + static_cast<std::ptrdiff_t>(nl) + 1, bytes.end());
    return out;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace misa
