#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace misa {

using json = nlohmann::json;

// Explicit little-endian packing so files are identical on any host.
inline void append_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

inline void append_f32_le(std::vector<std::uint8_t>& out, float v) {
    append_u32_le(out, std::bit_cast<std::uint32_t>(v));
}

inline void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
    append_u32_le(out, static_cast<std::uint32_t>(v & 0xFFFFFFFFu));
    append_u32_le(out, static_cast<std::uint32_t>(v >> 32));
}

inline void append_f64_le(std::vector<std::uint8_t>& out, double v) {
    append_u64_le(out, std::bit_cast<std::uint64_t>(v));
}

void append_f32_span_le(std::vector<std::uint8_t>& out, const float* p, std::size_t n);

// Sequential reader over a byte blob; throws on overrun with offset context.
class BlobReader {
  public:
    BlobReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    void f32_array(float* dst, std::size_t count);
    std::size_t remaining() const { return n_ - off_; }
    void expect_exhausted(const std::string& what) const;

  private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t off_ = 0;
};

// Container format shared by model, SVM, and dataset-cache files:
// one line of JSON (sorted keys, no whitespace), '\n', then a raw byte blob.
struct BlobFile {
    json header;
    std::vector<std::uint8_t> blob;
};

void write_blob_file(const std::string& path, const json& header,
                     const std::vector<std::uint8_t>& blob);
BlobFile read_blob_file(const std::string& path);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// FNV-1a 64-bit, used to fingerprint parameter blobs.
std::uint64_t fnv1a64(const std::uint8_t* p, std::size_t n);
std::string hash_hex(std::uint64_t h);

}  // namespace misa
