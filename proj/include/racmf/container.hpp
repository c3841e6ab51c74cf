#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "racmf/grid.hpp"

namespace racmf {

enum class DType { F32, U8 };

/// One named array inside a container file. Exactly one of `f32` / `u8`
/// is populated, according to `dtype`.
struct NamedArray {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> shape;
    std::vector<float> f32;
    std::vector<std::uint8_t> u8;

    std::size_t element_count() const;
    std::size_t byte_count() const;

    static NamedArray from_image(std::string name, const Image& img);
    static NamedArray from_mask(std::string name, const Mask& m);
    static NamedArray from_floats(std::string name, std::vector<std::int64_t> shape,
                                  std::vector<float> values);
    Image to_image() const;
    Mask to_mask() const;

    bool operator==(const NamedArray&) const = default;
};

/// Self-describing array container.
///
/// Layout: a JSON preamble line carrying `meta`, then for every array a JSON
/// header line {"name","dtype","shape","order","endianness"} followed by the
/// raw little-endian payload, then a 4-byte little-endian CRC32 over all
/// payload bytes in file order.
struct Container {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<NamedArray> arrays;

    const NamedArray& get(const std::string& name) const;
    const NamedArray* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& bytes);

/// Writes via a temporary sibling file and rename, so readers never observe
/// a partially written file.
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Atomic write of an arbitrary byte/text payload (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t n, std::uint32_t seed = 0);

}  // namespace racmf
