#include "racmf/container.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace racmf {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr const char* kFormatTag = "racmf-container";
constexpr int kFormatVersion = 1;
constexpr std::string_view kHeaderMarker = "{\"name\":";

std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 1; }
const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "u8"; }

std::string shape_text(const std::vector<std::int64_t>& shape) {
    std::string s;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s.empty() ? "scalar" : s;
}

void append(std::vector<std::uint8_t>& out, const std::string& s) {
    out.insert(out.end(), s.begin(), s.end());
}

}  // namespace

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t n, std::uint32_t seed) {
    uLong crc = seed;
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = ::crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::size_t NamedArray::element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::size_t NamedArray::byte_count() const { return element_count() * dtype_size(dtype); }

NamedArray NamedArray::from_image(std::string name, const Image& img) {
    NamedArray a;
    a.name = std::move(name);
    a.dtype = DType::F32;
    a.shape = {img.rows, img.cols};
    a.f32 = img.data;
    return a;
}

NamedArray NamedArray::from_mask(std::string name, const Mask& m) {
    NamedArray a;
    a.name = std::move(name);
    a.dtype = DType::U8;
    a.shape = {m.rows, m.cols};
    a.u8 = m.data;
    return a;
}

NamedArray NamedArray::from_floats(std::string name, std::vector<std::int64_t> shape,
                                   std::vector<float> values) {
    NamedArray a;
    a.name = std::move(name);
    a.dtype = DType::F32;
    a.shape = std::move(shape);
    if (values.size() != a.element_count()) {
        throw DimensionError("array '" + a.name + "': " + std::to_string(values.size()) +
                             " values for shape " + shape_text(a.shape));
    }
    a.f32 = std::move(values);
    return a;
}

Image NamedArray::to_image() const {
    if (dtype != DType::F32 || shape.size() != 2) {
        throw FormatError("array '" + name + "' is not a 2-D f32 image");
    }
    Image img(static_cast<int>(shape[0]), static_cast<int>(shape[1]));
    img.data = f32;
    return img;
}

Mask NamedArray::to_mask() const {
    if (dtype != DType::U8 || shape.size() != 2) {
        throw FormatError("array '" + name + "' is not a 2-D u8 mask");
    }
    Mask m(static_cast<int>(shape[0]), static_cast<int>(shape[1]));
    m.data = u8;
    return m;
}

const NamedArray* Container::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const NamedArray& Container::get(const std::string& name) const {
    if (const auto* a = find(name)) return *a;
    throw FormatError("container has no array named '" + name + "'");
}

std::vector<std::uint8_t> encode_container(const Container& c) {
    std::vector<std::uint8_t> out;
    nlohmann::ordered_json pre;
    pre["format"] = kFormatTag;
    pre["version"] = kFormatVersion;
    pre["meta"] = c.meta;
    pre["arrays"] = c.arrays.size();
    append(out, pre.dump() + "\n");

    std::uint32_t crc = 0;
    for (const auto& a : c.arrays) {
        if (a.name.empty()) throw FormatError("array name must be nonempty");
        const std::size_t held = a.dtype == DType::F32 ? a.f32.size() : a.u8.size();
        if (held != a.element_count()) {
            throw DimensionError("array '" + a.name + "': shape " + shape_text(a.shape) +
                                 " but " + std::to_string(held) + " elements");
        }
        nlohmann::ordered_json h;
        h["name"] = a.name;
        h["dtype"] = dtype_name(a.dtype);
        h["shape"] = a.shape;
        h["order"] = "row-major";
        h["endianness"] = "little";
        append(out, h.dump() + "\n");
        const auto* p = a.dtype == DType::F32 ? reinterpret_cast<const std::uint8_t*>(a.f32.data())
                                              : a.u8.data();
        out.insert(out.end(), p, p + a.byte_count());
        crc = crc32_bytes(p, a.byte_count(), crc);
    }
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFFu));
    return out;
}

namespace {

struct Cursor {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    std::string line(const char* what) {
        auto it = std::find(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end(), '\n');
        if (it == buf.end()) throw FormatError(std::string("truncated file: missing ") + what);
        std::string s(buf.begin() + static_cast<std::ptrdiff_t>(pos), it);
        pos = static_cast<std::size_t>(it - buf.begin()) + 1;
        return s;
    }
};

nlohmann::json parse_json_line(const std::string& s, const char* what) {
    try {
        return nlohmann::json::parse(s);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed ") + what + ": " + e.what());
    }
}

}  // namespace

Container decode_container(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4) throw FormatError("file too short to be a container");
    const std::size_t payload_end = bytes.size() - 4;
    Cursor cur{bytes};
    const auto pre = parse_json_line(cur.line("preamble"), "preamble");
    if (!pre.is_object() || pre.value("format", "") != kFormatTag) {
        throw FormatError("not a racmf container (bad preamble)");
    }
    if (pre.value("version", -1) != kFormatVersion) {
        throw FormatError("unsupported container version " + pre.value("version", nlohmann::json()).dump());
    }
    Container c;
    c.meta = pre.value("meta", nlohmann::json::object());
    const auto n_arrays = pre.value("arrays", std::size_t{0});

    std::uint32_t crc = 0;
    for (std::size_t i = 0; i < n_arrays; ++i) {
        if (cur.pos >= payload_end) throw FormatError("truncated file: expected " + std::to_string(n_arrays) +
                                                      " arrays, found " + std::to_string(i));
        const auto h = parse_json_line(cur.line("array header"), "array header");
        NamedArray a;
        try {
            a.name = h.at("name").get<std::string>();
            const auto dt = h.at("dtype").get<std::string>();
            if (dt == "f32")
                a.dtype = DType::F32;
            else if (dt == "u8")
                a.dtype = DType::U8;
            else
                throw FormatError("array '" + a.name + "': unsupported dtype '" + dt + "'");
            a.shape = h.at("shape").get<std::vector<std::int64_t>>();
            if (h.at("order").get<std::string>() != "row-major" || h.at("endianness").get<std::string>() != "little") {
                throw FormatError("array '" + a.name + "': only row-major little-endian payloads are supported");
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed array header: ") + e.what());
        }
        for (auto d : a.shape)
            if (d < 0) throw FormatError("array '" + a.name + "': negative dimension");

        // Actual payload extent: up to the next header, or to the CRC trailer for the last array.
        std::size_t extent_end = payload_end;
        if (i + 1 < n_arrays) {
            const auto* begin = bytes.data() + cur.pos;
            const auto* end = bytes.data() + payload_end;
            const auto* hit = std::search(begin, end, kHeaderMarker.begin(), kHeaderMarker.end());
            // The header marker is preceded by the previous payload; find the one whose
            // preceding payload length matches the declaration first, then fall back.
            const std::size_t declared_end = cur.pos + a.byte_count();
            if (declared_end < payload_end &&
                std::equal(kHeaderMarker.begin(), kHeaderMarker.end(), bytes.data() + declared_end,
                           bytes.data() + std::min(payload_end, declared_end + kHeaderMarker.size()))) {
                extent_end = declared_end;
            } else if (hit != end) {
                extent_end = static_cast<std::size_t>(hit - bytes.data());
            }
        }
        const std::size_t actual = extent_end - cur.pos;
        if (actual != a.byte_count() && !(i + 1 == n_arrays && actual > a.byte_count())) {
            const std::size_t per = dtype_size(a.dtype);
            std::string implied;
            if (a.shape.size() == 2 && a.shape[0] == a.shape[1]) {
                const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(actual / per))));
                if (side * side * per == actual) implied = ", i.e. " + std::to_string(side) + "x" + std::to_string(side);
            }
            throw FormatError("array '" + a.name + "': header declares shape " + shape_text(a.shape) + " (" +
                              std::to_string(a.element_count()) + " " + dtype_name(a.dtype) + " elements, " +
                              std::to_string(a.byte_count()) + " bytes) but payload holds " +
                              std::to_string(actual) + " bytes (" + std::to_string(actual / per) + " elements" + implied + ")");
        }
        if (i + 1 == n_arrays && actual != a.byte_count()) {
            throw FormatError("array '" + a.name + "': " + std::to_string(actual - a.byte_count()) +
                              " trailing bytes after the last payload");
        }
        const auto* p = bytes.data() + cur.pos;
        if (a.dtype == DType::F32) {
            a.f32.resize(a.element_count());
            std::memcpy(a.f32.data(), p, a.byte_count());
        } else {
            a.u8.assign(p, p + a.byte_count());
        }
        crc = crc32_bytes(p, a.byte_count(), crc);
        cur.pos += a.byte_count();
        c.arrays.push_back(std::move(a));
    }
    if (cur.pos != payload_end) throw FormatError("unexpected bytes before CRC trailer");
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[payload_end + i]) << (8 * i);
    if (stored != crc) {
        std::ostringstream os;
        os << "checksum failure: stored CRC32 " << std::hex << stored << " != computed " << crc;
        throw FormatError(os.str());
    }
    return c;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
        f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        f.flush();
        if (!f) throw IoError("write failed for " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename into " + path.string());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_container(const std::filesystem::path& path, const Container& c) {
    const auto bytes = encode_container(c);
    write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Container read_container(const std::filesystem::path& path) {
    const auto s = read_file(path);
    return decode_container(std::vector<std::uint8_t>(s.begin(), s.end()));
}

}  // namespace racmf
