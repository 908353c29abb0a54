#include "nappure/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace nappure {

namespace {

constexpr char kMagic[4] = {'N', 'A', 'P', 'T'};

void put_u32_le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    put_u32_le(out, bits);
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_tensor(const std::string& path, const ImageTensor& t) {
    t.shape.validate();
    if (!t.all_finite())
        throw std::runtime_error("write_tensor: non-finite values in " + path);

    std::string blob;
    blob.append(kMagic, 4);
    const std::string header = std::string("{\"dtype\":\"f32le\",\"shape\":[") +
                               std::to_string(t.shape.channels) + "," +
                               std::to_string(t.shape.height) + "," +
                               std::to_string(t.shape.width) + "]}";
    put_u32_le(blob, static_cast<std::uint32_t>(header.size()));
    blob += header;
    blob.reserve(blob.size() + 4 * t.data.size());
    for (double v : t.data) put_f32_le(blob, static_cast<float>(v));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_tensor: cannot open " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("write_tensor: write failed for " + path);
}

ImageTensor read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_tensor: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (blob.size() < 8 || std::memcmp(blob.data(), kMagic, 4) != 0)
        throw std::runtime_error("read_tensor: bad magic bytes in " + path);

    const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
    const std::uint32_t header_len = get_u32_le(bytes + 4);
    if (blob.size() < 8 + static_cast<std::size_t>(header_len))
        throw std::runtime_error("read_tensor: malformed header in " + path);

    TensorShape shape;
    try {
        const auto header = nlohmann::json::parse(blob.substr(8, header_len));
        if (header.at("dtype").get<std::string>() != "f32le")
            throw std::runtime_error("unexpected dtype");
        const auto dims = header.at("shape");
        if (!dims.is_array() || dims.size() != 3) throw std::runtime_error("bad shape");
        shape = TensorShape{dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()};
        shape.validate();
    } catch (const std::exception& e) {
        throw std::runtime_error("read_tensor: malformed header in " + path + ": " + e.what());
    }

    const std::size_t payload_off = 8 + header_len;
    const std::size_t expect = shape.size() * 4;
    if (blob.size() - payload_off != expect)
        throw std::runtime_error("read_tensor: payload length mismatch in " + path + " (" +
                                 std::to_string(blob.size() - payload_off) + " bytes, expected " +
                                 std::to_string(expect) + ")");

    ImageTensor t(shape);
    for (std::size_t i = 0; i < shape.size(); ++i) {
        const std::uint32_t bits = get_u32_le(bytes + payload_off + 4 * i);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        t.data[i] = static_cast<double>(f);
    }
    return t;
}

void export_ppm(const std::string& path, const ImageTensor& t) {
    if (t.shape.channels != 1 && t.shape.channels != 3)
        throw std::invalid_argument("export_ppm: unsupported channel count " +
                                    std::to_string(t.shape.channels));

    std::string blob = t.shape.channels == 1 ? "P5\n" : "P6\n";
    blob += std::to_string(t.shape.width) + " " + std::to_string(t.shape.height) + "\n255\n";
    for (int y = 0; y < t.shape.height; ++y)
        for (int x = 0; x < t.shape.width; ++x)
            for (int c = 0; c < t.shape.channels; ++c) {
                const double v = std::min(1.0, std::max(0.0, t.at(c, y, x)));
                blob.push_back(static_cast<char>(
                    static_cast<unsigned char>(std::floor(v * 255.0 + 0.5))));
            }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("export_ppm: cannot open " + path);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("export_ppm: write failed for " + path);
}

}  // namespace nappure
