#include "longiseg/weights.hpp"

#include <algorithm>
#include <bit>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include <json.hpp>

#include "longiseg/error.hpp"

namespace longiseg {

namespace {

constexpr std::array<char, 4> kMagic = {'L', 'S', 'W', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k)
                c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i)
        c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

static_assert(std::endian::native == std::endian::little,
              "weight files are little-endian; this build targets LE hosts only");

}  // namespace

template <typename T>
void save_weights(const Network<T>& net, const std::string& path) {
    nlohmann::json manifest;
    manifest["format"] = "f32";
    manifest["tensors"] = nlohmann::json::array();

    std::vector<float> payload;
    for (const auto& [name, t] : net.named) {
        std::vector<float> values(t.data().size());
        for (std::size_t i = 0; i < values.size(); ++i)
            values[i] = float(t.data()[i]);

        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = payload.size() * sizeof(float);
        entry["crc32"] = crc32(reinterpret_cast<const unsigned char*>(values.data()),
                               values.size() * sizeof(float));
        manifest["tensors"].push_back(std::move(entry));
        payload.insert(payload.end(), values.begin(), values.end());
    }

    const std::string json_text = manifest.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + path + "' for writing");
    out.write(kMagic.data(), 4);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t json_size = json_text.size();
    out.write(reinterpret_cast<const char*>(&json_size), sizeof(json_size));
    out.write(json_text.data(), std::streamsize(json_text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              std::streamsize(payload.size() * sizeof(float)));
    if (!out)
        throw IoError("failed writing weight file '" + path + "'");
}

template <typename T>
Network<T> load_weights(const std::string& path, const NetworkConfig& config) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in)
        throw IoError("cannot open weight file '" + path + "'");
    const std::streamsize file_size = in.tellg();
    in.seekg(0);

    std::array<char, 4> magic{};
    std::uint32_t version = 0;
    std::uint64_t json_size = 0;
    if (file_size < std::streamsize(sizeof(magic) + sizeof(version) + sizeof(json_size)))
        throw FormatError("weight file '" + path + "' is truncated");
    in.read(magic.data(), 4);
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&json_size), sizeof(json_size));
    if (magic != kMagic)
        throw FormatError("'" + path + "' is not a weight file (bad magic)");
    if (version != kVersion)
        throw UnsupportedError("weight file version " + std::to_string(version) +
                               "; this build reads version " + std::to_string(kVersion));
    const std::uint64_t header = sizeof(magic) + sizeof(version) + sizeof(json_size);
    if (json_size > std::uint64_t(file_size) - header)
        throw FormatError("weight file '" + path + "' is truncated (manifest extends past EOF)");

    std::string json_text(json_size, '\0');
    in.read(json_text.data(), std::streamsize(json_size));
    std::vector<float> payload((std::uint64_t(file_size) - header - json_size) / sizeof(float));
    in.read(reinterpret_cast<char*>(payload.data()),
            std::streamsize(payload.size() * sizeof(float)));
    if (!in)
        throw IoError("failed reading weight file '" + path + "'");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("weight file '" + path + "' has a corrupt manifest: " + e.what());
    }

    struct Entry {
        Shape shape;
        std::uint64_t offset;
        std::uint32_t crc;
    };
    std::map<std::string, Entry> entries;
    for (const auto& e : manifest.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        if (entries.count(name))
            throw FormatError("weight file lists parameter '" + name + "' twice");
        entries[name] = {e.at("shape").get<Shape>(), e.at("offset").get<std::uint64_t>(),
                         e.at("crc32").get<std::uint32_t>()};
    }

    Network<T> net = build<T>(config, 0);
    for (auto& [name, t] : net.named) {
        const auto it = entries.find(name);
        if (it == entries.end())
            throw FormatError("weight file is missing parameter '" + name + "'");
        const Entry& entry = it->second;
        if (entry.shape != t.shape())
            throw ShapeError("parameter '" + name + "' has shape " + shape_str(entry.shape) +
                             " in the file, expected " + shape_str(t.shape()));
        const std::uint64_t count = std::uint64_t(t.numel());
        if (entry.offset % sizeof(float) != 0 ||
            entry.offset / sizeof(float) + count > payload.size())
            throw FormatError("weight file is truncated: parameter '" + name +
                              "' extends past the payload");
        const float* src = payload.data() + entry.offset / sizeof(float);
        if (crc32(reinterpret_cast<const unsigned char*>(src), count * sizeof(float)) != entry.crc)
            throw FormatError("checksum mismatch for parameter '" + name + "'");
        for (std::uint64_t i = 0; i < count; ++i)
            t.data()[i] = T(src[i]);
        entries.erase(it);
    }
    if (!entries.empty())
        throw FormatError("weight file has unexpected parameter '" + entries.begin()->first +
                          "'");
    return net;
}

template void save_weights<float>(const Network<float>&, const std::string&);
template void save_weights<double>(const Network<double>&, const std::string&);
template Network<float> load_weights<float>(const std::string&, const NetworkConfig&);
template Network<double> load_weights<double>(const std::string&, const NetworkConfig&);

}  // namespace longiseg
