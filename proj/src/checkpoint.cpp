#include "m3pt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace m3pt {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("truncated checkpoint '" + path + "'");
    return v;
}

std::string get_bytes(std::istream& in, std::uint64_t n, const std::string& path) {
    std::string s(n, '\0');
    if (n && !in.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("truncated checkpoint '" + path + "'");
    return s;
}

}  // namespace

const Matrix& Checkpoint::tensor(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw ConfigError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.first == name) return true;
    return false;
}

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
    require(checkpoint.magic.size() == 4, "checkpoint magic must be 4 bytes");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(checkpoint.magic.data(), 4);
    put<std::uint32_t>(out, checkpoint.format_version);
    const std::string header = checkpoint.header.dump();
    put<std::uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
    for (const auto& [name, m] : checkpoint.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path, const std::string& expected_magic,
                           std::uint32_t max_version) {
    const std::string p = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + p + "'");
    Checkpoint c;
    c.magic = get_bytes(in, 4, p);
    if (c.magic != expected_magic)
        throw ConfigError("'" + p + "' is not a " + expected_magic + " checkpoint (magic '" + c.magic + "')");
    c.format_version = get<std::uint32_t>(in, p);
    if (c.format_version == 0 || c.format_version > max_version)
        throw ConfigError("unsupported checkpoint format version " + std::to_string(c.format_version) + " in '" + p +
                          "'");
    const auto header_len = get<std::uint64_t>(in, p);
    try {
        c.header = nlohmann::json::parse(get_bytes(in, header_len, p));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("corrupt checkpoint header in '" + p + "': " + e.what());
    }
    const auto count = get<std::uint32_t>(in, p);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = get<std::uint32_t>(in, p);
        std::string name = get_bytes(in, name_len, p);
        const auto rows = get<std::uint64_t>(in, p);
        const auto cols = get<std::uint64_t>(in, p);
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        if (m.size() && !in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double))))
            throw IoError("truncated checkpoint '" + p + "'");
        c.tensors.emplace_back(std::move(name), std::move(m));
    }
    return c;
}

}  // namespace m3pt
