#pragma once

#include "m3pt/common.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace m3pt {

// Versioned binary container: 4-byte magic, u32 format version, a JSON
// header (configuration, normalisation statistics, references), then named
// row-major float64 tensors. Integers and doubles are little-endian.
struct Checkpoint {
    std::string magic;  // exactly 4 characters
    std::uint32_t format_version = 1;
    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
// Throws IoError on unreadable files, ConfigError on a magic or version
// mismatch.
Checkpoint read_checkpoint(const std::filesystem::path& path, const std::string& expected_magic,
                           std::uint32_t max_version);

}  // namespace m3pt
