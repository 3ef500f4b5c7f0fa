#pragma once

#include "m3pt/common.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace m3pt {

// Coordinates of a token in the (time, person, modality) grid.
struct TokenCoord {
    int t = 0;
    int person = 0;
    int modality = 0;
    friend bool operator==(const TokenCoord&, const TokenCoord&) = default;
};

// Token layout: position = t * (P * M) + i * M + k, time-major so that every
// prefix of whole timestep blocks is itself a valid layout.
struct MaskSpec {
    int num_segments = 1;    // T
    int num_persons = 1;     // P
    int num_modalities = 1;  // M

    std::size_t block_size() const { return static_cast<std::size_t>(num_persons) * num_modalities; }
    std::size_t length() const { return static_cast<std::size_t>(num_segments) * block_size(); }
    std::size_t position(TokenCoord c) const;
    TokenCoord coord(std::size_t position) const;
    void validate() const;
};

enum class MaskKind { blockwise, strict_past, lower_triangular };

std::string_view to_string(MaskKind kind);
MaskKind mask_kind_from_string(std::string_view name);

struct MaskOptions {
    // lower_triangular: include the diagonal (self) in the allowed set.
    bool include_diagonal = true;
    // blockwise relaxation: allow a person's other modalities at the current
    // timestep (never the token itself).
    bool allow_own_modalities = false;
    // Upper bound on the dense L x L allow matrix, in bytes.
    std::size_t memory_budget_bytes = std::size_t{256} << 20;
};

// Dense boolean allow matrix; allow(q, k) == true means query q may attend to
// key k.
class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(std::size_t length) : length_(length), allow_(length * length, 0) {}

    std::size_t length() const { return length_; }
    bool allow(std::size_t query, std::size_t key) const { return allow_[query * length_ + key] != 0; }
    void set(std::size_t query, std::size_t key, bool value) { allow_[query * length_ + key] = value ? 1 : 0; }
    const std::uint8_t* row(std::size_t query) const { return allow_.data() + query * length_; }
    bool row_blocked(std::size_t query) const;
    std::size_t allowed_count() const;

    // Top-left length x length sub-mask; a prefix of whole timestep blocks
    // keeps the layout valid.
    AttentionMask prefix(std::size_t length) const;

    friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

private:
    std::size_t length_ = 0;
    std::vector<std::uint8_t> allow_;
};

// Blockwise predicate: key strictly in the past, or in the same timestep but
// belonging to a different person.
bool mask_predicate(const MaskSpec& spec, TokenCoord query, TokenCoord key, const MaskOptions& options = {});

AttentionMask build_blockwise_mask(const MaskSpec& spec, const MaskOptions& options = {});
AttentionMask build_strict_past_mask(const MaskSpec& spec, const MaskOptions& options = {});
AttentionMask build_lower_triangular_mask(const MaskSpec& spec, const MaskOptions& options = {});
AttentionMask build_mask(MaskKind kind, const MaskSpec& spec, const MaskOptions& options = {});

// Plain PBM (P1), one pixel per cell, allowed = white, row 0 at the top.
void export_mask_bitmap(const AttentionMask& mask, const std::filesystem::path& path);
// One row per line, '1' = allowed.
std::string mask_to_text(const AttentionMask& mask);
void export_mask_text(const AttentionMask& mask, const std::filesystem::path& path);

}  // namespace m3pt
