#pragma once

#include "m3pt/common.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace m3pt {

enum class ModalityKind { gaze, headpose, pose, word, speaker, bite };

std::string_view to_string(ModalityKind kind);
ModalityKind modality_kind_from_string(std::string_view name);

struct Modality {
    ModalityKind kind = ModalityKind::gaze;
    int channel_count = 1;  // 1 for discrete modalities
    bool is_discrete = false;

    static Modality continuous(ModalityKind kind, int channels);
    static Modality discrete(ModalityKind kind);

    std::string_view name() const { return to_string(kind); }
    friend bool operator==(const Modality&, const Modality&) = default;
};

// Default HHCD-style modality set in canonical order: gaze(2), headpose(3),
// pose(2*keypoints), word(word_dim), speaker, bite.
std::vector<Modality> default_modalities(int pose_keypoints = 4, int word_dim = 8);

std::optional<std::size_t> find_modality(std::span<const Modality> modalities, ModalityKind kind);

struct Rational {
    std::int64_t num = 1;
    std::int64_t den = 1;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    friend bool operator==(const Rational& a, const Rational& b) { return a.num * b.den == b.num * a.den; }
    friend bool operator<(const Rational& a, const Rational& b) { return a.num * b.den < b.num * a.den; }
    friend bool operator<=(const Rational& a, const Rational& b) { return !(b < a); }
};

Rational parse_rational(std::string_view text);
std::string to_string(const Rational& r);

// Frames of one (person, modality) stream. Row j is the frame at time j / fps.
// Continuous frames carry channel_count columns, discrete frames a single 0/1
// column.
struct FrameSeries {
    Modality modality;
    Rational fps{15, 1};
    Matrix values;

    std::size_t size() const { return static_cast<std::size_t>(values.rows()); }
};

struct SessionTimeline {
    std::string session_id;
    std::vector<std::string> persons;
    std::vector<Modality> modalities;
    std::vector<FrameSeries> streams;  // index: person * modalities.size() + modality
    std::vector<bool> zero_filled;     // streams that were entirely missing on load
    double duration_s = 0.0;

    std::size_t num_persons() const { return persons.size(); }
    std::size_t num_modalities() const { return modalities.size(); }
    const FrameSeries& stream(std::size_t person, std::size_t modality) const;
    FrameSeries& stream(std::size_t person, std::size_t modality);

    // Checks the cross-product completeness, channel counts, and that every
    // stream length matches duration within one frame.
    void validate() const;
};

struct SegmentConfig {
    double segment_seconds = 3.0;   // c
    int segments_per_window = 12;   // T
    double window_stride_s = 18.0;
    Rational target_fps{15, 1};
    double speaking_threshold = 0.30;

    double window_seconds() const { return segment_seconds * segments_per_window; }
    int frames_per_segment() const;  // m
    void validate() const;
};

// One window of T segments for every person and modality, plus labels.
struct SegmentGrid {
    std::string session_id;
    int window_index = 0;
    double start_s = 0.0;
    int num_segments = 0;  // T
    int num_persons = 0;   // P
    std::vector<Modality> modalities;
    // index (t * P + i) * M + k; discrete modalities hold the m x 1 flags
    std::vector<Matrix> chunks;
    std::vector<std::uint8_t> speaking;  // index t * P + i
    std::vector<std::uint8_t> biting;

    std::size_t num_modalities() const { return modalities.size(); }
    std::size_t chunk_index(int t, int i, std::size_t k) const {
        return (static_cast<std::size_t>(t) * num_persons + i) * modalities.size() + k;
    }
    const Matrix& chunk(int t, int i, std::size_t k) const { return chunks[chunk_index(t, i, k)]; }
    Matrix& chunk(int t, int i, std::size_t k) { return chunks[chunk_index(t, i, k)]; }
    bool speaking_label(int t, int i) const { return speaking[t * num_persons + i] != 0; }
    bool biting_label(int t, int i) const { return biting[t * num_persons + i] != 0; }

    // Value of a discrete token: the segment label of the matching task.
    int discrete_value(int t, int i, std::size_t k) const;
};

FrameSeries downsample(const FrameSeries& series, Rational target_fps);

std::vector<SegmentGrid> segment_session(const SessionTimeline& timeline, const SegmentConfig& config);
std::vector<SegmentGrid> segment_sessions(std::span<const SessionTimeline> timelines,
                                          const SegmentConfig& config);

bool label_speaking(std::span<const std::uint8_t> frames, double threshold = 0.30);
bool label_bite(std::span<const std::uint8_t> frames);

std::vector<std::uint8_t> binary_frames(const Matrix& column);

struct ClassWeights {
    double negative = 0.0;
    double positive = 0.0;
    std::size_t count_negative = 0;
    std::size_t count_positive = 0;
    // Set when one class is absent; its weight is 0.
    std::optional<std::string> warning;
};

ClassWeights class_weights(std::span<const std::uint8_t> labels);

// Forward-fills NaN rows from the last valid frame (leading gaps take the
// first valid frame). Returns false and zero-fills when no frame is valid.
bool fill_missing(FrameSeries& series);

}  // namespace m3pt
