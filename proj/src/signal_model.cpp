#include "m3pt/signal_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iterator>
#include <limits>
#include <numeric>

namespace m3pt {

namespace {

constexpr std::string_view kModalityNames[] = {"gaze", "headpose", "pose", "word", "speaker", "bite"};

std::int64_t parse_int(std::string_view text) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size())
        throw InvalidArgument("not an integer: '" + std::string(text) + "'");
    return v;
}

}  // namespace

std::string_view to_string(ModalityKind kind) { return kModalityNames[static_cast<int>(kind)]; }

ModalityKind modality_kind_from_string(std::string_view name) {
    for (int i = 0; i < 6; ++i)
        if (kModalityNames[i] == name) return static_cast<ModalityKind>(i);
    throw InvalidArgument("unknown modality '" + std::string(name) + "'");
}

Modality Modality::continuous(ModalityKind kind, int channels) {
    require(channels > 0, "continuous modality needs a positive channel count");
    return Modality{kind, channels, false};
}

Modality Modality::discrete(ModalityKind kind) { return Modality{kind, 1, true}; }

std::vector<Modality> default_modalities(int pose_keypoints, int word_dim) {
    return {
        Modality::continuous(ModalityKind::gaze, 2),
        Modality::continuous(ModalityKind::headpose, 3),
        Modality::continuous(ModalityKind::pose, 2 * pose_keypoints),
        Modality::continuous(ModalityKind::word, word_dim),
        Modality::discrete(ModalityKind::speaker),
        Modality::discrete(ModalityKind::bite),
    };
}

std::optional<std::size_t> find_modality(std::span<const Modality> modalities, ModalityKind kind) {
    for (std::size_t k = 0; k < modalities.size(); ++k)
        if (modalities[k].kind == kind) return k;
    return std::nullopt;
}

Rational parse_rational(std::string_view text) {
    Rational r;
    const auto slash = text.find('/');
    if (slash == std::string_view::npos) {
        r.num = parse_int(text);
        r.den = 1;
    } else {
        r.num = parse_int(text.substr(0, slash));
        r.den = parse_int(text.substr(slash + 1));
    }
    require(r.den > 0 && r.num > 0, "rate must be a positive rational: '" + std::string(text) + "'");
    const auto g = std::gcd(r.num, r.den);
    r.num /= g;
    r.den /= g;
    return r;
}

std::string to_string(const Rational& r) {
    const std::int64_t g = std::max<std::int64_t>(1, std::gcd(r.num, r.den));
    if (r.den / g == 1) return std::to_string(r.num / g);
    return std::to_string(r.num / g) + "/" + std::to_string(r.den / g);
}

const FrameSeries& SessionTimeline::stream(std::size_t person, std::size_t modality) const {
    return streams.at(person * modalities.size() + modality);
}

FrameSeries& SessionTimeline::stream(std::size_t person, std::size_t modality) {
    return streams.at(person * modalities.size() + modality);
}

void SessionTimeline::validate() const {
    require(persons.size() >= 1, "session '" + session_id + "' has no persons");
    require(!modalities.empty(), "session '" + session_id + "' has no modalities");
    require(streams.size() == persons.size() * modalities.size(),
            "session '" + session_id + "' is missing streams");
    for (std::size_t i = 0; i < persons.size(); ++i) {
        for (std::size_t k = 0; k < modalities.size(); ++k) {
            const auto& s = stream(i, k);
            const std::string where = "(" + persons[i] + ", " + std::string(modalities[k].name()) + ")";
            require(s.modality == modalities[k], "stream " + where + " has the wrong modality");
            require(s.values.cols() == modalities[k].channel_count,
                    "stream " + where + " has the wrong channel count");
            const double expected = duration_s * s.fps.value();
            require(std::abs(static_cast<double>(s.size()) - expected) <= 1.0 + 1e-9,
                    "stream " + where + " length disagrees with session duration");
        }
    }
}

int SegmentConfig::frames_per_segment() const {
    return static_cast<int>(std::lround(segment_seconds * target_fps.value()));
}

void SegmentConfig::validate() const {
    require(segment_seconds > 0.0, "segment_seconds must be positive");
    require(segments_per_window >= 1, "segments_per_window must be >= 1");
    require(window_stride_s > 0.0, "window_stride_s must be positive");
    require(target_fps.num > 0 && target_fps.den > 0, "target fps must be positive");
    require(frames_per_segment() >= 1, "segment must contain at least one frame at the target fps");
    require(speaking_threshold >= 0.0 && speaking_threshold < 1.0, "speaking threshold must be in [0, 1)");
}

int SegmentGrid::discrete_value(int t, int i, std::size_t k) const {
    switch (modalities[k].kind) {
        case ModalityKind::speaker: return speaking_label(t, i) ? 1 : 0;
        case ModalityKind::bite: return biting_label(t, i) ? 1 : 0;
        default: break;
    }
    // Any other discrete stream: segment value is the OR over its frames.
    return chunk(t, i, k).maxCoeff() > 0.5 ? 1 : 0;
}

FrameSeries downsample(const FrameSeries& series, Rational target_fps) {
    require(target_fps.num > 0, "target fps must be positive");
    if (series.fps < target_fps) throw InvalidArgument("upsampling is not supported");
    if (target_fps == series.fps) return series;

    // Output frame j sits at time j / target; pick the source frame with the
    // nearest timestamp, ties to the earlier frame. Exact integer arithmetic:
    // source position = j * src / target = j * (sn * td) / (sd * tn).
    const std::int64_t n = static_cast<std::int64_t>(series.size());
    const std::int64_t num = series.fps.num * target_fps.den;
    const std::int64_t den = series.fps.den * target_fps.num;
    const std::int64_t out_len = n * den / num;

    FrameSeries out;
    out.modality = series.modality;
    out.fps = target_fps;
    out.values.resize(out_len, series.values.cols());
    for (std::int64_t j = 0; j < out_len; ++j) {
        const std::int64_t twice = 2 * j * num;
        std::int64_t src = (twice + den - 1) / (2 * den);  // round half down
        if (src >= n) src = n - 1;
        out.values.row(j) = series.values.row(src);
    }
    return out;
}

std::vector<std::uint8_t> binary_frames(const Matrix& column) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(column.rows()));
    for (Eigen::Index r = 0; r < column.rows(); ++r) out[r] = column(r, 0) > 0.5 ? 1 : 0;
    return out;
}

std::vector<SegmentGrid> segment_session(const SessionTimeline& timeline, const SegmentConfig& config) {
    config.validate();
    std::vector<SegmentGrid> out;
    const double window = config.window_seconds();
    if (timeline.duration_s + 1e-9 < window) return out;

    const auto speaker_k = find_modality(timeline.modalities, ModalityKind::speaker);
    const auto bite_k = find_modality(timeline.modalities, ModalityKind::bite);
    if (!speaker_k || !bite_k) throw InvalidArgument("session needs speaker and bite streams for labels");

    const std::size_t P = timeline.num_persons();
    const std::size_t M = timeline.num_modalities();
    const int T = config.segments_per_window;
    const int m = config.frames_per_segment();

    std::vector<FrameSeries> resampled;
    resampled.reserve(timeline.streams.size());
    std::size_t min_len = std::numeric_limits<std::size_t>::max();
    for (const auto& s : timeline.streams) {
        resampled.push_back(downsample(s, config.target_fps));
        min_len = std::min(min_len, resampled.back().size());
    }

    for (int w = 0;; ++w) {
        const double start_s = w * config.window_stride_s;
        if (start_s + window > timeline.duration_s + 1e-9) break;
        const auto start = static_cast<std::size_t>(std::llround(start_s * config.target_fps.value()));
        if (start + static_cast<std::size_t>(T) * m > min_len) break;

        SegmentGrid g;
        g.session_id = timeline.session_id;
        g.window_index = w;
        g.start_s = start_s;
        g.num_segments = T;
        g.num_persons = static_cast<int>(P);
        g.modalities = timeline.modalities;
        g.chunks.resize(static_cast<std::size_t>(T) * P * M);
        g.speaking.assign(static_cast<std::size_t>(T) * P, 0);
        g.biting.assign(static_cast<std::size_t>(T) * P, 0);
        for (int t = 0; t < T; ++t) {
            const auto first = static_cast<Eigen::Index>(start + static_cast<std::size_t>(t) * m);
            for (std::size_t i = 0; i < P; ++i) {
                for (std::size_t k = 0; k < M; ++k) {
                    const auto& s = resampled[i * M + k];
                    g.chunk(t, static_cast<int>(i), k) = s.values.middleRows(first, m);
                }
                const auto spk = binary_frames(g.chunk(t, static_cast<int>(i), *speaker_k));
                const auto bite = binary_frames(g.chunk(t, static_cast<int>(i), *bite_k));
                g.speaking[t * P + i] = label_speaking(spk, config.speaking_threshold) ? 1 : 0;
                g.biting[t * P + i] = label_bite(bite) ? 1 : 0;
            }
        }
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<SegmentGrid> segment_sessions(std::span<const SessionTimeline> timelines,
                                          const SegmentConfig& config) {
    std::vector<SegmentGrid> out;
    for (const auto& tl : timelines) {
        auto grids = segment_session(tl, config);
        std::move(grids.begin(), grids.end(), std::back_inserter(out));
    }
    return out;
}

bool label_speaking(std::span<const std::uint8_t> frames, double threshold) {
    require(!frames.empty(), "label_speaking: empty frame sequence");
    require(threshold >= 0.0 && threshold < 1.0, "label_speaking: threshold must be in [0, 1)");
    const auto on = std::count_if(frames.begin(), frames.end(), [](std::uint8_t f) { return f != 0; });
    // Compare on = threshold * n without dividing, so the 30% boundary is exact.
    return static_cast<double>(on) > threshold * static_cast<double>(frames.size()) + 1e-12;
}

bool label_bite(std::span<const std::uint8_t> frames) {
    require(!frames.empty(), "label_bite: empty frame sequence");
    return std::any_of(frames.begin(), frames.end(), [](std::uint8_t f) { return f != 0; });
}

ClassWeights class_weights(std::span<const std::uint8_t> labels) {
    require(!labels.empty(), "class_weights: empty label sequence");
    ClassWeights w;
    for (auto l : labels) (l ? w.count_positive : w.count_negative)++;
    const double total = static_cast<double>(labels.size());
    if (w.count_negative > 0) w.negative = total / (2.0 * static_cast<double>(w.count_negative));
    if (w.count_positive > 0) w.positive = total / (2.0 * static_cast<double>(w.count_positive));
    if (w.count_positive == 0) w.warning = "no positive examples; positive-class weight set to 0";
    if (w.count_negative == 0) w.warning = "no negative examples; negative-class weight set to 0";
    return w;
}

bool fill_missing(FrameSeries& series) {
    auto& v = series.values;
    Eigen::Index first_valid = -1;
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        if (v.row(r).allFinite()) {
            first_valid = r;
            break;
        }
    }
    if (first_valid < 0) {
        v.setZero();
        return false;
    }
    for (Eigen::Index r = 0; r < first_valid; ++r) v.row(r) = v.row(first_valid);
    for (Eigen::Index r = first_valid + 1; r < v.rows(); ++r) {
        if (!v.row(r).allFinite()) v.row(r) = v.row(r - 1);
    }
    return true;
}

}  // namespace m3pt
