#pragma once

#include "m3pt/common.hpp"
#include "m3pt/signal_model.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace m3pt {

// On-disk layout:
//   <root>/manifest.json                 format_version, fps, modalities, sessions
//   <root>/<session>/session.json        session_id, persons, fps, duration_s, modalities
//   <root>/<session>/<person>.<modality>.csv
// Stream files carry a header row ("timestamp,c0,c1,..." or
// "timestamp,value") and one frame per line; empty cells or "nan" mark
// missing frames. Numbers are written in shortest round-trip form.
inline constexpr int kManifestFormatVersion = 1;

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<std::string> sessions;
    std::vector<Modality> modalities;
    Rational fps{15, 1};
    int format_version = kManifestFormatVersion;
};

nlohmann::json modalities_to_json(std::span<const Modality> modalities);
std::vector<Modality> modalities_from_json(const nlohmann::json& j);

// Accepts the dataset root or the manifest file itself. Validates that every
// listed session directory exists.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest);

std::string stream_file_name(const std::string& person, const Modality& modality);

SessionTimeline load_session(const std::filesystem::path& dir, std::span<const Modality> expected = {},
                             std::vector<std::filesystem::path>* opened = nullptr);
std::vector<SessionTimeline> load_sessions(const DatasetManifest& manifest);

// Writes each session plus a manifest under root. Existing session
// directories are overwritten.
DatasetManifest write_sessions(std::span<const SessionTimeline> sessions, const std::filesystem::path& root);

// Records which sessions (and files) each run phase touched.
class AccessLog {
public:
    void record(const std::string& phase, const std::string& session, const std::vector<std::string>& files = {});
    std::set<std::string> sessions(const std::string& phase) const;
    std::set<std::string> files(const std::string& phase) const;
    std::vector<std::string> phases() const;

private:
    mutable std::mutex mu_;
    std::map<std::string, std::set<std::string>> sessions_;
    std::map<std::string, std::set<std::string>> files_;
};

// Session provider for fold runs: every load is logged under a phase name so
// the harness can prove test data stayed out of training phases.
class SessionStore {
public:
    static SessionStore from_manifest(DatasetManifest manifest);
    static SessionStore in_memory(std::vector<SessionTimeline> sessions);

    std::vector<std::string> ids() const;
    std::vector<Modality> modalities() const;
    SessionTimeline load(const std::string& id, const std::string& phase) const;
    std::vector<SessionTimeline> load_many(std::span<const std::string> ids, const std::string& phase) const;
    AccessLog& log() const { return *log_; }

private:
    std::shared_ptr<const DatasetManifest> manifest_;
    std::shared_ptr<const std::vector<SessionTimeline>> memory_;
    std::shared_ptr<AccessLog> log_ = std::make_shared<AccessLog>();
};

// ---- synthetic sessions with planted dependencies ----

// Per c-second latent segment s and person i:
//   gaze target: away with probability away_probability, else a uniformly
//     chosen other person
//   speaking ~ B(sig(a * #others speaking at s-1 + b * #others gazing at i
//                     + speak_bias + noise * eps))
//   biting   ~ B(sig(c * #others silent at s + d * [i silent at s-1]
//                     + bite_bias + noise * eps'))
// with eps, eps' standard normal. At s = 0 nobody spoke before and
// [i silent at s-1] = 0.
struct SyntheticConfig {
    int num_sessions = 30;
    int persons_per_session = 3;
    double duration_s = 180.0;
    Rational fps{15, 1};
    double segment_seconds = 3.0;
    std::uint64_t seed = 0;

    double a = 1.5;  // others spoke at s-1
    double b = 1.5;  // others gazing toward i
    double c = 0.8;  // others silent at s
    double d = 0.8;  // own silence at s-1
    double speak_bias = -2.0;
    double bite_bias = -3.0;
    double noise = 0.5;
    double away_probability = 0.2;

    int pose_keypoints = 4;
    int word_dim = 8;
    double ou_theta = 2.0;   // mean reversion, 1/s
    double ou_sigma = 0.05;  // diffusion of the continuous channels

    int segments_per_session() const;
    int frames_per_segment() const;
    void validate() const;
};

nlohmann::json to_json(const SyntheticConfig& config);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);

// Latent state behind one synthetic session, row s, column i.
struct SyntheticTrace {
    std::string session_id;
    std::vector<std::vector<int>> gaze_target;  // -1 = away
    std::vector<std::vector<std::uint8_t>> speaking;
    std::vector<std::vector<std::uint8_t>> biting;

    int num_segments() const { return static_cast<int>(speaking.size()); }
    int num_persons() const { return speaking.empty() ? 0 : static_cast<int>(speaking.front().size()); }
};

nlohmann::json to_json(const SyntheticTrace& trace);
SyntheticTrace synthetic_trace_from_json(const nlohmann::json& j);

struct SyntheticDataset {
    std::vector<SessionTimeline> sessions;
    std::vector<SyntheticTrace> traces;
};

SyntheticDataset generate_synthetic(const SyntheticConfig& config);

// Writes sessions plus latent.json traces and synthetic.json config.
DatasetManifest write_synthetic(const SyntheticDataset& data, const SyntheticConfig& config,
                                const std::filesystem::path& root);

// E[sig(x + noise * eps)], eps ~ N(0, 1), by trapezoid quadrature.
double noisy_sigmoid(double x, double noise);

enum class OracleScope { full, past_only };

// Posterior P(label = 1 | observations) per (s, i), index s * P + i.
// full: everything at times < s, plus other persons' signals at s (their
// gaze targets, speaking and bites); person i's own time-s signals are not
// observed. past_only: strictly earlier segments.
struct OraclePosteriors {
    std::vector<double> speaking;
    std::vector<double> biting;
};

OraclePosteriors bayes_oracle(const SyntheticConfig& config, const SyntheticTrace& trace, OracleScope scope);

struct OracleScore {
    double speaking_f1 = 0.0;
    double biting_f1 = 0.0;
};

// Thresholds posteriors at 0.5 against the trace labels. Segments before
// first_segment are skipped (warm-up).
OracleScore score_oracle(const SyntheticConfig& config, std::span<const SyntheticTrace> traces, OracleScope scope,
                         int first_segment = 0);

struct BaseRates {
    double speaking = 0.0;
    double biting = 0.0;
};

// Exact expected positive rates over segments 0..num_segments-1, by
// propagating the joint speaking-state distribution.
BaseRates analytic_base_rates(const SyntheticConfig& config, int num_segments);
BaseRates measured_base_rates(std::span<const SyntheticTrace> traces);

// ---- folds ----

struct FoldSplit {
    int fold_id = 0;
    std::vector<std::string> train;
    std::vector<std::string> test;
};

// Seeded choice of num_folds distinct held-out sessions; each fold trains on
// all others.
std::vector<FoldSplit> make_folds(std::span<const std::string> session_ids, int num_folds, std::uint64_t seed);

}  // namespace m3pt
