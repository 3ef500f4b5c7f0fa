#pragma once

#include "m3pt/data_io.hpp"
#include "m3pt/metrics.hpp"
#include "m3pt/signal_model.hpp"
#include "m3pt/transformer.hpp"
#include "m3pt/vq_tokenizer.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace m3pt {

using LogFn = std::function<void(const std::string&)>;

struct TokenizerPlan {
    int latent_dim = 64;
    int codebook_size = 256;
    std::vector<int> conv_channel_widths{64, 64};
    int kernel_size = 3;
    double commitment_coefficient = 0.25;
    TokenizerTrainSettings train;
};

// Everything one fold needs. model.modalities / model.input_dims are derived
// from the data and `dropped` at run time.
struct RunConfig {
    SegmentConfig segment;
    ModelConfig model;
    TokenizerPlan tokenizer;
    TrainSettings train;
    WordInput word_input = WordInput::vq;
    std::vector<ModalityKind> dropped;
    std::uint64_t seed = 0;
    bool validation_holdout = true;  // hold one training session out for early stopping
};

nlohmann::json to_json(const RunConfig& config);
// Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);

// Model size plus matching tokenizer and training budgets: default, small,
// smoke.
void apply_run_profile(RunConfig& config, std::string_view profile);
// Halves layers and hidden width (the reduced model).
void reduce_model(ModelConfig& model);

std::vector<Modality> layout_modalities(std::span<const Modality> all, std::span<const ModalityKind> dropped);

struct TokenizerFit {
    ModalityKind modality;
    TokenizerTrainReport report;
};

// Trains one frozen tokenizer per continuous layout modality on the given
// windows (word too unless it is pooled).
Tokenizers train_tokenizers(std::span<const SegmentGrid> grids, std::span<const Modality> layout,
                            const RunConfig& config, std::vector<TokenizerFit>* fits = nullptr,
                            const LogFn& log = {});

struct TaskResult {
    ConfusionCounts counts;
    MetricValues values;
    bool no_positive_labels = false;  // test split has no events for this task
};

// Tokenizers on non-overlapping windows of the given sessions.
Tokenizers train_split_tokenizers(const SessionStore& store, std::span<const std::string> ids,
                                  std::span<const Modality> layout, const RunConfig& config, const std::string& phase,
                                  std::vector<TokenizerFit>* fits = nullptr, const LogFn& log = {});

// Builds the model for `layout` and trains it on the sessions, holding one
// out for early stopping when config.validation_holdout and >= 3 sessions.
M3ptModel fit_transformer(const SessionStore& store, std::span<const std::string> ids, const Tokenizers& toks,
                          std::span<const Modality> layout, const RunConfig& config, const std::string& phase,
                          TrainReport* report = nullptr);

struct Evaluation {
    std::optional<TaskResult> speaking;
    std::optional<TaskResult> bite;
};

// Every window, person and segment of the sessions; threshold at logit 0.
Evaluation evaluate_model(const M3ptModel& model, const Tokenizers& toks, const SessionStore& store,
                          std::span<const std::string> ids, const SegmentConfig& segment, const std::string& phase);

struct FoldResult {
    int fold_id = 0;
    std::vector<std::string> train;
    std::vector<std::string> test;
    bool ok = false;
    bool diverged = false;
    std::string error;
    std::optional<TaskResult> speaking;
    std::optional<TaskResult> bite;
    TrainReport train_report;
    double seconds = 0.0;
    nlohmann::json record;
};

// Tokenizers and transformer see only the fold's training sessions; every
// session load is logged per phase and audited before evaluation. A
// numerical failure marks the fold failed instead of throwing. When out_dir
// is set the tokenizers, model checkpoint and fold record are written there.
FoldResult run_fold(const FoldSplit& fold, const SessionStore& store, const RunConfig& config,
                    const std::filesystem::path& out_dir = {}, const LogFn& log = {});

struct ExperimentResult {
    std::vector<FoldResult> folds;
    std::optional<AggregateMetrics> speaking;
    std::optional<AggregateMetrics> bite;
    int failed = 0;
    std::vector<std::string> warnings;
};

// Runs folds on up to `jobs` threads and aggregates the successful ones.
ExperimentResult run_experiment(std::span<const FoldSplit> folds, const SessionStore& store, const RunConfig& config,
                                int jobs = 1, const std::filesystem::path& out_dir = {}, const LogFn& log = {});

nlohmann::json to_json(const MetricValues& m);
nlohmann::json to_json(const AggregateMetrics& a);
nlohmann::json to_json(const ExperimentResult& r);

// ---- ablations ----

enum class AblationKind { drop_modality, temporal_context, segment_length };

std::string_view to_string(AblationKind kind);
AblationKind ablation_kind_from_string(std::string_view name);

struct AblationCell {
    std::string label;
    std::vector<ModalityKind> dropped;
    int segments = 12;             // T
    double segment_seconds = 3.0;  // c
    bool speaking = true;
    bool bite = true;
    bool reduced_model = false;
};

std::vector<AblationCell> ablation_cells(AblationKind kind);

// Window stride used for (T, c): half the window, rounded to a whole number
// of segments.
double ablation_stride(int segments, double segment_seconds);

struct AblationRow {
    std::string label;
    std::string task;  // "speaking" or "bite"
    std::optional<AggregateMetrics> metrics;
    int failed_folds = 0;
};

struct AblationTable {
    std::string title;
    bool task_column = false;  // rows come in speaking/bite pairs
    std::vector<AblationRow> rows;
};

// Empty tables with the row structure of the chosen ablation.
std::vector<AblationTable> ablation_layout(AblationKind kind);

std::vector<AblationTable> run_ablation(AblationKind kind, const SessionStore& store, std::span<const FoldSplit> folds,
                                        const RunConfig& base, int jobs = 1,
                                        const std::filesystem::path& out_dir = {}, const LogFn& log = {});

std::string render_table(const AblationTable& table, bool include_accuracy = false);
nlohmann::json to_json(const AblationTable& table);

}  // namespace m3pt
