#pragma once

#include "m3pt/autograd.hpp"
#include "m3pt/block_mask.hpp"
#include "m3pt/common.hpp"
#include "m3pt/optim.hpp"
#include "m3pt/signal_model.hpp"
#include "m3pt/vq_tokenizer.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace m3pt {

class Rng;

enum class TimeEncoding { learned, sinusoidal };
// teacher_forcing: every token carries its ground-truth input.
// placeholder: for each predicted (t, i), person i's time-t tokens are swapped
// for learned per-modality placeholders in a pass dedicated to that target.
enum class InputMode { teacher_forcing, placeholder };
enum class WordInput { vq, pooled };

std::string_view to_string(InputMode mode);
InputMode input_mode_from_string(std::string_view name);
std::string_view to_string(WordInput mode);
WordInput word_input_from_string(std::string_view name);

struct ModelConfig {
    int hidden_dim = 256;
    int num_layers = 4;
    int num_heads = 8;
    int ffn_dim = 0;  // 0 -> 4 * hidden_dim
    double dropout = 0.1;
    int num_segments = 12;  // T
    int num_persons = 3;    // P
    // Layout order of the modality axis; M = modalities.size().
    std::vector<Modality> modalities = default_modalities();
    // Per-modality input width: tokenizer latent_dim, word channels when
    // pooled, 1 for discrete modalities.
    std::vector<int> input_dims;
    MaskKind mask_kind = MaskKind::blockwise;
    bool allow_own_modalities = false;
    InputMode input_mode = InputMode::teacher_forcing;
    TimeEncoding time_encoding = TimeEncoding::learned;
    bool predict_speaking = true;
    bool predict_bite = true;
    WordInput word_input = WordInput::vq;

    MaskSpec spec() const {
        return {num_segments, num_persons, static_cast<int>(modalities.size())};
    }
    int ffn_width() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }
    bool placeholder_inputs() const { return input_mode == InputMode::placeholder; }
    void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Named size presets: default (4 x 256, 8 heads), small (2 x 128, the reduced
// model), smoke (2 x 32, 4 heads, for CI).
void apply_profile(ModelConfig& config, std::string_view profile);

// Frozen tokenizers keyed by modality kind, plus the word-input switch.
struct Tokenizers {
    std::map<ModalityKind, std::shared_ptr<const VqTokenizer>> by_kind;
    WordInput word_input = WordInput::vq;

    // Input width the transformer sees for a modality.
    int input_dim(const Modality& modality) const;
};

// Token inputs for one window: per layout modality a (T*P) x input_dim
// matrix with row t*P + i, plus the per-(t, i) labels.
struct TokenFeatures {
    int num_segments = 0;
    int num_persons = 0;
    std::vector<Matrix> per_modality;
    std::vector<std::uint8_t> speaking;
    std::vector<std::uint8_t> biting;
};

// Runs the frozen tokenizers over a grid for the given layout modalities.
TokenFeatures extract_features(const SegmentGrid& grid, const Tokenizers& tokenizers,
                               std::span<const Modality> layout);

enum class TokenSource : std::uint8_t { vq_latent, pooled, discrete_embedding, placeholder };

struct TokenSequence {
    ag::Var embeddings;                   // L x hidden_dim, positional encodings included
    std::vector<TokenSource> provenance;  // per position
};

struct LayerTrace {
    Matrix input;         // x
    Matrix attn_residual; // shift(x)
    Matrix attn_output;   // post output projection
    Matrix hidden;        // h = shift(x) + attn
    Matrix ffn_residual;  // shift(h)
    Matrix output;
    ag::AttentionRecord attention;
};

struct ForwardOptions {
    bool zero_attention = false;          // diagnostic: attention sub-layer outputs zero
    std::vector<LayerTrace>* trace = nullptr;
    Rng* dropout_rng = nullptr;           // dropout active only when set
};

struct HeadVars {
    std::optional<ag::Var> speaking;  // (T*P) x 1 logits, row t*P + i
    std::optional<ag::Var> bite;
};

struct HeadOutputs {
    std::optional<std::vector<double>> speaking_logits;
    std::optional<std::vector<double>> bite_logits;
};

HeadOutputs to_outputs(const HeadVars& heads);

// out block t = in block t-1, block 0 zero; one block is P*M rows.
ag::Var right_shift_residual(const ag::Var& features, const MaskSpec& spec);

class M3ptModel {
public:
    M3ptModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ag::ParamSet& params() { return params_; }
    const ag::ParamSet& params() const { return params_; }
    const AttentionMask& mask() const { return mask_; }
    // Layout modality indices the two heads read from, after fallback.
    int speaking_source() const { return speaking_source_; }
    int bite_source() const { return bite_source_; }

    // Lifts features to hidden_dim and adds positional encodings. Every
    // position of a listed (t, i) pair gets its modality placeholder instead
    // of the input embedding.
    TokenSequence embed(const TokenFeatures& features,
                        std::span<const std::pair<int, int>> placeholder_pairs = {}) const;

    // Stacked layers over the full sequence; returns the final-normalised
    // L x hidden_dim states.
    ag::Var forward(const TokenSequence& tokens, const ForwardOptions& options = {}) const;

    HeadVars predict_heads(const ag::Var& hidden) const;

    // Full prediction in the configured input mode. In placeholder mode this
    // is equivalent to one pass per target (t, i) over blocks 0..t with that
    // pair's tokens replaced, computed by reusing the shared prefix.
    HeadVars predict(const TokenFeatures& features, Rng* dropout_rng = nullptr) const;
    HeadOutputs infer(const TokenFeatures& features) const;

    void save(const std::filesystem::path& path, const nlohmann::json& extra = nlohmann::json::object()) const;
    static M3ptModel load(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

    static constexpr std::uint32_t kFormatVersion = 1;

private:
    struct LayerCache {
        ag::Var x, h, k, v;
    };

    ag::Var positional(std::span<const TokenCoord> coords) const;
    ag::Var embed_pre(const TokenFeatures& features) const;
    ag::Var layer(int l, const ag::Var& x, const ForwardOptions& options, LayerCache* cache) const;
    ag::Var feed_forward(int l, const ag::Var& x, Rng* rng) const;

    ModelConfig config_;
    MaskSpec spec_;
    AttentionMask mask_;
    ag::ParamSet params_;
    Matrix sinusoid_;
    int speaking_source_ = -1;
    int bite_source_ = -1;
};

struct LossWeights {
    ClassWeights speaking;
    ClassWeights bite;
    bool use_class_weights = true;  // false -> unit weights
};

struct TaskLoss {
    ag::Var total;
    double speaking = 0.0;
    double bite = 0.0;
};

// Sum over enabled heads of weighted BCE averaged over (t, i).
TaskLoss task_loss(const HeadVars& heads, std::span<const std::uint8_t> speaking,
                   std::span<const std::uint8_t> biting, const LossWeights& weights);

// Replaces person i's raw time-t chunks with fresh noise and redraws the
// discrete labels there.
void resample_person_block(SegmentGrid& grid, int t, int person, Rng& rng);

struct LeakageReport {
    double max_delta = 0.0;
    std::vector<double> deltas;  // per trial, over both heads
};

// Each trial picks a window and a target (t, i), resamples person i's time-t
// raw signals, re-embeds, and records the change in that target's logits.
LeakageReport leakage_audit(const M3ptModel& model, const Tokenizers& tokenizers,
                            std::span<const SegmentGrid> batch, int trials, std::uint64_t seed);

struct TrainSettings {
    int max_epochs = 30;
    int batch_windows = 8;
    int patience = 5;  // epochs without validation improvement
    AdamSettings adam;
    bool use_class_weights = true;
    std::uint64_t seed = 0;
    double max_seconds = 0.0;
};

struct TrainReport {
    std::vector<double> epoch_losses;
    std::vector<double> validation_f1;
    int epochs_run = 0;
    int best_epoch = -1;
    double best_validation_f1 = 0.0;
    bool stopped_early = false;
    double seconds = 0.0;
};

// Mean F1 over enabled heads, logits thresholded at 0.
double validation_f1(const M3ptModel& model, std::span<const TokenFeatures> data);

// Adam on the task loss; keeps the parameters of the best validation epoch.
// Throws NumericalError on a non-finite loss.
TrainReport train_model(M3ptModel& model, std::span<const TokenFeatures> train,
                        std::span<const TokenFeatures> validation, const TrainSettings& settings);

}  // namespace m3pt
