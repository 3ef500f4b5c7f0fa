#pragma once

#include "m3pt/autograd.hpp"
#include "m3pt/common.hpp"
#include "m3pt/signal_model.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace m3pt {

struct TokenizerConfig {
    Modality modality = Modality::continuous(ModalityKind::pose, 8);
    int latent_dim = 64;
    int codebook_size = 256;
    int frames_per_segment = 45;  // m
    std::vector<int> conv_channel_widths{64, 64};
    int kernel_size = 3;
    double commitment_coefficient = 0.25;

    int channels() const { return modality.channel_count; }
    void validate() const;
};

nlohmann::json to_json(const TokenizerConfig& config);
TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j);

struct Codebook {
    Matrix entries;  // codebook_size x latent_dim
    std::vector<std::uint64_t> usage_counts;

    int size() const { return static_cast<int>(entries.rows()); }
};

// Index of the nearest entry by squared Euclidean distance, lowest index on
// ties.
int nearest_entry(const Matrix& entries, const Eigen::Ref<const RowVector>& embedding);

struct QuantizeResult {
    int index = 0;
    RowVector quantized;
    double codebook_term = 0.0;    // ||stopgrad(e) - q||^2
    double commitment_term = 0.0;  // beta * ||e - stopgrad(q)||^2
};

QuantizeResult quantize(const Eigen::Ref<const RowVector>& embedding, const Codebook& codebook,
                        double commitment_coefficient);

struct SegmentLatent {
    RowVector z;
    std::vector<int> frame_codes;
};

struct DecodeResult {
    Matrix frames;  // m x channels, in input units
    std::vector<int> frame_codes;
    double select_decode = 0.0;  // decode-side selection loss, averaged like training
};

struct TokenizerLoss {
    double reconstruction = 0.0;
    double select_encode = 0.0;
    double select_decode = 0.0;
    double total = 0.0;
};

// reconstruction = MSE; total = reconstruction + 0.5 * (encode + decode).
TokenizerLoss tokenizer_loss(const Matrix& original, const Matrix& reconstruction, double select_encode,
                             double select_decode);

struct NormalizationStats {
    RowVector mean;
    RowVector stddev;
};

NormalizationStats compute_normalization(std::span<const Matrix> segments);

// Per-modality VQ autoencoder: 1-D CNN frame encoder, per-frame codebook
// selection, concatenate-and-project aggregation to one latent z, linear
// up-projection back to m embeddings, re-selection, transposed-CNN decoder.
class VqTokenizer {
public:
    VqTokenizer(TokenizerConfig config, std::uint64_t seed);

    const TokenizerConfig& config() const { return config_; }
    ag::ParamSet& params() { return params_; }
    const ag::ParamSet& params() const { return params_; }
    Codebook codebook() const;
    std::vector<std::uint64_t>& usage_counts() { return usage_; }
    const NormalizationStats& normalization() const { return norm_; }
    void set_normalization(NormalizationStats stats);

    // Inputs are raw (un-normalised) m x channels chunks.
    SegmentLatent encode_segment(const Matrix& chunk) const;
    DecodeResult decode_latent(const SegmentLatent& latent) const;
    Matrix normalize(const Matrix& chunk) const;
    Matrix denormalize(const Matrix& chunk) const;

    // Differentiable pass over a batch of normalised segments packed as
    // (batch * m) x channels.
    struct Graph {
        ag::Var embeddings;    // (B*m) x D, pre-quantisation
        ag::Var quantized;     // straight-through
        ag::Var z;             // B x D
        ag::Var up;            // (B*m) x D, pre re-selection
        ag::Var requantized;   // straight-through
        ag::Var reconstruction;
        ag::Var select_encode;
        ag::Var select_decode;
        ag::Var recon_loss;
        ag::Var total;
        std::vector<int> encode_codes;
        std::vector<int> decode_codes;
    };
    Graph forward(const Matrix& normalized_batch) const;

    // Pieces of forward(), exposed for the gradient checks.
    ag::Var encode_frames(const ag::Var& x) const;
    ag::Var aggregate(const ag::Var& quantized, Eigen::Index batch) const;
    ag::Var up_project(const ag::Var& z) const;
    ag::Var decode_frames(const ag::Var& quantized) const;
    // Straight-through selection: value is the selected entry, gradient to the
    // embedding is the identity; selection loss returned through `loss`.
    ag::Var select(const ag::Var& embeddings, std::vector<int>& codes, ag::Var& loss) const;

    void save(const std::filesystem::path& path) const;
    static VqTokenizer load(const std::filesystem::path& path);

    static constexpr std::uint32_t kFormatVersion = 1;

private:
    TokenizerConfig config_;
    ag::ParamSet params_;
    NormalizationStats norm_;
    std::vector<std::uint64_t> usage_;
};

struct TokenizerTrainSettings {
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    bool reseed_dead_codes = true;
    double max_seconds = 0.0;  // wall-clock cap, 0 = none
};

struct TokenizerTrainReport {
    TokenizerLoss final_loss;
    std::vector<double> epoch_losses;
    std::vector<std::uint64_t> usage;  // final-epoch encode usage per entry
    int active_entries = 0;
    int reseeded_entries = 0;
    int epochs_run = 0;
    double seconds = 0.0;
};

// Fits normalisation statistics, initialises the codebook from encoder
// outputs, and minimises the total loss with Adam. Throws NumericalError on a
// non-finite loss.
TokenizerTrainReport train_tokenizer(VqTokenizer& tokenizer, std::span<const Matrix> segments,
                                     const TokenizerTrainSettings& settings);

// Mean over channels of per-channel MSE divided by channel variance of the
// originals.
double normalized_mse(std::span<const Matrix> originals, std::span<const Matrix> reconstructions);

}  // namespace m3pt
