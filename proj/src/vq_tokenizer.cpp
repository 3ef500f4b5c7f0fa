#include "m3pt/vq_tokenizer.hpp"

#include "m3pt/checkpoint.hpp"
#include "m3pt/optim.hpp"
#include "m3pt/rng.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace m3pt {

using ag::Var;

void TokenizerConfig::validate() const {
    require(!modality.is_discrete, "VQ tokenizers only take continuous modalities");
    require(modality.channel_count > 0, "tokenizer channel count must be positive");
    require(latent_dim > 0, "latent_dim must be positive");
    require(codebook_size >= 2, "codebook_size must be >= 2");
    require(frames_per_segment >= 1, "frames_per_segment must be >= 1");
    require(kernel_size >= 1 && kernel_size % 2 == 1, "kernel_size must be odd");
    require(commitment_coefficient >= 0.0, "commitment coefficient must be nonnegative");
    for (int w : conv_channel_widths) require(w > 0, "conv widths must be positive");
}

nlohmann::json to_json(const TokenizerConfig& c) {
    return {{"modality", std::string(c.modality.name())},
            {"channels", c.modality.channel_count},
            {"latent_dim", c.latent_dim},
            {"codebook_size", c.codebook_size},
            {"frames_per_segment", c.frames_per_segment},
            {"conv_channel_widths", c.conv_channel_widths},
            {"kernel_size", c.kernel_size},
            {"commitment_coefficient", c.commitment_coefficient}};
}

TokenizerConfig tokenizer_config_from_json(const nlohmann::json& j) {
    TokenizerConfig c;
    try {
        c.modality = Modality::continuous(modality_kind_from_string(j.at("modality").get<std::string>()),
                                          j.at("channels").get<int>());
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.codebook_size = j.value("codebook_size", c.codebook_size);
        c.frames_per_segment = j.value("frames_per_segment", c.frames_per_segment);
        c.conv_channel_widths = j.value("conv_channel_widths", c.conv_channel_widths);
        c.kernel_size = j.value("kernel_size", c.kernel_size);
        c.commitment_coefficient = j.value("commitment_coefficient", c.commitment_coefficient);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad tokenizer config: ") + e.what());
    }
    c.validate();
    return c;
}

int nearest_entry(const Matrix& entries, const Eigen::Ref<const RowVector>& embedding) {
    require(entries.rows() > 0, "empty codebook");
    require(entries.cols() == embedding.size(), "embedding width differs from codebook width");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < entries.rows(); ++r) {
        const double d = (entries.row(r) - embedding).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(r);
        }
    }
    return best;
}

QuantizeResult quantize(const Eigen::Ref<const RowVector>& embedding, const Codebook& codebook,
                        double commitment_coefficient) {
    if (!embedding.allFinite()) throw NumericalError("quantize: non-finite embedding");
    QuantizeResult r;
    r.index = nearest_entry(codebook.entries, embedding);
    r.quantized = codebook.entries.row(r.index);
    const double sq = (embedding - r.quantized).squaredNorm();
    r.codebook_term = sq;
    r.commitment_term = commitment_coefficient * sq;
    return r;
}

TokenizerLoss tokenizer_loss(const Matrix& original, const Matrix& reconstruction, double select_encode,
                             double select_decode) {
    require(original.rows() == reconstruction.rows() && original.cols() == reconstruction.cols(),
            "tokenizer_loss: shape mismatch");
    require(original.size() > 0, "tokenizer_loss: empty input");
    TokenizerLoss l;
    l.reconstruction = (original - reconstruction).squaredNorm() / static_cast<double>(original.size());
    l.select_encode = select_encode;
    l.select_decode = select_decode;
    l.total = l.reconstruction + 0.5 * (select_encode + select_decode);
    return l;
}

NormalizationStats compute_normalization(std::span<const Matrix> segments) {
    require(!segments.empty(), "normalisation needs at least one segment");
    const Eigen::Index c = segments.front().cols();
    RowVector sum = RowVector::Zero(c);
    RowVector sq = RowVector::Zero(c);
    double n = 0.0;
    for (const auto& s : segments) {
        require(s.cols() == c, "segments disagree on channel count");
        sum += s.colwise().sum();
        sq += s.array().square().matrix().colwise().sum();
        n += static_cast<double>(s.rows());
    }
    NormalizationStats stats;
    stats.mean = sum / n;
    stats.stddev = (sq / n - stats.mean.cwiseProduct(stats.mean)).cwiseMax(0.0).cwiseSqrt();
    for (Eigen::Index i = 0; i < c; ++i)
        if (stats.stddev(i) < 1e-8) stats.stddev(i) = 1.0;  // constant channel
    return stats;
}

VqTokenizer::VqTokenizer(TokenizerConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const int C = config_.channels();
    const int D = config_.latent_dim;
    const int m = config_.frames_per_segment;
    const int k = config_.kernel_size;
    const auto& widths = config_.conv_channel_widths;

    int in = C;
    for (std::size_t l = 0; l < widths.size(); ++l) {
        params_.add("enc.conv" + std::to_string(l) + ".w", ag::xavier_uniform(k * in, widths[l], rng));
        params_.add("enc.conv" + std::to_string(l) + ".b", Matrix::Zero(1, widths[l]));
        in = widths[l];
    }
    params_.add("enc.proj.w", ag::xavier_uniform(in, D, rng));
    params_.add("enc.proj.b", Matrix::Zero(1, D));

    Matrix cb(config_.codebook_size, D);
    const double bound = 1.0 / config_.codebook_size;
    for (Eigen::Index i = 0; i < cb.size(); ++i) cb.data()[i] = rng.uniform(-bound, bound);
    params_.add("codebook", std::move(cb));

    params_.add("agg.w", ag::xavier_uniform(static_cast<Eigen::Index>(m) * D, D, rng));
    params_.add("agg.b", Matrix::Zero(1, D));
    params_.add("up.w", ag::xavier_uniform(D, static_cast<Eigen::Index>(m) * D, rng));
    params_.add("up.b", Matrix::Zero(1, static_cast<Eigen::Index>(m) * D));

    if (widths.empty()) {
        params_.add("dec.in.w", ag::xavier_uniform(D, C, rng));
        params_.add("dec.in.b", Matrix::Zero(1, C));
    } else {
        params_.add("dec.in.w", ag::xavier_uniform(D, widths.back(), rng));
        params_.add("dec.in.b", Matrix::Zero(1, widths.back()));
        for (std::size_t l = widths.size(); l-- > 0;) {
            const int out = l == 0 ? C : widths[l - 1];
            params_.add("dec.convT" + std::to_string(l) + ".w", ag::xavier_uniform(k * widths[l], out, rng));
            params_.add("dec.convT" + std::to_string(l) + ".b", Matrix::Zero(1, out));
        }
    }

    norm_.mean = RowVector::Zero(C);
    norm_.stddev = RowVector::Ones(C);
    usage_.assign(static_cast<std::size_t>(config_.codebook_size), 0);
}

Codebook VqTokenizer::codebook() const {
    Codebook cb;
    cb.entries = params_.get("codebook").value();
    cb.usage_counts = usage_;
    return cb;
}

void VqTokenizer::set_normalization(NormalizationStats stats) {
    require(stats.mean.size() == config_.channels() && stats.stddev.size() == config_.channels(),
            "normalisation statistics have the wrong width");
    norm_ = std::move(stats);
}

Matrix VqTokenizer::normalize(const Matrix& chunk) const {
    Matrix out = chunk.rowwise() - norm_.mean;
    out.array().rowwise() /= norm_.stddev.array();
    return out;
}

Matrix VqTokenizer::denormalize(const Matrix& chunk) const {
    Matrix out = chunk;
    out.array().rowwise() *= norm_.stddev.array();
    out.rowwise() += norm_.mean;
    return out;
}

Var VqTokenizer::encode_frames(const Var& x) const {
    const int m = config_.frames_per_segment;
    const int k = config_.kernel_size;
    Var h = x;
    for (std::size_t l = 0; l < config_.conv_channel_widths.size(); ++l) {
        const std::string p = "enc.conv" + std::to_string(l);
        h = ag::relu(ag::conv1d(h, params_.get(p + ".w"), params_.get(p + ".b"), m, k));
    }
    return ag::add_row(ag::matmul(h, params_.get("enc.proj.w")), params_.get("enc.proj.b"));
}

Var VqTokenizer::select(const Var& embeddings, std::vector<int>& codes, Var& loss) const {
    const Matrix& e = embeddings.value();
    if (!e.allFinite()) throw NumericalError("VQ selection: non-finite embedding");
    const Var& cb = params_.get("codebook");
    const Matrix& entries = cb.value();

    // Distances via one GEMM; near-ties are re-checked exactly so the lowest
    // index wins deterministically.
    const RowVector cb_sq = entries.rowwise().squaredNorm().transpose();
    const Matrix cross = e * entries.transpose();
    codes.assign(static_cast<std::size_t>(e.rows()), 0);
    for (Eigen::Index r = 0; r < e.rows(); ++r) {
        const double e_sq = e.row(r).squaredNorm();
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < entries.rows(); ++c) best = std::min(best, e_sq + cb_sq(c) - 2.0 * cross(r, c));
        const double slack = 1e-9 * (1.0 + std::abs(best));
        int chosen = -1;
        double chosen_d = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < entries.rows(); ++c) {
            if (e_sq + cb_sq(c) - 2.0 * cross(r, c) > best + slack) continue;
            const double exact = (entries.row(c) - e.row(r)).squaredNorm();
            if (exact < chosen_d) {
                chosen_d = exact;
                chosen = static_cast<int>(c);
            }
        }
        codes[static_cast<std::size_t>(r)] = chosen;
    }

    const Var q = ag::gather_rows(cb, codes);
    loss = ag::add(ag::mse(ag::detach(embeddings), q),
                   ag::scale(ag::mse(embeddings, ag::detach(q)), config_.commitment_coefficient));
    return ag::add(embeddings, ag::constant(q.value() - e));
}

Var VqTokenizer::aggregate(const Var& quantized, Eigen::Index batch) const {
    const Eigen::Index width = static_cast<Eigen::Index>(config_.frames_per_segment) * config_.latent_dim;
    const Var flat = ag::reshape(quantized, batch, width);
    return ag::add_row(ag::matmul(flat, params_.get("agg.w")), params_.get("agg.b"));
}

Var VqTokenizer::up_project(const Var& z) const {
    const Var up = ag::add_row(ag::matmul(z, params_.get("up.w")), params_.get("up.b"));
    return ag::reshape(up, z.rows() * config_.frames_per_segment, config_.latent_dim);
}

Var VqTokenizer::decode_frames(const Var& quantized) const {
    const int m = config_.frames_per_segment;
    const int k = config_.kernel_size;
    const auto& widths = config_.conv_channel_widths;
    Var h = ag::add_row(ag::matmul(quantized, params_.get("dec.in.w")), params_.get("dec.in.b"));
    if (widths.empty()) return h;
    h = ag::relu(h);
    for (std::size_t l = widths.size(); l-- > 0;) {
        const std::string p = "dec.convT" + std::to_string(l);
        h = ag::conv_transpose1d(h, params_.get(p + ".w"), params_.get(p + ".b"), m, k);
        if (l != 0) h = ag::relu(h);
    }
    return h;
}

VqTokenizer::Graph VqTokenizer::forward(const Matrix& normalized_batch) const {
    const int m = config_.frames_per_segment;
    require(normalized_batch.cols() == config_.channels(), "tokenizer input has the wrong channel count");
    require(normalized_batch.rows() > 0 && normalized_batch.rows() % m == 0,
            "tokenizer input rows must be a positive multiple of frames_per_segment");
    const Eigen::Index batch = normalized_batch.rows() / m;
    Graph g;
    const Var x = ag::constant(normalized_batch);
    g.embeddings = encode_frames(x);
    g.quantized = select(g.embeddings, g.encode_codes, g.select_encode);
    g.z = aggregate(g.quantized, batch);
    g.up = up_project(g.z);
    g.requantized = select(g.up, g.decode_codes, g.select_decode);
    g.reconstruction = decode_frames(g.requantized);
    g.recon_loss = ag::mse(g.reconstruction, x);
    g.total = ag::add(g.recon_loss, ag::scale(ag::add(g.select_encode, g.select_decode), 0.5));
    return g;
}

SegmentLatent VqTokenizer::encode_segment(const Matrix& chunk) const {
    if (chunk.rows() != config_.frames_per_segment || chunk.cols() != config_.channels())
        throw InvalidArgument("encode_segment: expected a " + std::to_string(config_.frames_per_segment) + " x " +
                              std::to_string(config_.channels()) + " chunk, got " + std::to_string(chunk.rows()) +
                              " x " + std::to_string(chunk.cols()));
    ag::NoGradGuard no_grad;
    const Var e = encode_frames(ag::constant(normalize(chunk)));
    SegmentLatent latent;
    Var loss;
    const Var q = select(e, latent.frame_codes, loss);
    latent.z = aggregate(q, 1).value().row(0);
    return latent;
}

DecodeResult VqTokenizer::decode_latent(const SegmentLatent& latent) const {
    if (latent.z.size() != config_.latent_dim)
        throw InvalidArgument("decode_latent: latent has width " + std::to_string(latent.z.size()) + ", expected " +
                              std::to_string(config_.latent_dim));
    ag::NoGradGuard no_grad;
    Matrix z(1, config_.latent_dim);
    z.row(0) = latent.z;
    DecodeResult out;
    Var loss;
    const Var q = select(up_project(ag::constant(std::move(z))), out.frame_codes, loss);
    out.select_decode = loss.item();
    out.frames = denormalize(decode_frames(q).value());
    return out;
}

void VqTokenizer::save(const std::filesystem::path& path) const {
    Checkpoint c;
    c.magic = "M3VQ";
    c.format_version = kFormatVersion;
    c.header["config"] = to_json(config_);
    c.header["normalization"] = {
        {"mean", std::vector<double>(norm_.mean.data(), norm_.mean.data() + norm_.mean.size())},
        {"stddev", std::vector<double>(norm_.stddev.data(), norm_.stddev.data() + norm_.stddev.size())}};
    c.header["usage_counts"] = usage_;
    for (const auto& [name, v] : params_.entries()) c.tensors.emplace_back(name, v.value());
    write_checkpoint(c, path);
}

VqTokenizer VqTokenizer::load(const std::filesystem::path& path) {
    const Checkpoint c = read_checkpoint(path, "M3VQ", kFormatVersion);
    VqTokenizer tok(tokenizer_config_from_json(c.header.at("config")), 0);
    for (auto& [name, v] : tok.params_.entries()) {
        const Matrix& m = c.tensor(name);
        if (m.rows() != v.rows() || m.cols() != v.cols())
            throw ConfigError("tokenizer checkpoint tensor '" + name + "' has the wrong shape");
        v.mutable_value() = m;
    }
    const auto mean = c.header.at("normalization").at("mean").get<std::vector<double>>();
    const auto sd = c.header.at("normalization").at("stddev").get<std::vector<double>>();
    NormalizationStats stats;
    stats.mean = Eigen::Map<const RowVector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
    stats.stddev = Eigen::Map<const RowVector>(sd.data(), static_cast<Eigen::Index>(sd.size()));
    tok.set_normalization(std::move(stats));
    tok.usage_ = c.header.value("usage_counts", tok.usage_);
    return tok;
}

TokenizerTrainReport train_tokenizer(VqTokenizer& tokenizer, std::span<const Matrix> segments,
                                     const TokenizerTrainSettings& settings) {
    require(!segments.empty(), "train_tokenizer: empty dataset");
    require(settings.batch_size >= 1 && settings.epochs >= 1, "train_tokenizer: bad batch size or epoch count");
    const auto& cfg = tokenizer.config();
    const int m = cfg.frames_per_segment;
    for (const auto& s : segments)
        require(s.rows() == m && s.cols() == cfg.channels(), "train_tokenizer: segment has the wrong shape");

    const auto started = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };

    tokenizer.set_normalization(compute_normalization(segments));
    std::vector<Matrix> data;
    data.reserve(segments.size());
    for (const auto& s : segments) data.push_back(tokenizer.normalize(s));

    Rng rng(settings.seed);
    const std::size_t n = data.size();
    const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(settings.batch_size), n);
    auto pack = [&](const std::vector<std::size_t>& order, std::size_t from, std::size_t count) {
        Matrix x(static_cast<Eigen::Index>(count) * m, cfg.channels());
        for (std::size_t b = 0; b < count; ++b) x.middleRows(static_cast<Eigen::Index>(b) * m, m) = data[order[from + b]];
        return x;
    };

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    // Data-dependent codebook initialisation from encoder outputs.
    Var& codebook = tokenizer.params().get("codebook");
    {
        ag::NoGradGuard no_grad;
        rng.shuffle(order);
        const Matrix e = tokenizer.encode_frames(ag::constant(pack(order, 0, batch))).value();
        for (Eigen::Index r = 0; r < codebook.rows(); ++r) {
            const auto pick = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(e.rows())));
            for (Eigen::Index c = 0; c < codebook.cols(); ++c)
                codebook.mutable_value()(r, c) = e(pick, c) + 1e-3 * rng.normal();
        }
    }

    AdamSettings adam_settings;
    adam_settings.learning_rate = settings.learning_rate;
    adam_settings.clip_norm = 0.0;
    Adam adam(adam_settings);
    TokenizerTrainReport report;
    const auto K = static_cast<std::size_t>(cfg.codebook_size);
    Matrix last_embeddings;
    bool out_of_time = false;

    for (int epoch = 0; epoch < settings.epochs && !out_of_time; ++epoch) {
        rng.shuffle(order);
        std::vector<std::uint64_t> usage(K, 0), any_usage(K, 0);
        double loss_sum = 0.0;
        TokenizerLoss terms_sum;
        std::size_t batches = 0;
        for (std::size_t from = 0; from < n; from += batch) {
            const std::size_t count = std::min(batch, n - from);
            const auto g = tokenizer.forward(pack(order, from, count));
            const double total = g.total.item();
            if (!std::isfinite(total))
                throw NumericalError("tokenizer training diverged at epoch " + std::to_string(epoch) + " (loss " +
                                     std::to_string(total) + ")");
            ag::backward(g.total);
            adam.step(tokenizer.params());
            for (int c : g.encode_codes) ++usage[static_cast<std::size_t>(c)], ++any_usage[static_cast<std::size_t>(c)];
            for (int c : g.decode_codes) ++any_usage[static_cast<std::size_t>(c)];
            loss_sum += total;
            terms_sum.reconstruction += g.recon_loss.item();
            terms_sum.select_encode += g.select_encode.item();
            terms_sum.select_decode += g.select_decode.item();
            ++batches;
            last_embeddings.resize(g.embeddings.rows() + g.up.rows(), g.embeddings.cols());
            last_embeddings << g.embeddings.value(), g.up.value();
            if (settings.max_seconds > 0.0 && elapsed() > settings.max_seconds) {
                out_of_time = true;
                break;
            }
        }
        const double nb = static_cast<double>(batches);
        report.epoch_losses.push_back(loss_sum / nb);
        report.final_loss = tokenizer_loss(Matrix::Zero(1, 1), Matrix::Zero(1, 1), terms_sum.select_encode / nb,
                                           terms_sum.select_decode / nb);
        report.final_loss.reconstruction = terms_sum.reconstruction / nb;
        report.final_loss.total = loss_sum / nb;
        report.usage = usage;
        report.epochs_run = epoch + 1;

        // Re-seed entries neither selection used this epoch, from either side's embeddings.
        const bool last = epoch + 1 == settings.epochs || out_of_time;
        if (settings.reseed_dead_codes && !last && !out_of_time) {
            for (std::size_t c = 0; c < K; ++c) {
                if (any_usage[c] != 0) continue;
                const auto pick =
                    static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(last_embeddings.rows())));
                for (Eigen::Index d = 0; d < codebook.cols(); ++d)
                    codebook.mutable_value()(static_cast<Eigen::Index>(c), d) =
                        last_embeddings(pick, d) + 1e-2 * rng.normal();
                ++report.reseeded_entries;
            }
        }
    }

    report.active_entries = static_cast<int>(std::count_if(report.usage.begin(), report.usage.end(),
                                                           [](std::uint64_t u) { return u > 0; }));
    tokenizer.usage_counts() = report.usage;
    report.seconds = elapsed();
    return report;
}

double normalized_mse(std::span<const Matrix> originals, std::span<const Matrix> reconstructions) {
    require(originals.size() == reconstructions.size() && !originals.empty(), "normalized_mse: size mismatch");
    const auto stats = compute_normalization(originals);
    const Eigen::Index c = originals.front().cols();
    RowVector err = RowVector::Zero(c);
    double n = 0.0;
    for (std::size_t i = 0; i < originals.size(); ++i) {
        require(originals[i].rows() == reconstructions[i].rows() && originals[i].cols() == reconstructions[i].cols(),
                "normalized_mse: shape mismatch");
        err += (originals[i] - reconstructions[i]).array().square().matrix().colwise().sum();
        n += static_cast<double>(originals[i].rows());
    }
    err /= n;
    return (err.array() / stats.stddev.array().square()).mean();
}

}  // namespace m3pt
