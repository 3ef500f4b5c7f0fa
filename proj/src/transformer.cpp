#include "m3pt/transformer.hpp"

#include "m3pt/checkpoint.hpp"
#include "m3pt/metrics.hpp"
#include "m3pt/rng.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace m3pt {

using ag::Var;

namespace {

std::string lp(int l, const char* name) { return "layer" + std::to_string(l) + "." + name; }

Var linear(const Var& x, const Var& w, const Var& b) { return ag::add_row(ag::matmul(x, w), b); }

Matrix small_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng, double sd = 0.02) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
    return m;
}

void check_finite(const Var& v, int layer) {
    if (!v.value().allFinite())
        throw NumericalError("non-finite activations after transformer layer " + std::to_string(layer));
}

}  // namespace

std::string_view to_string(InputMode mode) {
    return mode == InputMode::placeholder ? "placeholder" : "teacher_forcing";
}

InputMode input_mode_from_string(std::string_view name) {
    if (name == "teacher_forcing" || name == "teacher-forcing") return InputMode::teacher_forcing;
    if (name == "placeholder") return InputMode::placeholder;
    throw ConfigError("unknown input mode '" + std::string(name) + "'");
}

std::string_view to_string(WordInput mode) { return mode == WordInput::pooled ? "pooled" : "vq"; }

WordInput word_input_from_string(std::string_view name) {
    if (name == "vq") return WordInput::vq;
    if (name == "pooled") return WordInput::pooled;
    throw ConfigError("unknown word input '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
    auto bad = [](const std::string& m) { throw ConfigError(m); };
    if (hidden_dim <= 0 || num_layers <= 0 || num_heads <= 0) bad("hidden_dim, num_layers and num_heads must be positive");
    if (hidden_dim % num_heads != 0)
        bad("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " + std::to_string(num_heads));
    if (ffn_dim < 0) bad("ffn_dim must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) bad("dropout must be in [0, 1)");
    if (num_segments < 1 || num_persons < 1) bad("num_segments and num_persons must be >= 1");
    if (modalities.empty()) bad("model needs at least one modality");
    if (input_dims.size() != modalities.size()) bad("input_dims must list one width per modality");
    for (std::size_t k = 0; k < modalities.size(); ++k) {
        if (input_dims[k] <= 0) bad("input width for " + std::string(modalities[k].name()) + " must be positive");
        if (modalities[k].is_discrete && input_dims[k] != 1)
            bad("discrete modality " + std::string(modalities[k].name()) + " must have input width 1");
    }
    if (!predict_speaking && !predict_bite) bad("at least one head must be enabled");
    if (!find_modality(modalities, ModalityKind::speaker) && !find_modality(modalities, ModalityKind::bite))
        bad("both head-source modalities (speaker, bite) were dropped; no position left to read the heads from");
}

nlohmann::json to_json(const ModelConfig& c) {
    nlohmann::json mods = nlohmann::json::array();
    for (const auto& m : c.modalities)
        mods.push_back({{"kind", std::string(m.name())}, {"channels", m.channel_count}, {"discrete", m.is_discrete}});
    return {{"hidden_dim", c.hidden_dim},
            {"num_layers", c.num_layers},
            {"num_heads", c.num_heads},
            {"ffn_dim", c.ffn_width()},
            {"dropout", c.dropout},
            {"num_segments", c.num_segments},
            {"num_persons", c.num_persons},
            {"modalities", mods},
            {"input_dims", c.input_dims},
            {"mask_kind", std::string(to_string(c.mask_kind))},
            {"allow_own_modalities", c.allow_own_modalities},
            {"input_mode", std::string(to_string(c.input_mode))},
            {"time_encoding", c.time_encoding == TimeEncoding::sinusoidal ? "sinusoidal" : "learned"},
            {"predict_speaking", c.predict_speaking},
            {"predict_bite", c.predict_bite},
            {"word_input", std::string(to_string(c.word_input))}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.num_layers = j.at("num_layers").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.ffn_dim = j.value("ffn_dim", 0);
        c.dropout = j.value("dropout", c.dropout);
        c.num_segments = j.at("num_segments").get<int>();
        c.num_persons = j.at("num_persons").get<int>();
        c.modalities.clear();
        for (const auto& m : j.at("modalities")) {
            const auto kind = modality_kind_from_string(m.at("kind").get<std::string>());
            c.modalities.push_back(m.value("discrete", false) ? Modality::discrete(kind)
                                                               : Modality::continuous(kind, m.at("channels").get<int>()));
        }
        c.input_dims = j.at("input_dims").get<std::vector<int>>();
        c.mask_kind = mask_kind_from_string(j.value("mask_kind", std::string("blockwise")));
        c.allow_own_modalities = j.value("allow_own_modalities", false);
        c.input_mode = input_mode_from_string(j.value("input_mode", std::string("teacher_forcing")));
        c.time_encoding = j.value("time_encoding", std::string("learned")) == "sinusoidal" ? TimeEncoding::sinusoidal
                                                                                            : TimeEncoding::learned;
        c.predict_speaking = j.value("predict_speaking", true);
        c.predict_bite = j.value("predict_bite", true);
        c.word_input = word_input_from_string(j.value("word_input", std::string("vq")));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    c.validate();
    return c;
}

void apply_profile(ModelConfig& c, std::string_view profile) {
    if (profile == "default") {
        c.hidden_dim = 256, c.num_layers = 4, c.num_heads = 8, c.ffn_dim = 0, c.dropout = 0.1;
    } else if (profile == "small" || profile == "reduced") {
        c.hidden_dim = 128, c.num_layers = 2, c.num_heads = 8, c.ffn_dim = 0, c.dropout = 0.1;
    } else if (profile == "smoke") {
        c.hidden_dim = 32, c.num_layers = 2, c.num_heads = 4, c.ffn_dim = 64, c.dropout = 0.0;
    } else {
        throw ConfigError("unknown model profile '" + std::string(profile) + "' (default, small, smoke)");
    }
}

int Tokenizers::input_dim(const Modality& modality) const {
    if (modality.is_discrete) return 1;
    if (modality.kind == ModalityKind::word && word_input == WordInput::pooled) return modality.channel_count;
    auto it = by_kind.find(modality.kind);
    if (it == by_kind.end() || !it->second)
        throw MissingArtifact("no trained tokenizer for modality '" + std::string(modality.name()) + "'");
    return it->second->config().latent_dim;
}

TokenFeatures extract_features(const SegmentGrid& grid, const Tokenizers& tokenizers,
                               std::span<const Modality> layout) {
    TokenFeatures f;
    f.num_segments = grid.num_segments;
    f.num_persons = grid.num_persons;
    f.speaking = grid.speaking;
    f.biting = grid.biting;
    const int rows = grid.num_segments * grid.num_persons;
    for (const auto& mod : layout) {
        const auto kg = find_modality(grid.modalities, mod.kind);
        if (!kg) throw InvalidArgument("segment grid has no '" + std::string(mod.name()) + "' stream");
        const Modality& gm = grid.modalities[*kg];
        if (gm.is_discrete != mod.is_discrete || (!mod.is_discrete && gm.channel_count != mod.channel_count))
            throw ConfigError("modality '" + std::string(mod.name()) + "' differs between data and model config");
        Matrix out(rows, tokenizers.input_dim(mod));
        const VqTokenizer* tok = nullptr;
        const bool pooled = mod.kind == ModalityKind::word && tokenizers.word_input == WordInput::pooled;
        if (!mod.is_discrete && !pooled) {
            tok = tokenizers.by_kind.at(mod.kind).get();
            if (tok->config().channels() != mod.channel_count)
                throw ConfigError("tokenizer for '" + std::string(mod.name()) + "' expects " +
                                  std::to_string(tok->config().channels()) + " channels, data has " +
                                  std::to_string(mod.channel_count));
        }
        for (int t = 0; t < grid.num_segments; ++t) {
            for (int i = 0; i < grid.num_persons; ++i) {
                const int r = t * grid.num_persons + i;
                if (mod.is_discrete) out(r, 0) = grid.discrete_value(t, i, *kg);
                else if (pooled) out.row(r) = grid.chunk(t, i, *kg).colwise().mean();
                else out.row(r) = tok->encode_segment(grid.chunk(t, i, *kg)).z;
            }
        }
        f.per_modality.push_back(std::move(out));
    }
    return f;
}

HeadOutputs to_outputs(const HeadVars& heads) {
    HeadOutputs out;
    auto col = [](const Var& v) {
        const Matrix& m = v.value();
        return std::vector<double>(m.data(), m.data() + m.size());
    };
    if (heads.speaking) out.speaking_logits = col(*heads.speaking);
    if (heads.bite) out.bite_logits = col(*heads.bite);
    return out;
}

Var right_shift_residual(const Var& features, const MaskSpec& spec) {
    if (static_cast<std::size_t>(features.rows()) != spec.length())
        throw InvalidArgument("right_shift_residual: " + std::to_string(features.rows()) +
                              " rows for a layout of length " + std::to_string(spec.length()));
    return ag::shift_rows(features, static_cast<Eigen::Index>(spec.block_size()));
}

M3ptModel::M3ptModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    spec_ = config_.spec();
    MaskOptions mo;
    mo.allow_own_modalities = config_.allow_own_modalities;
    mask_ = build_mask(config_.mask_kind, spec_, mo);

    const auto spk = find_modality(config_.modalities, ModalityKind::speaker);
    const auto bite = find_modality(config_.modalities, ModalityKind::bite);
    // Documented fallback: a head whose own modality was dropped reads the
    // other head's position.
    speaking_source_ = static_cast<int>(spk ? *spk : *bite);
    bite_source_ = static_cast<int>(bite ? *bite : *spk);

    Rng rng(seed);
    const int H = config_.hidden_dim;
    const int M = spec_.num_modalities;
    for (int k = 0; k < M; ++k) {
        const std::string p = "in.m" + std::to_string(k);
        if (config_.modalities[static_cast<std::size_t>(k)].is_discrete) {
            params_.add(p + ".table", small_normal(2, H, rng, 1.0));
        } else {
            params_.add(p + ".w", ag::xavier_uniform(config_.input_dims[static_cast<std::size_t>(k)], H, rng));
            params_.add(p + ".b", Matrix::Zero(1, H));
        }
    }
    params_.add("placeholder", small_normal(M, H, rng, 1.0));
    if (config_.time_encoding == TimeEncoding::learned) params_.add("pos.time", small_normal(spec_.num_segments, H, rng));
    params_.add("pos.person", small_normal(spec_.num_persons, H, rng));
    params_.add("pos.modality", small_normal(M, H, rng));

    const int F = config_.ffn_width();
    for (int l = 0; l < config_.num_layers; ++l) {
        params_.add(lp(l, "ln1.g"), Matrix::Ones(1, H));
        params_.add(lp(l, "ln1.b"), Matrix::Zero(1, H));
        for (const char* n : {"q", "k", "v", "o"}) {
            params_.add(lp(l, (std::string("w") + n).c_str()), ag::xavier_uniform(H, H, rng));
            params_.add(lp(l, (std::string("b") + n).c_str()), Matrix::Zero(1, H));
        }
        params_.add(lp(l, "ln2.g"), Matrix::Ones(1, H));
        params_.add(lp(l, "ln2.b"), Matrix::Zero(1, H));
        params_.add(lp(l, "ff1.w"), ag::xavier_uniform(H, F, rng));
        params_.add(lp(l, "ff1.b"), Matrix::Zero(1, F));
        params_.add(lp(l, "ff2.w"), ag::xavier_uniform(F, H, rng));
        params_.add(lp(l, "ff2.b"), Matrix::Zero(1, H));
    }
    params_.add("final.ln.g", Matrix::Ones(1, H));
    params_.add("final.ln.b", Matrix::Zero(1, H));
    if (config_.predict_speaking) {
        params_.add("head.speaking.w", ag::xavier_uniform(H, 1, rng));
        params_.add("head.speaking.b", Matrix::Zero(1, 1));
    }
    if (config_.predict_bite) {
        params_.add("head.bite.w", ag::xavier_uniform(H, 1, rng));
        params_.add("head.bite.b", Matrix::Zero(1, 1));
    }

    if (config_.time_encoding == TimeEncoding::sinusoidal) {
        sinusoid_.resize(spec_.num_segments, H);
        for (int t = 0; t < spec_.num_segments; ++t)
            for (int c = 0; c < H; ++c) {
                const double rate = std::pow(10000.0, -static_cast<double>(c - c % 2) / H);
                sinusoid_(t, c) = c % 2 == 0 ? std::sin(t * rate) : std::cos(t * rate);
            }
    }
}

Var M3ptModel::positional(std::span<const TokenCoord> coords) const {
    std::vector<int> ti, pi, mi;
    for (const auto& c : coords) {
        ti.push_back(c.t % spec_.num_segments);
        pi.push_back(c.person);
        mi.push_back(c.modality);
    }
    Var time;
    if (config_.time_encoding == TimeEncoding::learned) {
        time = ag::gather_rows(params_.get("pos.time"), ti);
    } else {
        Matrix s(static_cast<Eigen::Index>(coords.size()), config_.hidden_dim);
        for (std::size_t r = 0; r < coords.size(); ++r) s.row(static_cast<Eigen::Index>(r)) = sinusoid_.row(ti[r]);
        time = ag::constant(std::move(s));
    }
    return ag::add(ag::add(time, ag::gather_rows(params_.get("pos.person"), pi)),
                   ag::gather_rows(params_.get("pos.modality"), mi));
}

Var M3ptModel::embed_pre(const TokenFeatures& f) const {
    const int T = spec_.num_segments, P = spec_.num_persons, M = spec_.num_modalities;
    if (f.num_segments != T || f.num_persons != P || static_cast<int>(f.per_modality.size()) != M)
        throw InvalidArgument("token features do not match the model layout (T=" + std::to_string(T) +
                              ", P=" + std::to_string(P) + ", M=" + std::to_string(M) + ")");
    const int TP = T * P;
    std::vector<Var> parts;
    parts.reserve(static_cast<std::size_t>(M));
    for (int k = 0; k < M; ++k) {
        const Matrix& x = f.per_modality[static_cast<std::size_t>(k)];
        const std::string p = "in.m" + std::to_string(k);
        if (x.rows() != TP || x.cols() != config_.input_dims[static_cast<std::size_t>(k)])
            throw InvalidArgument("features for modality " + std::string(config_.modalities[k].name()) +
                                  " have the wrong shape");
        if (config_.modalities[static_cast<std::size_t>(k)].is_discrete) {
            std::vector<int> idx(static_cast<std::size_t>(TP));
            for (int r = 0; r < TP; ++r) {
                const double v = x(r, 0);
                if (v != 0.0 && v != 1.0) throw InvalidArgument("discrete token value is not 0/1");
                idx[static_cast<std::size_t>(r)] = static_cast<int>(v);
            }
            parts.push_back(ag::gather_rows(params_.get(p + ".table"), idx));
        } else {
            parts.push_back(linear(ag::constant(x), params_.get(p + ".w"), params_.get(p + ".b")));
        }
    }
    // modality-major stack -> layout order
    std::vector<int> perm(spec_.length());
    for (int r = 0; r < TP; ++r)
        for (int k = 0; k < M; ++k) perm[static_cast<std::size_t>(r * M + k)] = k * TP + r;
    return ag::gather_rows(ag::concat_rows(parts), perm);
}

TokenSequence M3ptModel::embed(const TokenFeatures& features,
                               std::span<const std::pair<int, int>> placeholder_pairs) const {
    const int M = spec_.num_modalities;
    Var pre = embed_pre(features);
    TokenSequence seq;
    seq.provenance.resize(spec_.length());
    for (std::size_t pos = 0; pos < spec_.length(); ++pos) {
        const auto& mod = config_.modalities[static_cast<std::size_t>(spec_.coord(pos).modality)];
        seq.provenance[pos] = mod.is_discrete ? TokenSource::discrete_embedding
                              : (mod.kind == ModalityKind::word && config_.word_input == WordInput::pooled)
                                  ? TokenSource::pooled
                                  : TokenSource::vq_latent;
    }
    if (!placeholder_pairs.empty()) {
        std::vector<int> rows, kidx(spec_.length());
        for (std::size_t pos = 0; pos < spec_.length(); ++pos) kidx[pos] = static_cast<int>(pos % M);
        for (auto [t, i] : placeholder_pairs) {
            for (int k = 0; k < M; ++k) {
                const auto pos = spec_.position({t, i, k});
                rows.push_back(static_cast<int>(pos));
                seq.provenance[pos] = TokenSource::placeholder;
            }
        }
        pre = ag::select_rows(pre, ag::gather_rows(params_.get("placeholder"), kidx), rows);
    }
    std::vector<TokenCoord> coords(spec_.length());
    for (std::size_t pos = 0; pos < coords.size(); ++pos) coords[pos] = spec_.coord(pos);
    seq.embeddings = ag::add(pre, positional(coords));
    return seq;
}

Var M3ptModel::feed_forward(int l, const Var& x, Rng* rng) const {
    const Var a = ag::layer_norm(x, params_.get(lp(l, "ln2.g")), params_.get(lp(l, "ln2.b")));
    Var f = linear(ag::relu(linear(a, params_.get(lp(l, "ff1.w")), params_.get(lp(l, "ff1.b")))),
                   params_.get(lp(l, "ff2.w")), params_.get(lp(l, "ff2.b")));
    if (rng && config_.dropout > 0.0) f = ag::dropout(f, config_.dropout, *rng);
    return f;
}

Var M3ptModel::layer(int l, const Var& x, const ForwardOptions& options, LayerCache* cache) const {
    const Var a = ag::layer_norm(x, params_.get(lp(l, "ln1.g")), params_.get(lp(l, "ln1.b")));
    const Var q = linear(a, params_.get(lp(l, "wq")), params_.get(lp(l, "bq")));
    const Var k = linear(a, params_.get(lp(l, "wk")), params_.get(lp(l, "bk")));
    const Var v = linear(a, params_.get(lp(l, "wv")), params_.get(lp(l, "bv")));
    LayerTrace* tr = nullptr;
    if (options.trace) {
        options.trace->emplace_back();
        tr = &options.trace->back();
    }
    ag::AttentionOptions ao;
    ao.record = tr ? &tr->attention : nullptr;
    ao.zero_output = options.zero_attention;
    const Var ctx = ag::masked_attention(q, k, v, mask_, config_.num_heads, ao);
    Var o = options.zero_attention ? ag::constant(Matrix::Zero(x.rows(), x.cols()))
                                   : linear(ctx, params_.get(lp(l, "wo")), params_.get(lp(l, "bo")));
    if (options.dropout_rng && config_.dropout > 0.0) o = ag::dropout(o, config_.dropout, *options.dropout_rng);
    const Var res_a = right_shift_residual(x, spec_);
    const Var h = ag::add(res_a, o);
    const Var res_f = right_shift_residual(h, spec_);
    const Var out = ag::add(res_f, feed_forward(l, h, options.dropout_rng));
    check_finite(out, l);
    if (tr) {
        tr->input = x.value();
        tr->attn_residual = res_a.value();
        tr->attn_output = o.value();
        tr->hidden = h.value();
        tr->ffn_residual = res_f.value();
        tr->output = out.value();
    }
    if (cache) *cache = {x, h, k, v};
    return out;
}

Var M3ptModel::forward(const TokenSequence& tokens, const ForwardOptions& options) const {
    if (static_cast<std::size_t>(tokens.embeddings.rows()) != mask_.length())
        throw InvalidArgument("token sequence length " + std::to_string(tokens.embeddings.rows()) +
                              " does not match the mask length " + std::to_string(mask_.length()));
    Var x = tokens.embeddings;
    for (int l = 0; l < config_.num_layers; ++l) x = layer(l, x, options, nullptr);
    return ag::layer_norm(x, params_.get("final.ln.g"), params_.get("final.ln.b"));
}

HeadVars M3ptModel::predict_heads(const Var& hidden) const {
    require(static_cast<std::size_t>(hidden.rows()) == spec_.length() && hidden.cols() == config_.hidden_dim,
            "predict_heads: hidden states have the wrong shape");
    const int TP = spec_.num_segments * spec_.num_persons;
    const int M = spec_.num_modalities;
    auto read = [&](int source) {
        std::vector<int> idx(static_cast<std::size_t>(TP));
        for (int r = 0; r < TP; ++r) idx[static_cast<std::size_t>(r)] = r * M + source;
        return ag::gather_rows(hidden, idx);
    };
    HeadVars out;
    if (config_.predict_speaking)
        out.speaking = linear(read(speaking_source_), params_.get("head.speaking.w"), params_.get("head.speaking.b"));
    if (config_.predict_bite)
        out.bite = linear(read(bite_source_), params_.get("head.bite.w"), params_.get("head.bite.b"));
    return out;
}

HeadVars M3ptModel::predict(const TokenFeatures& features, Rng* dropout_rng) const {
    ForwardOptions fo;
    fo.dropout_rng = dropout_rng;
    if (!config_.placeholder_inputs()) return predict_heads(forward(embed(features), fo));

    const int T = spec_.num_segments, P = spec_.num_persons, M = spec_.num_modalities;
    const auto B = static_cast<Eigen::Index>(spec_.block_size());
    const int H = config_.hidden_dim;

    // Shared teacher-forced pass. Blocks before t never see block t under any
    // of the masks, so its per-layer states serve as the prefix for every
    // target at t.
    const Var pre = embed_pre(features);
    std::vector<TokenCoord> coords(spec_.length());
    for (std::size_t pos = 0; pos < coords.size(); ++pos) coords[pos] = spec_.coord(pos);
    const Var pe = positional(coords);
    std::vector<LayerCache> caches(static_cast<std::size_t>(config_.num_layers));
    if (T > 1) {
        Var x = ag::add(pre, pe);
        for (int l = 0; l < config_.num_layers; ++l) x = layer(l, x, fo, &caches[static_cast<std::size_t>(l)]);
    }

    std::vector<int> kidx(static_cast<std::size_t>(B));
    for (Eigen::Index r = 0; r < B; ++r) kidx[static_cast<std::size_t>(r)] = static_cast<int>(r % M);
    const Var replacement = ag::gather_rows(params_.get("placeholder"), kidx);
    const Var zeros = ag::constant(Matrix::Zero(B, H));

    std::vector<Var> spk_rows, bite_rows;
    for (int t = 0; t < T; ++t) {
        const Var block_pre = ag::slice_rows(pre, t * B, B);
        const Var block_pe = ag::slice_rows(pe, t * B, B);
        for (int i = 0; i < P; ++i) {
            std::vector<int> rows(static_cast<std::size_t>(M));
            std::iota(rows.begin(), rows.end(), i * M);
            Var y = ag::add(ag::select_rows(block_pre, replacement, rows), block_pe);
            for (int l = 0; l < config_.num_layers; ++l) {
                const auto& c = caches[static_cast<std::size_t>(l)];
                const Var a = ag::layer_norm(y, params_.get(lp(l, "ln1.g")), params_.get(lp(l, "ln1.b")));
                const Var q = linear(a, params_.get(lp(l, "wq")), params_.get(lp(l, "bq")));
                Var k = linear(a, params_.get(lp(l, "wk")), params_.get(lp(l, "bk")));
                Var v = linear(a, params_.get(lp(l, "wv")), params_.get(lp(l, "bv")));
                if (t > 0) {
                    const Var kp[2] = {ag::slice_rows(c.k, 0, t * B), k};
                    const Var vp[2] = {ag::slice_rows(c.v, 0, t * B), v};
                    k = ag::concat_rows(kp);
                    v = ag::concat_rows(vp);
                }
                ag::AttentionOptions ao;
                ao.query_offset = static_cast<std::size_t>(t * B);
                Var o = linear(ag::masked_attention(q, k, v, mask_, config_.num_heads, ao), params_.get(lp(l, "wo")),
                               params_.get(lp(l, "bo")));
                if (dropout_rng && config_.dropout > 0.0) o = ag::dropout(o, config_.dropout, *dropout_rng);
                const Var h = ag::add(t > 0 ? ag::slice_rows(c.x, (t - 1) * B, B) : zeros, o);
                y = ag::add(t > 0 ? ag::slice_rows(c.h, (t - 1) * B, B) : zeros, feed_forward(l, h, dropout_rng));
                check_finite(y, l);
            }
            const Var fin = ag::layer_norm(y, params_.get("final.ln.g"), params_.get("final.ln.b"));
            if (config_.predict_speaking) spk_rows.push_back(ag::slice_rows(fin, i * M + speaking_source_, 1));
            if (config_.predict_bite) bite_rows.push_back(ag::slice_rows(fin, i * M + bite_source_, 1));
        }
    }
    HeadVars out;
    if (config_.predict_speaking)
        out.speaking =
            linear(ag::concat_rows(spk_rows), params_.get("head.speaking.w"), params_.get("head.speaking.b"));
    if (config_.predict_bite)
        out.bite = linear(ag::concat_rows(bite_rows), params_.get("head.bite.w"), params_.get("head.bite.b"));
    return out;
}

HeadOutputs M3ptModel::infer(const TokenFeatures& features) const {
    ag::NoGradGuard no_grad;
    return to_outputs(predict(features));
}

void M3ptModel::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
    Checkpoint c;
    c.magic = "M3PT";
    c.format_version = kFormatVersion;
    c.header["config"] = to_json(config_);
    c.header["extra"] = extra;
    for (const auto& [name, v] : params_.entries()) c.tensors.emplace_back(name, v.value());
    write_checkpoint(c, path);
}

M3ptModel M3ptModel::load(const std::filesystem::path& path, nlohmann::json* extra) {
    const Checkpoint c = read_checkpoint(path, "M3PT", kFormatVersion);
    if (!c.header.contains("config")) throw ConfigError("model checkpoint '" + path.string() + "' has no config");
    M3ptModel model(model_config_from_json(c.header.at("config")), 0);
    for (auto& [name, v] : model.params_.entries()) {
        if (!c.has_tensor(name)) throw ConfigError("model checkpoint is missing tensor '" + name + "'");
        const Matrix& m = c.tensor(name);
        if (m.rows() != v.rows() || m.cols() != v.cols())
            throw ConfigError("model checkpoint tensor '" + name + "' has the wrong shape");
        v.mutable_value() = m;
    }
    if (extra) *extra = c.header.value("extra", nlohmann::json::object());
    return model;
}

TaskLoss task_loss(const HeadVars& heads, std::span<const std::uint8_t> speaking,
                   std::span<const std::uint8_t> biting, const LossWeights& weights) {
    TaskLoss out;
    auto one = [&](const Var& logits, std::span<const std::uint8_t> labels, const ClassWeights& cw) {
        require(static_cast<std::size_t>(logits.rows()) == labels.size(), "task_loss: label count differs from logits");
        std::vector<double> y(labels.size()), w(labels.size());
        for (std::size_t n = 0; n < labels.size(); ++n) {
            if (labels[n] > 1) throw InvalidArgument("task_loss: label " + std::to_string(labels[n]) + " is not binary");
            y[n] = labels[n];
            w[n] = weights.use_class_weights ? (labels[n] ? cw.positive : cw.negative) : 1.0;
        }
        return ag::weighted_bce_with_logits(logits, y, w);
    };
    if (heads.speaking) {
        const Var l = one(*heads.speaking, speaking, weights.speaking);
        out.speaking = l.item();
        out.total = l;
    }
    if (heads.bite) {
        const Var l = one(*heads.bite, biting, weights.bite);
        out.bite = l.item();
        out.total = out.total ? ag::add(out.total, l) : l;
    }
    require(static_cast<bool>(out.total), "task_loss: no enabled heads");
    return out;
}

void resample_person_block(SegmentGrid& grid, int t, int person, Rng& rng) {
    require(t >= 0 && t < grid.num_segments && person >= 0 && person < grid.num_persons,
            "resample_person_block: (t, person) out of range");
    const std::size_t r = static_cast<std::size_t>(t) * grid.num_persons + person;
    grid.speaking[r] = rng.bernoulli(0.5) ? 1 : 0;
    grid.biting[r] = rng.bernoulli(0.5) ? 1 : 0;
    for (std::size_t k = 0; k < grid.num_modalities(); ++k) {
        Matrix& c = grid.chunk(t, person, k);
        const Modality& mod = grid.modalities[k];
        if (mod.is_discrete) {
            const bool on = mod.kind == ModalityKind::speaker ? grid.speaking[r] : grid.biting[r];
            c.setConstant(on ? 1.0 : 0.0);
            continue;
        }
        const double mu = c.mean();
        const double sd = std::max(1.0, std::sqrt((c.array() - mu).square().mean()));
        for (Eigen::Index n = 0; n < c.size(); ++n) c.data()[n] = mu + sd * rng.normal();
    }
}

LeakageReport leakage_audit(const M3ptModel& model, const Tokenizers& tokenizers,
                            std::span<const SegmentGrid> batch, int trials, std::uint64_t seed) {
    require(!batch.empty() && trials >= 1, "leakage_audit: needs windows and at least one trial");
    Rng rng(seed);
    const auto& layout = model.config().modalities;
    std::map<std::size_t, HeadOutputs> base;
    LeakageReport report;
    for (int n = 0; n < trials; ++n) {
        const auto w = static_cast<std::size_t>(rng.uniform_int(batch.size()));
        const SegmentGrid& g = batch[w];
        const int t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g.num_segments)));
        const int i = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(g.num_persons)));
        if (!base.contains(w)) base.emplace(w, model.infer(extract_features(g, tokenizers, layout)));
        SegmentGrid perturbed = g;
        resample_person_block(perturbed, t, i, rng);
        const HeadOutputs after = model.infer(extract_features(perturbed, tokenizers, layout));
        const HeadOutputs& before = base.at(w);
        const std::size_t r = static_cast<std::size_t>(t) * g.num_persons + i;
        double d = 0.0;
        if (before.speaking_logits) d = std::max(d, std::abs((*after.speaking_logits)[r] - (*before.speaking_logits)[r]));
        if (before.bite_logits) d = std::max(d, std::abs((*after.bite_logits)[r] - (*before.bite_logits)[r]));
        report.deltas.push_back(d);
        report.max_delta = std::max(report.max_delta, d);
    }
    return report;
}

double validation_f1(const M3ptModel& model, std::span<const TokenFeatures> data) {
    require(!data.empty(), "validation_f1: no windows");
    ConfusionCounts spk, bite;
    for (const auto& f : data) {
        const auto out = model.infer(f);
        if (out.speaking_logits) spk += confusion_from_logits(*out.speaking_logits, f.speaking);
        if (out.bite_logits) bite += confusion_from_logits(*out.bite_logits, f.biting);
    }
    double sum = 0.0;
    int n = 0;
    if (model.config().predict_speaking) sum += metrics(spk).f1, ++n;
    if (model.config().predict_bite) sum += metrics(bite).f1, ++n;
    return sum / n;
}

TrainReport train_model(M3ptModel& model, std::span<const TokenFeatures> train,
                        std::span<const TokenFeatures> validation, const TrainSettings& settings) {
    require(!train.empty(), "train_model: empty training set");
    require(settings.max_epochs >= 1 && settings.batch_windows >= 1, "train_model: bad epoch or batch setting");
    const auto started = std::chrono::steady_clock::now();
    auto elapsed = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    };

    LossWeights lw;
    lw.use_class_weights = settings.use_class_weights;
    {
        std::vector<std::uint8_t> spk, bite;
        for (const auto& f : train) {
            spk.insert(spk.end(), f.speaking.begin(), f.speaking.end());
            bite.insert(bite.end(), f.biting.begin(), f.biting.end());
        }
        lw.speaking = class_weights(spk);
        lw.bite = class_weights(bite);
    }

    Rng rng(settings.seed);
    Adam adam(settings.adam);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const auto eval_set = validation.empty() ? train : validation;

    TrainReport report;
    std::vector<Matrix> best;
    int stale = 0;
    for (int epoch = 0; epoch < settings.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t from = 0; from < order.size(); from += static_cast<std::size_t>(settings.batch_windows)) {
            const std::size_t to = std::min(order.size(), from + static_cast<std::size_t>(settings.batch_windows));
            const double inv = 1.0 / static_cast<double>(to - from);
            for (std::size_t n = from; n < to; ++n) {
                const auto& f = train[order[n]];
                const TaskLoss loss = task_loss(model.predict(f, &rng), f.speaking, f.biting, lw);
                const double value = loss.total.item();
                if (!std::isfinite(value))
                    throw NumericalError("transformer training diverged at epoch " + std::to_string(epoch) +
                                         " (loss " + std::to_string(value) + ")");
                ag::backward(ag::scale(loss.total, inv));
                loss_sum += value;
            }
            adam.step(model.params());
        }
        report.epoch_losses.push_back(loss_sum / static_cast<double>(train.size()));
        const double f1 = validation_f1(model, eval_set);
        report.validation_f1.push_back(f1);
        report.epochs_run = epoch + 1;
        if (report.best_epoch < 0 || f1 > report.best_validation_f1) {
            report.best_epoch = epoch;
            report.best_validation_f1 = f1;
            best.clear();
            for (const auto& e : model.params().entries()) best.push_back(e.second.value());
            stale = 0;
        } else if (++stale >= settings.patience) {
            report.stopped_early = true;
            break;
        }
        if (settings.max_seconds > 0.0 && elapsed() > settings.max_seconds) break;
    }
    auto& entries = model.params().entries();
    for (std::size_t n = 0; n < entries.size(); ++n) entries[n].second.mutable_value() = best[n];
    report.seconds = elapsed();
    return report;
}

}  // namespace m3pt
