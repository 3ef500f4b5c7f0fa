#include "m3pt/eval_harness.hpp"

#include "m3pt/rng.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace m3pt {

namespace {

using nlohmann::json;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <typename F>
void for_keys(const json& j, const std::string& where, F&& f) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!f(it.key(), *it)) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

Rational rational_from(const json& v) {
    return v.is_string() ? parse_rational(v.get<std::string>()) : Rational{v.get<std::int64_t>(), 1};
}

std::vector<std::string> sorted(std::vector<std::string> v) {
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

// ---- config ----

json to_json(const RunConfig& c) {
    json seg = {{"segment_seconds", c.segment.segment_seconds},
                {"segments_per_window", c.segment.segments_per_window},
                {"window_stride_s", c.segment.window_stride_s},
                {"target_fps", to_string(c.segment.target_fps)},
                {"speaking_threshold", c.segment.speaking_threshold}};
    const auto& m = c.model;
    json model = {{"hidden_dim", m.hidden_dim},
                  {"num_layers", m.num_layers},
                  {"num_heads", m.num_heads},
                  {"ffn_dim", m.ffn_dim},
                  {"dropout", m.dropout},
                  {"mask_kind", std::string(to_string(m.mask_kind))},
                  {"allow_own_modalities", m.allow_own_modalities},
                  {"input_mode", std::string(to_string(m.input_mode))},
                  {"time_encoding", m.time_encoding == TimeEncoding::sinusoidal ? "sinusoidal" : "learned"},
                  {"predict_speaking", m.predict_speaking},
                  {"predict_bite", m.predict_bite}};
    const auto& tp = c.tokenizer;
    json tok = {{"latent_dim", tp.latent_dim},
                {"codebook_size", tp.codebook_size},
                {"conv_channel_widths", tp.conv_channel_widths},
                {"kernel_size", tp.kernel_size},
                {"commitment_coefficient", tp.commitment_coefficient},
                {"epochs", tp.train.epochs},
                {"batch_size", tp.train.batch_size},
                {"learning_rate", tp.train.learning_rate},
                {"reseed_dead_codes", tp.train.reseed_dead_codes},
                {"max_seconds", tp.train.max_seconds}};
    const auto& t = c.train;
    json train = {{"max_epochs", t.max_epochs},
                  {"batch_windows", t.batch_windows},
                  {"patience", t.patience},
                  {"learning_rate", t.adam.learning_rate},
                  {"beta1", t.adam.beta1},
                  {"beta2", t.adam.beta2},
                  {"epsilon", t.adam.epsilon},
                  {"clip_norm", t.adam.clip_norm},
                  {"use_class_weights", t.use_class_weights},
                  {"max_seconds", t.max_seconds}};
    json dropped = json::array();
    for (auto k : c.dropped) dropped.push_back(std::string(to_string(k)));
    return {{"segment", seg},
            {"model", model},
            {"tokenizer", tok},
            {"train", train},
            {"word_input", std::string(to_string(c.word_input))},
            {"dropped", dropped},
            {"seed", c.seed},
            {"validation_holdout", c.validation_holdout}};
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    try {
        if (!j.is_object()) throw ConfigError("run config must be an object");
        if (j.contains("profile")) apply_run_profile(c, j.at("profile").get<std::string>());
        for_keys(j, "run config", [&](const std::string& k, const json& v) {
            if (k == "profile") return true;
            if (k == "segment") {
                for_keys(v, "segment", [&](const std::string& key, const json& x) {
                    auto& s = c.segment;
                    if (key == "segment_seconds") s.segment_seconds = x.get<double>();
                    else if (key == "segments_per_window") s.segments_per_window = x.get<int>();
                    else if (key == "window_stride_s") s.window_stride_s = x.get<double>();
                    else if (key == "target_fps") s.target_fps = rational_from(x);
                    else if (key == "speaking_threshold") s.speaking_threshold = x.get<double>();
                    else return false;
                    return true;
                });
            } else if (k == "model") {
                for_keys(v, "model", [&](const std::string& key, const json& x) {
                    auto& m = c.model;
                    if (key == "hidden_dim") m.hidden_dim = x.get<int>();
                    else if (key == "num_layers") m.num_layers = x.get<int>();
                    else if (key == "num_heads") m.num_heads = x.get<int>();
                    else if (key == "ffn_dim") m.ffn_dim = x.get<int>();
                    else if (key == "dropout") m.dropout = x.get<double>();
                    else if (key == "mask_kind") m.mask_kind = mask_kind_from_string(x.get<std::string>());
                    else if (key == "allow_own_modalities") m.allow_own_modalities = x.get<bool>();
                    else if (key == "input_mode") m.input_mode = input_mode_from_string(x.get<std::string>());
                    else if (key == "time_encoding") {
                        const auto s = x.get<std::string>();
                        if (s != "learned" && s != "sinusoidal") throw ConfigError("time_encoding: learned or sinusoidal");
                        m.time_encoding = s == "sinusoidal" ? TimeEncoding::sinusoidal : TimeEncoding::learned;
                    } else if (key == "predict_speaking") m.predict_speaking = x.get<bool>();
                    else if (key == "predict_bite") m.predict_bite = x.get<bool>();
                    else return false;
                    return true;
                });
            } else if (k == "tokenizer") {
                for_keys(v, "tokenizer", [&](const std::string& key, const json& x) {
                    auto& t = c.tokenizer;
                    if (key == "latent_dim") t.latent_dim = x.get<int>();
                    else if (key == "codebook_size") t.codebook_size = x.get<int>();
                    else if (key == "conv_channel_widths") t.conv_channel_widths = x.get<std::vector<int>>();
                    else if (key == "kernel_size") t.kernel_size = x.get<int>();
                    else if (key == "commitment_coefficient") t.commitment_coefficient = x.get<double>();
                    else if (key == "epochs") t.train.epochs = x.get<int>();
                    else if (key == "batch_size") t.train.batch_size = x.get<int>();
                    else if (key == "learning_rate") t.train.learning_rate = x.get<double>();
                    else if (key == "reseed_dead_codes") t.train.reseed_dead_codes = x.get<bool>();
                    else if (key == "max_seconds") t.train.max_seconds = x.get<double>();
                    else return false;
                    return true;
                });
            } else if (k == "train") {
                for_keys(v, "train", [&](const std::string& key, const json& x) {
                    auto& t = c.train;
                    if (key == "max_epochs") t.max_epochs = x.get<int>();
                    else if (key == "batch_windows") t.batch_windows = x.get<int>();
                    else if (key == "patience") t.patience = x.get<int>();
                    else if (key == "learning_rate") t.adam.learning_rate = x.get<double>();
                    else if (key == "beta1") t.adam.beta1 = x.get<double>();
                    else if (key == "beta2") t.adam.beta2 = x.get<double>();
                    else if (key == "epsilon") t.adam.epsilon = x.get<double>();
                    else if (key == "clip_norm") t.adam.clip_norm = x.get<double>();
                    else if (key == "use_class_weights") t.use_class_weights = x.get<bool>();
                    else if (key == "max_seconds") t.max_seconds = x.get<double>();
                    else return false;
                    return true;
                });
            } else if (k == "word_input") c.word_input = word_input_from_string(v.get<std::string>());
            else if (k == "dropped") {
                c.dropped.clear();
                for (const auto& d : v) c.dropped.push_back(modality_kind_from_string(d.get<std::string>()));
            } else if (k == "seed") c.seed = v.get<std::uint64_t>();
            else if (k == "validation_holdout") c.validation_holdout = v.get<bool>();
            else return false;
            return true;
        });
        c.segment.validate();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad run config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("bad run config: ") + e.what());
    }
    return c;
}

void apply_run_profile(RunConfig& c, std::string_view profile) {
    apply_profile(c.model, profile);
    auto& t = c.tokenizer;
    if (profile == "default") {
        t.latent_dim = 64, t.codebook_size = 256, t.conv_channel_widths = {64, 64};
        t.train.epochs = 30;
        c.train.max_epochs = 30, c.train.patience = 5, c.train.batch_windows = 8;
    } else if (profile == "small" || profile == "reduced") {
        t.latent_dim = 32, t.codebook_size = 128, t.conv_channel_widths = {32, 32};
        t.train.epochs = 20;
        c.train.max_epochs = 30, c.train.patience = 5, c.train.batch_windows = 8;
    } else {  // smoke
        t.latent_dim = 16, t.codebook_size = 32, t.conv_channel_widths = {16};
        t.train.epochs = 6;
        c.train.max_epochs = 6, c.train.patience = 3, c.train.batch_windows = 4;
    }
}

void reduce_model(ModelConfig& m) {
    m.num_layers = std::max(1, m.num_layers / 2);
    m.hidden_dim = std::max(m.num_heads, m.hidden_dim / 2);
    while (m.num_heads > 1 && m.hidden_dim % m.num_heads != 0) --m.num_heads;
    if (m.ffn_dim > 0) m.ffn_dim = std::max(1, m.ffn_dim / 2);
}

std::vector<Modality> layout_modalities(std::span<const Modality> all, std::span<const ModalityKind> dropped) {
    for (auto d : dropped)
        if (!find_modality(all, d))
            throw ConfigError("cannot drop '" + std::string(to_string(d)) + "': not in the data");
    std::vector<Modality> out;
    for (const auto& m : all)
        if (std::find(dropped.begin(), dropped.end(), m.kind) == dropped.end()) out.push_back(m);
    if (out.empty()) throw ConfigError("every modality was dropped");
    return out;
}

// ---- tokenizers ----

Tokenizers train_tokenizers(std::span<const SegmentGrid> grids, std::span<const Modality> layout,
                            const RunConfig& config, std::vector<TokenizerFit>* fits, const LogFn& log) {
    Tokenizers toks;
    toks.word_input = config.word_input;
    const int m = config.segment.frames_per_segment();
    for (const auto& mod : layout) {
        if (mod.is_discrete) continue;
        if (mod.kind == ModalityKind::word && config.word_input == WordInput::pooled) continue;
        std::vector<Matrix> segments;
        for (const auto& g : grids) {
            const auto k = find_modality(g.modalities, mod.kind);
            if (!k) throw InvalidArgument("training data lacks '" + std::string(mod.name()) + "'");
            for (int t = 0; t < g.num_segments; ++t)
                for (int i = 0; i < g.num_persons; ++i) segments.push_back(g.chunk(t, i, *k));
        }
        if (segments.empty()) throw InvalidArgument("no tokenizer training segments");
        TokenizerConfig tc;
        tc.modality = mod;
        tc.latent_dim = config.tokenizer.latent_dim;
        tc.codebook_size = config.tokenizer.codebook_size;
        tc.frames_per_segment = m;
        tc.conv_channel_widths = config.tokenizer.conv_channel_widths;
        tc.kernel_size = config.tokenizer.kernel_size;
        tc.commitment_coefficient = config.tokenizer.commitment_coefficient;
        const std::string label = "tokenizer/" + std::string(mod.name());
        auto tok = std::make_shared<VqTokenizer>(tc, derive_seed(config.seed, label + "/init"));
        auto settings = config.tokenizer.train;
        settings.seed = derive_seed(config.seed, label + "/train");
        auto report = train_tokenizer(*tok, segments, settings);
        if (log) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "tokenizer %s: loss %.4f, %d/%d codes active, %d epochs",
                          std::string(mod.name()).c_str(), report.final_loss.total, report.active_entries,
                          tc.codebook_size, report.epochs_run);
            log(buf);
        }
        if (fits) fits->push_back({mod.kind, report});
        toks.by_kind[mod.kind] = std::move(tok);
    }
    return toks;
}

// ---- folds ----

namespace {

TaskResult task_result(std::span<const double> logits, std::span<const std::uint8_t> labels) {
    TaskResult r;
    r.counts = confusion_from_logits(logits, labels);
    r.values = metrics(r.counts);
    r.no_positive_labels = r.counts.tp + r.counts.fn == 0;
    return r;
}

json task_json(const TaskResult& r) {
    return {{"counts", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"tn", r.counts.tn}, {"fn", r.counts.fn}}},
            {"metrics", to_json(r.values)},
            {"no_positive_labels", r.no_positive_labels}};
}

}  // namespace

Tokenizers train_split_tokenizers(const SessionStore& store, std::span<const std::string> ids,
                                  std::span<const Modality> layout, const RunConfig& config, const std::string& phase,
                                  std::vector<TokenizerFit>* fits, const LogFn& log) {
    // non-overlapping windows so no chunk is counted twice
    SegmentConfig tiling = config.segment;
    tiling.window_stride_s = tiling.window_seconds();
    const auto sessions = store.load_many(ids, phase);
    const auto grids = segment_sessions(sessions, tiling);
    if (grids.empty()) throw ConfigError("tokenizer sessions are shorter than one window");
    return train_tokenizers(grids, layout, config, fits, log);
}

M3ptModel fit_transformer(const SessionStore& store, std::span<const std::string> ids, const Tokenizers& toks,
                          std::span<const Modality> layout, const RunConfig& config, const std::string& phase,
                          TrainReport* report) {
    std::vector<std::string> fit_ids(ids.begin(), ids.end()), val_ids;
    if (config.validation_holdout && fit_ids.size() >= 3) {
        Rng rng(derive_seed(config.seed, "validation"));
        const auto pick = static_cast<std::size_t>(rng.uniform_int(fit_ids.size()));
        val_ids.push_back(fit_ids[pick]);
        fit_ids.erase(fit_ids.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    std::vector<TokenFeatures> fit_f, val_f;
    for (const auto& id : fit_ids)
        for (const auto& g : segment_session(store.load(id, phase), config.segment))
            fit_f.push_back(extract_features(g, toks, layout));
    for (const auto& id : val_ids)
        for (const auto& g : segment_session(store.load(id, phase), config.segment))
            val_f.push_back(extract_features(g, toks, layout));
    if (fit_f.empty()) throw ConfigError("training sessions are shorter than one window");

    ModelConfig mc = config.model;
    mc.modalities.assign(layout.begin(), layout.end());
    mc.input_dims.clear();
    for (const auto& mod : layout) mc.input_dims.push_back(toks.input_dim(mod));
    mc.num_segments = config.segment.segments_per_window;
    mc.num_persons = fit_f.front().num_persons;
    mc.word_input = toks.word_input;
    M3ptModel model(mc, derive_seed(config.seed, "model/init"));
    auto ts = config.train;
    ts.seed = derive_seed(config.seed, "model/train");
    auto r = train_model(model, fit_f, val_f, ts);
    if (report) *report = std::move(r);
    return model;
}

Evaluation evaluate_model(const M3ptModel& model, const Tokenizers& toks, const SessionStore& store,
                          std::span<const std::string> ids, const SegmentConfig& segment, const std::string& phase) {
    const auto& mc = model.config();
    if (mc.num_segments != segment.segments_per_window)
        throw ConfigError("model expects " + std::to_string(mc.num_segments) + " segments per window, data config has " +
                          std::to_string(segment.segments_per_window));
    std::vector<double> spk_logits, bite_logits;
    std::vector<std::uint8_t> spk_labels, bite_labels;
    for (const auto& id : ids) {
        for (const auto& g : segment_session(store.load(id, phase), segment)) {
            if (g.num_persons != mc.num_persons)
                throw ConfigError("session '" + id + "' has " + std::to_string(g.num_persons) +
                                  " persons, model expects " + std::to_string(mc.num_persons));
            const auto f = extract_features(g, toks, mc.modalities);
            const auto out = model.infer(f);
            if (out.speaking_logits) {
                spk_logits.insert(spk_logits.end(), out.speaking_logits->begin(), out.speaking_logits->end());
                spk_labels.insert(spk_labels.end(), f.speaking.begin(), f.speaking.end());
            }
            if (out.bite_logits) {
                bite_logits.insert(bite_logits.end(), out.bite_logits->begin(), out.bite_logits->end());
                bite_labels.insert(bite_labels.end(), f.biting.begin(), f.biting.end());
            }
        }
    }
    if (spk_labels.empty() && bite_labels.empty()) throw ConfigError("evaluation sessions are shorter than one window");
    for (double v : spk_logits)
        if (!std::isfinite(v)) throw NumericalError("non-finite speaking logit during evaluation");
    for (double v : bite_logits)
        if (!std::isfinite(v)) throw NumericalError("non-finite bite logit during evaluation");
    Evaluation ev;
    if (!spk_labels.empty()) ev.speaking = task_result(spk_logits, spk_labels);
    if (!bite_labels.empty()) ev.bite = task_result(bite_logits, bite_labels);
    return ev;
}

FoldResult run_fold(const FoldSplit& fold, const SessionStore& store, const RunConfig& base,
                    const std::filesystem::path& out_dir, const LogFn& log) {
    const auto t0 = std::chrono::steady_clock::now();
    FoldResult res;
    res.fold_id = fold.fold_id;
    res.train = fold.train;
    res.test = fold.test;
    require(!fold.train.empty() && !fold.test.empty(), "run_fold: empty train or test split");
    for (const auto& s : fold.test)
        if (std::find(fold.train.begin(), fold.train.end(), s) != fold.train.end())
            throw InvalidArgument("run_fold: session '" + s + "' is in both train and test");

    RunConfig config = base;
    config.seed = derive_seed(base.seed, "fold/" + std::to_string(fold.fold_id));
    const std::string prefix = "fold" + std::to_string(fold.fold_id) + "/";
    const std::string ph_tok = prefix + "tokenizer", ph_train = prefix + "transformer", ph_eval = prefix + "evaluation";
    auto say = [&](const std::string& msg) {
        if (log) log("fold " + std::to_string(fold.fold_id) + ": " + msg);
    };

    const auto layout = layout_modalities(store.modalities(), config.dropped);

    Tokenizers toks;
    std::vector<TokenizerFit> fits;
    try {
        toks = train_split_tokenizers(store, fold.train, layout, config, ph_tok, &fits, say);
        auto model = fit_transformer(store, fold.train, toks, layout, config, ph_train, &res.train_report);
        {
            char buf[160];
            std::snprintf(buf, sizeof buf, "transformer: %d epochs, best val F1 %.3f (epoch %d)",
                          res.train_report.epochs_run, res.train_report.best_validation_f1,
                          res.train_report.best_epoch);
            say(buf);
        }

        // audit before touching the test split
        for (const auto& ph : {ph_tok, ph_train}) {
            const auto seen = store.log().sessions(ph);
            for (const auto& s : fold.test)
                if (seen.count(s)) throw Error("audit: test session '" + s + "' was read during " + ph);
        }

        auto ev = evaluate_model(model, toks, store, fold.test, config.segment, ph_eval);
        res.speaking = std::move(ev.speaking);
        res.bite = std::move(ev.bite);
        res.ok = true;

        if (!out_dir.empty()) {
            std::filesystem::create_directories(out_dir);
            for (const auto& [kind, tok] : toks.by_kind)
                tok->save(out_dir / ("tokenizer_" + std::string(to_string(kind)) + ".m3vq"));
            model.save(out_dir / "model.m3pt", {{"fold_id", fold.fold_id}, {"train", fold.train}, {"test", fold.test}});
        }
    } catch (const NumericalError& e) {
        res.ok = false;
        res.diverged = true;
        res.error = e.what();
        say(std::string("FAILED: ") + e.what());
    }
    res.seconds = seconds_since(t0);

    json rec = {{"fold_id", res.fold_id}, {"train", res.train}, {"test", res.test}, {"ok", res.ok},
                {"diverged", res.diverged}, {"seconds", res.seconds}};
    if (!res.error.empty()) rec["error"] = res.error;
    if (res.speaking) rec["speaking"] = task_json(*res.speaking);
    if (res.bite) rec["bite"] = task_json(*res.bite);
    json tj = json::array();
    for (const auto& f : fits)
        tj.push_back({{"modality", std::string(to_string(f.modality))},
                      {"loss", f.report.final_loss.total},
                      {"reconstruction", f.report.final_loss.reconstruction},
                      {"active_entries", f.report.active_entries},
                      {"reseeded_entries", f.report.reseeded_entries},
                      {"epochs", f.report.epochs_run}});
    rec["tokenizers"] = tj;
    rec["transformer"] = {{"epoch_losses", res.train_report.epoch_losses},
                          {"validation_f1", res.train_report.validation_f1},
                          {"epochs_run", res.train_report.epochs_run},
                          {"best_epoch", res.train_report.best_epoch},
                          {"stopped_early", res.train_report.stopped_early}};
    json audit = json::object();
    for (const auto& ph : {ph_tok, ph_train, ph_eval}) audit[ph.substr(prefix.size())] = sorted(
        [&] { auto s = store.log().sessions(ph); return std::vector<std::string>(s.begin(), s.end()); }());
    rec["access"] = audit;
    res.record = std::move(rec);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream(out_dir / "fold.json") << res.record.dump(2) << '\n';
    }
    return res;
}

ExperimentResult run_experiment(std::span<const FoldSplit> folds, const SessionStore& store, const RunConfig& config,
                                int jobs, const std::filesystem::path& out_dir, const LogFn& log) {
    require(!folds.empty(), "run_experiment: no folds");
    ExperimentResult out;
    out.folds.resize(folds.size());
    std::vector<std::exception_ptr> errors(folds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t n; (n = next.fetch_add(1)) < folds.size();) {
            try {
                const auto dir = out_dir.empty() ? out_dir : out_dir / ("fold_" + std::to_string(folds[n].fold_id));
                out.folds[n] = run_fold(folds[n], store, config, dir, log);
            } catch (...) {
                errors[n] = std::current_exception();
            }
        }
    };
    const int workers = std::clamp(jobs, 1, static_cast<int>(folds.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::vector<MetricValues> spk, bite;
    for (const auto& f : out.folds) {
        if (!f.ok) {
            ++out.failed;
            out.warnings.push_back("fold " + std::to_string(f.fold_id) + " failed and is excluded: " + f.error);
            continue;
        }
        if (f.speaking) {
            spk.push_back(f.speaking->values);
            if (f.speaking->no_positive_labels)
                out.warnings.push_back("fold " + std::to_string(f.fold_id) + ": no speaking events in test split");
        }
        if (f.bite) {
            bite.push_back(f.bite->values);
            if (f.bite->no_positive_labels)
                out.warnings.push_back("fold " + std::to_string(f.fold_id) + ": no bite events in test split");
        }
    }
    if (!spk.empty()) out.speaking = aggregate(spk);
    if (!bite.empty()) out.bite = aggregate(bite);
    return out;
}

json to_json(const MetricValues& m) {
    return {{"accuracy", m.accuracy}, {"f1", m.f1}, {"precision", m.precision}, {"recall", m.recall},
            {"mcc", m.mcc}, {"nmcc", m.nmcc}, {"degenerate", m.degenerate()}};
}

json to_json(const AggregateMetrics& a) {
    auto ms = [](const MeanStd& v) { return json{{"mean", v.mean}, {"std", v.stddev}}; };
    return {{"folds", a.folds}, {"accuracy", ms(a.accuracy)}, {"f1", ms(a.f1)}, {"precision", ms(a.precision)},
            {"recall", ms(a.recall)}, {"mcc", ms(a.mcc)}, {"nmcc", ms(a.nmcc)}};
}

json to_json(const ExperimentResult& r) {
    json folds = json::array();
    for (const auto& f : r.folds) folds.push_back(f.record);
    json j = {{"folds", folds}, {"failed", r.failed}, {"warnings", r.warnings}};
    if (r.speaking) j["speaking"] = to_json(*r.speaking);
    if (r.bite) j["bite"] = to_json(*r.bite);
    return j;
}

// ---- ablations ----

std::string_view to_string(AblationKind kind) {
    switch (kind) {
        case AblationKind::drop_modality: return "drop_modality";
        case AblationKind::temporal_context: return "temporal_context";
        case AblationKind::segment_length: return "segment_length";
    }
    return "?";
}

AblationKind ablation_kind_from_string(std::string_view name) {
    if (name == "drop_modality") return AblationKind::drop_modality;
    if (name == "temporal_context") return AblationKind::temporal_context;
    if (name == "segment_length") return AblationKind::segment_length;
    throw ConfigError("unknown ablation kind '" + std::string(name) +
                      "' (drop_modality, temporal_context, segment_length)");
}

namespace {

using MK = ModalityKind;

std::string window_label(int T, double c) {
    std::ostringstream os;
    os << T << "\u00d7" << c << "s";
    return os.str();
}

}  // namespace

double ablation_stride(int segments, double segment_seconds) {
    const double half = segments * segment_seconds / 2.0;
    return std::max(1.0, std::round(half / segment_seconds)) * segment_seconds;
}

std::vector<AblationCell> ablation_cells(AblationKind kind) {
    std::vector<AblationCell> cells;
    switch (kind) {
        case AblationKind::drop_modality: {
            auto cell = [](std::string label, std::vector<MK> dropped, bool spk, bool bite) {
                AblationCell c;
                c.label = std::move(label);
                c.dropped = std::move(dropped);
                c.speaking = spk;
                c.bite = bite;
                return c;
            };
            cells.push_back(cell("All Features", {}, true, true));
            cells.push_back(cell("No Gaze", {MK::gaze}, true, true));
            cells.push_back(cell("No Headpose", {MK::headpose}, true, true));
            cells.push_back(cell("No Pose", {MK::pose}, true, true));
            cells.push_back(cell("No Word", {MK::word}, true, true));
            cells.push_back(cell("No Speaker", {MK::speaker}, false, true));
            cells.push_back(cell("Bite Only", {MK::gaze, MK::headpose, MK::pose, MK::word, MK::speaker}, false, true));
            cells.push_back(cell("No Bite", {MK::bite}, true, false));
            cells.push_back(cell("Speaker Only", {MK::gaze, MK::headpose, MK::pose, MK::word, MK::bite}, true, false));
            break;
        }
        case AblationKind::temporal_context:
            for (int T : {2, 3, 6, 12}) {
                AblationCell c;
                c.segments = T;
                c.segment_seconds = 3.0;
                c.label = window_label(T, 3.0);
                c.reduced_model = true;
                cells.push_back(c);
            }
            break;
        case AblationKind::segment_length:
            for (auto [T, sec] : {std::pair{2, 18.0}, {4, 9.0}, {6, 6.0}, {12, 3.0}}) {
                AblationCell c;
                c.segments = T;
                c.segment_seconds = sec;
                c.label = window_label(T, sec);
                cells.push_back(c);
            }
            break;
    }
    return cells;
}

std::vector<AblationTable> ablation_layout(AblationKind kind) {
    std::vector<AblationTable> tables;
    if (kind == AblationKind::drop_modality) {
        AblationTable bite{"Bite prediction across ablated input modalities", false, {}};
        for (const char* l : {"All Features", "No Gaze", "No Headpose", "No Pose", "No Word", "No Speaker", "Bite Only"})
            bite.rows.push_back({l, "bite", std::nullopt, 0});
        AblationTable spk{"Speaking prediction across ablated input modalities", false, {}};
        for (const char* l : {"All Features", "No Gaze", "No Headpose", "No Pose", "No Word", "No Bite", "Speaker Only"})
            spk.rows.push_back({l, "speaking", std::nullopt, 0});
        tables.push_back(std::move(bite));
        tables.push_back(std::move(spk));
        return tables;
    }
    AblationTable t;
    t.title = kind == AblationKind::temporal_context ? "Temporal context (n segments x 3 s, reduced model)"
                                                     : "Segment length (36 s total)";
    t.task_column = true;
    for (const auto& c : ablation_cells(kind)) {
        t.rows.push_back({c.label, "speaking", std::nullopt, 0});
        t.rows.push_back({c.label, "bite", std::nullopt, 0});
    }
    tables.push_back(std::move(t));
    return tables;
}

std::vector<AblationTable> run_ablation(AblationKind kind, const SessionStore& store, std::span<const FoldSplit> folds,
                                        const RunConfig& base, int jobs, const std::filesystem::path& out_dir,
                                        const LogFn& log) {
    const auto cells = ablation_cells(kind);
    // validate every cell up front so a bad spec fails before any training
    std::vector<RunConfig> configs;
    for (const auto& cell : cells) {
        RunConfig c = base;
        c.dropped = cell.dropped;
        c.model.predict_speaking = cell.speaking;
        c.model.predict_bite = cell.bite;
        if (kind != AblationKind::drop_modality) {
            c.segment.segments_per_window = cell.segments;
            c.segment.segment_seconds = cell.segment_seconds;
            c.segment.window_stride_s = ablation_stride(cell.segments, cell.segment_seconds);
        }
        if (cell.reduced_model) reduce_model(c.model);
        c.seed = derive_seed(base.seed, "ablation/" + cell.label);
        c.segment.validate();
        const auto layout = layout_modalities(store.modalities(), c.dropped);
        const bool has_spk = find_modality(layout, MK::speaker).has_value();
        const bool has_bite = find_modality(layout, MK::bite).has_value();
        if ((c.model.predict_speaking || c.model.predict_bite) && !has_spk && !has_bite)
            throw ConfigError("ablation '" + cell.label + "' drops both speaker and bite tokens");
        configs.push_back(std::move(c));
    }

    // cells x folds as one job queue
    struct Job {
        std::size_t cell;
        std::size_t fold;
    };
    std::vector<Job> queue;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (std::size_t f = 0; f < folds.size(); ++f) queue.push_back({c, f});
    std::vector<std::vector<FoldResult>> results(cells.size(), std::vector<FoldResult>(folds.size()));
    std::vector<std::exception_ptr> errors(queue.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t n; (n = next.fetch_add(1)) < queue.size();) {
            const auto [c, f] = queue[n];
            try {
                std::filesystem::path dir;
                if (!out_dir.empty()) {
                    std::string slug = cells[c].label;
                    for (auto& ch : slug)
                        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.') ch = '_';
                    dir = out_dir / slug / ("fold_" + std::to_string(folds[f].fold_id));
                }
                LogFn cell_log;
                if (log) cell_log = [&, c](const std::string& m) { log("[" + cells[c].label + "] " + m); };
                results[c][f] = run_fold(folds[f], store, configs[c], dir, cell_log);
            } catch (...) {
                errors[n] = std::current_exception();
            }
        }
    };
    const int workers = std::clamp(jobs, 1, static_cast<int>(queue.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    auto summarize = [&](std::size_t c, const std::string& task, AblationRow& row) {
        std::vector<MetricValues> vals;
        for (const auto& r : results[c]) {
            if (!r.ok) {
                ++row.failed_folds;
                continue;
            }
            const auto& tr = task == "speaking" ? r.speaking : r.bite;
            if (tr) vals.push_back(tr->values);
        }
        if (!vals.empty()) row.metrics = aggregate(vals);
    };
    auto tables = ablation_layout(kind);
    for (auto& table : tables)
        for (auto& row : table.rows) {
            const auto it = std::find_if(cells.begin(), cells.end(), [&](const AblationCell& c) { return c.label == row.label; });
            summarize(static_cast<std::size_t>(it - cells.begin()), row.task, row);
        }
    return tables;
}

std::string render_table(const AblationTable& table, bool include_accuracy) {
    std::vector<std::string> header{"Configuration"};
    if (table.task_column) header.push_back("Task");
    if (include_accuracy) header.push_back("Accuracy");
    for (const char* h : {"F1", "Precision", "Recall", "nMCC"}) header.push_back(h);

    std::vector<std::vector<std::string>> rows;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        std::vector<std::string> cells;
        // paired rows show the configuration once
        const bool repeat = table.task_column && r > 0 && table.rows[r - 1].label == row.label;
        cells.push_back(repeat ? "" : row.label);
        if (table.task_column) cells.push_back(row.task == "speaking" ? "S" : "B");
        auto put = [&](const MeanStd& v) { cells.push_back(format_mean_std(v)); };
        if (row.metrics) {
            if (include_accuracy) put(row.metrics->accuracy);
            put(row.metrics->f1);
            put(row.metrics->precision);
            put(row.metrics->recall);
            put(row.metrics->nmcc);
        } else {
            const std::size_t n = header.size() - cells.size();
            for (std::size_t k = 0; k < n; ++k) cells.push_back(row.failed_folds ? "failed" : "n/a");
        }
        rows.push_back(std::move(cells));
    }

    // widths by code points so "±" counts as one column
    auto width = [](const std::string& s) {
        std::size_t w = 0;
        for (unsigned char ch : s)
            if ((ch & 0xC0) != 0x80) ++w;
        return w;
    };
    std::vector<std::size_t> w(header.size(), 0);
    for (std::size_t k = 0; k < header.size(); ++k) w[k] = width(header[k]);
    for (const auto& r : rows)
        for (std::size_t k = 0; k < r.size(); ++k) w[k] = std::max(w[k], width(r[k]));

    std::ostringstream os;
    os << table.title << '\n';
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t k = 0; k < cells.size(); ++k) {
            os << (k ? "  " : "") << cells[k];
            if (k + 1 < cells.size()) os << std::string(w[k] - width(cells[k]), ' ');
        }
        os << '\n';
    };
    line(header);
    std::size_t total = 0;
    for (auto x : w) total += x;
    os << std::string(total + 2 * (w.size() - 1), '-') << '\n';
    for (const auto& r : rows) line(r);
    return os.str();
}

json to_json(const AblationTable& table) {
    json rows = json::array();
    for (const auto& r : table.rows) {
        json row = {{"configuration", r.label}, {"task", r.task}, {"failed_folds", r.failed_folds}};
        row["metrics"] = r.metrics ? to_json(*r.metrics) : json(nullptr);
        rows.push_back(std::move(row));
    }
    return {{"title", table.title}, {"rows", rows}};
}

}  // namespace m3pt
