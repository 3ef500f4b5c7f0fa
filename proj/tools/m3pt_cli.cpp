// m3pt command-line entry point.
//
// Exit codes: 0 success, 1 I/O, 2 usage / config / missing artifact,
// 3 numerical failure (divergence, failed folds).

#include "m3pt/block_mask.hpp"
#include "m3pt/data_io.hpp"
#include "m3pt/eval_harness.hpp"
#include "m3pt/rng.hpp"
#include "m3pt/transformer.hpp"
#include "m3pt/vq_tokenizer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace m3pt;

namespace {

constexpr int kRunManifestVersion = 1;

struct UsageError : Error {
    using Error::Error;
};

// Relative output paths hang off M3PT_OUT_ROOT when it is set.
fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    if (p.is_relative()) {
        if (const char* root = std::getenv("M3PT_OUT_ROOT"); root && *root) p = fs::path(root) / p;
    }
    return p;
}

void refuse_overwrite(const std::vector<fs::path>& targets, bool force) {
    if (force) return;
    for (const auto& t : targets)
        if (fs::exists(t))
            throw UsageError("refusing to overwrite '" + t.string() + "' (pass --force)");
}

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t hash_file(const fs::path& path, std::uint64_t h = 0xcbf29ce484222325ULL) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        const auto n = static_cast<std::size_t>(in.gcount());
        if (n) h = fnv1a64(std::string_view(buf.data(), n), h);
    }
    return h;
}

// One hash per file, or per directory over its sorted files (name + bytes).
std::uint64_t hash_path(const fs::path& path) {
    if (!fs::is_directory(path)) return hash_file(path);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& f : files) {
        h = fnv1a64(fs::relative(f, path).generic_string(), h);
        h = hash_file(f, h);
    }
    return h;
}

class RunManifest {
public:
    RunManifest(std::string command, int argc, char** argv) : started_(iso_now()) {
        j_["format_version"] = kRunManifestVersion;
        j_["command"] = std::move(command);
        std::vector<std::string> args(argv, argv + argc);
        j_["argv"] = args;
        j_["inputs"] = json::array();
        j_["artifacts"] = json::array();
        j_["seeds"] = json::object();
    }
    void config(json c) { j_["config"] = std::move(c); }
    void seed(const std::string& name, std::uint64_t v) { j_["seeds"][name] = v; }
    void input(const fs::path& p) { j_["inputs"].push_back({{"path", p.string()}, {"fnv1a64", hex64(hash_path(p))}}); }
    void dataset(const DatasetManifest& m) {
        input(m.root / "manifest.json");
        for (const auto& s : m.sessions) input(m.root / s);
    }
    void artifact(const fs::path& p) { j_["artifacts"].push_back(p.string()); }
    void result(json r) { j_["result"] = std::move(r); }
    void write(const fs::path& path) {
        j_["started_at"] = started_;
        j_["finished_at"] = iso_now();
        fs::create_directories(path.parent_path());
        std::ofstream out(path);
        if (!out) throw IoError("cannot write run manifest '" + path.string() + "'");
        out << j_.dump(2) << '\n';
        if (!out) throw IoError("failed writing run manifest '" + path.string() + "'");
    }

private:
    json j_;
    std::string started_;
};

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << text;
}

// Line-buffered console output shared by concurrent jobs.
LogFn console(const std::string& prefix = "") {
    static std::mutex mu;
    return [prefix](const std::string& line) {
        std::lock_guard lock(mu);
        std::printf("%s%s\n", prefix.c_str(), line.c_str());
        std::fflush(stdout);
    };
}

// Shared run-config flags.
struct RunFlags {
    std::string config_path;
    std::string profile;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> drop;
    std::string word_input;
    std::string input_mode;
    std::string mask_kind;

    void add(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "run config JSON (segment, model, tokenizer, train sections)");
        cmd->add_option("--profile", profile, "size profile: default, small, smoke")
            ->check(CLI::IsMember({"default", "small", "smoke"}));
        cmd->add_option("--seed", seed, "root seed (default 0)");
        cmd->add_option("--drop", drop, "modalities to leave out of the token layout");
        cmd->add_option("--word-input", word_input, "word token input: vq or pooled (default vq)")
            ->check(CLI::IsMember({"vq", "pooled"}));
        cmd->add_option("--input-mode", input_mode, "teacher_forcing or placeholder (default teacher_forcing)")
            ->check(CLI::IsMember({"teacher_forcing", "placeholder"}));
        cmd->add_option("--mask", mask_kind, "blockwise, strict_past or lower (default blockwise)")
            ->check(CLI::IsMember({"blockwise", "strict_past", "lower"}));
    }

    RunConfig resolve() const {
        json j = config_path.empty() ? json::object() : read_json_file(config_path);
        if (!profile.empty() && !j.contains("profile")) j["profile"] = profile;
        RunConfig c = run_config_from_json(j);
        if (seed) c.seed = *seed;
        for (const auto& d : drop) {
            try {
                c.dropped.push_back(modality_kind_from_string(d));
            } catch (const InvalidArgument& e) {
                throw ConfigError(e.what());
            }
        }
        if (!word_input.empty()) c.word_input = word_input_from_string(word_input);
        if (!input_mode.empty()) c.model.input_mode = input_mode_from_string(input_mode);
        if (!mask_kind.empty()) c.model.mask_kind = mask_kind_from_string(mask_kind);
        return c;
    }
};

struct SplitFlags {
    std::optional<int> fold;
    int folds = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--fold", fold, "fold index; restricts to that fold's split");
        cmd->add_option("--folds", folds, "number of folds (default 3, smoke profile 2)");
    }
    int count(const std::string& profile) const { return folds > 0 ? folds : (profile == "smoke" ? 2 : 3); }
};

std::optional<FoldSplit> pick_fold(const SplitFlags& s, const std::vector<std::string>& ids, const RunConfig& c,
                                   const std::string& profile) {
    if (!s.fold) return std::nullopt;
    const auto folds = make_folds(ids, s.count(profile), c.seed);
    if (*s.fold < 0 || *s.fold >= static_cast<int>(folds.size()))
        throw UsageError("--fold must be in [0, " + std::to_string(folds.size()) + ")");
    return folds[static_cast<std::size_t>(*s.fold)];
}

fs::path tokenizer_file(const fs::path& dir, ModalityKind kind) {
    return dir / ("tokenizer_" + std::string(to_string(kind)) + ".m3vq");
}

Tokenizers load_tokenizers(const fs::path& dir, std::span<const Modality> layout, WordInput word_input,
                           RunManifest* manifest) {
    Tokenizers toks;
    toks.word_input = word_input;
    for (const auto& mod : layout) {
        if (mod.is_discrete) continue;
        if (mod.kind == ModalityKind::word && word_input == WordInput::pooled) continue;
        const auto path = tokenizer_file(dir, mod.kind);
        if (!fs::exists(path))
            throw MissingArtifact("missing tokenizer for '" + std::string(mod.name()) + "': " + path.string() +
                                  " (run train-vqvae first)");
        if (manifest) manifest->input(path);
        toks.by_kind[mod.kind] = std::make_shared<VqTokenizer>(VqTokenizer::load(path));
    }
    return toks;
}

void print_metrics(const std::string& task, const TaskResult& r, bool accuracy) {
    const auto& v = r.values;
    if (accuracy)
        std::printf("%-9s acc %.3f  F1 %.3f  precision %.3f  recall %.3f  nMCC %.3f%s\n", task.c_str(), v.accuracy,
                    v.f1, v.precision, v.recall, v.nmcc, r.no_positive_labels ? "  (no positive labels)" : "");
    else
        std::printf("%-9s F1 %.3f  precision %.3f  recall %.3f  nMCC %.3f%s\n", task.c_str(), v.f1, v.precision,
                    v.recall, v.nmcc, r.no_positive_labels ? "  (no positive labels)" : "");
}

json task_json(const std::optional<TaskResult>& r) {
    if (!r) return nullptr;
    return {{"counts", {{"tp", r->counts.tp}, {"fp", r->counts.fp}, {"tn", r->counts.tn}, {"fn", r->counts.fn}}},
            {"metrics", to_json(r->values)},
            {"no_positive_labels", r->no_positive_labels}};
}

SessionStore open_data(const std::string& data, RunManifest& manifest) {
    if (!fs::exists(data)) throw MissingArtifact("dataset not found: " + data);
    auto m = read_manifest(data);
    manifest.dataset(m);
    return SessionStore::from_manifest(std::move(m));
}

// ---- commands ----

int cmd_synth(const std::string& config_path, const std::string& out_arg, std::optional<std::uint64_t> seed,
              int sessions, const std::string& profile, bool force, int argc, char** argv) {
    RunManifest manifest("synth", argc, argv);
    SyntheticConfig cfg;
    if (!config_path.empty()) {
        manifest.input(config_path);
        cfg = synthetic_config_from_json(read_json_file(config_path));
    }
    if (profile == "smoke") cfg.num_sessions = 6;
    if (sessions > 0) cfg.num_sessions = sessions;
    if (seed) cfg.seed = *seed;
    try {
        cfg.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    const fs::path out = resolve_out(out_arg);
    refuse_overwrite({out / "manifest.json", out / "run_manifest.json"}, force);
    manifest.config(to_json(cfg));
    manifest.seed("root", cfg.seed);

    const auto data = generate_synthetic(cfg);
    const auto dm = write_synthetic(data, cfg, out);
    const auto measured = measured_base_rates(data.traces);
    const auto analytic = analytic_base_rates(cfg, cfg.segments_per_session());
    manifest.artifact(out / "manifest.json");
    for (const auto& s : dm.sessions) manifest.artifact(out / s);
    manifest.result({{"sessions", dm.sessions.size()},
                     {"base_rates", {{"speaking", measured.speaking}, {"bite", measured.biting}}},
                     {"analytic_base_rates", {{"speaking", analytic.speaking}, {"bite", analytic.biting}}}});
    manifest.write(out / "run_manifest.json");
    std::printf("wrote %zu sessions (%d persons, %.0f s) to %s\n", dm.sessions.size(), cfg.persons_per_session,
                cfg.duration_s, out.string().c_str());
    std::printf("base rates: speaking %.3f (analytic %.3f), bite %.3f (analytic %.3f)\n", measured.speaking,
                analytic.speaking, measured.biting, analytic.biting);
    return 0;
}

int cmd_train_vqvae(const std::string& data, const std::string& modality, const std::string& out_arg,
                    const RunFlags& rf, const SplitFlags& sf, bool force, int argc, char** argv) {
    RunManifest manifest("train-vqvae", argc, argv);
    RunConfig config = rf.resolve();
    auto store = open_data(data, manifest);
    const auto ids = store.ids();
    const auto fold = pick_fold(sf, ids, config, rf.profile);
    const std::uint64_t root = config.seed;
    std::vector<std::string> train_ids = ids;
    if (fold) {
        train_ids = fold->train;
        config.seed = derive_seed(root, "fold/" + std::to_string(fold->fold_id));
    }

    const auto all = store.modalities();
    std::vector<Modality> targets;
    if (modality == "all") {
        for (const auto& m : layout_modalities(all, config.dropped))
            if (!m.is_discrete && !(m.kind == ModalityKind::word && config.word_input == WordInput::pooled))
                targets.push_back(m);
    } else {
        ModalityKind kind;
        try {
            kind = modality_kind_from_string(modality);
        } catch (const InvalidArgument& e) {
            throw UsageError(e.what());
        }
        const auto k = find_modality(all, kind);
        if (!k) throw ConfigError("dataset has no '" + modality + "' modality");
        if (all[*k].is_discrete) throw ConfigError("'" + modality + "' is discrete; it has no tokenizer");
        targets.push_back(all[*k]);
    }
    const fs::path out = resolve_out(out_arg);
    std::vector<fs::path> outputs;
    for (const auto& m : targets) outputs.push_back(tokenizer_file(out, m.kind));
    const fs::path manifest_path =
        out / (modality == "all" ? std::string("tokenizers.manifest.json") : "tokenizer_" + modality + ".manifest.json");
    outputs.push_back(manifest_path);
    refuse_overwrite(outputs, force);

    manifest.config(to_json(config));
    manifest.seed("root", root);
    manifest.seed("run", config.seed);
    if (fold) manifest.result({{"fold", fold->fold_id}, {"train", fold->train}, {"test", fold->test}});

    std::vector<TokenizerFit> fits;
    const auto toks = train_split_tokenizers(store, train_ids, targets, config, "tokenizer", &fits, console());
    fs::create_directories(out);
    json results = json::array();
    for (const auto& f : fits) {
        const auto path = tokenizer_file(out, f.modality);
        toks.by_kind.at(f.modality)->save(path);
        manifest.artifact(path);
        results.push_back({{"modality", std::string(to_string(f.modality))},
                           {"loss", f.report.final_loss.total},
                           {"reconstruction", f.report.final_loss.reconstruction},
                           {"active_entries", f.report.active_entries},
                           {"epochs", f.report.epochs_run},
                           {"seconds", f.report.seconds}});
        manifest.seed("tokenizer/" + std::string(to_string(f.modality)),
                      derive_seed(config.seed, "tokenizer/" + std::string(to_string(f.modality)) + "/train"));
    }
    json r = {{"tokenizers", results}, {"train_sessions", train_ids}};
    if (fold) r["fold"] = fold->fold_id;
    manifest.result(r);
    manifest.write(manifest_path);
    for (const auto& f : fits)
        std::printf("%s: final loss %.4f (reconstruction %.4f), %d active codes\n",
                    std::string(to_string(f.modality)).c_str(), f.report.final_loss.total,
                    f.report.final_loss.reconstruction, f.report.active_entries);
    return 0;
}

int cmd_train(const std::string& data, const std::string& tok_dir, const std::string& out_arg, const RunFlags& rf,
              const SplitFlags& sf, bool force, int argc, char** argv) {
    RunManifest manifest("train", argc, argv);
    RunConfig config = rf.resolve();
    auto store = open_data(data, manifest);
    const auto ids = store.ids();
    const auto fold = pick_fold(sf, ids, config, rf.profile);
    const std::uint64_t root = config.seed;
    std::vector<std::string> train_ids = ids, test_ids;
    if (fold) {
        train_ids = fold->train;
        test_ids = fold->test;
        config.seed = derive_seed(root, "fold/" + std::to_string(fold->fold_id));
    }
    const fs::path out = resolve_out(out_arg);
    refuse_overwrite({out / "model.m3pt", out / "run_manifest.json"}, force);

    const auto layout = layout_modalities(store.modalities(), config.dropped);
    if (!fs::is_directory(tok_dir)) throw MissingArtifact("tokenizer directory not found: " + tok_dir);
    const auto toks = load_tokenizers(tok_dir, layout, config.word_input, &manifest);

    manifest.config(to_json(config));
    manifest.seed("root", root);
    manifest.seed("run", config.seed);
    manifest.seed("model/init", derive_seed(config.seed, "model/init"));
    manifest.seed("model/train", derive_seed(config.seed, "model/train"));

    TrainReport report;
    const auto model = fit_transformer(store, train_ids, toks, layout, config, "transformer", &report);
    fs::create_directories(out);
    json extra = {{"run_config", to_json(config)},
                  {"tokenizers", fs::absolute(tok_dir).string()},
                  {"train", train_ids},
                  {"test", test_ids},
                  {"root_seed", root}};
    if (fold) extra["fold"] = fold->fold_id;
    model.save(out / "model.m3pt", extra);
    manifest.artifact(out / "model.m3pt");
    manifest.result({{"epochs_run", report.epochs_run},
                     {"epoch_losses", report.epoch_losses},
                     {"validation_f1", report.validation_f1},
                     {"best_epoch", report.best_epoch},
                     {"stopped_early", report.stopped_early},
                     {"seconds", report.seconds}});
    manifest.write(out / "run_manifest.json");
    std::printf("trained %d epochs, final loss %.4f, best validation F1 %.3f (epoch %d)\n", report.epochs_run,
                report.epoch_losses.empty() ? 0.0 : report.epoch_losses.back(), report.best_validation_f1,
                report.best_epoch);
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& tok_arg,
             const std::string& out_arg, const SplitFlags& sf, const std::string& profile, bool accuracy, bool force,
             int argc, char** argv) {
    RunManifest manifest("eval", argc, argv);
    if (!fs::exists(checkpoint)) throw MissingArtifact("checkpoint not found: " + checkpoint);
    manifest.input(checkpoint);
    json extra;
    const auto model = M3ptModel::load(checkpoint, &extra);
    RunConfig config = extra.contains("run_config") ? run_config_from_json(extra["run_config"]) : RunConfig{};
    config.segment.segments_per_window = model.config().num_segments;

    auto store = open_data(data, manifest);
    std::vector<std::string> eval_ids;
    if (sf.fold) {
        // folds are drawn from the root seed the model was trained under
        RunConfig fc = config;
        if (extra.contains("root_seed")) fc.seed = extra["root_seed"].get<std::uint64_t>();
        eval_ids = pick_fold(sf, store.ids(), fc, profile)->test;
    } else if (extra.contains("test") && !extra["test"].empty()) {
        eval_ids = extra["test"].get<std::vector<std::string>>();
    } else {
        eval_ids = store.ids();
    }

    fs::path tok_dir = tok_arg;
    if (tok_dir.empty()) tok_dir = extra.value("tokenizers", fs::path(checkpoint).parent_path().string());
    const fs::path out = out_arg.empty() ? fs::path(checkpoint).parent_path() / "eval" : resolve_out(out_arg);
    refuse_overwrite({out / "eval.json", out / "run_manifest.json"}, force);
    const auto toks = load_tokenizers(tok_dir, model.config().modalities, model.config().word_input, &manifest);

    manifest.config(to_json(config));
    manifest.seed("run", config.seed);
    const auto ev = evaluate_model(model, toks, store, eval_ids, config.segment, "evaluation");
    json result = {{"sessions", eval_ids}, {"speaking", task_json(ev.speaking)}, {"bite", task_json(ev.bite)}};
    fs::create_directories(out);
    std::ofstream(out / "eval.json") << result.dump(2) << '\n';
    manifest.artifact(out / "eval.json");
    manifest.result(result);
    manifest.write(out / "run_manifest.json");
    std::printf("evaluated %zu session(s)\n", eval_ids.size());
    if (ev.speaking) print_metrics("speaking", *ev.speaking, accuracy);
    if (ev.bite) print_metrics("bite", *ev.bite, accuracy);
    return 0;
}

int cmd_crossval(const std::string& data, const std::string& out_arg, const RunFlags& rf, const SplitFlags& sf,
                 int jobs, bool accuracy, bool force, int argc, char** argv) {
    RunManifest manifest("crossval", argc, argv);
    RunConfig config = rf.resolve();
    auto store = open_data(data, manifest);
    const fs::path out = resolve_out(out_arg);
    refuse_overwrite({out / "results.json", out / "run_manifest.json"}, force);
    auto folds = make_folds(store.ids(), sf.count(rf.profile), config.seed);
    if (sf.fold) folds = {pick_fold(sf, store.ids(), config, rf.profile).value()};
    manifest.config(to_json(config));
    manifest.seed("root", config.seed);
    for (const auto& f : folds)
        manifest.seed("fold/" + std::to_string(f.fold_id), derive_seed(config.seed, "fold/" + std::to_string(f.fold_id)));

    const auto res = run_experiment(folds, store, config, jobs, out, console());
    for (const auto& w : res.warnings) std::printf("warning: %s\n", w.c_str());
    AblationTable table{"Cross-validated results", false, {}};
    if (res.speaking) table.rows.push_back({"speaking", "speaking", res.speaking, 0});
    if (res.bite) table.rows.push_back({"bite", "bite", res.bite, 0});
    const auto text = render_table(table, accuracy);
    std::printf("%s", text.c_str());
    const json result = to_json(res);
    std::ofstream(out / "results.json") << result.dump(2) << '\n';
    write_text(out / "results.txt", text);
    manifest.artifact(out / "results.json");
    manifest.artifact(out / "results.txt");
    manifest.result({{"failed_folds", res.failed}, {"warnings", res.warnings}});
    manifest.write(out / "run_manifest.json");
    if (res.failed > 0) {
        std::fprintf(stderr, "%d fold(s) failed\n", res.failed);
        return 3;
    }
    return 0;
}

int cmd_ablate(const std::string& kind_name, const std::string& data, const std::string& out_arg, const RunFlags& rf,
               const SplitFlags& sf, int jobs, bool accuracy, bool force, int argc, char** argv) {
    RunManifest manifest("ablate", argc, argv);
    const auto kind = ablation_kind_from_string(kind_name);
    RunConfig config = rf.resolve();
    auto store = open_data(data, manifest);
    const fs::path out = resolve_out(out_arg);
    refuse_overwrite({out / "ablation.json", out / "run_manifest.json"}, force);
    const auto folds = make_folds(store.ids(), sf.count(rf.profile), config.seed);
    manifest.config({{"kind", std::string(to_string(kind))}, {"base", to_json(config)}, {"folds", folds.size()}});
    manifest.seed("root", config.seed);

    const auto tables = run_ablation(kind, store, folds, config, jobs, out, console());
    json tj = json::array();
    std::string text;
    int failed = 0;
    for (const auto& t : tables) {
        text += render_table(t, accuracy) + "\n";
        tj.push_back(to_json(t));
        for (const auto& r : t.rows) failed += r.failed_folds;
    }
    std::printf("%s", text.c_str());
    std::ofstream(out / "ablation.json") << json{{"kind", std::string(to_string(kind))}, {"tables", tj}}.dump(2) << '\n';
    write_text(out / "ablation.txt", text);
    manifest.artifact(out / "ablation.json");
    manifest.artifact(out / "ablation.txt");
    manifest.result({{"tables", tj}});
    manifest.write(out / "run_manifest.json");
    if (failed > 0) {
        std::fprintf(stderr, "%d fold run(s) failed\n", failed);
        return 3;
    }
    return 0;
}

int cmd_mask_dump(int T, int P, int M, const std::string& kind_name, const std::string& out_arg, bool no_diagonal,
                  bool own_modalities, double budget_mb, bool force, int argc, char** argv) {
    RunManifest manifest("mask-dump", argc, argv);
    if (T < 1 || P < 1 || M < 1) throw UsageError("--T, --P and --M must be positive");
    MaskOptions opt;
    opt.include_diagonal = !no_diagonal;
    opt.allow_own_modalities = own_modalities;
    opt.memory_budget_bytes = static_cast<std::size_t>(budget_mb * 1024.0 * 1024.0);
    const MaskSpec spec{T, P, M};
    const auto kind = mask_kind_from_string(kind_name);
    const fs::path out = resolve_out(out_arg);
    refuse_overwrite({out / "mask.pbm", out / "mask.txt", out / "run_manifest.json"}, force);
    const auto mask = build_mask(kind, spec, opt);
    fs::create_directories(out);
    export_mask_bitmap(mask, out / "mask.pbm");
    export_mask_text(mask, out / "mask.txt");
    manifest.config({{"T", T},
                     {"P", P},
                     {"M", M},
                     {"kind", std::string(to_string(kind))},
                     {"include_diagonal", opt.include_diagonal},
                     {"allow_own_modalities", opt.allow_own_modalities},
                     {"memory_budget_bytes", opt.memory_budget_bytes}});
    manifest.artifact(out / "mask.pbm");
    manifest.artifact(out / "mask.txt");
    manifest.result({{"L", mask.length()}, {"allowed", mask.allowed_count()}});
    manifest.write(out / "run_manifest.json");
    std::printf("L = %zu\n", mask.length());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"m3pt: multimodal multi-party transformer for social signal prediction"};
    app.require_subcommand(1);

    bool force = false;
    int jobs = 1;
    auto add_force = [&](CLI::App* c) { c->add_flag("--force", force, "overwrite existing outputs"); };
    auto add_jobs = [&](CLI::App* c) {
        c->add_option("--jobs", jobs, "parallel fold/ablation runs")->envname("M3PT_JOBS")->check(CLI::PositiveNumber)
            ->capture_default_str();
    };

    // synth
    auto* synth = app.add_subcommand("synth", "generate synthetic sessions with planted dependencies");
    std::string synth_config, synth_out, synth_profile;
    std::optional<std::uint64_t> synth_seed;
    int synth_sessions = 0;
    synth->add_option("--config", synth_config, "synthetic config JSON");
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_option("--seed", synth_seed, "generator seed (default 0)");
    synth->add_option("--sessions", synth_sessions, "number of sessions (default 30, smoke 6)");
    synth->add_option("--profile", synth_profile, "default or smoke")->check(CLI::IsMember({"default", "smoke"}));
    add_force(synth);

    // train-vqvae
    auto* vq = app.add_subcommand("train-vqvae", "train a frozen per-modality VQ tokenizer");
    std::string vq_data, vq_modality, vq_out;
    RunFlags vq_flags;
    SplitFlags vq_split;
    vq->add_option("--data", vq_data, "dataset root or manifest.json")->required();
    vq->add_option("--modality", vq_modality, "continuous modality name, or 'all'")->required();
    vq->add_option("--out", vq_out, "tokenizer directory")->required();
    vq_flags.add(vq);
    vq_split.add(vq);
    add_force(vq);

    // train
    auto* train = app.add_subcommand("train", "train the transformer on frozen tokenizers");
    std::string tr_data, tr_tok, tr_out;
    RunFlags tr_flags;
    SplitFlags tr_split;
    train->add_option("--data", tr_data, "dataset root or manifest.json")->required();
    train->add_option("--tokenizers", tr_tok, "directory with tokenizer_<modality>.m3vq files")->required();
    train->add_option("--out", tr_out, "output directory")->required();
    tr_flags.add(train);
    tr_split.add(train);
    add_force(train);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_ckpt, ev_data, ev_tok, ev_out, ev_profile;
    SplitFlags ev_split;
    bool ev_accuracy = false;
    eval->add_option("--checkpoint", ev_ckpt, "model.m3pt")->required();
    eval->add_option("--data", ev_data, "dataset root or manifest.json")->required();
    eval->add_option("--tokenizers", ev_tok, "tokenizer directory (default: the one recorded in the checkpoint)");
    eval->add_option("--out", ev_out, "output directory (default: <checkpoint dir>/eval)");
    eval->add_option("--profile", ev_profile, "profile used for the fold count")
        ->check(CLI::IsMember({"default", "small", "smoke"}));
    ev_split.add(eval);
    eval->add_flag("--accuracy", ev_accuracy, "also report accuracy");
    add_force(eval);

    // crossval
    auto* cv = app.add_subcommand("crossval", "tokenizers + transformer per fold, aggregated over folds");
    std::string cv_data, cv_out;
    RunFlags cv_flags;
    SplitFlags cv_split;
    bool cv_accuracy = false;
    cv->add_option("--data", cv_data, "dataset root or manifest.json")->required();
    cv->add_option("--out", cv_out, "output directory")->required();
    cv_flags.add(cv);
    cv_split.add(cv);
    cv->add_flag("--accuracy", cv_accuracy, "include accuracy in the table");
    add_jobs(cv);
    add_force(cv);

    // ablate
    auto* ab = app.add_subcommand("ablate", "run an ablation and print its table");
    std::string ab_kind, ab_data, ab_out;
    RunFlags ab_flags;
    SplitFlags ab_split;
    bool ab_accuracy = false;
    ab->add_option("--kind", ab_kind, "drop_modality, temporal_context or segment_length")
        ->required()
        ->check(CLI::IsMember({"drop_modality", "temporal_context", "segment_length"}));
    ab->add_option("--data", ab_data, "dataset root or manifest.json")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab_flags.add(ab);
    ab->add_option("--folds", ab_split.folds, "number of folds (default 3, smoke profile 2)");
    ab->add_flag("--accuracy", ab_accuracy, "include accuracy in the tables");
    add_jobs(ab);
    add_force(ab);

    // mask-dump
    auto* md = app.add_subcommand("mask-dump", "write an attention mask as PBM bitmap and text");
    int md_T = 0, md_P = 0, md_M = 0;
    std::string md_kind = "blockwise", md_out;
    bool md_no_diag = false, md_own = false;
    double md_budget = 256.0;
    md->add_option("--T", md_T, "segments per window")->required();
    md->add_option("--P", md_P, "persons")->required();
    md->add_option("--M", md_M, "modalities")->required();
    md->add_option("--kind", md_kind, "blockwise, strict_past or lower")
        ->check(CLI::IsMember({"blockwise", "strict_past", "lower"}))
        ->capture_default_str();
    md->add_option("--out", md_out, "output directory")->required();
    md->add_flag("--no-diagonal", md_no_diag, "lower: exclude the diagonal");
    md->add_flag("--allow-own-modalities", md_own, "blockwise: allow own other modalities at the current step");
    md->add_option("--memory-budget-mb", md_budget, "refuse masks larger than this")->capture_default_str();
    add_force(md);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(synth_config, synth_out, synth_seed, synth_sessions, synth_profile, force, argc, argv);
        if (*vq) return cmd_train_vqvae(vq_data, vq_modality, vq_out, vq_flags, vq_split, force, argc, argv);
        if (*train) return cmd_train(tr_data, tr_tok, tr_out, tr_flags, tr_split, force, argc, argv);
        if (*eval)
            return cmd_eval(ev_ckpt, ev_data, ev_tok, ev_out, ev_split, ev_profile, ev_accuracy, force, argc, argv);
        if (*cv) return cmd_crossval(cv_data, cv_out, cv_flags, cv_split, jobs, cv_accuracy, force, argc, argv);
        if (*ab) return cmd_ablate(ab_kind, ab_data, ab_out, ab_flags, ab_split, jobs, ab_accuracy, force, argc, argv);
        if (*md)
            return cmd_mask_dump(md_T, md_P, md_M, md_kind, md_out, md_no_diag, md_own, md_budget, force, argc, argv);
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return 1;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return 1;
    } catch (const MissingArtifact& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 2;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const InvalidArgument& e) {
        std::fprintf(stderr, "invalid argument: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
