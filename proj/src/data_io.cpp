#include "m3pt/data_io.hpp"

#include "m3pt/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace m3pt {

namespace {

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_json(const nlohmann::json& j, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void append_number(std::string& s, double v) {
    if (!std::isfinite(v)) {
        s += "nan";
        return;
    }
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    s.append(buf, ptr);
}

bool safe_name(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
    });
}

[[noreturn]] void schema_error(const fs::path& file, std::size_t line, const std::string& msg) {
    throw ConfigError(file.string() + ":" + std::to_string(line) + ": " + msg);
}

std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t from = 0;
    for (;;) {
        const auto comma = line.find(',', from);
        cells.push_back(line.substr(from, comma == std::string_view::npos ? std::string_view::npos : comma - from));
        if (comma == std::string_view::npos) break;
        from = comma + 1;
    }
    return cells;
}

double parse_cell(std::string_view cell, const fs::path& file, std::size_t line) {
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    if (cell.empty() || cell == "nan" || cell == "NaN") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc{} || ptr != cell.data() + cell.size())
        schema_error(file, line, "not a number: '" + std::string(cell) + "'");
    return v;
}

// Reads one stream file onto a frame grid of `frames` rows at `fps`;
// frames absent from the file stay NaN for the missing-data policy.
Matrix read_stream(const fs::path& file, const Modality& mod, Rational fps, std::size_t frames) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open stream file '" + file.string() + "'");
    const int C = mod.channel_count;
    Matrix v = Matrix::Constant(static_cast<Eigen::Index>(frames), C, std::numeric_limits<double>::quiet_NaN());
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line)) schema_error(file, 1, "empty file, expected a header row");
    ++lineno;
    const auto header = split_csv(line);
    if (header.size() != static_cast<std::size_t>(C) + 1 || header[0].substr(0, 9) != "timestamp")
        schema_error(file, lineno,
                     "header must be 'timestamp' plus " + std::to_string(C) + " channel column(s) for " +
                         std::string(mod.name()));
    long long last_index = -1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv(line);
        if (cells.size() != static_cast<std::size_t>(C) + 1)
            schema_error(file, lineno,
                         "expected " + std::to_string(C + 1) + " columns, found " + std::to_string(cells.size()));
        const double ts = parse_cell(cells[0], file, lineno);
        if (!std::isfinite(ts) || ts < 0.0) schema_error(file, lineno, "bad timestamp");
        const long long idx = std::llround(ts * fps.value());
        if (idx <= last_index) schema_error(file, lineno, "timestamps must increase by at least one frame");
        if (std::abs(ts * fps.value() - static_cast<double>(idx)) > 0.5)
            schema_error(file, lineno, "timestamp is off the frame grid");
        last_index = idx;
        if (idx >= static_cast<long long>(frames) + 1)
            schema_error(file, lineno, "stream runs past the session duration by more than one frame");
        if (idx >= static_cast<long long>(frames)) continue;
        for (int c = 0; c < C; ++c) {
            const double x = parse_cell(cells[static_cast<std::size_t>(c) + 1], file, lineno);
            if (mod.is_discrete && std::isfinite(x) && x != 0.0 && x != 1.0)
                schema_error(file, lineno, "discrete value must be 0 or 1");
            v(static_cast<Eigen::Index>(idx), c) = x;
        }
    }
    if (last_index + 2 < static_cast<long long>(frames))
        throw ConfigError(file.string() + ": stream ends at frame " + std::to_string(last_index) + " but the session has " +
                          std::to_string(frames) + " frames (duration mismatch beyond one frame)");
    return v;
}

}  // namespace

nlohmann::json modalities_to_json(std::span<const Modality> modalities) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : modalities)
        arr.push_back({{"kind", std::string(m.name())}, {"channels", m.channel_count}, {"discrete", m.is_discrete}});
    return arr;
}

std::vector<Modality> modalities_from_json(const nlohmann::json& j) {
    std::vector<Modality> out;
    try {
        for (const auto& m : j) {
            const auto kind = modality_kind_from_string(m.at("kind").get<std::string>());
            out.push_back(m.value("discrete", false) ? Modality::discrete(kind)
                                                      : Modality::continuous(kind, m.at("channels").get<int>()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad modality list: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("bad modality list: ") + e.what());
    }
    return out;
}

std::string stream_file_name(const std::string& person, const Modality& modality) {
    return person + "." + std::string(modality.name()) + ".csv";
}

DatasetManifest read_manifest(const fs::path& path) {
    const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
    if (!fs::exists(file)) throw MissingArtifact("dataset manifest '" + file.string() + "' does not exist");
    const auto j = read_json(file);
    DatasetManifest m;
    m.root = file.parent_path();
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version > kManifestFormatVersion)
            throw ConfigError("manifest format version " + std::to_string(m.format_version) +
                              " is newer than supported (" + std::to_string(kManifestFormatVersion) + ")");
        m.fps = parse_rational(j.at("fps").get<std::string>());
        m.modalities = modalities_from_json(j.at("modalities"));
        m.sessions = j.at("sessions").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(file.string() + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(file.string() + ": " + e.what());
    }
    for (const auto& s : m.sessions)
        if (!fs::is_directory(m.root / s))
            throw MissingArtifact("manifest lists session '" + s + "' but " + (m.root / s).string() + " is missing");
    return m;
}

void write_manifest(const DatasetManifest& m) {
    nlohmann::json j = {{"format_version", m.format_version},
                        {"fps", to_string(m.fps)},
                        {"modalities", modalities_to_json(m.modalities)},
                        {"sessions", m.sessions}};
    write_json(j, m.root / "manifest.json");
}

SessionTimeline load_session(const fs::path& dir, std::span<const Modality> expected,
                             std::vector<fs::path>* opened) {
    const fs::path meta_file = dir / "session.json";
    if (!fs::exists(meta_file)) throw MissingArtifact("session metadata '" + meta_file.string() + "' is missing");
    const auto meta = read_json(meta_file);
    if (opened) opened->push_back(meta_file);
    SessionTimeline tl;
    Rational fps;
    try {
        tl.session_id = meta.at("session_id").get<std::string>();
        tl.persons = meta.at("persons").get<std::vector<std::string>>();
        tl.duration_s = meta.at("duration_s").get<double>();
        fps = parse_rational(meta.at("fps").get<std::string>());
        tl.modalities = modalities_from_json(meta.at("modalities"));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(meta_file.string() + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(meta_file.string() + ": " + e.what());
    }
    if (tl.persons.size() < 2) throw ConfigError(meta_file.string() + ": a session needs at least two persons");
    if (!expected.empty() && !std::equal(expected.begin(), expected.end(), tl.modalities.begin(), tl.modalities.end()))
        throw ConfigError(meta_file.string() + ": modality set differs from the dataset manifest");

    const auto frames = static_cast<std::size_t>(std::llround(tl.duration_s * fps.value()));
    for (const auto& person : tl.persons) {
        for (const auto& mod : tl.modalities) {
            const fs::path file = dir / stream_file_name(person, mod);
            if (!fs::exists(file))
                throw IoError("session '" + tl.session_id + "' has no stream for (" + person + ", " +
                              std::string(mod.name()) + "): expected " + file.string());
            FrameSeries s;
            s.modality = mod;
            s.fps = fps;
            s.values = read_stream(file, mod, fps, frames);
            if (opened) opened->push_back(file);
            tl.zero_filled.push_back(!fill_missing(s));
            tl.streams.push_back(std::move(s));
        }
    }
    tl.validate();
    return tl;
}

std::vector<SessionTimeline> load_sessions(const DatasetManifest& manifest) {
    std::vector<SessionTimeline> out;
    out.reserve(manifest.sessions.size());
    for (const auto& s : manifest.sessions) out.push_back(load_session(manifest.root / s, manifest.modalities));
    return out;
}

DatasetManifest write_sessions(std::span<const SessionTimeline> sessions, const fs::path& root) {
    require(!sessions.empty(), "write_sessions: nothing to write");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create '" + root.string() + "': " + ec.message());
    DatasetManifest m;
    m.root = root;
    m.modalities = sessions.front().modalities;
    m.fps = sessions.front().streams.front().fps;
    for (const auto& tl : sessions) {
        tl.validate();
        if (!safe_name(tl.session_id)) throw InvalidArgument("session id '" + tl.session_id + "' is not a safe file name");
        if (tl.modalities != m.modalities) throw InvalidArgument("sessions disagree on the modality set");
        const fs::path dir = root / tl.session_id;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
        const Rational fps = tl.streams.front().fps;
        write_json({{"session_id", tl.session_id},
                    {"persons", tl.persons},
                    {"fps", to_string(fps)},
                    {"duration_s", tl.duration_s},
                    {"modalities", modalities_to_json(tl.modalities)}},
                   dir / "session.json");
        for (std::size_t i = 0; i < tl.num_persons(); ++i) {
            if (!safe_name(tl.persons[i])) throw InvalidArgument("person id '" + tl.persons[i] + "' is not a safe file name");
            for (std::size_t k = 0; k < tl.num_modalities(); ++k) {
                const auto& s = tl.stream(i, k);
                if (!(s.fps == fps)) throw InvalidArgument("streams of one session must share a frame rate");
                std::string text = "timestamp";
                if (s.modality.is_discrete) text += ",value";
                else
                    for (int c = 0; c < s.modality.channel_count; ++c) text += ",c" + std::to_string(c);
                text += '\n';
                for (Eigen::Index r = 0; r < s.values.rows(); ++r) {
                    append_number(text, static_cast<double>(r) * static_cast<double>(fps.den) /
                                            static_cast<double>(fps.num));
                    for (Eigen::Index c = 0; c < s.values.cols(); ++c) {
                        text += ',';
                        append_number(text, s.values(r, c));
                    }
                    text += '\n';
                }
                const fs::path file = dir / stream_file_name(tl.persons[i], s.modality);
                std::ofstream out(file, std::ios::binary);
                if (!out) throw IoError("cannot write '" + file.string() + "'");
                out << text;
                if (!out) throw IoError("failed writing '" + file.string() + "'");
            }
        }
        m.sessions.push_back(tl.session_id);
    }
    write_manifest(m);
    return m;
}

void AccessLog::record(const std::string& phase, const std::string& session, const std::vector<std::string>& files) {
    std::lock_guard lock(mu_);
    sessions_[phase].insert(session);
    files_[phase].insert(files.begin(), files.end());
}

std::set<std::string> AccessLog::sessions(const std::string& phase) const {
    std::lock_guard lock(mu_);
    auto it = sessions_.find(phase);
    return it == sessions_.end() ? std::set<std::string>{} : it->second;
}

std::set<std::string> AccessLog::files(const std::string& phase) const {
    std::lock_guard lock(mu_);
    auto it = files_.find(phase);
    return it == files_.end() ? std::set<std::string>{} : it->second;
}

std::vector<std::string> AccessLog::phases() const {
    std::lock_guard lock(mu_);
    std::vector<std::string> out;
    for (const auto& [p, s] : sessions_) out.push_back(p);
    return out;
}

SessionStore SessionStore::from_manifest(DatasetManifest manifest) {
    SessionStore s;
    s.manifest_ = std::make_shared<const DatasetManifest>(std::move(manifest));
    return s;
}

SessionStore SessionStore::in_memory(std::vector<SessionTimeline> sessions) {
    SessionStore s;
    s.memory_ = std::make_shared<const std::vector<SessionTimeline>>(std::move(sessions));
    return s;
}

std::vector<std::string> SessionStore::ids() const {
    if (manifest_) return manifest_->sessions;
    std::vector<std::string> out;
    for (const auto& tl : *memory_) out.push_back(tl.session_id);
    return out;
}

std::vector<Modality> SessionStore::modalities() const {
    if (manifest_) return manifest_->modalities;
    require(!memory_->empty(), "empty session store");
    return memory_->front().modalities;
}

SessionTimeline SessionStore::load(const std::string& id, const std::string& phase) const {
    if (manifest_) {
        if (std::find(manifest_->sessions.begin(), manifest_->sessions.end(), id) == manifest_->sessions.end())
            throw InvalidArgument("session '" + id + "' is not in the manifest");
        std::vector<fs::path> opened;
        SessionTimeline tl = load_session(manifest_->root / id, manifest_->modalities, &opened);
        std::vector<std::string> names;
        for (const auto& p : opened) names.push_back(p.string());
        log_->record(phase, id, names);
        return tl;
    }
    for (const auto& tl : *memory_) {
        if (tl.session_id == id) {
            log_->record(phase, id);
            return tl;
        }
    }
    throw InvalidArgument("unknown session '" + id + "'");
}

std::vector<SessionTimeline> SessionStore::load_many(std::span<const std::string> ids, const std::string& phase) const {
    std::vector<SessionTimeline> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(load(id, phase));
    return out;
}

std::vector<FoldSplit> make_folds(std::span<const std::string> session_ids, int num_folds, std::uint64_t seed) {
    require(num_folds >= 1, "make_folds: need at least one fold");
    if (static_cast<std::size_t>(num_folds) > session_ids.size())
        throw InvalidArgument("make_folds: " + std::to_string(num_folds) + " folds requested but only " +
                              std::to_string(session_ids.size()) + " sessions");
    {
        std::vector<std::string> sorted(session_ids.begin(), session_ids.end());
        std::sort(sorted.begin(), sorted.end());
        require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), "make_folds: duplicate session ids");
    }
    std::vector<std::size_t> order(session_ids.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "folds"));
    rng.shuffle(order);
    std::vector<FoldSplit> folds;
    for (int f = 0; f < num_folds; ++f) {
        FoldSplit split;
        split.fold_id = f;
        const std::size_t held = order[static_cast<std::size_t>(f)];
        split.test.push_back(session_ids[held]);
        for (std::size_t s = 0; s < session_ids.size(); ++s)
            if (s != held) split.train.push_back(session_ids[s]);
        folds.push_back(std::move(split));
    }
    return folds;
}

}  // namespace m3pt
