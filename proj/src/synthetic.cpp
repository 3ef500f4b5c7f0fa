#include "m3pt/data_io.hpp"

#include "m3pt/metrics.hpp"
#include "m3pt/rng.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fs = std::filesystem;

namespace m3pt {

namespace {

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// coefficient * count with 0 * huge = 0, so saturated couplings stay finite
double term(double coef, int count) { return count == 0 ? 0.0 : coef * count; }

double clamp_logit(double x) { return std::clamp(x, -60.0, 60.0); }

int ipow(int b, int e) {
    int r = 1;
    while (e-- > 0) r *= b;
    return r;
}

// Gaze configuration number -> per-person target (-1 away).
void decode_gaze(int code, int P, std::vector<int>& target) {
    target.resize(static_cast<std::size_t>(P));
    for (int k = 0; k < P; ++k) {
        const int digit = code % P;  // 0 = away, 1..P-1 = k-th other
        code /= P;
        if (digit == 0) {
            target[static_cast<std::size_t>(k)] = -1;
        } else {
            int other = digit - 1;
            if (other >= k) ++other;
            target[static_cast<std::size_t>(k)] = other;
        }
    }
}

double gaze_prob(const std::vector<int>& target, double away, int P) {
    double p = 1.0;
    for (int t : target) p *= t < 0 ? away : (1.0 - away) / (P - 1);
    return p;
}

std::vector<int> gazed_counts(const std::vector<int>& target, int P) {
    std::vector<int> g(static_cast<std::size_t>(P), 0);
    for (int t : target)
        if (t >= 0) ++g[static_cast<std::size_t>(t)];
    return g;
}

struct OuChannel {
    double x = 0.0;
    double step(double mean, double theta, double sigma, double dt, Rng& rng) {
        x += theta * (mean - x) * dt + sigma * std::sqrt(dt) * rng.normal();
        return x;
    }
};

}  // namespace

int SyntheticConfig::segments_per_session() const {
    return static_cast<int>(std::floor(duration_s / segment_seconds + 1e-9));
}

int SyntheticConfig::frames_per_segment() const {
    return static_cast<int>(std::lround(segment_seconds * fps.value()));
}

void SyntheticConfig::validate() const {
    require(num_sessions >= 1, "synthetic: num_sessions must be >= 1");
    require(persons_per_session >= 2 && persons_per_session <= 6, "synthetic: persons_per_session must be in [2, 6]");
    require(segment_seconds > 0 && duration_s >= segment_seconds, "synthetic: duration must cover one segment");
    require(frames_per_segment() >= 1, "synthetic: segment must hold at least one frame");
    require(noise >= 0.0, "synthetic: noise must be nonnegative");
    require(away_probability >= 0.0 && away_probability <= 1.0, "synthetic: away_probability must be in [0, 1]");
    for (double v : {a, b, c, d, speak_bias, bite_bias})
        require(!std::isnan(v), "synthetic: coefficients must not be NaN");
    require(pose_keypoints >= 2 && word_dim >= 1, "synthetic: need >= 2 pose keypoints and word_dim >= 1");
    require(ou_theta >= 0.0 && ou_sigma >= 0.0, "synthetic: OU parameters must be nonnegative");
}

nlohmann::json to_json(const SyntheticConfig& c) {
    return {{"num_sessions", c.num_sessions},
            {"persons_per_session", c.persons_per_session},
            {"duration_s", c.duration_s},
            {"fps", to_string(c.fps)},
            {"segment_seconds", c.segment_seconds},
            {"seed", c.seed},
            {"a", c.a},
            {"b", c.b},
            {"c", c.c},
            {"d", c.d},
            {"speak_bias", c.speak_bias},
            {"bite_bias", c.bite_bias},
            {"noise", c.noise},
            {"away_probability", c.away_probability},
            {"pose_keypoints", c.pose_keypoints},
            {"word_dim", c.word_dim},
            {"ou_theta", c.ou_theta},
            {"ou_sigma", c.ou_sigma}};
}

SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
    SyntheticConfig c;
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            if (k == "num_sessions") c.num_sessions = it->get<int>();
            else if (k == "persons_per_session") c.persons_per_session = it->get<int>();
            else if (k == "duration_s") c.duration_s = it->get<double>();
            else if (k == "fps") c.fps = it->is_string() ? parse_rational(it->get<std::string>())
                                                          : Rational{it->get<std::int64_t>(), 1};
            else if (k == "segment_seconds") c.segment_seconds = it->get<double>();
            else if (k == "seed") c.seed = it->get<std::uint64_t>();
            else if (k == "a") c.a = it->get<double>();
            else if (k == "b") c.b = it->get<double>();
            else if (k == "c") c.c = it->get<double>();
            else if (k == "d") c.d = it->get<double>();
            else if (k == "speak_bias") c.speak_bias = it->get<double>();
            else if (k == "bite_bias") c.bite_bias = it->get<double>();
            else if (k == "noise") c.noise = it->get<double>();
            else if (k == "away_probability") c.away_probability = it->get<double>();
            else if (k == "pose_keypoints") c.pose_keypoints = it->get<int>();
            else if (k == "word_dim") c.word_dim = it->get<int>();
            else if (k == "ou_theta") c.ou_theta = it->get<double>();
            else if (k == "ou_sigma") c.ou_sigma = it->get<double>();
            else throw ConfigError("unknown synthetic config key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad synthetic config: ") + e.what());
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("bad synthetic config: ") + e.what());
    }
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

nlohmann::json to_json(const SyntheticTrace& t) {
    return {{"session_id", t.session_id}, {"gaze_target", t.gaze_target}, {"speaking", t.speaking}, {"biting", t.biting}};
}

SyntheticTrace synthetic_trace_from_json(const nlohmann::json& j) {
    SyntheticTrace t;
    try {
        t.session_id = j.at("session_id").get<std::string>();
        t.gaze_target = j.at("gaze_target").get<std::vector<std::vector<int>>>();
        t.speaking = j.at("speaking").get<std::vector<std::vector<std::uint8_t>>>();
        t.biting = j.at("biting").get<std::vector<std::vector<std::uint8_t>>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad latent trace: ") + e.what());
    }
    return t;
}

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
    cfg.validate();
    const int P = cfg.persons_per_session;
    const int S = cfg.segments_per_session();
    const int m = cfg.frames_per_segment();
    const auto F = static_cast<Eigen::Index>(std::llround(cfg.duration_s * cfg.fps.value()));
    const double dt = 1.0 / cfg.fps.value();
    const auto modalities = default_modalities(cfg.pose_keypoints, cfg.word_dim);
    const int K = cfg.pose_keypoints;

    // Seats on a unit circle around the table.
    std::vector<std::array<double, 2>> seat(static_cast<std::size_t>(P));
    for (int i = 0; i < P; ++i) {
        const double ang = 2.0 * std::numbers::pi * i / P;
        seat[static_cast<std::size_t>(i)] = {std::cos(ang), std::sin(ang)};
    }

    SyntheticDataset out;
    for (int n = 0; n < cfg.num_sessions; ++n) {
        Rng rng(derive_seed(cfg.seed, "session/" + std::to_string(n)));
        SyntheticTrace tr;
        char id[32];
        std::snprintf(id, sizeof id, "syn%03d", n);
        tr.session_id = id;

        // latent segments
        tr.gaze_target.assign(static_cast<std::size_t>(S), std::vector<int>(static_cast<std::size_t>(P), -1));
        tr.speaking.assign(static_cast<std::size_t>(S), std::vector<std::uint8_t>(static_cast<std::size_t>(P), 0));
        tr.biting = tr.speaking;
        for (int s = 0; s < S; ++s) {
            auto& gaze = tr.gaze_target[static_cast<std::size_t>(s)];
            for (int k = 0; k < P; ++k) {
                if (rng.bernoulli(cfg.away_probability)) continue;
                int other = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(P - 1)));
                if (other >= k) ++other;
                gaze[static_cast<std::size_t>(k)] = other;
            }
            const auto G = gazed_counts(gaze, P);
            for (int i = 0; i < P; ++i) {
                int prev = 0;
                if (s > 0)
                    for (int j = 0; j < P; ++j)
                        if (j != i) prev += tr.speaking[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(j)];
                const double x = term(cfg.a, prev) + term(cfg.b, G[static_cast<std::size_t>(i)]) + cfg.speak_bias +
                                 cfg.noise * rng.normal();
                tr.speaking[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] =
                    rng.bernoulli(sigmoid(clamp_logit(x))) ? 1 : 0;
            }
            for (int i = 0; i < P; ++i) {
                int silent = 0;
                for (int j = 0; j < P; ++j)
                    if (j != i && !tr.speaking[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)]) ++silent;
                const int own = s > 0 && !tr.speaking[static_cast<std::size_t>(s - 1)][static_cast<std::size_t>(i)];
                const double x =
                    term(cfg.c, silent) + term(cfg.d, own) + cfg.bite_bias + cfg.noise * rng.normal();
                tr.biting[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] =
                    rng.bernoulli(sigmoid(clamp_logit(x))) ? 1 : 0;
            }
        }

        SessionTimeline tl;
        tl.session_id = tr.session_id;
        tl.modalities = modalities;
        tl.duration_s = cfg.duration_s;
        for (int i = 0; i < P; ++i) tl.persons.push_back("p" + std::to_string(i));

        for (int i = 0; i < P; ++i) {
            const auto si = static_cast<std::size_t>(i);
            // discrete frames
            Matrix spk = Matrix::Zero(F, 1), bite = Matrix::Zero(F, 1);
            for (int s = 0; s < S; ++s) {
                const Eigen::Index base = static_cast<Eigen::Index>(s) * m;
                const bool on = tr.speaking[static_cast<std::size_t>(s)][si];
                const int count = on ? std::min(m, static_cast<int>(std::ceil(rng.uniform(0.6, 1.0) * m)))
                                     : static_cast<int>(std::floor(rng.uniform(0.0, 0.2) * m));
                const auto off = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(m - count + 1)));
                spk.block(base + off, 0, count, 1).setOnes();
                if (tr.biting[static_cast<std::size_t>(s)][si]) {
                    const int nb = std::min(m, 1 + static_cast<int>(rng.uniform_int(3)));
                    const auto bo = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(m - nb + 1)));
                    bite.block(base + bo, 0, nb, 1).setOnes();
                }
            }

            // hand-to-mouth bump around bite frames
            std::vector<double> bump(static_cast<std::size_t>(F), 0.0);
            const double width = 0.25 * cfg.fps.value();
            const auto reach = static_cast<Eigen::Index>(std::ceil(4 * width));
            for (Eigen::Index f = 0; f < F; ++f) {
                if (bite(f, 0) == 0.0) continue;
                for (Eigen::Index g = std::max<Eigen::Index>(0, f - reach); g < std::min(F, f + reach + 1); ++g) {
                    const double dd = static_cast<double>(g - f) / width;
                    bump[static_cast<std::size_t>(g)] = std::max(bump[static_cast<std::size_t>(g)], std::exp(-0.5 * dd * dd));
                }
            }

            // person-specific constants
            std::vector<double> pose_base(static_cast<std::size_t>(2 * K));
            for (auto& v : pose_base) v = rng.normal(0.0, 0.5);
            std::vector<double> speech(static_cast<std::size_t>(cfg.word_dim));
            for (auto& v : speech) v = rng.normal();

            Matrix gaze(F, 2), head(F, 3), pose(F, 2 * K), word(F, cfg.word_dim);
            std::vector<OuChannel> ou_g(2), ou_h(3), ou_p(static_cast<std::size_t>(2 * K)),
                ou_w(static_cast<std::size_t>(cfg.word_dim));
            double yaw = 0.0;
            for (Eigen::Index f = 0; f < F; ++f) {
                const int s = std::min(S - 1, static_cast<int>(f / m));
                const bool past_end = f >= static_cast<Eigen::Index>(S) * m;
                const int target = past_end ? -1 : tr.gaze_target[static_cast<std::size_t>(s)][si];
                std::array<double, 2> dir;
                if (target < 0) {
                    dir = seat[si];  // outward, away from the table
                } else {
                    const auto& a = seat[si];
                    const auto& b = seat[static_cast<std::size_t>(target)];
                    const double dx = b[0] - a[0], dy = b[1] - a[1];
                    const double norm = std::hypot(dx, dy);
                    dir = {dx / norm, dy / norm};
                }
                for (int c = 0; c < 2; ++c)
                    gaze(f, c) = dir[static_cast<std::size_t>(c)] + ou_g[static_cast<std::size_t>(c)].step(0.0, cfg.ou_theta, cfg.ou_sigma, dt, rng);
                // head yaw eases toward the gaze direction
                const double want = std::atan2(dir[1], dir[0]);
                double diff = std::remainder(want - yaw, 2.0 * std::numbers::pi);
                yaw += diff * std::min(1.0, 6.0 * dt);
                head(f, 0) = yaw + ou_h[0].step(0.0, cfg.ou_theta, cfg.ou_sigma, dt, rng);
                head(f, 1) = (target < 0 ? -0.3 : 0.0) + ou_h[1].step(0.0, cfg.ou_theta, cfg.ou_sigma, dt, rng);
                head(f, 2) = ou_h[2].step(0.0, cfg.ou_theta, cfg.ou_sigma, dt, rng);
                // keypoint 0 = hand, keypoint 1 = mouth
                const double b = bump[static_cast<std::size_t>(f)];
                for (int c = 0; c < 2 * K; ++c) {
                    double mean = pose_base[static_cast<std::size_t>(c)];
                    if (c < 2) mean += b * (pose_base[static_cast<std::size_t>(c + 2)] - pose_base[static_cast<std::size_t>(c)]);
                    pose(f, c) = mean + ou_p[static_cast<std::size_t>(c)].step(0.0, cfg.ou_theta, cfg.ou_sigma, dt, rng);
                }
                const bool talking = spk(f, 0) != 0.0;
                for (int c = 0; c < cfg.word_dim; ++c)
                    word(f, c) = (talking ? speech[static_cast<std::size_t>(c)] : 0.0) +
                                 ou_w[static_cast<std::size_t>(c)].step(0.0, cfg.ou_theta, cfg.ou_sigma, dt, rng);
            }

            const Matrix* by_kind[] = {&gaze, &head, &pose, &word, &spk, &bite};
            for (const auto& mod : modalities) {
                FrameSeries fs_;
                fs_.modality = mod;
                fs_.fps = cfg.fps;
                fs_.values = *by_kind[static_cast<int>(mod.kind)];
                tl.streams.push_back(std::move(fs_));
            }
        }
        tl.zero_filled.assign(tl.streams.size(), false);
        tl.validate();
        out.sessions.push_back(std::move(tl));
        out.traces.push_back(std::move(tr));
    }
    return out;
}

DatasetManifest write_synthetic(const SyntheticDataset& data, const SyntheticConfig& config, const fs::path& root) {
    DatasetManifest m = write_sessions(data.sessions, root);
    for (const auto& tr : data.traces) {
        std::ofstream out(root / tr.session_id / "latent.json");
        if (!out) throw IoError("cannot write latent trace for '" + tr.session_id + "'");
        out << to_json(tr).dump() << '\n';
    }
    std::ofstream out(root / "synthetic.json");
    if (!out) throw IoError("cannot write '" + (root / "synthetic.json").string() + "'");
    out << to_json(config).dump(2) << '\n';
    return m;
}

double noisy_sigmoid(double x, double noise) {
    x = clamp_logit(x);
    if (noise <= 0.0) return sigmoid(x);
    constexpr int kSteps = 800;
    constexpr double lo = -8.0, hi = 8.0;
    const double h = (hi - lo) / kSteps;
    double acc = 0.0, wsum = 0.0;
    for (int n = 0; n <= kSteps; ++n) {
        const double e = lo + n * h;
        const double w = (n == 0 || n == kSteps ? 0.5 : 1.0) * std::exp(-0.5 * e * e);
        acc += w * sigmoid(x + noise * e);
        wsum += w;
    }
    return acc / wsum;  // normalising by the weight sum absorbs the truncated tails
}

namespace {

// Memoised q(.) over the small integer grids the rules produce.
struct RuleTables {
    int P;
    std::vector<double> speak;  // [prev * P + gazed]
    std::vector<double> bite;   // [silent * 2 + own]

    explicit RuleTables(const SyntheticConfig& c) : P(c.persons_per_session) {
        speak.resize(static_cast<std::size_t>(P * P));
        for (int prev = 0; prev < P; ++prev)
            for (int g = 0; g < P; ++g)
                speak[static_cast<std::size_t>(prev * P + g)] =
                    noisy_sigmoid(term(c.a, prev) + term(c.b, g) + c.speak_bias, c.noise);
        bite.resize(static_cast<std::size_t>(P * 2));
        for (int sil = 0; sil < P; ++sil)
            for (int own = 0; own < 2; ++own)
                bite[static_cast<std::size_t>(sil * 2 + own)] =
                    noisy_sigmoid(term(c.c, sil) + term(c.d, own) + c.bite_bias, c.noise);
    }
    double q_speak(int prev, int gazed) const { return speak[static_cast<std::size_t>(prev * P + gazed)]; }
    double q_bite(int silent, int own) const { return bite[static_cast<std::size_t>(silent * 2 + own)]; }
};

// Distribution of how many of `probs` (excluding index skip) come up false.
std::vector<double> count_false(const std::vector<double>& probs, int skip) {
    std::vector<double> dist{1.0};
    for (std::size_t j = 0; j < probs.size(); ++j) {
        if (static_cast<int>(j) == skip) continue;
        std::vector<double> next(dist.size() + 1, 0.0);
        for (std::size_t n = 0; n < dist.size(); ++n) {
            next[n] += dist[n] * probs[j];
            next[n + 1] += dist[n] * (1.0 - probs[j]);
        }
        dist = std::move(next);
    }
    return dist;
}

}  // namespace

OraclePosteriors bayes_oracle(const SyntheticConfig& cfg, const SyntheticTrace& tr, OracleScope scope) {
    const int P = tr.num_persons();
    const int S = tr.num_segments();
    require(P == cfg.persons_per_session, "bayes_oracle: trace and config disagree on persons");
    const RuleTables q(cfg);
    OraclePosteriors out;
    out.speaking.assign(static_cast<std::size_t>(S * P), 0.0);
    out.biting.assign(static_cast<std::size_t>(S * P), 0.0);
    const double pg = (1.0 - cfg.away_probability) / (P - 1);
    std::vector<int> target;

    for (int s = 0; s < S; ++s) {
        const auto& spk = tr.speaking[static_cast<std::size_t>(s)];
        std::vector<int> prev(static_cast<std::size_t>(P), 0), own(static_cast<std::size_t>(P), 0);
        if (s > 0) {
            const auto& before = tr.speaking[static_cast<std::size_t>(s - 1)];
            for (int i = 0; i < P; ++i) {
                for (int j = 0; j < P; ++j)
                    if (j != i) prev[static_cast<std::size_t>(i)] += before[static_cast<std::size_t>(j)];
                own[static_cast<std::size_t>(i)] = before[static_cast<std::size_t>(i)] ? 0 : 1;
            }
        }

        if (scope == OracleScope::past_only) {
            // gazed-at count ~ Binomial(P-1, pg)
            for (int i = 0; i < P; ++i) {
                double p = 0.0;
                for (int g = 0; g < P; ++g)
                    p += std::tgamma(P) / (std::tgamma(g + 1) * std::tgamma(P - g)) * std::pow(pg, g) *
                         std::pow(1.0 - pg, P - 1 - g) * q.q_speak(prev[static_cast<std::size_t>(i)], g);
                out.speaking[static_cast<std::size_t>(s * P + i)] = p;
            }
            // silent-others count: exact sum over gaze configurations
            std::vector<double> acc(static_cast<std::size_t>(P), 0.0);
            for (int code = 0; code < ipow(P, P); ++code) {
                decode_gaze(code, P, target);
                const double w = gaze_prob(target, cfg.away_probability, P);
                if (w == 0.0) continue;
                const auto G = gazed_counts(target, P);
                std::vector<double> ps(static_cast<std::size_t>(P));
                for (int j = 0; j < P; ++j)
                    ps[static_cast<std::size_t>(j)] = q.q_speak(prev[static_cast<std::size_t>(j)], G[static_cast<std::size_t>(j)]);
                for (int i = 0; i < P; ++i) {
                    const auto dist = count_false(ps, i);
                    double b = 0.0;
                    for (std::size_t n = 0; n < dist.size(); ++n)
                        b += dist[n] * q.q_bite(static_cast<int>(n), own[static_cast<std::size_t>(i)]);
                    acc[static_cast<std::size_t>(i)] += w * b;
                }
            }
            for (int i = 0; i < P; ++i) out.biting[static_cast<std::size_t>(s * P + i)] = acc[static_cast<std::size_t>(i)];
            continue;
        }

        const auto G = gazed_counts(tr.gaze_target[static_cast<std::size_t>(s)], P);
        const auto& bites = tr.biting[static_cast<std::size_t>(s)];
        for (int i = 0; i < P; ++i) {
            const double prior = q.q_speak(prev[static_cast<std::size_t>(i)], G[static_cast<std::size_t>(i)]);
            // Other persons' concurrent bites depend on whether i is silent.
            double like[2] = {1.0, 1.0};
            for (int v = 0; v < 2; ++v) {
                for (int j = 0; j < P; ++j) {
                    if (j == i) continue;
                    int silent = v ? 0 : 1;
                    for (int k = 0; k < P; ++k)
                        if (k != i && k != j && !spk[static_cast<std::size_t>(k)]) ++silent;
                    const double pb = q.q_bite(silent, own[static_cast<std::size_t>(j)]);
                    like[v] *= bites[static_cast<std::size_t>(j)] ? pb : 1.0 - pb;
                }
            }
            const double num = prior * like[1];
            const double den = num + (1.0 - prior) * like[0];
            out.speaking[static_cast<std::size_t>(s * P + i)] = den > 0.0 ? num / den : prior;

            int silent = 0;
            for (int j = 0; j < P; ++j)
                if (j != i && !spk[static_cast<std::size_t>(j)]) ++silent;
            out.biting[static_cast<std::size_t>(s * P + i)] = q.q_bite(silent, own[static_cast<std::size_t>(i)]);
        }
    }
    return out;
}

OracleScore score_oracle(const SyntheticConfig& config, std::span<const SyntheticTrace> traces, OracleScope scope,
                         int first_segment) {
    require(!traces.empty(), "score_oracle: no traces");
    ConfusionCounts spk, bite;
    for (const auto& tr : traces) {
        const auto post = bayes_oracle(config, tr, scope);
        const int P = tr.num_persons();
        std::vector<std::uint8_t> ps, ys, pb, yb;
        for (int s = first_segment; s < tr.num_segments(); ++s)
            for (int i = 0; i < P; ++i) {
                const auto r = static_cast<std::size_t>(s * P + i);
                ps.push_back(post.speaking[r] >= 0.5);
                ys.push_back(tr.speaking[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
                pb.push_back(post.biting[r] >= 0.5);
                yb.push_back(tr.biting[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)]);
            }
        if (ys.empty()) continue;
        spk += confusion(ps, ys);
        bite += confusion(pb, yb);
    }
    return {metrics(spk).f1, metrics(bite).f1};
}

BaseRates analytic_base_rates(const SyntheticConfig& cfg, int num_segments) {
    cfg.validate();
    require(num_segments >= 1, "analytic_base_rates: need at least one segment");
    const int P = cfg.persons_per_session;
    const RuleTables q(cfg);
    const int V = 1 << P;
    const int codes = ipow(P, P);

    std::vector<double> gaze_w(static_cast<std::size_t>(codes));
    std::vector<std::vector<int>> gaze_G(static_cast<std::size_t>(codes));
    std::vector<int> target;
    for (int code = 0; code < codes; ++code) {
        decode_gaze(code, P, target);
        gaze_w[static_cast<std::size_t>(code)] = gaze_prob(target, cfg.away_probability, P);
        gaze_G[static_cast<std::size_t>(code)] = gazed_counts(target, P);
    }

    std::vector<double> dist(static_cast<std::size_t>(V), 0.0);
    double speak_sum = 0.0, bite_sum = 0.0;
    for (int s = 0; s < num_segments; ++s) {
        std::vector<double> next(static_cast<std::size_t>(V), 0.0);
        // s = 0 has no past: one pseudo-state with nobody having spoken and
        // own-silence indicator 0
        const int prev_states = s == 0 ? 1 : V;
        for (int vp = 0; vp < prev_states; ++vp) {
            const double wp = s == 0 ? 1.0 : dist[static_cast<std::size_t>(vp)];
            if (wp == 0.0) continue;
            std::vector<int> prev(static_cast<std::size_t>(P), 0), own(static_cast<std::size_t>(P), 0);
            if (s > 0)
                for (int i = 0; i < P; ++i) {
                    for (int j = 0; j < P; ++j)
                        if (j != i && (vp >> j & 1)) ++prev[static_cast<std::size_t>(i)];
                    own[static_cast<std::size_t>(i)] = (vp >> i & 1) ? 0 : 1;
                }
            for (int code = 0; code < codes; ++code) {
                const double wg = wp * gaze_w[static_cast<std::size_t>(code)];
                if (wg == 0.0) continue;
                const auto& G = gaze_G[static_cast<std::size_t>(code)];
                std::vector<double> ps(static_cast<std::size_t>(P));
                for (int j = 0; j < P; ++j)
                    ps[static_cast<std::size_t>(j)] = q.q_speak(prev[static_cast<std::size_t>(j)], G[static_cast<std::size_t>(j)]);
                for (int v = 0; v < V; ++v) {
                    double w = wg;
                    for (int j = 0; j < P; ++j) w *= (v >> j & 1) ? ps[static_cast<std::size_t>(j)] : 1.0 - ps[static_cast<std::size_t>(j)];
                    if (w == 0.0) continue;
                    next[static_cast<std::size_t>(v)] += w;
                    for (int i = 0; i < P; ++i) {
                        if (v >> i & 1) speak_sum += w;
                        int silent = 0;
                        for (int j = 0; j < P; ++j)
                            if (j != i && !(v >> j & 1)) ++silent;
                        bite_sum += w * q.q_bite(silent, own[static_cast<std::size_t>(i)]);
                    }
                }
            }
        }
        dist = std::move(next);
    }
    const double n = static_cast<double>(num_segments) * P;
    return {speak_sum / n, bite_sum / n};
}

BaseRates measured_base_rates(std::span<const SyntheticTrace> traces) {
    double spk = 0.0, bite = 0.0, n = 0.0;
    for (const auto& tr : traces)
        for (int s = 0; s < tr.num_segments(); ++s)
            for (int i = 0; i < tr.num_persons(); ++i) {
                spk += tr.speaking[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)];
                bite += tr.biting[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)];
                n += 1.0;
            }
    require(n > 0, "measured_base_rates: no segments");
    return {spk / n, bite / n};
}

}  // namespace m3pt
