#include "doctest.h"
#include "test_util.hpp"

#include "m3pt/data_io.hpp"

using namespace m3pt;

namespace {

SyntheticConfig planted(int sessions, std::uint64_t seed) {
    SyntheticConfig c;
    c.num_sessions = sessions;
    c.seed = seed;
    c.a = c.c = c.d = 0.0;
    c.b = 6.0;
    c.speak_bias = -3.0;
    c.away_probability = 0.1;
    return c;
}

}  // namespace

TEST_SUITE("synthetic") {

TEST_CASE("default config: 30 triadic sessions of 180 s") {
    SyntheticConfig c;
    c.num_sessions = 30;
    c.duration_s = 6.0;  // keep the test quick; shape is what matters
    const auto d = generate_synthetic(c);
    CHECK(d.sessions.size() == 30);
    CHECK(d.traces.size() == 30);
    CHECK(d.sessions[0].num_persons() == 3);
    CHECK(d.sessions[0].modalities == default_modalities(c.pose_keypoints, c.word_dim));
    CHECK(d.sessions[0].stream(0, 0).size() == 90);
    CHECK_NOTHROW(d.sessions[0].validate());
    CHECK(SyntheticConfig{}.num_sessions == 30);
    CHECK(SyntheticConfig{}.persons_per_session == 3);
}

TEST_CASE("same seed, same data; other seed, other data") {
    SyntheticConfig c;
    c.num_sessions = 2;
    c.duration_s = 9.0;
    c.seed = 7;
    const auto a = generate_synthetic(c), b = generate_synthetic(c);
    for (std::size_t s = 0; s < a.sessions[1].streams.size(); ++s)
        CHECK(a.sessions[1].streams[s].values == b.sessions[1].streams[s].values);
    c.seed = 8;
    const auto x = generate_synthetic(c);
    CHECK(x.sessions[0].streams[0].values != a.sessions[0].streams[0].values);
}

TEST_CASE("segment labels recover the latent trace") {
    SyntheticConfig c;
    c.num_sessions = 3;
    c.duration_s = 36.0;
    c.seed = 3;
    const auto d = generate_synthetic(c);
    for (std::size_t n = 0; n < d.sessions.size(); ++n) {
        const auto grids = segment_session(d.sessions[n], SegmentConfig{});
        REQUIRE(grids.size() == 1);
        for (int t = 0; t < 12; ++t)
            for (int i = 0; i < 3; ++i) {
                CHECK(grids[0].speaking_label(t, i) == (d.traces[n].speaking[t][i] != 0));
                CHECK(grids[0].biting_label(t, i) == (d.traces[n].biting[t][i] != 0));
            }
    }
}

TEST_CASE("noisy sigmoid") {
    CHECK(noisy_sigmoid(0.0, 0.7) == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(noisy_sigmoid(1.2, 0.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.2))));
    CHECK(noisy_sigmoid(2.0, 1.0) + noisy_sigmoid(-2.0, 1.0) == doctest::Approx(1.0));
    // noise pulls probabilities toward 1/2
    CHECK(noisy_sigmoid(2.0, 1.0) < noisy_sigmoid(2.0, 0.0));
}

TEST_CASE("analytic base rates agree with sampled traces") {
    SyntheticConfig c;
    c.num_sessions = 60;
    c.duration_s = 60.0;
    c.seed = 11;
    const auto d = generate_synthetic(c);
    const auto m = measured_base_rates(d.traces);
    const auto a = analytic_base_rates(c, c.segments_per_session());
    CHECK(m.speaking == doctest::Approx(a.speaking).epsilon(0.03));
    CHECK(std::abs(m.biting - a.biting) < 0.02);
}

TEST_CASE("oracle separates full scope from past only on the planted family") {
    const auto c = planted(40, 5);
    auto cfg = c;
    cfg.duration_s = 60.0;
    const auto d = generate_synthetic(cfg);
    const auto full = score_oracle(cfg, d.traces, OracleScope::full);
    const auto past = score_oracle(cfg, d.traces, OracleScope::past_only);
    const auto base = analytic_base_rates(cfg, cfg.segments_per_session());
    CHECK(base.speaking == doctest::Approx(0.69).epsilon(0.02));
    CHECK(full.speaking_f1 == doctest::Approx(0.96).epsilon(0.02));
    CHECK(past.speaking_f1 == doctest::Approx(2 * base.speaking / (1 + base.speaking)).epsilon(0.03));
    CHECK(full.speaking_f1 > past.speaking_f1 + 0.1);
}

TEST_CASE("deterministic coupling makes the full-scope oracle exact") {
    SyntheticConfig c;
    c.num_sessions = 10;
    c.duration_s = 60.0;
    c.a = c.c = c.d = 0.0;
    c.b = 40.0;
    c.speak_bias = -20.0;
    c.noise = 0.0;
    c.away_probability = 0.3;
    const auto d = generate_synthetic(c);
    CHECK(score_oracle(c, d.traces, OracleScope::full).speaking_f1 > 0.999);
}

TEST_CASE("posteriors are probabilities") {
    SyntheticConfig c;
    c.num_sessions = 2;
    c.duration_s = 30.0;
    const auto d = generate_synthetic(c);
    for (auto scope : {OracleScope::full, OracleScope::past_only}) {
        const auto p = bayes_oracle(c, d.traces[0], scope);
        CHECK(p.speaking.size() == 30);
        for (double v : p.speaking) CHECK((v >= 0.0 && v <= 1.0));
        for (double v : p.biting) CHECK((v >= 0.0 && v <= 1.0));
    }
}

TEST_CASE("config json round trip and validation") {
    auto c = planted(4, 9);
    const auto back = synthetic_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK_THROWS_AS(synthetic_config_from_json({{"bogus", 1}}), ConfigError);
    c.persons_per_session = 1;
    CHECK_THROWS(c.validate());
}

TEST_CASE("write_synthetic stores traces next to the sessions") {
    SyntheticConfig c;
    c.num_sessions = 2;
    c.duration_s = 6.0;
    const auto d = generate_synthetic(c);
    const auto dir = m3pt::testing::temp_dir("synth");
    const auto m = write_synthetic(d, c, dir);
    CHECK(std::filesystem::exists(dir / "synthetic.json"));
    CHECK(std::filesystem::exists(dir / m.sessions[0] / "latent.json"));
    const auto back = load_sessions(read_manifest(dir));
    CHECK(back[1].streams[3].values == d.sessions[1].streams[3].values);
}

}  // TEST_SUITE
