#include "doctest.h"
#include "test_util.hpp"

#include "m3pt/data_io.hpp"

#include <fstream>
#include <set>
#include <sstream>

using namespace m3pt;
using m3pt::testing::random_session;
using m3pt::testing::temp_dir;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::filesystem::path& p, const std::string& s) { std::ofstream(p) << s; }

std::vector<std::string> ids(int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("s" + std::to_string(i));
    return v;
}

}  // namespace

TEST_SUITE("data_io") {

TEST_CASE("sessions survive a write and read exactly") {
    const auto dir = temp_dir("roundtrip");
    std::vector<SessionTimeline> sessions{random_session("a", 3, 10.0, default_modalities(), 1),
                                          random_session("b", 2, 12.0, default_modalities(), 2)};
    write_sessions(sessions, dir);
    const auto m = read_manifest(dir);
    CHECK(m.sessions == std::vector<std::string>{"a", "b"});
    CHECK(m.modalities == default_modalities());
    const auto back = load_sessions(m);
    REQUIRE(back.size() == 2);
    for (std::size_t n = 0; n < 2; ++n) {
        CHECK(back[n].persons == sessions[n].persons);
        CHECK(back[n].duration_s == sessions[n].duration_s);
        for (std::size_t s = 0; s < sessions[n].streams.size(); ++s)
            CHECK(back[n].streams[s].values == sessions[n].streams[s].values);
    }
    CHECK(read_manifest(dir / "manifest.json").sessions.size() == 2);
}

TEST_CASE("stream files use the documented header") {
    const auto dir = temp_dir("header");
    write_sessions(std::vector{random_session("a", 2, 1.0, default_modalities(), 3)}, dir);
    const auto gaze = slurp(dir / "a" / stream_file_name("p0", default_modalities()[0]));
    CHECK(gaze.rfind("timestamp,c0,c1\n", 0) == 0);
    const auto spk = slurp(dir / "a" / stream_file_name("p1", Modality::discrete(ModalityKind::speaker)));
    CHECK(spk.rfind("timestamp,value\n", 0) == 0);
}

TEST_CASE("missing stream names the person and modality") {
    const auto dir = temp_dir("missing");
    write_sessions(std::vector{random_session("a", 2, 4.0, default_modalities(), 4)}, dir);
    std::filesystem::remove(dir / "a" / stream_file_name("p1", Modality::continuous(ModalityKind::headpose, 3)));
    try {
        load_session(dir / "a");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(p1, headpose)") != std::string::npos);
    }
}

TEST_CASE("schema errors carry file and line") {
    const auto dir = temp_dir("schema");
    write_sessions(std::vector{random_session("a", 2, 2.0, default_modalities(), 5)}, dir);
    const auto file = dir / "a" / stream_file_name("p0", default_modalities()[0]);
    auto text = slurp(file);
    // break the third data row (line 4)
    std::size_t pos = 0;
    for (int n = 0; n < 3; ++n) pos = text.find('\n', pos) + 1;
    text.insert(pos, "0.2,1\n");
    spit(file, text);
    try {
        load_session(dir / "a");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(":4:") != std::string::npos);
    }
}

TEST_CASE("missing cells are forward filled and a blank stream is zero filled") {
    const auto dir = temp_dir("gaps");
    auto s = random_session("a", 2, 1.0, default_modalities(), 6);
    s.stream(0, 0).values.row(3).setConstant(std::numeric_limits<double>::quiet_NaN());
    s.stream(1, 0).values.setConstant(std::numeric_limits<double>::quiet_NaN());
    write_sessions(std::vector{s}, dir);
    const auto back = load_session(dir / "a");
    CHECK(back.stream(0, 0).values.row(3) == back.stream(0, 0).values.row(2));
    CHECK(back.zero_filled[1 * 6 + 0]);
    CHECK(back.stream(1, 0).values.isZero());
}

TEST_CASE("duration mismatch beyond one frame is rejected") {
    const auto dir = temp_dir("duration");
    write_sessions(std::vector{random_session("a", 2, 2.0, default_modalities(), 7)}, dir);
    const auto meta_file = dir / "a" / "session.json";
    auto meta = nlohmann::json::parse(slurp(meta_file));
    meta["duration_s"] = 3.0;
    spit(meta_file, meta.dump());
    CHECK_THROWS_AS(load_session(dir / "a"), ConfigError);
}

TEST_CASE("missing artifacts") {
    const auto dir = temp_dir("absent");
    CHECK_THROWS_AS(read_manifest(dir), MissingArtifact);
    write_sessions(std::vector{random_session("a", 2, 1.0, default_modalities(), 8)}, dir);
    std::filesystem::remove_all(dir / "a");
    CHECK_THROWS_AS(read_manifest(dir), MissingArtifact);
}

TEST_CASE("folds: 30 sessions give 29/1 splits with distinct test sessions") {
    const auto all = ids(30);
    const auto folds = make_folds(all, 3, 42);
    REQUIRE(folds.size() == 3);
    std::set<std::string> tests;
    for (const auto& f : folds) {
        CHECK(f.train.size() == 29);
        CHECK(f.test.size() == 1);
        tests.insert(f.test[0]);
        for (const auto& t : f.train) CHECK(t != f.test[0]);
    }
    CHECK(tests.size() == 3);
    const auto again = make_folds(all, 3, 42);
    for (std::size_t n = 0; n < 3; ++n) CHECK(again[n].test == folds[n].test);
    CHECK_THROWS_AS(make_folds(ids(2), 3, 1), InvalidArgument);
}

TEST_CASE("session store logs access per phase") {
    auto store = SessionStore::in_memory(
        {random_session("a", 2, 1.0, default_modalities(), 9), random_session("b", 2, 1.0, default_modalities(), 10)});
    CHECK(store.ids() == std::vector<std::string>{"a", "b"});
    store.load("a", "train");
    store.load("b", "eval");
    CHECK(store.log().sessions("train") == std::set<std::string>{"a"});
    CHECK(store.log().sessions("eval") == std::set<std::string>{"b"});
    CHECK_THROWS_AS(store.load("zzz", "train"), InvalidArgument);

    const auto dir = temp_dir("store");
    write_sessions(std::vector{random_session("c", 2, 1.0, default_modalities(), 11)}, dir);
    auto disk = SessionStore::from_manifest(read_manifest(dir));
    disk.load("c", "tok");
    CHECK(disk.log().files("tok").size() == 1 + 2 * 6);
}

}  // TEST_SUITE
