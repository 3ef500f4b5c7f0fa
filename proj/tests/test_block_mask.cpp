#include "doctest.h"
#include "test_util.hpp"

#include "m3pt/block_mask.hpp"

#include <fstream>
#include <sstream>

using namespace m3pt;

namespace {

// Reference predicate written directly from position arithmetic.
bool reference(MaskKind kind, int P, int M, std::size_t q, std::size_t k, bool diag, bool own) {
    const std::size_t B = static_cast<std::size_t>(P * M);
    const std::size_t tq = q / B, tk = k / B;
    const std::size_t iq = (q % B) / M, ik = (k % B) / M;
    switch (kind) {
        case MaskKind::blockwise:
            if (tk < tq) return true;
            if (tk > tq) return false;
            if (iq != ik) return true;
            return own && q != k;
        case MaskKind::strict_past: return tk < tq;
        case MaskKind::lower_triangular: return diag ? k <= q : k < q;
    }
    return false;
}

}  // namespace

TEST_SUITE("block_mask") {

TEST_CASE("builders match the reference predicate on small grids") {
    for (int T = 1; T <= 4; ++T)
        for (int P = 1; P <= 3; ++P)
            for (int M = 1; M <= 3; ++M)
                for (auto kind : {MaskKind::blockwise, MaskKind::strict_past, MaskKind::lower_triangular})
                    for (bool flag : {false, true}) {
                        MaskOptions opt;
                        opt.include_diagonal = flag;
                        opt.allow_own_modalities = flag;
                        const auto mask = build_mask(kind, {T, P, M}, opt);
                        REQUIRE(mask.length() == static_cast<std::size_t>(T * P * M));
                        for (std::size_t q = 0; q < mask.length(); ++q)
                            for (std::size_t k = 0; k < mask.length(); ++k)
                                REQUIRE(mask.allow(q, k) == reference(kind, P, M, q, k, flag, flag));
                    }
}

TEST_CASE("paper-sized layout has L = 216") {
    const auto m = build_blockwise_mask({12, 3, 6});
    CHECK(m.length() == 216);
    // first block: person 0 sees persons 1, 2 only
    CHECK_FALSE(m.allow(0, 0));
    CHECK_FALSE(m.allow(0, 5));
    CHECK(m.allow(0, 6));
    CHECK(m.allow(0, 17));
    CHECK_FALSE(m.allow(0, 18));
    // later block sees all of the past
    CHECK(m.allow(18, 0));
    CHECK(m.allow(18, 5));
}

TEST_CASE("single token blockwise mask is fully blocked") {
    const auto m = build_blockwise_mask({1, 1, 1});
    CHECK(m.length() == 1);
    CHECK_FALSE(m.allow(0, 0));
    CHECK(m.row_blocked(0));
}

TEST_CASE("lower and blockwise differ exactly on own current-step cells and future others") {
    const MaskSpec spec{3, 2, 2};
    const auto a = build_blockwise_mask(spec);
    const auto b = build_lower_triangular_mask(spec);
    bool differ = false;
    for (std::size_t q = 0; q < a.length(); ++q)
        for (std::size_t k = 0; k < a.length(); ++k)
            if (a.allow(q, k) != b.allow(q, k)) {
                differ = true;
                CHECK(q / 4 == k / 4);  // only inside a timestep block
            }
    CHECK(differ);
}

TEST_CASE("strict past mask leaves block 0 fully blocked") {
    const auto m = build_strict_past_mask({3, 2, 2});
    for (std::size_t q = 0; q < 4; ++q) CHECK(m.row_blocked(q));
    CHECK_FALSE(m.row_blocked(4));
}

TEST_CASE("memory budget is enforced") {
    MaskOptions opt;
    opt.memory_budget_bytes = 100;
    CHECK_THROWS_AS(build_blockwise_mask({12, 3, 6}, opt), ConfigError);
    CHECK_THROWS_AS(build_blockwise_mask({0, 3, 6}), InvalidArgument);
}

TEST_CASE("prefix keeps the leading blocks") {
    const auto m = build_blockwise_mask({4, 2, 3});
    const auto p = m.prefix(12);
    CHECK(p == build_blockwise_mask({2, 2, 3}));
}

TEST_CASE("text and bitmap exports") {
    const auto m = build_blockwise_mask({2, 2, 1});
    const std::string text = mask_to_text(m);
    CHECK(text == "0100\n1000\n1101\n1110\n");
    const auto dir = m3pt::testing::temp_dir("mask");
    export_mask_bitmap(m, dir / "m.pbm");
    export_mask_text(m, dir / "m.txt");
    std::ifstream in(dir / "m.pbm");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string pbm = ss.str();
    CHECK(pbm.rfind("P1\n4 4\n", 0) == 0);
    // allowed cells are white (0)
    CHECK(pbm.find("1 0 1 1") != std::string::npos);
    std::ifstream tin(dir / "m.txt");
    std::stringstream ts;
    ts << tin.rdbuf();
    CHECK(ts.str() == text);
}

TEST_CASE("mask kind names round trip") {
    for (auto k : {MaskKind::blockwise, MaskKind::strict_past, MaskKind::lower_triangular})
        CHECK(mask_kind_from_string(to_string(k)) == k);
    CHECK_THROWS(mask_kind_from_string("causal"));
}

}  // TEST_SUITE
