#include "doctest.h"
#include "test_util.hpp"

#include "m3pt/vq_tokenizer.hpp"

#include <set>

using namespace m3pt;
using m3pt::testing::gradient_rel_error;
using m3pt::testing::numeric_gradient;

namespace {

TokenizerConfig small_config(int m = 6) {
    TokenizerConfig c;
    c.modality = Modality::continuous(ModalityKind::gaze, 2);
    c.latent_dim = 4;
    c.codebook_size = 8;
    c.frames_per_segment = m;
    c.conv_channel_widths = {5};
    c.kernel_size = 3;
    c.commitment_coefficient = 0.25;
    return c;
}

Matrix sinusoid_chunk(int m, double phase, double freq, double fps = 15.0) {
    Matrix x(m, 2);
    for (int r = 0; r < m; ++r) {
        const double t = r / fps;
        x(r, 0) = std::sin(2 * M_PI * freq * t + phase);
        x(r, 1) = std::cos(2 * M_PI * freq * t + phase);
    }
    return x;
}

}  // namespace

TEST_SUITE("vq_tokenizer") {

TEST_CASE("nearest entry breaks ties toward the lowest index") {
    Matrix e(3, 2);
    e << 1, 0, -1, 0, 1, 0;
    RowVector x(2);
    x << 0, 0;
    CHECK(nearest_entry(e, x) == 0);
    x << 0.9, 0;
    CHECK(nearest_entry(e, x) == 0);
    x << -0.2, 0;
    CHECK(nearest_entry(e, x) == 1);
}

TEST_CASE("quantize reports both selection terms") {
    Codebook cb;
    cb.entries.resize(2, 2);
    cb.entries << 0, 0, 2, 2;
    RowVector e(2);
    e << 0.5, 0.0;
    const auto q = quantize(e, cb, 0.25);
    CHECK(q.index == 0);
    CHECK(q.codebook_term == doctest::Approx(0.25));
    CHECK(q.commitment_term == doctest::Approx(0.0625));
    CHECK(q.quantized == cb.entries.row(0));
}

TEST_CASE("loss composition") {
    Matrix a = Matrix::Zero(2, 2), b = Matrix::Ones(2, 2);
    const auto l = tokenizer_loss(a, b, 0.4, 0.2);
    CHECK(l.reconstruction == doctest::Approx(1.0));
    CHECK(l.total == doctest::Approx(1.3));
}

TEST_CASE("selection is straight-through") {
    VqTokenizer tok(small_config(), 11);
    Rng rng(1);
    Matrix e(6, 4);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.normal();
    ag::Var ev = ag::parameter(e);
    std::vector<int> codes;
    ag::Var loss;
    const ag::Var q = tok.select(ev, codes, loss);
    // forward value is the selected entry
    const Matrix entries = tok.codebook().entries;
    for (int r = 0; r < 6; ++r) CHECK((q.value().row(r) - entries.row(codes[r])).norm() < 1e-12);
    // gradient to the embedding is the identity
    Matrix w(6, 4);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
    ag::backward(ag::sum(ag::mul(q, ag::constant(w))));
    CHECK((ev.grad() - w).norm() < 1e-12);
}

TEST_CASE("full tokenizer gradient matches the frozen-selection surrogate") {
    const auto cfg = small_config();
    VqTokenizer tok(cfg, 12);
    std::vector<Matrix> chunks;
    for (int n = 0; n < 3; ++n) chunks.push_back(sinusoid_chunk(cfg.frames_per_segment, n * 0.7, 1.3));
    tok.set_normalization(compute_normalization(chunks));
    Matrix batch(3 * cfg.frames_per_segment, 2);
    for (int n = 0; n < 3; ++n) batch.middleRows(n * cfg.frames_per_segment, cfg.frames_per_segment) = tok.normalize(chunks[n]);

    auto g = tok.forward(batch);
    tok.params().zero_grad();
    ag::backward(g.total);
    const auto codes1 = g.encode_codes, codes2 = g.decode_codes;
    const Matrix off1 = g.quantized.value() - g.embeddings.value();
    const Matrix off2 = g.requantized.value() - g.up.value();
    // stop-gradient operands frozen at the base point
    const Matrix e_base = g.embeddings.value(), up_base = g.up.value();
    const Matrix q1_base = g.quantized.value(), q2_base = g.requantized.value();

    // straight-through written out: selection fixed, offsets frozen
    auto surrogate = [&] {
        ag::NoGradGuard ng;
        const ag::Var x = ag::constant(batch);
        const ag::Var e = tok.encode_frames(x);
        const ag::Var& cb = tok.params().get("codebook");
        auto sel = [&](const ag::Var& emb, const std::vector<int>& codes, const Matrix& emb0, const Matrix& q0) {
            const ag::Var q = ag::gather_rows(cb, codes);
            return ag::add(ag::mse(ag::constant(emb0), q),
                           ag::scale(ag::mse(emb, ag::constant(q0)), cfg.commitment_coefficient));
        };
        const ag::Var z = tok.aggregate(ag::add(e, ag::constant(off1)), 3);
        const ag::Var up = tok.up_project(z);
        const ag::Var rec = tok.decode_frames(ag::add(up, ag::constant(off2)));
        const ag::Var total = ag::add(ag::mse(rec, x), ag::scale(ag::add(sel(e, codes1, e_base, q1_base), sel(up, codes2, up_base, q2_base)), 0.5));
        return total.item();
    };
    CHECK(surrogate() == doctest::Approx(g.total.item()).epsilon(1e-12));

    for (auto& [name, var] : tok.params().entries()) {
        Matrix& value = var.mutable_value();
        const Matrix analytic = var.has_grad() ? var.grad() : Matrix::Zero(value.rows(), value.cols());
        const Matrix numeric = numeric_gradient(value, surrogate);
        CAPTURE(name);
        CHECK(gradient_rel_error(analytic, numeric) < 1e-3);
    }
}

TEST_CASE("normalisation guards constant channels") {
    std::vector<Matrix> segs{Matrix::Constant(4, 2, 3.0)};
    const auto st = compute_normalization(segs);
    CHECK(st.mean(0) == doctest::Approx(3.0));
    CHECK(st.stddev(0) == 1.0);
}

TEST_CASE("save and load reproduce encodings") {
    const auto cfg = small_config();
    VqTokenizer tok(cfg, 13);
    std::vector<Matrix> chunks;
    for (int n = 0; n < 8; ++n) chunks.push_back(sinusoid_chunk(cfg.frames_per_segment, n * 0.4, 1.0));
    TokenizerTrainSettings s;
    s.epochs = 2;
    s.batch_size = 4;
    train_tokenizer(tok, chunks, s);
    const auto dir = m3pt::testing::temp_dir("vq");
    tok.save(dir / "t.m3vq");
    const auto back = VqTokenizer::load(dir / "t.m3vq");
    CHECK(back.config().latent_dim == cfg.latent_dim);
    for (const auto& c : chunks) {
        const auto a = tok.encode_segment(c), b = back.encode_segment(c);
        CHECK(a.frame_codes == b.frame_codes);
        CHECK((a.z - b.z).norm() == 0.0);
    }
    CHECK_THROWS_AS(VqTokenizer::load(dir / "missing.m3vq"), IoError);
    CHECK_THROWS_AS(tok.encode_segment(Matrix::Zero(3, 2)), InvalidArgument);
}

TEST_CASE("training lowers reconstruction error on sinusoids") {
    auto cfg = small_config(15);
    cfg.latent_dim = 8;
    cfg.codebook_size = 16;
    cfg.conv_channel_widths = {8};
    VqTokenizer tok(cfg, 14);
    std::vector<Matrix> chunks;
    Rng rng(2);
    for (int n = 0; n < 64; ++n) chunks.push_back(sinusoid_chunk(cfg.frames_per_segment, rng.uniform(0, 6.28), 0.5));
    TokenizerTrainSettings s;
    s.epochs = 25;
    s.batch_size = 16;
    s.learning_rate = 3e-3;
    const auto report = train_tokenizer(tok, chunks, s);
    CHECK(report.epochs_run == 25);
    CHECK(report.epoch_losses.back() < report.epoch_losses.front());
    CHECK(report.active_entries >= 2);
    std::vector<Matrix> recon;
    for (const auto& c : chunks) recon.push_back(tok.decode_latent(tok.encode_segment(c)).frames);
    CHECK(normalized_mse(chunks, recon) < 0.5);
}

TEST_CASE("config validation") {
    auto c = small_config();
    c.kernel_size = 2;
    CHECK_THROWS(c.validate());
    c = small_config();
    c.codebook_size = 0;
    CHECK_THROWS(c.validate());
    const auto j = to_json(small_config());
    CHECK(tokenizer_config_from_json(j).frames_per_segment == 6);
}

}  // TEST_SUITE
