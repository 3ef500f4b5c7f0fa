#include "doctest.h"
#include "test_util.hpp"

#include "m3pt/autograd.hpp"
#include "m3pt/block_mask.hpp"
#include "m3pt/optim.hpp"
#include "m3pt/rng.hpp"

using namespace m3pt;
using namespace m3pt::ag;
using m3pt::testing::gradient_rel_error;
using m3pt::testing::numeric_gradient;

namespace {

Matrix randn(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// Projects f(x) to a scalar with fixed random weights and compares the
// backward gradient of every input with central differences.
void check_grad(const std::vector<Matrix>& inputs, const std::function<Var(std::vector<Var>&)>& f,
                double tol = 1e-6, std::uint64_t seed = 3) {
    std::vector<Matrix> xs = inputs;
    Rng rng(seed);
    Matrix proj;
    auto eval = [&](bool grad, std::vector<Var>* keep) {
        std::vector<Var> vars;
        for (auto& x : xs) vars.push_back(parameter(x));
        Var out = f(vars);
        if (proj.size() == 0) proj = randn(out.rows(), out.cols(), rng);
        Var s = sum(mul(out, constant(proj)));
        if (grad) backward(s);
        if (keep) *keep = vars;
        return s.item();
    };
    std::vector<Var> vars;
    eval(true, &vars);
    for (std::size_t n = 0; n < xs.size(); ++n) {
        const Matrix analytic = vars[n].has_grad() ? vars[n].grad() : Matrix::Zero(xs[n].rows(), xs[n].cols());
        const Matrix numeric = numeric_gradient(xs[n], [&] { return eval(false, nullptr); });
        CAPTURE(n);
        CHECK(gradient_rel_error(analytic, numeric) < tol);
    }
}

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("elementwise and matrix ops") {
    Rng rng(1);
    const Matrix a = randn(3, 4, rng), b = randn(3, 4, rng), c = randn(4, 2, rng), r = randn(1, 4, rng);
    check_grad({a, b}, [](auto& v) { return add(v[0], v[1]); });
    check_grad({a, b}, [](auto& v) { return sub(v[0], v[1]); });
    check_grad({a, b}, [](auto& v) { return mul(v[0], v[1]); });
    check_grad({a}, [](auto& v) { return scale(v[0], -2.5); });
    check_grad({a, c}, [](auto& v) { return matmul(v[0], v[1]); });
    check_grad({a, r}, [](auto& v) { return add_row(v[0], v[1]); });
    check_grad({a}, [](auto& v) { return relu(v[0]); });
    check_grad({a}, [](auto& v) { return mean(v[0]); });
    check_grad({a}, [](auto& v) { return reshape(v[0], 2, 6); });
    check_grad({a}, [](auto& v) { return slice_rows(v[0], 1, 2); });
    check_grad({a, b}, [](auto& v) {
        const Var parts[2] = {v[0], v[1]};
        return concat_rows(parts);
    });
    check_grad({a}, [](auto& v) { return shift_rows(v[0], 1); });
    check_grad({a, b}, [](auto& v) {
        const int rows[2] = {0, 2};
        return select_rows(v[0], v[1], rows);
    });
    check_grad({c}, [](auto& v) {
        const int idx[5] = {3, 0, 3, 1, 2};
        return gather_rows(v[0], idx);
    });
    check_grad({a, b}, [](auto& v) { return mse(v[0], v[1]); });
}

TEST_CASE("layer norm and weighted BCE") {
    Rng rng(2);
    const Matrix x = randn(5, 6, rng), g = randn(1, 6, rng), b = randn(1, 6, rng);
    check_grad({x, g, b}, [](auto& v) { return layer_norm(v[0], v[1], v[2]); }, 1e-5);
    const Matrix logits = randn(6, 1, rng) * 3.0;
    const std::vector<double> targets{1, 0, 1, 1, 0, 0}, weights{2.0, 0.5, 2.0, 2.0, 0.5, 0.5};
    check_grad({logits}, [&](auto& v) { return weighted_bce_with_logits(v[0], targets, weights); });
    // value check: BCE(0, 1) = log 2
    const std::vector<double> t1{1}, w1{1};
    CHECK(weighted_bce_with_logits(constant(Matrix::Zero(1, 1)), t1, w1).item() == doctest::Approx(std::log(2.0)));
    // large logits stay finite
    Matrix big(1, 1);
    big << 800.0;
    const std::vector<double> t0{0};
    CHECK(std::isfinite(weighted_bce_with_logits(constant(big), t0, w1).item()));
}

TEST_CASE("conv1d and its transpose") {
    Rng rng(4);
    const int seq = 5, k = 3, cin = 2, cout = 3;
    const Matrix x = randn(2 * seq, cin, rng), w = randn(k * cin, cout, rng), b = randn(1, cout, rng);
    check_grad({x, w, b}, [&](auto& v) { return conv1d(v[0], v[1], v[2], seq, k); });
    // transposed weight: tap j is the transpose of conv1d's tap j
    Matrix wt(k * cout, cin);
    for (int j = 0; j < k; ++j) wt.middleRows(j * cout, cout) = w.middleRows(j * cin, cin).transpose();
    const Matrix y = randn(2 * seq, cout, rng), bt = randn(1, cin, rng);
    check_grad({y, wt, bt}, [&](auto& v) { return conv_transpose1d(v[0], v[1], v[2], seq, k); });

    // transpose is the adjoint of the input map: <conv(x), y> = <x, convT(y)>
    const Var zero_b = constant(Matrix::Zero(1, cout)), zero_bt = constant(Matrix::Zero(1, cin));
    const double lhs = (conv1d(constant(x), constant(w), zero_b, seq, k).value().array() * y.array()).sum();
    const double rhs = (conv_transpose1d(constant(y), constant(wt), zero_bt, seq, k).value().array() * x.array()).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    // sequences do not bleed into each other
    Matrix x2 = x;
    x2.row(seq).setConstant(100.0);
    const Matrix o1 = conv1d(constant(x), constant(w), zero_b, seq, k).value();
    const Matrix o2 = conv1d(constant(x2), constant(w), zero_b, seq, k).value();
    CHECK((o1.topRows(seq) - o2.topRows(seq)).norm() == 0.0);
}

TEST_CASE("masked attention gradients, including a query offset") {
    Rng rng(5);
    const MaskSpec spec{3, 2, 2};
    const auto mask = build_blockwise_mask(spec);
    const Matrix q = randn(12, 4, rng), k = randn(12, 4, rng), v = randn(12, 4, rng);
    check_grad({q, k, v}, [&](auto& x) { return masked_attention(x[0], x[1], x[2], mask, 2); }, 1e-5);
    // last block of queries against the full key set
    const Matrix q2 = randn(4, 4, rng);
    AttentionOptions ao;
    ao.query_offset = 8;
    check_grad({q2, k, v}, [&](auto& x) { return masked_attention(x[0], x[1], x[2], mask, 2, ao); }, 1e-5);
    // strict past: fully blocked rows give zero context and zero gradient
    const auto sp = build_strict_past_mask(spec);
    check_grad({q, k, v}, [&](auto& x) { return masked_attention(x[0], x[1], x[2], sp, 2); }, 1e-5);
}

TEST_CASE("offset attention equals the matching rows of the full pass") {
    Rng rng(6);
    const auto mask = build_blockwise_mask({4, 3, 2});
    const Matrix q = randn(24, 8, rng), k = randn(24, 8, rng), v = randn(24, 8, rng);
    const Matrix full = masked_attention(constant(q), constant(k), constant(v), mask, 4).value();
    AttentionOptions ao;
    ao.query_offset = 12;
    const Matrix part = masked_attention(constant(q.middleRows(12, 6)), constant(k.topRows(18)),
                                         constant(v.topRows(18)), mask, 4, ao)
                            .value();
    CHECK((part - full.middleRows(12, 6)).norm() < 1e-12);
}

TEST_CASE("attention weights are exactly zero on blocked keys") {
    Rng rng(7);
    const auto mask = build_strict_past_mask({3, 2, 2});
    AttentionRecord rec;
    AttentionOptions ao;
    ao.record = &rec;
    const Matrix q = randn(12, 4, rng), k = randn(12, 4, rng), v = randn(12, 4, rng);
    const Matrix out = masked_attention(constant(q), constant(k), constant(v), mask, 2, ao).value();
    REQUIRE(rec.weights.size() == 2);
    for (const auto& w : rec.weights)
        for (Eigen::Index r = 0; r < 12; ++r) {
            double s = 0;
            for (Eigen::Index c = 0; c < 12; ++c) {
                if (!mask.allow(r, c)) CHECK(w(r, c) == 0.0);
                s += w(r, c);
            }
            if (mask.row_blocked(r)) CHECK(s == 0.0);
            else CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    for (Eigen::Index r = 0; r < 4; ++r) CHECK(out.row(r).isZero(0.0));
}

TEST_CASE("no-grad guard records nothing") {
    Var p = parameter(Matrix::Ones(2, 2));
    {
        NoGradGuard g;
        CHECK_FALSE(grad_enabled());
        Var y = scale(p, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
}

TEST_CASE("dropout keeps the expectation and is off at p = 0") {
    Rng rng(8);
    const Var x = constant(Matrix::Ones(200, 50));
    const Var y = dropout(x, 0.3, rng);
    CHECK(y.value().mean() == doctest::Approx(1.0).epsilon(0.03));
    const Var z = dropout(x, 0.0, rng);
    CHECK(z.value() == x.value());
}

TEST_CASE("Adam step clips and moves against the gradient") {
    ParamSet ps;
    ps.add("w", Matrix::Constant(1, 2, 1.0));
    Adam opt(AdamSettings{});
    ps.get("w").mutable_grad() = Matrix::Constant(1, 2, 10.0);
    const double norm = opt.step(ps);
    CHECK(norm == doctest::Approx(std::sqrt(200.0)));
    CHECK(ps.get("w").value()(0, 0) < 1.0);
    CHECK_FALSE(ps.get("w").has_grad());
}

}  // TEST_SUITE
