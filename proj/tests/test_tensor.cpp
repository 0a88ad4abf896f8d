#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hmr/gradcheck.hpp"
#include "hmr/ops.hpp"

using namespace hmr;

namespace {

using DT = Tensor<double>;

DT rand_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
    return gaussian<double>(rng, std::move(shape), stddev);
}

double check_params(const std::function<DT(Tape<double>&)>& loss, std::vector<DT*> params,
                    double h = 1e-5) {
    return grad_check_params<double>(loss, params, h);
}

}  // namespace

TEST_CASE("matmul forward examples") {
    auto a = DT::from({2, 2}, {1, 0, 0, 1});
    auto b = DT::from({2, 2}, {1, 2, 3, 4});
    auto c = matmul<double>(nullptr, a, b);
    CHECK(c.data()[0] == 1);
    CHECK(c.data()[1] == 2);
    CHECK(c.data()[2] == 3);
    CHECK(c.data()[3] == 4);

    auto r = matmul<double>(nullptr, DT::from({1, 2}, {1, 2}), DT::from({2, 1}, {3, 4}));
    CHECK(r.shape() == Shape{1, 1});
    CHECK(r.data()[0] == doctest::Approx(11.0));

    CHECK_THROWS_AS(matmul<double>(nullptr, DT::zeros({2, 3}), DT::zeros({2, 3})), ShapeError);
    try {
        matmul<double>(nullptr, DT::zeros({2, 3}), DT::zeros({2, 3}));
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);  // both shapes named
    }
}

TEST_CASE("matmul backward matches the hand-derived accumulation") {
    auto a = DT::from({2, 2}, {1, 0, 0, 1});
    auto b = DT::from({2, 2}, {2, 3, 4, 5});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum(&tape, matmul(&tape, a, b));
    backward(loss, tape);
    CHECK(a.grad()[0] == doctest::Approx(5));
    CHECK(a.grad()[1] == doctest::Approx(9));
    CHECK(a.grad()[2] == doctest::Approx(5));
    CHECK(a.grad()[3] == doctest::Approx(9));
    for (double g : b.grad()) CHECK(g == doctest::Approx(1));
}

TEST_CASE("softplus values and positivity") {
    auto x = DT::from({3}, {0.0, 100.0, -100.0});
    auto y = softplus<double>(nullptr, x);
    CHECK(y.data()[0] == doctest::Approx(0.6931471805599453).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(100.0).epsilon(1e-6));
    CHECK(y.data()[2] == doctest::Approx(3.72e-44).epsilon(0.01));
    CHECK(y.data()[2] > 0.0);

    Rng rng(7);
    auto r = rand_tensor(rng, {64}, 20.0);
    auto yr = softplus<double>(nullptr, r);
    for (double v : yr.data()) CHECK(v > 0.0);
}

TEST_CASE("sigmoid stays in (0,1)") {
    // strict openness holds up to |x| ~ 36 in double; beyond that the
    // upper bound saturates to 1.0 exactly
    Rng rng(11);
    auto r = rand_tensor(rng, {64}, 8.0);
    auto y = sigmoid<double>(nullptr, r);
    for (double v : y.data()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("silu values and gradient") {
    auto y = silu<double>(nullptr, DT::from({2}, {0.0, 1.0}));
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == doctest::Approx(0.7310585786).epsilon(1e-9));

    auto f = [](Tape<double>& t, const DT& x) { return sum(&t, silu(&t, x)); };
    CHECK(grad_check<double>(f, DT::from({1}, {0.5}), 1e-6) < 1e-6);
}

TEST_CASE("layer_norm forward examples") {
    auto gain = DT::full({4}, 1.0);
    auto bias = DT::zeros({4});
    auto y = layer_norm<double>(nullptr, DT::from({4}, {5, 5, 5, 5}), gain, bias, 1e-5);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.0));

    auto g2 = DT::full({2}, 1.0);
    auto b2 = DT::zeros({2});
    auto y2 = layer_norm<double>(nullptr, DT::from({2}, {1, -1}), g2, b2, 1e-5);
    CHECK(y2.data()[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(y2.data()[1] == doctest::Approx(-1.0).epsilon(1e-4));

    CHECK_THROWS_AS(layer_norm<double>(nullptr, DT::zeros({4}), gain, bias, 0.0), ContractError);
}

TEST_CASE("embedding_lookup gather, scatter and bounds") {
    auto table = DT::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    IntTensor idx({1}, {2});
    auto row = embedding_lookup<double>(nullptr, table, idx);
    CHECK(row.data()[0] == 0);
    CHECK(row.data()[1] == 0);
    CHECK(row.data()[2] == 1);

    table.set_requires_grad(true);
    Tape<double> tape;
    IntTensor dup({2}, {1, 1});
    auto loss = sum(&tape, embedding_lookup(&tape, table, dup));
    backward(loss, tape);
    CHECK(table.grad()[3] == doctest::Approx(2.0));
    CHECK(table.grad()[0] == 0.0);

    IntTensor oob({1}, {3});
    CHECK_THROWS_AS(embedding_lookup<double>(nullptr, table, oob), IndexError);
    try {
        embedding_lookup<double>(nullptr, table, oob);
    } catch (const IndexError& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
}

TEST_CASE("causal conv identity kernels and causality") {
    Rng rng(3);
    auto x = rand_tensor(rng, {6, 3});

    auto id1 = causal_depthwise_conv1d<double>(nullptr, x, DT::full({1, 3}, 1.0), DT::zeros({3}));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(id1.data()[i] == x.data()[i]);

    auto id2 = causal_depthwise_conv1d<double>(nullptr, x, DT::from({2, 3}, {0, 0, 0, 1, 1, 1}),
                                               DT::zeros({3}));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(id2.data()[i] == x.data()[i]);

    // perturbing t=5 leaves earlier outputs bit-identical
    auto kernels = rand_tensor(rng, {3, 3});
    auto bias = rand_tensor(rng, {3});
    auto y0 = causal_depthwise_conv1d<double>(nullptr, x, kernels, bias);
    auto x2 = DT::from(Shape(x.shape()), std::vector<double>(x.data().begin(), x.data().end()));
    for (std::size_t c = 0; c < 3; ++c) x2.data()[5 * 3 + c] += 7.0;
    auto y1 = causal_depthwise_conv1d<double>(nullptr, x2, kernels, bias);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t c = 0; c < 3; ++c) CHECK(y0.data()[t * 3 + c] == y1.data()[t * 3 + c]);
}

TEST_CASE("backward basics") {
    auto x = DT::from({3}, {1, 2, 3});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum(&tape, x);
    backward(loss, tape);
    for (double g : x.grad()) CHECK(g == 1.0);

    auto x2 = DT::from({2}, {1, 2});
    x2.set_requires_grad(true);
    Tape<double> t2;
    auto loss2 = sum(&t2, mul(&t2, x2, x2));
    backward(loss2, t2);
    CHECK(x2.grad()[0] == doctest::Approx(2.0));
    CHECK(x2.grad()[1] == doctest::Approx(4.0));

    Tape<double> t3;
    auto nonscalar = add(&t3, x2, x2);
    CHECK_THROWS_AS(backward(nonscalar, t3), ContractError);
}

TEST_CASE("backward twice with a reset in between is identical; without reset it accumulates") {
    Rng rng(5);
    auto x = rand_tensor(rng, {4});
    x.set_requires_grad(true);
    Tape<double> tape;
    auto loss = sum(&tape, silu(&tape, x));
    backward(loss, tape);
    std::vector<double> g1(x.grad().begin(), x.grad().end());

    backward(loss, tape);  // no reset: doubles
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(2 * g1[i]));

    x.zero_grad();
    loss.zero_grad();
    backward(loss, tape);
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == g1[i]);
}

TEST_CASE("grad_check oracle self-tests") {
    Rng rng(17);
    auto linear = [](Tape<double>& t, const DT& x) { return sum(&t, x); };
    CHECK(grad_check<double>(linear, rand_tensor(rng, {5}), 1e-5) < 1e-10);

    auto soft = [](Tape<double>& t, const DT& x) { return sum(&t, softplus(&t, x)); };
    CHECK(grad_check<double>(soft, rand_tensor(rng, {5}), 1e-5) < 1e-6);
}

TEST_CASE("broadcast rules: scalar and trailing vector only") {
    auto m = DT::from({2, 2}, {1, 2, 3, 4});
    auto s = DT::scalar(10.0);
    auto v = DT::from({2}, {1, -1});

    auto ms = add<double>(nullptr, m, s);
    CHECK(ms.data()[3] == 14);
    auto sm = add<double>(nullptr, s, m);
    CHECK(sm.data()[0] == 11);
    auto mv = add<double>(nullptr, m, v);
    CHECK(mv.data()[0] == 2);
    CHECK(mv.data()[1] == 1);
    CHECK(mv.data()[3] == 3);

    CHECK_THROWS_AS(add<double>(nullptr, m, DT::zeros({3})), ShapeError);
    CHECK_THROWS_AS(add<double>(nullptr, m, DT::zeros({2, 3})), ShapeError);
    CHECK_THROWS_AS(mul<double>(nullptr, DT::zeros({4}), DT::zeros({2, 2})), ShapeError);
}

TEST_CASE("concat/split round trip with gradients") {
    Rng rng(23);
    auto a = rand_tensor(rng, {3, 2});
    auto b = rand_tensor(rng, {3, 4});
    auto cat = concat_last<double>(nullptr, a, b);
    CHECK(cat.shape() == Shape{3, 6});
    auto parts = split_last<double>(nullptr, cat, {2, 4});
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(parts[0].data()[i] == a.data()[i]);
    for (std::size_t i = 0; i < b.size(); ++i) CHECK(parts[1].data()[i] == b.data()[i]);
}

TEST_CASE("reshape shares storage") {
    auto a = DT::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = a.reshape({3, 2});
    CHECK(b.data_id() == a.data_id());
    CHECK_THROWS_AS(a.reshape({4, 2}), ShapeError);
}

TEST_CASE("masked cross entropy values and masking contract") {
    const std::size_t v = 12;
    auto logits = DT::zeros({2, v});
    IntTensor targets({2}, {3, 0});
    auto loss = masked_cross_entropy<double>(nullptr, logits, targets);
    CHECK(loss.item() == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));

    auto peaked = DT::zeros({1, v});
    peaked.data()[5] = 30.0;
    auto l2 = masked_cross_entropy<double>(nullptr, peaked, IntTensor({1}, {5}));
    CHECK(l2.item() < 1e-9);

    // pad rows do not contribute at all
    auto base = DT::zeros({2, v});
    auto l3 = masked_cross_entropy<double>(nullptr, base, targets);
    base.data()[v + 7] = 123.0;  // row 1 is padding
    auto l4 = masked_cross_entropy<double>(nullptr, base, targets);
    CHECK(l3.item() == l4.item());

    CHECK_THROWS_AS(masked_cross_entropy<double>(nullptr, logits, IntTensor({2}, {0, 0})), ContractError);
}

TEST_CASE("dropout") {
    Rng rng(31);
    auto x = DT::full({1000}, 1.0);
    auto same = dropout<double>(nullptr, x, 0.0, rng, true);
    CHECK(same.data_id() == x.data_id());

    auto y = dropout<double>(nullptr, x, 0.25, rng, true);
    std::size_t zeros = 0;
    for (double vv : y.data()) {
        if (vv == 0.0)
            ++zeros;
        else
            CHECK(vv == doctest::Approx(1.0 / 0.75));
    }
    CHECK(zeros > 180);
    CHECK(zeros < 320);
    CHECK_THROWS_AS(dropout<double>(nullptr, x, 1.0, rng, true), ConfigError);
}

TEST_CASE("forward determinism: same seed, bit-identical stream") {
    Rng a(99), b(99);
    auto ta = gaussian<double>(a, {256}, 1.0);
    auto tb = gaussian<double>(b, {256}, 1.0);
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta.data()[i] == tb.data()[i]);

    auto pa = a.permutation(100);
    auto pb = b.permutation(100);
    CHECK(pa == pb);
}

// ---------------------------------------------------------------------------
// Per-operation finite-difference suite: every differentiable op, 10
// random 64-bit points, relative error < 1e-4.

namespace {

double op_suite_worst(std::uint64_t seed, const std::function<DT(Tape<double>&, std::vector<DT>&)>& apply,
                      std::vector<Shape> input_shapes) {
    double worst = 0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng(seed + static_cast<std::uint64_t>(trial));
        std::vector<DT> inputs;
        for (const auto& s : input_shapes) inputs.push_back(gaussian<double>(rng, Shape(s), 1.0));
        std::vector<DT*> refs;
        for (auto& t : inputs) refs.push_back(&t);
        auto loss = [&](Tape<double>& t) { return apply(t, inputs); };
        worst = std::max(worst, check_params(loss, refs));
    }
    return worst;
}

// weights the output with a fixed random functional so element mixing
// cannot cancel
DT weighted_sum(Tape<double>& t, const DT& out, std::uint64_t seed) {
    Rng rng(seed);
    auto w = gaussian<double>(rng, Shape(out.shape()), 1.0);
    return sum(&t, mul(&t, out, w));
}

}  // namespace

TEST_CASE("per-op gradient suite (rel err < 1e-4 at 10 random points)") {
    const double tol = 1e-4;

    CHECK(op_suite_worst(1, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, add(&t, in[0], in[1]), 101);
          }, {{3, 4}, {3, 4}}) < tol);
    CHECK(op_suite_worst(2, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, sub(&t, in[0], in[1]), 102);
          }, {{3, 4}, {3, 4}}) < tol);
    CHECK(op_suite_worst(3, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, mul(&t, in[0], in[1]), 103);
          }, {{3, 4}, {3, 4}}) < tol);
    CHECK(op_suite_worst(4, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, add(&t, in[0], in[1]), 104);  // vector broadcast
          }, {{3, 4}, {4}}) < tol);
    CHECK(op_suite_worst(5, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, mul(&t, in[0], in[1]), 105);  // scalar broadcast
          }, {{3, 4}, {1}}) < tol);
    CHECK(op_suite_worst(6, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, neg(&t, in[0]), 106);
          }, {{7}}) < tol);
    CHECK(op_suite_worst(7, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, hmr::exp(&t, in[0]), 107);
          }, {{7}}) < tol);
    CHECK(op_suite_worst(8, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, sigmoid(&t, in[0]), 108);
          }, {{7}}) < tol);
    CHECK(op_suite_worst(9, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, softplus(&t, in[0]), 109);
          }, {{7}}) < tol);
    CHECK(op_suite_worst(10, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, silu(&t, in[0]), 110);
          }, {{7}}) < tol);
    CHECK(op_suite_worst(11, [](Tape<double>& t, std::vector<DT>& in) {
              return sum(&t, in[0]);
          }, {{5, 3}}) < tol);
    CHECK(op_suite_worst(12, [](Tape<double>& t, std::vector<DT>& in) {
              return mean(&t, in[0]);
          }, {{5, 3}}) < tol);
    CHECK(op_suite_worst(13, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, matmul(&t, in[0], in[1]), 113);
          }, {{3, 4}, {4, 5}}) < tol);
    CHECK(op_suite_worst(14, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, matmul_nt(&t, in[0], in[1]), 114);
          }, {{3, 4}, {5, 4}}) < tol);
    CHECK(op_suite_worst(15, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, concat_last(&t, in[0], in[1]), 115);
          }, {{2, 3}, {2, 2}}) < tol);
    CHECK(op_suite_worst(16, [](Tape<double>& t, std::vector<DT>& in) {
              auto parts = split_last(&t, in[0], {2, 3});
              return add(&t, weighted_sum(t, parts[0], 116), weighted_sum(t, parts[1], 117));
          }, {{4, 5}}) < tol);
    CHECK(op_suite_worst(17, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, layer_norm(&t, in[0], in[1], in[2], 1e-5), 118);
          }, {{4, 6}, {6}, {6}}) < tol);
    CHECK(op_suite_worst(18, [](Tape<double>& t, std::vector<DT>& in) {
              IntTensor idx({5}, {0, 2, 1, 2, 3});
              return weighted_sum(t, embedding_lookup(&t, in[0], idx), 119);
          }, {{4, 3}}) < tol);
    CHECK(op_suite_worst(19, [](Tape<double>& t, std::vector<DT>& in) {
              return weighted_sum(t, causal_depthwise_conv1d(&t, in[0], in[1], in[2]), 120);
          }, {{6, 3}, {4, 3}, {3}}) < tol);
    CHECK(op_suite_worst(20, [](Tape<double>& t, std::vector<DT>& in) {
              // A must stay positive: exp() the raw input inside
              auto a_pos = hmr::exp(&t, in[4]);
              auto delta = softplus(&t, in[1]);
              return weighted_sum(t, selective_scan(&t, in[0], delta, in[2], in[3], a_pos, in[5]), 121);
          }, {{5, 3}, {5, 3}, {5, 2}, {5, 2}, {3, 2}, {3}}) < tol);
    CHECK(op_suite_worst(21, [](Tape<double>& t, std::vector<DT>& in) {
              IntTensor targets({4}, {1, 0, 3, 2});
              return masked_cross_entropy(&t, in[0], targets);
          }, {{4, 5}}) < tol);
}
