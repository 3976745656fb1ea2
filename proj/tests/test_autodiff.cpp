#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "prm/autodiff.hpp"
#include "prm/errors.hpp"
#include "prm/rng.hpp"
#include "support/gradcheck.hpp"

using namespace prm;
using prm::testing::check_gradients;
using prm::testing::relative_error;

namespace {

Tensor2 random_tensor(int rows, int cols, Rng& rng, double scale = 1.0) {
    Tensor2 t(rows, cols);
    for (double& v : t.data) {
        v = rng.normal() * scale;
    }
    return t;
}

// Finite-difference check of d(sum(weights .* f(x))) / dx for a unary op.
// The random weighting makes the upstream gradient generic.
template <typename BuildOp>
double fd_check_unary(int rows, int cols, std::uint64_t seed, BuildOp&& build,
                      double floor = 1e-4) {
    Rng rng(seed);
    Tensor2 x = random_tensor(rows, cols, rng);

    // probe the output shape so the weighting tensor matches it
    Tensor2 w;
    {
        Tape probe;
        Node* out = build(probe, probe.constant(x));
        w = random_tensor(out->value.rows, out->value.cols, rng);
    }
    std::vector<ParamRef> refs{{"x", &x}};

    auto loss_value = [&]() {
        Tape tape;
        Node* out = build(tape, tape.param(x));
        return tape.sum(tape.mul(out, tape.constant(w)))->value.at(0, 0);
    };

    Tape tape;
    Node* xn = tape.param(x);
    Node* loss = tape.sum(tape.mul(build(tape, xn), tape.constant(w)));
    tape.backward(loss);
    const auto report = check_gradients(refs, {xn->grad}, loss_value, 1e-6, floor);
    INFO(report.describe());
    return report.max_rel_err;
}

}  // namespace

TEST_CASE("matmul forward identity and hand arithmetic") {
    Tape tape;
    Node* identity = tape.constant(Tensor2::identity(2));
    Node* m = tape.constant(Tensor2::from_rows({{3.0, -1.5}, {2.0, 7.0}}));
    Node* out = tape.matmul(identity, m);
    for (int i = 0; i < 4; ++i) {
        CHECK(out->value.data[i] == m->value.data[i]);
    }

    Node* a = tape.constant(Tensor2::from_rows({{1.0, 2.0}, {3.0, 4.0}}));
    Node* b = tape.constant(Tensor2::from_rows({{1.0}, {1.0}}));
    Node* prod = tape.matmul(a, b);
    CHECK(prod->value.at(0, 0) == 3.0);
    CHECK(prod->value.at(1, 0) == 7.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tape tape;
    Node* a = tape.constant(Tensor2::zeros(2, 3));
    Node* b = tape.constant(Tensor2::zeros(2, 3));
    try {
        tape.matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string what = e.what();
        CHECK(what.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences on 3x4 * 4x2") {
    Rng rng(11);
    Tensor2 a = random_tensor(3, 4, rng);
    Tensor2 b = random_tensor(4, 2, rng);
    std::vector<ParamRef> refs{{"a", &a}, {"b", &b}};

    auto loss_value = [&]() {
        Tape tape;
        return tape.sum(tape.matmul(tape.param(a), tape.param(b)))->value.at(0, 0);
    };

    Tape tape;
    Node* an = tape.param(a);
    Node* bn = tape.param(b);
    tape.backward(tape.sum(tape.matmul(an, bn)));
    const auto report = check_gradients(refs, {an->grad, bn->grad}, loss_value, 1e-6, 1e-4);
    INFO(report.describe());
    CHECK(report.max_rel_err <= 1e-6);
}

TEST_CASE("softmax_rows basics") {
    Tape tape;
    Node* equal = tape.constant(Tensor2::full(1, 4, 2.5));
    Node* out = tape.softmax_rows(equal);
    for (int j = 0; j < 4; ++j) {
        CHECK(out->value.at(0, j) == doctest::Approx(0.25).epsilon(1e-12));
    }

    EntryMask mask{0, 1, 0};
    Node* x = tape.constant(Tensor2::from_rows({{5.0, -2.0, 1.0}}));
    Node* masked = tape.softmax_rows(x, &mask);
    CHECK(masked->value.at(0, 0) == 0.0);
    CHECK(masked->value.at(0, 1) == 1.0);
    CHECK(masked->value.at(0, 2) == 0.0);

    EntryMask all_masked{0, 0, 0};
    CHECK_THROWS_AS(tape.softmax_rows(x, &all_masked), MaskError);
}

TEST_CASE("softmax_rows rows sum to one and respond monotonically") {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor2 x = random_tensor(3, 6, rng, 2.0);
        Tape tape;
        Node* out = tape.softmax_rows(tape.constant(x));
        for (int i = 0; i < 3; ++i) {
            double row_sum = 0.0;
            for (int j = 0; j < 6; ++j) {
                row_sum += out->value.at(i, j);
            }
            CHECK(std::fabs(row_sum - 1.0) <= 1e-12);
        }
        // bumping one logit strictly raises its probability
        const int i = rng.uniform_int(0, 2);
        const int j = rng.uniform_int(0, 5);
        Tensor2 bumped = x;
        bumped.at(i, j) += 0.1;
        Tape tape2;
        Node* out2 = tape2.softmax_rows(tape2.constant(bumped));
        CHECK(out2->value.at(i, j) > out->value.at(i, j));
    }
}

TEST_CASE("softmax_rows gradient matches finite differences within 1e-5") {
    const double err = fd_check_unary(2, 5, 17, [](Tape& tape, Node* x) {
        return tape.softmax_rows(x);
    });
    CHECK(err <= 1e-5);
}

TEST_CASE("masked softmax gradient matches finite differences") {
    Rng rng(29);
    Tensor2 x = random_tensor(3, 4, rng);
    Tensor2 w = random_tensor(3, 4, rng);
    EntryMask mask(12, 1);
    mask[1] = 0;
    mask[7] = 0;
    mask[10] = 0;
    std::vector<ParamRef> refs{{"x", &x}};

    auto loss_value = [&]() {
        Tape tape;
        Node* out = tape.softmax_rows(tape.param(x), &mask);
        return tape.sum(tape.mul(out, tape.constant(w)))->value.at(0, 0);
    };
    Tape tape;
    Node* xn = tape.param(x);
    tape.backward(tape.sum(tape.mul(tape.softmax_rows(xn, &mask), tape.constant(w))));
    const auto report = check_gradients(refs, {xn->grad}, loss_value);
    INFO(report.describe());
    CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("layer_norm postconditions") {
    Tape tape;
    Node* gain = tape.constant(Tensor2::full(1, 4, 1.0));
    Node* bias = tape.constant(Tensor2::zeros(1, 4));

    // constant row collapses to zeros under the epsilon guard
    Node* flat = tape.constant(Tensor2::full(1, 4, 3.25));
    Node* flat_out = tape.layer_norm(flat, gain, bias, 1e-6);
    for (int j = 0; j < 4; ++j) {
        CHECK(std::fabs(flat_out->value.at(0, j)) <= 1e-9);
    }

    Node* pm = tape.constant(Tensor2::from_rows({{1.0, -1.0}}));
    Node* gain2 = tape.constant(Tensor2::full(1, 2, 1.0));
    Node* bias2 = tape.constant(Tensor2::zeros(1, 2));
    Node* pm_out = tape.layer_norm(pm, gain2, bias2, 1e-6);
    CHECK(pm_out->value.at(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(pm_out->value.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layer_norm rows have zero mean unit variance before gain") {
    Rng rng(5);
    Tensor2 x = random_tensor(4, 8, rng, 3.0);
    Tape tape;
    Node* out = tape.layer_norm(tape.constant(x), tape.constant(Tensor2::full(1, 8, 1.0)),
                                tape.constant(Tensor2::zeros(1, 8)), 1e-6);
    for (int i = 0; i < 4; ++i) {
        double mean = 0.0;
        double var = 0.0;
        for (int j = 0; j < 8; ++j) {
            mean += out->value.at(i, j);
        }
        mean /= 8;
        for (int j = 0; j < 8; ++j) {
            const double d = out->value.at(i, j) - mean;
            var += d * d;
        }
        var /= 8;
        CHECK(std::fabs(mean) <= 1e-12);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("layer_norm gradient matches finite differences within 1e-4") {
    Rng rng(31);
    Tensor2 x = random_tensor(3, 5, rng);
    Tensor2 gain = random_tensor(1, 5, rng);
    Tensor2 bias = random_tensor(1, 5, rng);
    Tensor2 w = random_tensor(3, 5, rng);
    std::vector<ParamRef> refs{{"x", &x}, {"gain", &gain}, {"bias", &bias}};

    auto loss_value = [&]() {
        Tape tape;
        Node* out = tape.layer_norm(tape.param(x), tape.param(gain), tape.param(bias), 1e-6);
        return tape.sum(tape.mul(out, tape.constant(w)))->value.at(0, 0);
    };
    Tape tape;
    Node* xn = tape.param(x);
    Node* gn = tape.param(gain);
    Node* bn = tape.param(bias);
    tape.backward(
        tape.sum(tape.mul(tape.layer_norm(xn, gn, bn, 1e-6), tape.constant(w))));
    const auto report = check_gradients(refs, {xn->grad, gn->grad, bn->grad}, loss_value);
    INFO(report.describe());
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("elementwise basics") {
    Tape tape;
    Node* zero = tape.constant(Tensor2::zeros(1, 1));
    CHECK(tape.sigmoid(zero)->value.at(0, 0) == 0.5);

    // eval-mode dropout is the identity
    Node* x = tape.constant(Tensor2::full(2, 3, 1.5));
    Node* dropped = tape.dropout(x, 0.1, false, DropoutKey{});
    CHECK(dropped == x);

    CHECK_THROWS_AS(tape.dropout(x, 1.0, true, DropoutKey{}), ConfigError);
    CHECK_THROWS_AS(tape.dropout(x, -0.1, true, DropoutKey{}), ConfigError);
}

TEST_CASE("dropout seeded statistics: p=0.5 on 1x1000 ones") {
    Tape tape;
    Node* ones = tape.constant(Tensor2::full(1, 1000, 1.0));
    Node* out = tape.dropout(ones, 0.5, true, DropoutKey{7, 0, 0});
    int survivors = 0;
    for (double v : out->value.data) {
        if (v != 0.0) {
            CHECK(v == 2.0);
            ++survivors;
        }
    }
    const double fraction = survivors / 1000.0;
    CHECK(fraction >= 0.45);
    CHECK(fraction <= 0.55);

    // same key reproduces the identical mask
    Tape tape2;
    Node* out2 = tape2.dropout(tape2.constant(Tensor2::full(1, 1000, 1.0)), 0.5, true,
                               DropoutKey{7, 0, 0});
    CHECK(out2->value.data == out->value.data);

    // different step changes it
    Tape tape3;
    Node* out3 = tape3.dropout(tape3.constant(Tensor2::full(1, 1000, 1.0)), 0.5, true,
                               DropoutKey{7, 0, 1});
    CHECK(out3->value.data != out->value.data);
}

TEST_CASE("backward on linear and quadratic losses") {
    // loss = sum(W) -> dW = ones
    Rng rng(23);
    Tensor2 w = random_tensor(2, 2, rng);
    {
        Tape tape;
        Node* wn = tape.param(w);
        tape.backward(tape.sum(wn));
        for (double g : wn->grad.data) {
            CHECK(g == 1.0);
        }
    }
    // loss = sum(W .* W) / 2 -> dW = W
    {
        Tape tape;
        Node* wn = tape.param(w);
        tape.backward(tape.scale(tape.sum(tape.mul(wn, wn)), 0.5));
        for (int i = 0; i < w.size(); ++i) {
            CHECK(wn->grad.data[i] == doctest::Approx(w.data[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("backward requires a scalar loss") {
    Tape tape;
    Node* x = tape.param(Tensor2::zeros(2, 2));
    CHECK_THROWS_AS(tape.backward(x), Error);
}

TEST_CASE("node consumed twice accumulates both contributions") {
    // loss = sum(A*A): dA = ones * A^T + A^T * ones
    Rng rng(41);
    Tensor2 a = random_tensor(3, 3, rng);
    Tape tape;
    Node* an = tape.param(a);
    tape.backward(tape.sum(tape.matmul(an, an)));

    Tensor2 ones = Tensor2::full(3, 3, 1.0);
    Tensor2 at = transpose_value(a);
    Tensor2 expected = matmul_value(ones, at);
    Tensor2 right = matmul_value(at, ones);
    for (int i = 0; i < expected.size(); ++i) {
        expected.data[i] += right.data[i];
    }
    for (int i = 0; i < 9; ++i) {
        CHECK(an->grad.data[i] == doctest::Approx(expected.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("repeated backward accumulates gradients") {
    Tape tape;
    Node* w = tape.param(Tensor2::full(2, 2, 1.0));
    Node* loss = tape.sum(w);
    tape.backward(loss);
    tape.backward(loss);
    for (double g : w->grad.data) {
        CHECK(g == 2.0);
    }
}

TEST_CASE("every differentiable op passes finite differences over 20 seeds") {
    // Spec floor: rel err <= 1e-4 on random tensors up to 8x8.
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng shape_rng(seed * 977);
        const int rows = shape_rng.uniform_int(1, 8);
        const int cols = shape_rng.uniform_int(2, 8);

        CHECK(fd_check_unary(rows, cols, seed, [](Tape& t, Node* x) {
                  return t.relu(x);
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 100, [](Tape& t, Node* x) {
                  return t.sigmoid(x);
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 200, [](Tape& t, Node* x) {
                  return t.affine(x, -1.7, 0.4);
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 300, [](Tape& t, Node* x) {
                  return t.softmax_rows(x);
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 400, [](Tape& t, Node* x) {
                  // keep log inputs positive: sigmoid then log
                  return t.log(t.clamp(t.sigmoid(x), 1e-12, 1.0 - 1e-12));
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 500, [](Tape& t, Node* x) {
                  return t.dropout(x, 0.3, true, DropoutKey{9, 1, 2});
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 600, [](Tape& t, Node* x) {
                  return t.transpose(x);
              }) <= 1e-4);
        CHECK(fd_check_unary(rows, cols, seed + 700, [](Tape& t, Node* x) {
                  return t.slice_rows(x, 0, x->value.rows);
              }) <= 1e-4);
    }
}

TEST_CASE("binary op gradients: add, mul, add_row, concat, gather") {
    Rng rng(59);
    Tensor2 a = random_tensor(4, 3, rng);
    Tensor2 b = random_tensor(4, 3, rng);
    Tensor2 row = random_tensor(1, 3, rng);
    std::vector<int> gather_ids{2, 0, 2, 3};

    std::vector<ParamRef> refs{{"a", &a}, {"b", &b}, {"row", &row}};

    // frozen weighting tensor keeps loss_value a pure function
    Rng w_rng(61);
    Tensor2 weight = random_tensor(3, 6, w_rng);
    auto loss_value = [&]() {
        Tape tape;
        Node* an = tape.param(a);
        Node* bn = tape.param(b);
        Node* rn = tape.param(row);
        Node* sum = tape.add(an, bn);
        Node* prod = tape.mul(sum, bn);
        Node* biased = tape.add_row(prod, rn);
        Node* parts[] = {biased, an};
        Node* cat = tape.concat_cols(parts);
        Node* gathered = tape.gather_rows(cat, gather_ids);
        Node* sliced = tape.slice_rows(gathered, 1, 3);
        return tape.sum(tape.mul(sliced, tape.constant(weight)))->value.at(0, 0);
    };

    Tape tape;
    Node* an = tape.param(a);
    Node* bn = tape.param(b);
    Node* rn = tape.param(row);
    Node* sum = tape.add(an, bn);
    Node* prod = tape.mul(sum, bn);
    Node* biased = tape.add_row(prod, rn);
    Node* parts[] = {biased, an};
    Node* cat = tape.concat_cols(parts);
    Node* gathered = tape.gather_rows(cat, gather_ids);
    Node* sliced = tape.slice_rows(gathered, 1, 3);
    tape.backward(tape.sum(tape.mul(sliced, tape.constant(weight))));

    const auto report =
        check_gradients(refs, {an->grad, bn->grad, rn->grad}, loss_value);
    INFO(report.describe());
    CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("listwise_nll value and gradient") {
    // two clicks: loss = -(log s0 + log s2)
    Tensor2 scores = Tensor2::from_rows({{0.5, 0.2, 0.3}});
    const std::vector<int> labels{1, 0, 1};
    const std::vector<std::uint8_t> mask{1, 1, 1};
    {
        Tape tape;
        Node* sn = tape.param(scores);
        Node* loss = tape.listwise_nll(sn, labels, mask);
        CHECK(loss->value.at(0, 0) ==
              doctest::Approx(-(std::log(0.5) + std::log(0.3))).epsilon(1e-12));
        tape.backward(loss);
        CHECK(sn->grad.at(0, 0) == doctest::Approx(-1.0 / 0.5).epsilon(1e-12));
        CHECK(sn->grad.at(0, 1) == 0.0);
        CHECK(sn->grad.at(0, 2) == doctest::Approx(-1.0 / 0.3).epsilon(1e-12));
    }
    // masked-out click contributes nothing
    {
        Tape tape;
        const std::vector<std::uint8_t> padded{1, 1, 0};
        Node* sn = tape.param(scores);
        Node* loss = tape.listwise_nll(sn, labels, padded);
        CHECK(loss->value.at(0, 0) == doctest::Approx(-std::log(0.5)).epsilon(1e-12));
    }
}

TEST_CASE("forward ops stay finite on finite inputs") {
    Rng rng(71);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor2 x = random_tensor(6, 6, rng, 50.0);  // deliberately large
        Tape tape;
        Node* xn = tape.constant(x);
        CHECK(tape.softmax_rows(xn)->value.all_finite());
        CHECK(tape.sigmoid(xn)->value.all_finite());
        CHECK(tape.relu(xn)->value.all_finite());
        CHECK(tape
                  .layer_norm(xn, tape.constant(Tensor2::full(1, 6, 1.0)),
                              tape.constant(Tensor2::zeros(1, 6)), 1e-6)
                  ->value.all_finite());
        CHECK(tape.matmul(xn, xn)->value.all_finite());
    }
}

TEST_CASE("gather_rows duplicates accumulate in backward") {
    Tensor2 table = Tensor2::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    Tape tape;
    Node* tn = tape.param(table);
    const std::vector<int> ids{0, 0, 1};
    Node* out = tape.gather_rows(tn, ids);
    tape.backward(tape.sum(out));
    CHECK(tn->grad.at(0, 0) == 2.0);
    CHECK(tn->grad.at(0, 1) == 2.0);
    CHECK(tn->grad.at(1, 0) == 1.0);
    CHECK(tn->grad.at(1, 1) == 1.0);
}
